//! Joint refinement of rotation, translation, scale and latent code.
//!
//! Every iteration first fixes the discrete structure of the loss at the
//! current estimate (band samples, visible discs, per-pixel contributors,
//! nearest-neighbour pairs) with plain floating point, then records the
//! loss over that structure on a fresh tape and takes one optimizer step.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::losses::{ColorIndex, LossValue, NocsMap};
use super::{build_tree, nearest, Tree3};
use crate::autodiff::{central_difference, max_relative_error, v3, GradCheck, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, to_rows, SimilarityTransform};
use crate::isosurface::{faces_camera, SurfaceExtractor};
use crate::renderer::{pixel_color_expr, rasterize, Camera, Disc, DiscExpr, RenderConfig};
use crate::shapespace::{project_latent, LatentCode};

/// Which parameters the optimizer may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variables {
    pub rotation: bool,
    pub translation: bool,
    pub scale: bool,
    pub shape: bool,
}

impl Default for Variables {
    fn default() -> Self {
        Self {
            rotation: true,
            translation: true,
            scale: true,
            shape: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSchedule {
    pub iterations: usize,
    /// Adam step size shared by rotation and translation.
    pub pose_lr: f64,
    /// Plain gradient descent step sizes.
    pub scale_lr: f64,
    pub shape_lr: f64,
    /// NOCS-space admission threshold of the 2D loss.
    pub nocs_threshold: f64,
    /// Meters; admission threshold of the 3D loss.
    pub lidar_threshold: f64,
    pub variables: Variables,
    pub use_2d: bool,
    pub use_3d: bool,
}

impl Default for OptimizerSchedule {
    fn default() -> Self {
        Self {
            iterations: 50,
            pose_lr: 0.03,
            scale_lr: 0.01,
            shape_lr: 0.0005,
            nocs_threshold: 0.2,
            lidar_threshold: 0.25,
            variables: Variables::default(),
            use_2d: true,
            use_3d: true,
        }
    }
}

impl OptimizerSchedule {
    pub fn validated(self) -> Result<Self> {
        if self.iterations == 0 {
            return Err(Error::usage("iteration count must be at least 1"));
        }
        if !(self.pose_lr > 0.0 && self.scale_lr > 0.0 && self.shape_lr > 0.0) {
            return Err(Error::usage("learning rates must be positive"));
        }
        Ok(self)
    }
}

/// Evidence and rendering setup for one instance.
pub struct RefineProblem<'a> {
    pub extractor: &'a SurfaceExtractor<'a>,
    /// Camera of the predicted NOCS patch.
    pub camera: Camera,
    pub predicted: &'a NocsMap,
    /// Frustum LIDAR points, camera frame.
    pub lidar: &'a [[f64; 3]],
    pub render: RenderConfig,
}

/// One pixel of the 2D loss: its contributing discs and matched target.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPair {
    pub pixel: usize,
    /// Positions in [`LossStructure::visible`].
    pub contributors: Vec<u32>,
    pub target: [f64; 3],
}

/// The discrete choices of the loss at one estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct LossStructure {
    /// Grid indices of the band samples that face the camera.
    pub visible: Vec<u32>,
    /// `(position in visible, LIDAR index)`.
    pub pairs_3d: Vec<(u32, u32)>,
    pub pixels: Vec<PixelPair>,
    pub loss_2d: LossValue,
    pub loss_3d: LossValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss_2d: f64,
    pub loss_3d: f64,
    pub pairs_2d: usize,
    pub pairs_3d: usize,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub pose: SimilarityTransform,
    pub latent: LatentCode,
    /// One row per iteration plus a final row at the returned estimate.
    pub trace: Vec<TraceRow>,
    /// Iteration at which the loss became non-finite, if it did.
    pub aborted: Option<usize>,
}

impl RefineResult {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.loss_2d + r.loss_3d)
    }
}

struct Adam {
    m: [f64; 6],
    v: [f64; 6],
    t: i32,
}

impl Adam {
    fn step(&mut self, grad: &[f64; 6], lr: f64) -> [f64; 6] {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        std::array::from_fn(|i| {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            -lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8)
        })
    }
}

/// Loss evaluation and optimization for one [`RefineProblem`].
pub struct Refiner<'a> {
    problem: RefineProblem<'a>,
    lidar_tree: Option<Tree3>,
    targets: Option<ColorIndex>,
}

/// Parameter values the loss is recorded at.
struct Params<S> {
    omega: [S; 3],
    t: [S; 3],
    s: S,
    z: [S; 3],
}

impl<'a> Refiner<'a> {
    pub fn new(problem: RefineProblem<'a>) -> Self {
        let lidar_tree = (!problem.lidar.is_empty()).then(|| build_tree(problem.lidar));
        let targets = problem.predicted.index();
        Self {
            problem,
            lidar_tree,
            targets,
        }
    }

    pub fn problem(&self) -> &RefineProblem<'a> {
        &self.problem
    }

    /// Fixes the discrete structure of the loss at `(pose, z)`.
    pub fn structure(
        &self,
        pose: &SimilarityTransform,
        z: [f64; 3],
        schedule: &OptimizerSchedule,
    ) -> Result<LossStructure> {
        let samples = self.problem.extractor.samples::<f64>(z, None)?;
        let mut visible = Vec::new();
        let mut discs = Vec::new();
        for s in &samples {
            let c = pose.apply(s.point);
            let n = pose.rotate(s.normal);
            if faces_camera(c, n) {
                visible.push(s.index);
                discs.push(Disc {
                    center: c,
                    normal: n,
                    color: s.color,
                });
            }
        }
        let mut pairs_3d = Vec::new();
        let mut sum_3d = 0.0;
        if let Some(tree) = &self.lidar_tree {
            for (i, d) in discs.iter().enumerate() {
                let (j, dist) = nearest(tree, &d.center);
                if dist < schedule.lidar_threshold {
                    pairs_3d.push((i as u32, j as u32));
                    sum_3d += dist;
                }
            }
        }
        let mut pixels = Vec::new();
        let mut sum_2d = 0.0;
        if let Some(targets) = &self.targets {
            let diameter = self.problem.extractor.grid().disc_diameter() * pose.scale;
            let out = rasterize(&discs, diameter, &self.problem.camera, &self.problem.render);
            for pixel in out.foreground_pixels() {
                let (target, dist) = targets.nearest(&out.nocs[pixel]);
                if dist < schedule.nocs_threshold {
                    sum_2d += dist;
                    pixels.push(PixelPair {
                        pixel,
                        contributors: out.contributions_at(pixel).iter().map(|c| c.disc).collect(),
                        target,
                    });
                }
            }
        }
        let mean = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { 0.0 };
        Ok(LossStructure {
            loss_2d: LossValue {
                value: mean(sum_2d, pixels.len()),
                count: pixels.len(),
            },
            loss_3d: LossValue {
                value: mean(sum_3d, pairs_3d.len()),
                count: pairs_3d.len(),
            },
            visible,
            pairs_3d,
            pixels,
        })
    }

    /// `(loss_2d, loss_3d)` over a fixed structure. `rotation` is the base
    /// rotation the increment `ω` is applied to: `R·(I + [ω]×)`.
    fn loss_expr<S: Scalar>(
        &self,
        structure: &LossStructure,
        rotation: &[[f64; 3]; 3],
        p: &Params<S>,
    ) -> Result<(S, S)> {
        let samples = self.problem.extractor.samples(p.z, Some(&structure.visible))?;
        let zero = p.s.lift(0.0);
        let cross = |w: &[S; 3], v: [S; 3]| -> [S; 3] {
            [
                w[1] * v[2] - w[2] * v[1],
                w[2] * v[0] - w[0] * v[2],
                w[0] * v[1] - w[1] * v[0],
            ]
        };
        let discs: Vec<DiscExpr<S>> = samples
            .iter()
            .map(|smp| {
                let q = v3::add(smp.point, cross(&p.omega, smp.point));
                let center = v3::add(v3::scale(v3::mat_f(rotation, q), p.s), p.t);
                let nq = v3::add(smp.normal, cross(&p.omega, smp.normal));
                DiscExpr {
                    center,
                    normal: v3::mat_f(rotation, nq),
                    color: smp.color,
                }
            })
            .collect();

        let l3 = if structure.pairs_3d.is_empty() {
            zero
        } else {
            let terms: Vec<S> = structure
                .pairs_3d
                .iter()
                .map(|&(i, j)| v3::norm(v3::sub_f(discs[i as usize].center, self.problem.lidar[j as usize])))
                .collect();
            S::sum(&terms) / terms.len() as f64
        };

        let l2 = if structure.pixels.is_empty() {
            zero
        } else {
            let diameter = p.s * self.problem.extractor.grid().disc_diameter();
            let mut terms = Vec::with_capacity(structure.pixels.len());
            for px in &structure.pixels {
                let ray = self.problem.camera.pixel_ray(px.pixel);
                let Some(color) = pixel_color_expr(&discs, &px.contributors, ray, diameter, &self.problem.render)
                else {
                    return Err(Error::Numeric(format!("pixel {} lost all contributors", px.pixel)));
                };
                terms.push(v3::norm(v3::sub_f(color, px.target)));
            }
            S::sum(&terms) / terms.len() as f64
        };
        Ok((l2, l3))
    }

    fn combine<S: Scalar>(schedule: &OptimizerSchedule, l2: S, l3: S) -> S {
        match (schedule.use_2d, schedule.use_3d) {
            (true, true) => l2 + l3,
            (true, false) => l2,
            (false, true) => l3,
            (false, false) => l2 * 0.0,
        }
    }

    /// Runs the schedule from `init`.
    pub fn run(
        &self,
        init: &SimilarityTransform,
        z0: &LatentCode,
        schedule: &OptimizerSchedule,
    ) -> Result<RefineResult> {
        let mut rotation = init.rotation_matrix();
        let mut t = init.translation;
        let mut s = init.scale;
        let mut z = z0.as_array();
        let mut adam = Adam {
            m: [0.0; 6],
            v: [0.0; 6],
            t: 0,
        };
        let mut trace = Vec::with_capacity(schedule.iterations + 1);
        let mut tape = Tape::new();
        let vars = schedule.variables;
        let pose_of = |r: &Matrix3<f64>, t: [f64; 3], s: f64| SimilarityTransform::new(*r, Vector3::from(t), s);

        for iteration in 0..schedule.iterations {
            let structure = self.structure(&pose_of(&rotation, t, s), z, schedule)?;
            let rows = to_rows(&rotation);
            tape.reset();
            let omega = tape.vars([0.0; 3]);
            let tv = tape.vars(t);
            let sv = tape.var(s);
            let zv = tape.vars(z);
            let params = Params {
                omega,
                t: tv,
                s: sv,
                z: zv,
            };
            let (l2, l3) = self.loss_expr(&structure, &rows, &params)?;
            trace.push(TraceRow {
                iteration,
                loss_2d: l2.value(),
                loss_3d: l3.value(),
                pairs_2d: structure.loss_2d.count,
                pairs_3d: structure.loss_3d.count,
            });
            let total: Var<'_> = Self::combine(schedule, l2, l3);
            if !total.value().is_finite() {
                return Ok(RefineResult {
                    pose: pose_of(&rotation, t, s),
                    latent: LatentCode::new(z).unwrap_or(*z0),
                    trace,
                    aborted: Some(iteration),
                });
            }
            let grads = tape.backward(total)?;
            let g_omega = grads.wrt(omega);
            let g_t = grads.wrt(tv);
            let g_s = grads.get(sv);
            let g_z = grads.wrt(zv);
            drop(grads);

            let mut g_pose = [0.0; 6];
            if vars.rotation {
                g_pose[..3].copy_from_slice(&g_omega);
            }
            if vars.translation {
                g_pose[3..].copy_from_slice(&g_t);
            }
            let step = adam.step(&g_pose, schedule.pose_lr);
            if vars.rotation {
                rotation *= exp_so3([step[0], step[1], step[2]]);
            }
            if vars.translation {
                for k in 0..3 {
                    t[k] += step[3 + k];
                }
            }
            if vars.scale {
                s = (s - schedule.scale_lr * g_s).max(1e-3);
            }
            if vars.shape {
                let raw: [f64; 3] = std::array::from_fn(|k| z[k] - schedule.shape_lr * g_z[k]);
                z = project_latent(raw)?.as_array();
            }
        }
        let final_pose = pose_of(&rotation, t, s);
        let structure = self.structure(&final_pose, z, schedule)?;
        trace.push(TraceRow {
            iteration: schedule.iterations,
            loss_2d: structure.loss_2d.value,
            loss_3d: structure.loss_3d.value,
            pairs_2d: structure.loss_2d.count,
            pairs_3d: structure.loss_3d.count,
        });
        Ok(RefineResult {
            pose: final_pose,
            latent: LatentCode::new(z)?,
            trace,
            aborted: None,
        })
    }

    /// Total loss at `(pose, z)` over its own structure.
    pub fn loss(
        &self,
        pose: &SimilarityTransform,
        z: [f64; 3],
        schedule: &OptimizerSchedule,
    ) -> Result<(LossValue, LossValue)> {
        let s = self.structure(pose, z, schedule)?;
        Ok((s.loss_2d, s.loss_3d))
    }

    /// Tape gradient of the total loss with respect to `(t, s, z)` against
    /// central differences over the structure frozen at `(pose, z)`.
    pub fn check_gradients(
        &self,
        pose: &SimilarityTransform,
        z: [f64; 3],
        schedule: &OptimizerSchedule,
        h: f64,
    ) -> Result<GradCheck> {
        let structure = self.structure(pose, z, schedule)?;
        let rows = pose.rotation;
        let x0: Vec<f64> = pose.translation.iter().copied().chain([pose.scale]).chain(z).collect();

        let tape = Tape::new();
        let xs: Vec<Var<'_>> = x0.iter().map(|v| tape.var(*v)).collect();
        let params = Params {
            omega: tape.vars([0.0; 3]),
            t: [xs[0], xs[1], xs[2]],
            s: xs[3],
            z: [xs[4], xs[5], xs[6]],
        };
        let (l2, l3) = self.loss_expr(&structure, &rows, &params)?;
        let total = Self::combine(schedule, l2, l3);
        if !total.value().is_finite() {
            return Err(Error::Numeric("non-finite loss at the check point".into()));
        }
        let analytic = tape.backward(total)?.wrt_slice(&xs);

        let f = |x: &[f64]| -> f64 {
            let params = Params {
                omega: [0.0; 3],
                t: [x[0], x[1], x[2]],
                s: x[3],
                z: [x[4], x[5], x[6]],
            };
            match self.loss_expr(&structure, &rows, &params) {
                Ok((l2, l3)) => Self::combine(schedule, l2, l3),
                Err(_) => f64::NAN,
            }
        };
        let numeric = central_difference(f, &x0, h)?;
        Ok(GradCheck {
            max_relative_error: max_relative_error(&analytic, &numeric),
            analytic,
            numeric,
        })
    }
}

/// Loss trace as CSV: iteration, loss_2d, loss_3d, pairs_2d, pairs_3d.
pub fn write_trace(out: impl std::io::Write, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Convenience wrapper around [`Refiner::run`].
pub fn refine(
    problem: RefineProblem<'_>,
    init: &SimilarityTransform,
    z0: &LatentCode,
    schedule: &OptimizerSchedule,
) -> Result<RefineResult> {
    Refiner::new(problem).run(init, z0, schedule)
}
