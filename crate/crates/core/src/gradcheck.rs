//! Small fixed fixtures comparing tape gradients with central differences,
//! one per differentiable stage plus the composed refinement loss.

use serde::{Deserialize, Serialize};

use crate::alignment::{NocsMap, OptimizerSchedule, RefineProblem, Refiner};
use crate::autodiff::{grad_check, v3, GradCheck, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::isosurface::{QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use crate::renderer::{pixel_expr, rasterize, render, Camera, Disc, DiscExpr, RenderConfig};
use crate::shapespace::{LatentCode, ShapeSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckModule {
    Autodiff,
    Shapespace,
    Isosurface,
    Renderer,
    /// The composed refinement loss: latent, projection, transform,
    /// rendering and both loss terms.
    Alignment,
}

impl std::str::FromStr for CheckModule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autodiff" => Ok(Self::Autodiff),
            "shapespace" => Ok(Self::Shapespace),
            "isosurface" => Ok(Self::Isosurface),
            "renderer" => Ok(Self::Renderer),
            "alignment" | "pipeline" => Ok(Self::Alignment),
            _ => Err(Error::usage(format!("unknown gradcheck module '{s}'"))),
        }
    }
}

impl CheckModule {
    pub const ALL: [CheckModule; 5] = [
        Self::Autodiff,
        Self::Shapespace,
        Self::Isosurface,
        Self::Renderer,
        Self::Alignment,
    ];

    pub fn run(&self) -> Result<GradCheck> {
        match self {
            Self::Autodiff => check_autodiff(),
            Self::Shapespace => check_shapespace(),
            Self::Isosurface => check_isosurface(),
            Self::Renderer => check_renderer(),
            Self::Alignment => check_composed(32, 1e-5, &OptimizerSchedule::default()),
        }
    }
}

fn check_autodiff() -> Result<GradCheck> {
    grad_check(
        |_, x| {
            let a = (x[0] * x[1]).tanh() + (-(x[2] * x[2])).exp() * (x[0] * x[0] + 1.0).sqrt();
            let mix = Var::softmax_combine(&[x[0], x[1], x[2]], &[x[2], x[0], x[1]]);
            a + mix * x[1].abs() + x[2].max(x[0])
        },
        &[0.3, -0.7, 1.1],
        1e-6,
    )
}

fn check_shapespace() -> Result<GradCheck> {
    let space = ShapeSpace::default_cars();
    let z = [0.48, 0.6, 0.64];
    grad_check(
        |_, v| space.eval([v[0], v[1], v[2]], [v[3], v[4], v[5]]),
        &[0.21, -0.05, 0.12, z[0], z[1], z[2]],
        1e-6,
    )
}

fn check_isosurface() -> Result<GradCheck> {
    let space = ShapeSpace::default_cars();
    let grid = QueryGrid::with_resolution(16)?;
    let extractor = SurfaceExtractor::new(&space, grid, 0.06);
    let z0 = [0.0, 0.6, 0.8];
    let frozen: Vec<u32> = extractor.samples::<f64>(z0, None)?.iter().map(|s| s.index).collect();
    if frozen.is_empty() {
        return Err(Error::DegenerateShape);
    }
    grad_check(
        |_, v| {
            let samples = extractor
                .samples([v[0], v[1], v[2]], Some(&frozen))
                .expect("frozen indices are valid");
            let terms: Vec<Var<'_>> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let w = 1.0 + (i % 7) as f64 * 0.1;
                    (s.point[0] + s.point[1] * 0.5 - s.point[2]) * w + s.normal[1] * 0.3 + s.color[2]
                })
                .collect();
            Var::sum(&terms) / terms.len() as f64
        },
        &z0,
        1e-6,
    )
}

fn renderer_fixture() -> (Vec<Disc>, Camera) {
    let discs: Vec<Disc> = (0..6)
        .map(|i| {
            let a = i as f64 * 0.9;
            let n = v3::normalize([0.2 * a.sin(), -0.1 * a.cos(), -1.0]);
            Disc {
                center: [0.06 * a.cos(), 0.05 * a.sin(), 2.0 + 0.02 * i as f64],
                normal: n,
                color: [0.2 + 0.1 * i as f64, 0.8 - 0.1 * i as f64, 0.5],
            }
        })
        .collect();
    (discs, Camera::square(60.0, 32))
}

fn check_renderer() -> Result<GradCheck> {
    let (discs, camera) = renderer_fixture();
    let diameter = 0.12;
    let config = RenderConfig::default();
    let out = rasterize(&discs, diameter, &camera, &config);
    let pixels = out.foreground_pixels();
    if pixels.is_empty() {
        return Err(Error::Numeric("renderer fixture covers no pixel".into()));
    }
    let contributors: Vec<Vec<u32>> = pixels
        .iter()
        .map(|&p| out.contributions_at(p).iter().map(|c| c.disc).collect())
        .collect();
    let x0: Vec<f64> = discs
        .iter()
        .flat_map(|d| d.center.into_iter().chain(d.normal))
        .collect();
    grad_check(
        |_, v| {
            let exprs: Vec<DiscExpr<Var<'_>>> = discs
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let c = &v[6 * i..6 * i + 6];
                    DiscExpr {
                        center: [c[0], c[1], c[2]],
                        normal: [c[3], c[4], c[5]],
                        color: d.color.map(|k| c[0].lift(k)),
                    }
                })
                .collect();
            let mut terms = Vec::new();
            for (k, &p) in pixels.iter().enumerate() {
                let ray = camera.pixel_ray(p);
                let d = exprs[0].center[0].lift(diameter);
                if let Some((color, depth)) = pixel_expr(&exprs, &contributors[k], ray, d, &config) {
                    terms.push(color[0] + color[1] * 0.5 + color[2] * 0.25 + depth * 0.1);
                }
            }
            Var::sum(&terms) / terms.len() as f64
        },
        &x0,
        1e-6,
    )
}

/// Gradient check of the refinement loss (terms per `schedule`) on a
/// `size × size` patch with difference step `h`: the truth is rendered as
/// the prediction, LIDAR is a subset of its surface, and the check runs at
/// a perturbed estimate.
pub fn check_composed(size: usize, h: f64, schedule: &OptimizerSchedule) -> Result<GradCheck> {
    let space = ShapeSpace::default_cars();
    let extractor = SurfaceExtractor::new(&space, QueryGrid::default(), DEFAULT_BAND);
    let truth_z = LatentCode::new([0.0, 0.6, 0.8])?;
    let truth = SimilarityTransform::from_yaw(0.5, [0.2, 0.4, 9.0], 4.6);
    let camera = Camera::square(size as f64 * 1.4, size);
    let render_config = RenderConfig::default();
    let surface = extractor.project_surface(&truth_z)?;
    let predicted = NocsMap::from_render(&render(&surface, &truth, &camera, &render_config)?);
    let lidar: Vec<[f64; 3]> = surface
        .points
        .iter()
        .step_by(17)
        .map(|p| truth.apply(*p))
        .filter(|p| p[2] < truth.translation[2])
        .collect();
    let refiner = Refiner::new(RefineProblem {
        extractor: &extractor,
        camera,
        predicted: &predicted,
        lidar: &lidar,
        render: render_config,
    });
    let estimate = SimilarityTransform::from_yaw(0.55, [0.25, 0.38, 9.1], 4.5);
    let z = LatentCode::new(truth_z.as_array())?
        .perturbed([1.0, 0.0, 0.0], 5f64.to_radians())?
        .as_array();
    refiner.check_gradients(&estimate, z, schedule, h)
}

/// Runs a closure-built loss on a fresh tape; exposed for examples.
pub fn tape_gradient(x: &[f64], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = x.iter().map(|v| tape.var(*v)).collect();
    let root = f(&tape, &vars);
    let g = tape.backward(root)?;
    Ok((root.value(), g.wrt_slice(&vars)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_fixtures_pass() {
        for m in [
            CheckModule::Autodiff,
            CheckModule::Shapespace,
            CheckModule::Isosurface,
            CheckModule::Renderer,
        ] {
            let c = m.run().unwrap();
            assert!(c.max_relative_error < 1e-5, "{m:?}: {}", c.max_relative_error);
        }
    }
}
