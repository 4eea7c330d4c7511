//! Latent SDF shape space `f(x; z) = s` with NOCS coloring.
//!
//! The default backend blends a fixed set of car-like basis SDFs with
//! weights `softmax(a·⟨z, cₖ⟩)` over unit anchor directions `cₖ`; a small
//! trained decoder can stand in for it.

mod decoder;
mod shape;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_values, v3, Scalar, Tape};
use crate::error::{Error, Result};

pub use decoder::{sample_training_set, train_decoder, DecoderTrainingConfig, SdfSample, TinyDecoder, TrainingReport};
pub use shape::{Axis, CarProfile, Shape};

pub const LATENT_DIM: usize = 3;
const UNIT_TOLERANCE: f64 = 1e-9;

/// A point on the unit sphere of shape space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct LatentCode([f64; 3]);

impl LatentCode {
    /// Accepts only unit-norm vectors.
    pub fn new(z: [f64; 3]) -> Result<Self> {
        let n = norm3(z);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::usage(format!("latent code must be unit length (got {n})")));
        }
        Ok(Self(z))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    /// Angle between two codes, in radians.
    pub fn angle_to(&self, other: &LatentCode) -> f64 {
        let d: f64 = self.0.iter().zip(other.0).map(|(a, b)| a * b).sum();
        d.clamp(-1.0, 1.0).acos()
    }

    /// Rotates this code by `angle` towards the tangent direction closest to
    /// `toward` (which must not be parallel to the code).
    pub fn perturbed(&self, toward: [f64; 3], angle: f64) -> Result<LatentCode> {
        let z = self.0;
        let d: f64 = z.iter().zip(toward).map(|(a, b)| a * b).sum();
        let tangent: [f64; 3] = std::array::from_fn(|i| toward[i] - d * z[i]);
        let tn = norm3(tangent);
        if tn < 1e-12 {
            return Err(Error::Numeric("perturbation direction parallel to the latent".into()));
        }
        let (s, c) = angle.sin_cos();
        project_latent(std::array::from_fn(|i| c * z[i] + s * tangent[i] / tn))
    }
}

impl TryFrom<[f64; 3]> for LatentCode {
    type Error = Error;
    fn try_from(z: [f64; 3]) -> Result<Self> {
        LatentCode::new(z)
    }
}

impl From<LatentCode> for [f64; 3] {
    fn from(z: LatentCode) -> Self {
        z.0
    }
}

/// Projects a vector onto the unit sphere.
pub fn project_latent(z: [f64; 3]) -> Result<LatentCode> {
    let n = norm3(z);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric("cannot project a zero latent onto the sphere".into()));
    }
    Ok(LatentCode(z.map(|c| c / n)))
}

/// NOCS color of a model-frame point: `p + ½`, clamped to the unit cube.
pub fn nocs_color(p: [f64; 3]) -> [f64; 3] {
    nocs_color_s(p)
}

pub fn nocs_color_s<S: Scalar>(p: [S; 3]) -> [S; 3] {
    p.map(|c| (c + 0.5).clamp_f(0.0, 1.0))
}

/// Inverse of [`nocs_color`] on the interior of the unit-diameter ball.
pub fn nocs_decode(color: [f64; 3]) -> [f64; 3] {
    color.map(|c| c - 0.5)
}

/// The shape is non-negative on a dense set of directions just outside
/// radius ½, i.e. its 0-level set stays inside the ball.
fn fits_unit_ball(shape: &Shape) -> bool {
    const N: usize = 4000;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..N).all(|i| {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / N as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64;
        let p = [r * phi.cos(), y, r * phi.sin()].map(|c| c * (0.5 + 1e-9));
        shape.eval(p) >= -1e-9
    })
}

fn norm3(z: [f64; 3]) -> f64 {
    (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt()
}

/// Basis shapes blended by anchor-direction softmax weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendSpace {
    pub shapes: Vec<Shape>,
    pub anchors: Vec<[f64; 3]>,
    pub sharpness: f64,
}

impl BlendSpace {
    pub fn new(shapes: Vec<Shape>, anchors: Vec<[f64; 3]>, sharpness: f64) -> Result<Self> {
        if shapes.is_empty() || shapes.len() != anchors.len() {
            return Err(Error::usage("need one anchor per basis shape"));
        }
        for a in &anchors {
            if (norm3(*a) - 1.0).abs() > 1e-9 {
                return Err(Error::usage("anchors must be unit vectors"));
            }
        }
        for s in &shapes {
            if !fits_unit_ball(s) {
                return Err(Error::usage("basis shape extends outside the unit-diameter ball"));
            }
        }
        Ok(Self {
            shapes,
            anchors,
            sharpness,
        })
    }

    pub fn weights<S: Scalar>(&self, z: [S; 3]) -> Vec<S> {
        if self.shapes.len() == 1 {
            return vec![z[0].lift(1.0)];
        }
        let logits: Vec<S> = self.anchors.iter().map(|c| v3::dot_f(z, *c) * self.sharpness).collect();
        // softmax with a constant shift for stability
        let shift = logits.iter().map(|l| l.value()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<S> = logits.iter().map(|l| (*l - shift).exp()).collect();
        let total = S::sum(&e);
        e.into_iter().map(|v| v / total).collect()
    }

    pub fn weight_values(&self, z: [f64; 3]) -> Vec<f64> {
        if self.shapes.len() == 1 {
            return vec![1.0];
        }
        let logits: Vec<f64> = self
            .anchors
            .iter()
            .map(|c| self.sharpness * (z[0] * c[0] + z[1] * c[1] + z[2] * c[2]))
            .collect();
        softmax_values(&logits)
    }
}

#[derive(Clone, Debug)]
pub enum Backend {
    AnalyticBlend(BlendSpace),
    TinyDecoder(TinyDecoder),
}

/// The latent shape space.
#[derive(Clone, Debug)]
pub struct ShapeSpace {
    backend: Backend,
}

pub const SHAPE_SPACE_SCHEMA: &str = "sdf-autolabel/shape-space/v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeSpaceFile {
    schema: String,
    #[serde(flatten)]
    blend: BlendSpace,
}

impl ShapeSpace {
    pub fn blend(space: BlendSpace) -> Self {
        Self {
            backend: Backend::AnalyticBlend(space),
        }
    }

    pub fn decoder(decoder: TinyDecoder) -> Self {
        Self {
            backend: Backend::TinyDecoder(decoder),
        }
    }

    /// Six car-like basis shapes on the ±x, ±y, ±z anchors, sharpness 8.
    pub fn default_cars() -> Self {
        let shapes = CarProfile::defaults()
            .iter()
            .map(|p| p.to_shape().normalized(0.98))
            .collect();
        let anchors = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ];
        Self::blend(BlendSpace::new(shapes, anchors, 8.0).expect("default basis is valid"))
    }

    /// A space with a single basis shape; `z` is ignored.
    pub fn single(shape: Shape) -> Self {
        Self::blend(BlendSpace::new(vec![shape], vec![[1.0, 0.0, 0.0]], 8.0).expect("single shape is valid"))
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn sdf(&self, x: [f64; 3], z: &LatentCode) -> f64 {
        self.eval(x, z.as_array())
    }

    /// [`ShapeSpace::sdf`] for a raw latent vector; rejects non-unit codes.
    pub fn sdf_checked(&self, x: [f64; 3], z: [f64; 3]) -> Result<f64> {
        let z = LatentCode::new(z)?;
        Ok(self.sdf(x, &z))
    }

    /// `f(x; z)` over any scalar type; `z` is not required to be unit here.
    pub fn eval<S: Scalar>(&self, x: [S; 3], z: [S; 3]) -> S {
        match &self.backend {
            Backend::AnalyticBlend(b) => {
                let w = b.weights(z);
                let f: Vec<S> = b.shapes.iter().map(|s| s.eval(x)).collect();
                let mut acc = w[0] * f[0];
                for k in 1..f.len() {
                    acc = acc + w[k] * f[k];
                }
                acc
            }
            Backend::TinyDecoder(d) => d.eval([x[0], x[1], x[2], z[0], z[1], z[2]]),
        }
    }

    /// Value and spatial gradient at a fixed point `x`, as expressions in `z`.
    ///
    /// For the blend this is `Σ wₖ(z)·(fₖ(x), ∇fₖ(x))` with the per-shape
    /// gradients taken from a backward pass; for the decoder the input
    /// Jacobian is expanded layer by layer.
    pub fn eval_with_gradient<S: Scalar>(&self, x: [f64; 3], z: [S; 3]) -> (S, [S; 3]) {
        match &self.backend {
            Backend::AnalyticBlend(b) => {
                let per_shape: Vec<(f64, [f64; 3])> = b.shapes.iter().map(|s| shape_value_and_gradient(s, x)).collect();
                blend_with_gradient(b, &per_shape, z)
            }
            Backend::TinyDecoder(d) => d.eval_with_input_gradient(x, z),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ShapeSpaceFile = serde_json::from_str(text)?;
        if file.schema != SHAPE_SPACE_SCHEMA {
            return Err(Error::data(format!("unsupported shape-space schema {}", file.schema)));
        }
        let b = file.blend;
        Ok(Self::blend(BlendSpace::new(b.shapes, b.anchors, b.sharpness)?))
    }

    /// Serializes the blend definition; decoder spaces are saved through
    /// [`TinyDecoder::save`].
    pub fn to_json(&self) -> Result<String> {
        match &self.backend {
            Backend::AnalyticBlend(b) => Ok(serde_json::to_string_pretty(&ShapeSpaceFile {
                schema: SHAPE_SPACE_SCHEMA.to_string(),
                blend: b.clone(),
            })?),
            Backend::TinyDecoder(_) => Err(Error::usage("decoder-backed spaces are stored as decoder weight files")),
        }
    }
}

/// SDF value and gradient of one primitive at `x`, via a backward pass.
pub fn shape_value_and_gradient(shape: &Shape, x: [f64; 3]) -> (f64, [f64; 3]) {
    let tape = Tape::new();
    let p = tape.vars(x);
    let f = shape.eval(p);
    let g = tape.backward(f).expect("root recorded on the local tape").wrt(p);
    (f.value(), g)
}

pub(crate) fn blend_with_gradient<S: Scalar>(b: &BlendSpace, per_shape: &[(f64, [f64; 3])], z: [S; 3]) -> (S, [S; 3]) {
    blend_per_shape(per_shape, &b.weights(z))
}

/// `Σ wₖ·(fₖ, ∇fₖ)` for precomputed per-shape values and gradients.
pub fn blend_per_shape<S: Scalar>(per_shape: &[(f64, [f64; 3])], w: &[S]) -> (S, [S; 3]) {
    let fs: Vec<f64> = per_shape.iter().map(|(f, _)| *f).collect();
    let value = S::linear(&fs, w, 0.0);
    let grad = std::array::from_fn(|i| {
        let gi: Vec<f64> = per_shape.iter().map(|(_, g)| g[i]).collect();
        S::linear(&gi, w, 0.0)
    });
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn two_spheres() -> ShapeSpace {
        ShapeSpace::blend(
            BlendSpace::new(
                vec![Shape::sphere(0.4), Shape::sphere(0.5)],
                vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                8.0,
            )
            .unwrap(),
        )
    }

    #[test]
    fn sphere_basis_values() {
        let space = ShapeSpace::single(Shape::sphere(0.5));
        let z = LatentCode::new([1.0, 0.0, 0.0]).unwrap();
        assert_eq!(space.sdf([0.0, 0.0, 0.0], &z), -0.5);
        assert_eq!(space.sdf([1.0, 0.0, 0.0], &z), 0.5);
    }

    #[test]
    fn latent_midpoint_blend() {
        // Equal anchor alignment gives equal weights: ½(0.6) + ½(0.5).
        let space = two_spheres();
        let z = project_latent([1.0, 1.0, 0.0]).unwrap();
        let s = space.sdf([1.0, 0.0, 0.0], &z);
        assert!((s - 0.55).abs() < 1e-12, "{s}");
    }

    #[test]
    fn non_unit_latent_rejected() {
        let space = two_spheres();
        assert!(matches!(
            space.sdf_checked([0.0; 3], [2.0, 0.0, 0.0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn nocs_examples() {
        assert_eq!(nocs_color([0.0, 0.0, 0.0]), [0.5, 0.5, 0.5]);
        assert_eq!(nocs_color([0.5, 0.0, 0.0]), [1.0, 0.5, 0.5]);
        let c = nocs_color([-0.25, 0.1, 0.0]);
        for (a, b) in c.iter().zip([0.25, 0.6, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(nocs_color([0.9, -0.7, 0.0]), [1.0, 0.0, 0.5]);
    }

    #[test]
    fn project_latent_examples() {
        assert_eq!(project_latent([2.0, 0.0, 0.0]).unwrap().as_array(), [1.0, 0.0, 0.0]);
        let z = project_latent([1.0, 1.0, 1.0]).unwrap().as_array();
        for c in z {
            assert!((c - 0.5774).abs() < 1e-4);
        }
        let u = project_latent([0.0, 0.6, 0.8]).unwrap();
        assert_eq!(project_latent(u.as_array()).unwrap(), u);
        assert!(matches!(project_latent([0.0; 3]), Err(Error::Numeric(_))));
    }

    #[test]
    fn perturbed_latent_has_requested_angle() {
        let z = project_latent([0.3, -0.2, 0.9]).unwrap();
        let eps = 15f64.to_radians();
        let p = z.perturbed([1.0, 0.0, 0.0], eps).unwrap();
        assert!((z.angle_to(&p) - eps).abs() < 1e-9);
    }

    #[test]
    fn gradient_expression_matches_backward_pass() {
        let space = ShapeSpace::default_cars();
        let x = [0.21, -0.05, 0.13];
        let z = project_latent([0.4, -0.7, 0.2]).unwrap().as_array();
        let (f, g) = space.eval_with_gradient(x, z);
        let tape = Tape::new();
        let xv = tape.vars(x);
        let fv = space.eval(xv, v3::lift(&xv[0], z));
        let gv = tape.backward(fv).unwrap().wrt(xv);
        assert!((f - fv.value()).abs() < 1e-14);
        for i in 0..3 {
            assert!((g[i] - gv[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_space_file_round_trip() {
        let space = ShapeSpace::default_cars();
        let text = space.to_json().unwrap();
        let back = ShapeSpace::from_json(&text).unwrap();
        let z = project_latent([0.1, 0.2, 0.3]).unwrap();
        let x = [0.1, 0.05, -0.2];
        assert_eq!(space.sdf(x, &z), back.sdf(x, &z));
        assert!(ShapeSpace::from_json(&text.replace("v1", "v0")).is_err());
    }

    #[test]
    fn latent_interpolation_is_continuous() {
        let space = ShapeSpace::default_cars();
        let z1 = project_latent([0.3, 0.5, -0.2]).unwrap();
        let x = [0.3, -0.1, 0.1];
        for k in 1..20 {
            let gap = 0.5f64.powi(k);
            let z2 = z1.perturbed([0.0, 0.0, 1.0], gap).unwrap();
            let d = (space.sdf(x, &z1) - space.sdf(x, &z2)).abs();
            assert!(d <= 20.0 * gap, "gap {gap}: {d}");
        }
    }

    #[test]
    fn nocs_inverse_on_interior() {
        for p in [[0.1, -0.2, 0.3], [-0.49, 0.0, 0.0], [0.2, 0.2, -0.2]] {
            let back = nocs_decode(nocs_color(p));
            for i in 0..3 {
                assert!((back[i] - p[i]).abs() < 1e-12);
            }
        }
    }
}
