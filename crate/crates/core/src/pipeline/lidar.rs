use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::shapespace::{LatentCode, ShapeSpace};

/// A spinning-LIDAR-like ray fan from the camera origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub azimuth_step_deg: f64,
    pub elevation_step_deg: f64,
    /// Lowest and highest elevation (degrees, positive is up).
    pub elevation_range_deg: [f64; 2],
    pub max_range: f64,
    /// Probability that a return is dropped.
    pub dropout: f64,
    /// Standard deviation of the range noise (m).
    pub range_noise: f64,
    pub max_steps: usize,
    /// Sphere tracing stops once the distance falls below this (m).
    pub tolerance: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            azimuth_step_deg: 0.2,
            elevation_step_deg: 0.4,
            elevation_range_deg: [-24.9, 2.0],
            max_range: 80.0,
            dropout: 0.0,
            range_noise: 0.0,
            max_steps: 64,
            tolerance: 1e-4,
        }
    }
}

impl LidarConfig {
    pub fn validated(&self) -> Result<()> {
        if !(self.azimuth_step_deg > 0.0 && self.elevation_step_deg > 0.0) {
            return Err(Error::usage("LIDAR angular steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(self.range_noise >= 0.0) {
            return Err(Error::usage("LIDAR dropout must be in [0, 1] and noise non-negative"));
        }
        if self.elevation_range_deg[0] > self.elevation_range_deg[1] {
            return Err(Error::usage("LIDAR elevation range is reversed"));
        }
        Ok(())
    }
}

/// Unit direction for azimuth (about the vertical axis, from +z towards
/// +x) and elevation (positive up, i.e. towards −y).
fn direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    [ce * sa, -se, ce * ca]
}

/// Entry and exit distances of a unit ray from the origin through a ball.
fn ball_interval(d: [f64; 3], center: [f64; 3], radius: f64) -> Option<(f64, f64)> {
    let b: f64 = (0..3).map(|i| d[i] * center[i]).sum();
    let c: f64 = center.iter().map(|v| v * v).sum::<f64>() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let r = disc.sqrt();
    (b + r > 0.0).then(|| ((b - r).max(0.0), b + r))
}

/// Sphere-traced distance along `d` to the surface of one posed shape.
fn trace_one(
    space: &ShapeSpace,
    pose: &SimilarityTransform,
    z: &LatentCode,
    d: [f64; 3],
    config: &LidarConfig,
) -> Option<f64> {
    // the model surface lies inside the ball of radius 0.5
    let radius = 0.5 * pose.scale + config.tolerance;
    let (mut t, exit) = ball_interval(d, pose.translation, radius)?;
    for _ in 0..config.max_steps {
        let x = [d[0] * t, d[1] * t, d[2] * t];
        let f = space.sdf(pose.inverse_apply(x), z) * pose.scale;
        if f.abs() < config.tolerance {
            return Some(t);
        }
        t += f;
        if t > exit || t < 0.0 {
            return None;
        }
    }
    None
}

/// Returns of the full ray fan against every posed instance, camera
/// frame. Only rays whose direction can reach an instance are traced.
pub fn trace_lidar(
    space: &ShapeSpace,
    instances: &[(SimilarityTransform, LatentCode)],
    config: &LidarConfig,
    seed: u64,
) -> Result<Vec<[f64; 3]>> {
    config.validated()?;
    let az_step = config.azimuth_step_deg.to_radians();
    let el_step = config.elevation_step_deg.to_radians();
    let el_lo = (config.elevation_range_deg[0].to_radians() / el_step).ceil() as i64;
    let el_hi = (config.elevation_range_deg[1].to_radians() / el_step).floor() as i64;
    let mut rays: Vec<(i64, i64)> = Vec::new();
    for (pose, _) in instances {
        let c = pose.translation;
        let radius = 0.5 * pose.scale;
        let dist = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        if dist <= radius {
            return Err(Error::usage("LIDAR origin lies inside an instance"));
        }
        let half = (radius / dist).asin();
        let az = c[0].atan2(c[2]);
        let horizontal = (c[0] * c[0] + c[2] * c[2]).sqrt();
        let el = (-c[1]).atan2(horizontal);
        let az_half = if horizontal > radius {
            (radius / horizontal).asin()
        } else {
            std::f64::consts::PI
        };
        let (a0, a1) = (
            ((az - az_half) / az_step).floor() as i64,
            ((az + az_half) / az_step).ceil() as i64,
        );
        let (e0, e1) = (
            (((el - half) / el_step).floor() as i64).max(el_lo),
            (((el + half) / el_step).ceil() as i64).min(el_hi),
        );
        for e in e0..=e1 {
            for a in a0..=a1 {
                rays.push((e, a));
            }
        }
    }
    rays.sort_unstable();
    rays.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (e, a) in rays {
        let d = direction(a as f64 * az_step, e as f64 * el_step);
        let hit = instances
            .iter()
            .filter_map(|(pose, z)| trace_one(space, pose, z, d, config))
            .fold(f64::INFINITY, f64::min);
        // draw noise for every ray so that dropout does not shift the stream
        let keep = rng.random::<f64>() >= config.dropout;
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * config.range_noise;
        if hit.is_finite() && hit <= config.max_range && keep {
            let t = hit + noise;
            out.push([d[0] * t, d[1] * t, d[2] * t]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapespace::Shape;

    fn sphere_scene() -> (ShapeSpace, Vec<(SimilarityTransform, LatentCode)>) {
        let space = ShapeSpace::single(Shape::sphere(0.4));
        let z = LatentCode::new([1.0, 0.0, 0.0]).unwrap();
        (
            space,
            vec![(SimilarityTransform::from_yaw(0.0, [0.5, 0.3, 10.0], 4.0), z)],
        )
    }

    #[test]
    fn sphere_returns_lie_on_the_sphere() {
        let (space, inst) = sphere_scene();
        let pts = trace_lidar(&space, &inst, &LidarConfig::default(), 1).unwrap();
        assert!(pts.len() > 100, "{}", pts.len());
        for p in &pts {
            let d = ((p[0] - 0.5).powi(2) + (p[1] - 0.3).powi(2) + (p[2] - 10.0).powi(2)).sqrt();
            assert!((d - 1.6).abs() < 1e-3, "{d}");
        }
    }

    #[test]
    fn ray_fan_has_the_configured_spacing() {
        let d0 = direction(0.0, 0.0);
        let d1 = direction(0.2f64.to_radians(), 0.0);
        let angle = (d0[0] * d1[0] + d0[1] * d1[1] + d0[2] * d1[2]).acos();
        assert!((angle.to_degrees() - 0.2).abs() < 1e-9);
        let up = direction(0.0, 0.1);
        assert!(up[1] < 0.0);
    }

    #[test]
    fn dropout_and_noise_are_seeded() {
        let (space, inst) = sphere_scene();
        let config = LidarConfig {
            dropout: 0.3,
            range_noise: 0.01,
            ..Default::default()
        };
        let a = trace_lidar(&space, &inst, &config, 5).unwrap();
        let b = trace_lidar(&space, &inst, &config, 5).unwrap();
        assert_eq!(a, b);
    }
}
