use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::css::PredictContext;
use super::scene::{InstanceId, LabelMask, SceneInstance};
use crate::error::{Error, Result};
use crate::geometry::{rotation_angle, yaw_rotation, SimilarityTransform};
use crate::isosurface::SurfaceExtractor;
use crate::metrics::Cuboid;
use crate::renderer::render;
use crate::shapespace::LatentCode;

pub const LABEL_POOL_SCHEMA: &str = "sdf-autolabel/label-pool/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    /// Half-width of the surface band (m).
    pub band: f64,
    pub min_band_fraction: f64,
    pub min_mask_iou: f64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            band: 0.2,
            min_band_fraction: 0.6,
            min_mask_iou: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub band_fraction: f64,
    pub mask_iou: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Geometric and projective checks of an estimate against the instance's
/// LIDAR and 2D label. Pixels owned by other labels of the frame are known
/// to show another object and are removed from the rendered mask.
pub fn verify(
    ctx: &PredictContext<'_>,
    pose: &SimilarityTransform,
    latent: &LatentCode,
    instance: &SceneInstance,
    other_labels: &[&LabelMask],
    config: &VerificationConfig,
) -> Result<Verification> {
    let space = ctx.extractor.space();
    let band_fraction = if instance.lidar.is_empty() {
        0.0
    } else {
        let inside = instance
            .lidar
            .iter()
            .filter(|l| (space.sdf(pose.inverse_apply(**l), latent) * pose.scale).abs() <= config.band)
            .count();
        inside as f64 / instance.lidar.len() as f64
    };

    let surface = ctx.extractor.project_surface(latent)?;
    let out = render(&surface, pose, &ctx.camera, &ctx.render)?;
    let (w, h) = (ctx.camera.width, ctx.camera.height);
    let label = instance.label.bitmap(w, h);
    let mut others = vec![false; w * h];
    for o in other_labels {
        for (px, b) in o.bitmap(w, h).into_iter().enumerate() {
            others[px] |= b;
        }
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for px in 0..w * h {
        let rendered = out.is_foreground(px) && !others[px];
        inter += (rendered && label[px]) as usize;
        union += (rendered || label[px]) as usize;
    }
    let mask_iou = if union > 0 { inter as f64 / union as f64 } else { 0.0 };

    let diagnostic = if instance.lidar.is_empty() {
        Some("no frustum LIDAR points".to_string())
    } else if band_fraction < config.min_band_fraction {
        Some(format!(
            "band fraction {band_fraction:.3} below {}",
            config.min_band_fraction
        ))
    } else if mask_iou < config.min_mask_iou {
        Some(format!("mask IoU {mask_iou:.3} below {}", config.min_mask_iou))
    } else {
        None
    };
    Ok(Verification {
        band_fraction,
        mask_iou,
        passed: diagnostic.is_none(),
        diagnostic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedCuboid {
    pub cuboid: Cuboid,
    /// Angle between the rotation and its nearest yaw-only rotation.
    pub yaw_projection_error: f64,
}

/// Tight model-frame box of the extracted 0-level set, scaled and posed.
pub fn derive_cuboid(
    extractor: &SurfaceExtractor<'_>,
    pose: &SimilarityTransform,
    latent: &LatentCode,
) -> Result<DerivedCuboid> {
    let surface = extractor.project_surface(latent)?;
    let (lo, hi) = surface.bounds().ok_or(Error::DegenerateShape)?;
    let center: [f64; 3] = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
    let yaw = pose.yaw();
    let err = rotation_angle(&(yaw_rotation(yaw).transpose() * pose.rotation_matrix()));
    let s = pose.scale;
    Ok(DerivedCuboid {
        cuboid: Cuboid::new(
            pose.apply(center),
            s * (hi[0] - lo[0]),
            s * (hi[2] - lo[2]),
            s * (hi[1] - lo[1]),
            yaw,
        )?,
        yaw_projection_error: err,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autolabel {
    pub instance: InstanceId,
    pub pose: SimilarityTransform,
    pub latent: LatentCode,
    pub cuboid: DerivedCuboid,
    pub verification: Verification,
    pub loop_index: usize,
    pub predictor: String,
}

/// Verified autolabels keyed by instance; a later loop's label replaces an
/// earlier one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelPool {
    labels: BTreeMap<InstanceId, Autolabel>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

impl LabelPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects labels that did not pass verification.
    pub fn insert(&mut self, label: Autolabel) -> Result<()> {
        if !label.verification.passed {
            return Err(Error::usage(format!(
                "autolabel {} failed verification",
                label.instance
            )));
        }
        self.labels.insert(label.instance, label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, id: InstanceId) -> Option<&Autolabel> {
        self.labels.get(&id)
    }

    /// Labels in instance order.
    pub fn iter(&self) -> impl Iterator<Item = &Autolabel> {
        self.labels.values()
    }

    /// Ids of labels whose stored scores violate the gates.
    pub fn audit(&self, config: &VerificationConfig) -> Vec<InstanceId> {
        self.iter()
            .filter(|l| {
                let v = &l.verification;
                !(v.passed && v.band_fraction >= config.min_band_fraction && v.mask_iou >= config.min_mask_iou)
            })
            .map(|l| l.instance)
            .collect()
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        serde_json::to_writer(
            &mut out,
            &Header {
                schema: LABEL_POOL_SCHEMA.to_string(),
            },
        )?;
        writeln!(out)?;
        for l in self.iter() {
            serde_json::to_writer(&mut out, l)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::data("label pool file is empty")),
        };
        if header.schema != LABEL_POOL_SCHEMA {
            return Err(Error::data(format!(
                "unsupported label pool schema '{}'",
                header.schema
            )));
        }
        let mut pool = Self::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let label: Autolabel = serde_json::from_str(&line)?;
            pool.insert(label).map_err(|e| Error::data(e.to_string()))?;
        }
        Ok(pool)
    }
}
