//! Run configuration: one TOML document covering every stage. Missing
//! keys take their defaults, unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{OptimizerSchedule, RansacConfig};
use crate::error::{Error, Result};
use crate::isosurface::DEFAULT_BAND;
use crate::metrics::Matcher;
use crate::pipeline::{AutolabelConfig, CurriculumConfig, OracleConfig, SceneConfig, VerificationConfig};
use crate::renderer::RenderConfig;
use crate::shapespace::DecoderTrainingConfig;

/// Per-instance labeling parameters that are not part of another section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingConfig {
    pub refine: bool,
    pub correspondence_threshold: f64,
    pub patch_size: usize,
    pub grid_resolution: usize,
    pub band: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        let a = AutolabelConfig::default();
        Self {
            refine: a.refine,
            correspondence_threshold: a.correspondence_threshold,
            patch_size: a.patch_size,
            grid_resolution: a.grid_resolution,
            band: DEFAULT_BAND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub bev_threshold: f64,
    pub iou3d_threshold: f64,
    /// NS center-distance cutoffs (m).
    pub ns_cutoffs: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bev_threshold: 0.5,
            iou3d_threshold: 0.5,
            ns_cutoffs: vec![0.5, 1.0],
        }
    }
}

impl MetricsConfig {
    pub fn matchers(&self) -> Vec<Matcher> {
        let mut m = vec![Matcher::Bev(self.bev_threshold), Matcher::Iou3d(self.iou3d_threshold)];
        m.extend(self.ns_cutoffs.iter().map(|&c| Matcher::Ns(c)));
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub training: DecoderTrainingConfig,
    pub samples_per_shape: usize,
    pub held_out_per_shape: usize,
    /// Training fails if the held-out MAE ends above this.
    pub max_held_out_mae: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            training: DecoderTrainingConfig::default(),
            samples_per_shape: 5000,
            held_out_per_shape: 1000,
            max_held_out_mae: 0.02,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub optimizer: OptimizerSchedule,
    pub ransac: RansacConfig,
    pub labeling: LabelingConfig,
    pub curriculum: CurriculumConfig,
    pub verification: VerificationConfig,
    pub oracle: OracleConfig,
    pub metrics: MetricsConfig,
    pub decoder: DecoderConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validated()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::usage(e.to_string()))
    }

    pub fn validated(self) -> Result<Self> {
        let scene = self.scene.clone().validated()?;
        let render = self.render.clone().validated()?;
        let optimizer = self.optimizer.clone().validated()?;
        let curriculum = self.curriculum.clone().validated()?;
        if self.labeling.patch_size < 8 || self.labeling.grid_resolution < 4 {
            return Err(Error::usage(
                "patch size must be at least 8 and grid resolution at least 4",
            ));
        }
        if !(self.labeling.band > 0.0 && self.labeling.correspondence_threshold > 0.0) {
            return Err(Error::usage("band and correspondence threshold must be positive"));
        }
        Ok(Self {
            scene,
            render,
            optimizer,
            curriculum,
            ..self
        })
    }

    pub fn autolabel(&self) -> AutolabelConfig {
        AutolabelConfig {
            schedule: self.optimizer.clone(),
            refine: self.labeling.refine,
            ransac: self.ransac.clone(),
            correspondence_threshold: self.labeling.correspondence_threshold,
            verification: self.verification.clone(),
            curriculum: self.curriculum.clone(),
            render: self.render.clone(),
            patch_size: self.labeling.patch_size,
            grid_resolution: self.labeling.grid_resolution,
            band: self.labeling.band,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_constants() {
        let c = RunConfig::default();
        assert_eq!(c.labeling.band, 0.03);
        assert_eq!(c.verification.band, 0.2);
        assert_eq!(c.optimizer.lidar_threshold, 0.25);
        assert_eq!(c.verification.min_band_fraction, 0.6);
        assert_eq!(c.verification.min_mask_iou, 0.7);
        assert_eq!(c.curriculum.easy_min_height, 40.0);
        assert_eq!(c.curriculum.moderate_min_height, 25.0);
        assert_eq!(c.curriculum.moderate_max_iou, 0.30);
        assert_eq!(c.optimizer.iterations, 50);
        assert_eq!(
            (c.optimizer.pose_lr, c.optimizer.scale_lr, c.optimizer.shape_lr),
            (0.03, 0.01, 0.0005)
        );
        assert_eq!(c.ransac.inlier_threshold, 0.2);
        assert_eq!(c.decoder.training.clamp, 0.1);
    }

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert!(RunConfig::from_toml("[optimizer]\niterations = 10\n").is_ok());
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[optimizer]\nlr = 1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn autolabel_config_takes_every_section() {
        let c = RunConfig::from_toml("seed = 7\n[labeling]\npatch_size = 32\n[verification]\nmin_mask_iou = 0.5\n")
            .unwrap();
        let a = c.autolabel();
        assert_eq!((a.seed, a.patch_size, a.verification.min_mask_iou), (7, 32, 0.5));
    }
}
