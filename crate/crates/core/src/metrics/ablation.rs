use serde::{Deserialize, Serialize};

use super::{average_precision_framed, Cuboid, Matcher};
use crate::error::Result;
use crate::isosurface::{QueryGrid, SurfaceExtractor};
use crate::pipeline::{derive_cuboid, run_loop, AutolabelConfig, CssPredictor, Dataset, Difficulty};
use crate::shapespace::ShapeSpace;

/// Optimization variants compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationConfig {
    RansacOnly,
    Pose,
    PoseScale,
    PoseScaleShape,
    #[serde(rename = "2d-only")]
    Only2d,
    #[serde(rename = "3d-only")]
    Only3d,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 6] = [
        AblationConfig::RansacOnly,
        AblationConfig::Pose,
        AblationConfig::PoseScale,
        AblationConfig::PoseScaleShape,
        AblationConfig::Only2d,
        AblationConfig::Only3d,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationConfig::RansacOnly => "ransac-only",
            AblationConfig::Pose => "pose",
            AblationConfig::PoseScale => "pose+scale",
            AblationConfig::PoseScaleShape => "pose+scale+shape",
            AblationConfig::Only2d => "2d-only",
            AblationConfig::Only3d => "3d-only",
        }
    }

    /// `base` with this variant's variables and losses.
    pub fn apply(&self, base: &AutolabelConfig) -> AutolabelConfig {
        let mut c = base.clone();
        let v = &mut c.schedule.variables;
        match self {
            AblationConfig::RansacOnly => c.refine = false,
            AblationConfig::Pose => (v.scale, v.shape) = (false, false),
            AblationConfig::PoseScale => v.shape = false,
            AblationConfig::PoseScaleShape => {}
            AblationConfig::Only2d => (c.schedule.use_2d, c.schedule.use_3d) = (true, false),
            AblationConfig::Only3d => (c.schedule.use_2d, c.schedule.use_3d) = (false, true),
        }
        c
    }
}

/// AP at the four reported operating points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricSet {
    pub bev_05: f64,
    pub iou3d_05: f64,
    pub ns_05: f64,
    pub ns_10: f64,
}

impl MetricSet {
    /// Frame-indexed predictions and ground truth, as in
    /// [`average_precision_framed`](super::average_precision_framed).
    pub fn evaluate(predictions: &[(usize, Cuboid, f64)], ground_truth: &[(usize, Cuboid)]) -> Self {
        let ap = |m| average_precision_framed(predictions, ground_truth, m).ap;
        Self {
            bev_05: ap(Matcher::Bev(0.5)),
            iou3d_05: ap(Matcher::Iou3d(0.5)),
            ns_05: ap(Matcher::Ns(0.5)),
            ns_10: ap(Matcher::Ns(1.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub instances: usize,
    pub labeled: usize,
    pub verified: usize,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

/// Labels the same instances under each variant and scores every produced
/// estimate (verified or not) against ground truth, using the band
/// fraction as the detection score.
pub fn ablation_suite(
    dataset: &Dataset,
    space: &ShapeSpace,
    predictor: &dyn CssPredictor,
    stage: Difficulty,
    base: &AutolabelConfig,
    configs: &[AblationConfig],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let extractor = SurfaceExtractor::new(space, QueryGrid::with_resolution(base.grid_resolution)?, base.band);
    let mut rows = Vec::with_capacity(configs.len());
    for variant in configs {
        let config = variant.apply(base);
        let outcome = run_loop(dataset, space, predictor, stage, 0, &config, jobs)?;
        let mut truth = Vec::with_capacity(outcome.labels.len());
        for label in &outcome.labels {
            let inst = dataset
                .instances()
                .find(|i| i.id == label.id)
                .expect("labels come from the dataset");
            truth.push((
                inst.id.scene as usize,
                derive_cuboid(&extractor, &inst.pose, &inst.latent)?.cuboid,
            ));
        }
        let predictions: Vec<(usize, Cuboid, f64)> = outcome
            .labels
            .iter()
            .filter_map(|l| {
                let c = l.cuboid?;
                Some((
                    l.id.scene as usize,
                    c.cuboid,
                    l.verification.as_ref().map_or(0.0, |v| v.band_fraction),
                ))
            })
            .collect();
        rows.push(AblationRow {
            config: variant.name().to_string(),
            instances: outcome.labels.len(),
            labeled: predictions.len(),
            verified: outcome.accepted.len(),
            metrics: MetricSet::evaluate(&predictions, &truth),
        });
    }
    Ok(rows)
}
