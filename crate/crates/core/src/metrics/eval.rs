use serde::Serialize;

use super::{average_precision_framed, Cuboid, Matcher};
use crate::error::Result;
use crate::isosurface::SurfaceExtractor;
use crate::pipeline::{derive_cuboid, Dataset, Difficulty, LabelPool};

/// Ground-truth cuboids (frame = scene index) of every instance at or
/// below `stage`.
pub fn ground_truth_cuboids(
    dataset: &Dataset,
    extractor: &SurfaceExtractor<'_>,
    stage: Difficulty,
) -> Result<Vec<(usize, Cuboid)>> {
    dataset
        .instances()
        .filter(|i| i.difficulty <= stage)
        .map(|i| {
            Ok((
                i.id.scene as usize,
                derive_cuboid(extractor, &i.pose, &i.latent)?.cuboid,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub metric: String,
    pub ap: f64,
    pub predictions: usize,
    pub ground_truth: usize,
    pub true_positives: usize,
}

/// AP of the pool's cuboids under each matcher, scored by band fraction.
pub fn evaluate_pool(pool: &LabelPool, ground_truth: &[(usize, Cuboid)], matchers: &[Matcher]) -> Vec<EvalRow> {
    let predictions: Vec<(usize, Cuboid, f64)> = pool
        .iter()
        .map(|l| (l.instance.scene as usize, l.cuboid.cuboid, l.verification.band_fraction))
        .collect();
    matchers
        .iter()
        .map(|&m| {
            let curve = average_precision_framed(&predictions, ground_truth, m);
            EvalRow {
                metric: m.label(),
                ap: curve.ap,
                predictions: predictions.len(),
                ground_truth: ground_truth.len(),
                true_positives: curve.true_positive.iter().filter(|t| **t).count(),
            }
        })
        .collect()
}
