use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::css::{CssPredictor, PredictContext};
use super::curriculum::{classify_difficulty, CurriculumConfig, Difficulty};
use super::derive_seed;
use super::label::{derive_cuboid, verify, Autolabel, DerivedCuboid, LabelPool, Verification, VerificationConfig};
use super::scene::{Dataset, InstanceId, LabelMask, SceneInstance};
use crate::alignment::{
    nocs_correspondences, ransac_procrustes, OptimizerSchedule, RansacConfig, RefineProblem, Refiner,
};
use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::isosurface::{QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use crate::renderer::RenderConfig;
use crate::shapespace::{LatentCode, ShapeSpace};

/// Everything that controls labeling one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutolabelConfig {
    pub schedule: OptimizerSchedule,
    /// Run the differentiable refinement after initialization.
    pub refine: bool,
    pub ransac: RansacConfig,
    /// NOCS distance below which mutual nearest neighbours correspond.
    pub correspondence_threshold: f64,
    pub verification: VerificationConfig,
    pub curriculum: CurriculumConfig,
    pub render: RenderConfig,
    /// Side of the square NOCS patch (pixels).
    pub patch_size: usize,
    pub grid_resolution: usize,
    /// Narrow band of the surface extraction (model units).
    pub band: f64,
    pub seed: u64,
}

impl Default for AutolabelConfig {
    fn default() -> Self {
        Self {
            schedule: OptimizerSchedule::default(),
            refine: true,
            ransac: RansacConfig::default(),
            correspondence_threshold: 0.1,
            verification: VerificationConfig::default(),
            curriculum: CurriculumConfig::default(),
            render: RenderConfig::default(),
            patch_size: 64,
            grid_resolution: 48,
            band: DEFAULT_BAND,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Verified,
    VerifyFail,
    InitFail,
    #[serde(rename = "nan")]
    NonFinite,
    Error,
}

/// Outcome of labeling one instance. The estimate is kept even when
/// verification fails so that ungated evaluation remains possible.
#[derive(Clone, Debug)]
pub struct InstanceLabel {
    pub id: InstanceId,
    pub difficulty: Difficulty,
    pub status: Status,
    pub detail: String,
    pub correspondences: usize,
    pub inliers: usize,
    pub init: Option<SimilarityTransform>,
    pub estimate: Option<(SimilarityTransform, LatentCode)>,
    pub verification: Option<Verification>,
    pub cuboid: Option<DerivedCuboid>,
    pub final_loss: Option<f64>,
}

impl InstanceLabel {
    fn failed(id: InstanceId, difficulty: Difficulty, status: Status, detail: String) -> Self {
        Self {
            id,
            difficulty,
            status,
            detail,
            correspondences: 0,
            inliers: 0,
            init: None,
            estimate: None,
            verification: None,
            cuboid: None,
            final_loss: None,
        }
    }
}

/// One CSV row per processed instance and loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceRecord {
    #[serde(rename = "loop")]
    pub loop_index: usize,
    pub instance: String,
    pub difficulty: Difficulty,
    pub status: Status,
    pub detail: String,
    pub correspondences: usize,
    pub inliers: usize,
    pub band_fraction: Option<f64>,
    pub mask_iou: Option<f64>,
    pub final_loss: Option<f64>,
    pub translation_error: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub scale_error: Option<f64>,
    pub latent_error_deg: Option<f64>,
}

impl InstanceRecord {
    fn new(loop_index: usize, label: &InstanceLabel, truth: &SceneInstance) -> Self {
        let est = label.estimate.as_ref();
        Self {
            loop_index,
            instance: label.id.to_string(),
            difficulty: label.difficulty,
            status: label.status,
            detail: label.detail.clone(),
            correspondences: label.correspondences,
            inliers: label.inliers,
            band_fraction: label.verification.as_ref().map(|v| v.band_fraction),
            mask_iou: label.verification.as_ref().map(|v| v.mask_iou),
            final_loss: label.final_loss,
            translation_error: est.map(|(p, _)| p.translation_distance_to(&truth.pose)),
            rotation_error_deg: est.map(|(p, _)| p.rotation_angle_to(&truth.pose).to_degrees()),
            scale_error: est.map(|(p, _)| (p.scale - truth.pose.scale).abs()),
            latent_error_deg: est.map(|(_, z)| z.angle_to(&truth.latent).to_degrees()),
        }
    }
}

/// Writes records as CSV with a header row.
pub fn write_records(out: impl Write, records: &[InstanceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Predict, correspond, initialize, refine, verify. Errors become a
/// terminal status; this never fails.
pub fn label_instance(
    ctx: &PredictContext<'_>,
    predictor: &dyn CssPredictor,
    instance: &SceneInstance,
    other_labels: &[&LabelMask],
    difficulty: Difficulty,
    config: &AutolabelConfig,
) -> InstanceLabel {
    let id = instance.id;
    let fail = |status, detail: String| InstanceLabel::failed(id, difficulty, status, detail);
    let prediction = match predictor.predict(instance, ctx) {
        Ok(p) => p,
        Err(e) => return fail(Status::Error, e.to_string()),
    };
    let model = match ctx.extractor.project_surface(&prediction.latent) {
        Ok(m) => m,
        Err(e) => return fail(Status::Error, e.to_string()),
    };

    let mut scene_points = Vec::new();
    let mut scene_colors = Vec::new();
    for l in &instance.lidar {
        let cam = &prediction.camera;
        if let Some(px) = cam.project(*l).and_then(|uv| cam.pixel_at(uv)) {
            if prediction.nocs.valid[px] {
                scene_points.push(*l);
                scene_colors.push(prediction.nocs.colors[px]);
            }
        }
    }
    if scene_points.is_empty() || model.is_empty() {
        return fail(Status::InitFail, "no colored LIDAR points".into());
    }
    let pairs = match nocs_correspondences(&model.colors, &scene_colors, config.correspondence_threshold) {
        Ok(p) => p,
        Err(e) => return fail(Status::InitFail, e.to_string()),
    };
    let a: Vec<[f64; 3]> = pairs.pairs.iter().map(|p| model.points[p.model]).collect();
    let b: Vec<[f64; 3]> = pairs.pairs.iter().map(|p| scene_points[p.scene]).collect();
    let ransac = RansacConfig {
        seed: derive_seed(&[config.ransac.seed, config.seed, id.scene as u64, id.index as u64]),
        ..config.ransac.clone()
    };
    let init = match ransac_procrustes(&a, &b, &ransac) {
        Ok(r) => r,
        Err(e) => {
            let mut l = fail(Status::InitFail, e.to_string());
            l.correspondences = pairs.len();
            return l;
        }
    };
    let mut label = fail(Status::Error, String::new());
    label.correspondences = pairs.len();
    label.inliers = init.inliers.len();
    label.init = Some(init.transform);

    let (pose, latent) = if config.refine {
        let refiner = Refiner::new(RefineProblem {
            extractor: ctx.extractor,
            camera: prediction.camera,
            predicted: &prediction.nocs,
            lidar: &instance.lidar,
            render: config.render.clone(),
        });
        match refiner.run(&init.transform, &prediction.latent, &config.schedule) {
            Ok(r) if r.aborted.is_some() => {
                label.status = Status::NonFinite;
                label.detail = format!("non-finite loss at iteration {}", r.aborted.unwrap_or(0));
                return label;
            }
            Ok(r) => {
                label.final_loss = Some(r.final_loss());
                (r.pose, r.latent)
            }
            Err(e) => {
                label.detail = e.to_string();
                return label;
            }
        }
    } else {
        (init.transform, prediction.latent)
    };
    label.estimate = Some((pose, latent));

    match derive_cuboid(ctx.extractor, &pose, &latent) {
        Ok(c) => label.cuboid = Some(c),
        Err(e) => {
            label.detail = e.to_string();
            return label;
        }
    }
    match verify(ctx, &pose, &latent, instance, other_labels, &config.verification) {
        Ok(v) => {
            label.status = if v.passed { Status::Verified } else { Status::VerifyFail };
            label.detail = v.diagnostic.clone().unwrap_or_default();
            label.verification = Some(v);
        }
        Err(e) => label.detail = e.to_string(),
    }
    label
}

pub struct LoopOutcome {
    pub loop_index: usize,
    pub stage: Difficulty,
    pub predictor: String,
    /// Processed instances in id order.
    pub labels: Vec<InstanceLabel>,
    pub records: Vec<InstanceRecord>,
    /// Verified autolabels of this loop, in id order.
    pub accepted: Vec<Autolabel>,
}

impl LoopOutcome {
    pub fn verified_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.accepted.len() as f64 / self.labels.len() as f64
    }
}

/// Instances at or below `stage` with their run-time difficulty.
type Selected<'a> = Vec<(&'a SceneInstance, Vec<&'a LabelMask>, Difficulty)>;

fn select<'a>(dataset: &'a Dataset, stage: Difficulty, curriculum: &CurriculumConfig) -> Selected<'a> {
    let mut out = Vec::new();
    for scene in &dataset.scenes {
        let boxes: Vec<[usize; 4]> = scene.instances.iter().map(|i| i.label.bbox).collect();
        for (k, inst) in scene.instances.iter().enumerate() {
            let d = classify_difficulty(k, &boxes, inst.border, curriculum);
            if d <= stage {
                let others = scene
                    .instances
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != k)
                    .map(|(_, o)| &o.label)
                    .collect();
                out.push((inst, others, d));
            }
        }
    }
    out.sort_by_key(|(i, _, _)| i.id);
    out
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker threads: {e}")))
}

/// One pass over the instances at or below `stage`. `jobs == 0` uses all
/// cores; results do not depend on it.
pub fn run_loop(
    dataset: &Dataset,
    space: &ShapeSpace,
    predictor: &dyn CssPredictor,
    stage: Difficulty,
    loop_index: usize,
    config: &AutolabelConfig,
    jobs: usize,
) -> Result<LoopOutcome> {
    let config = AutolabelConfig {
        schedule: config.schedule.clone().validated()?,
        curriculum: config.curriculum.clone().validated()?,
        render: config.render.clone().validated()?,
        ..config.clone()
    };
    let grid = QueryGrid::with_resolution(config.grid_resolution)?;
    let extractor = SurfaceExtractor::new(space, grid, config.band);
    let ctx = PredictContext {
        extractor: &extractor,
        camera: dataset.camera,
        patch_size: config.patch_size,
        render: config.render.clone(),
        loop_index,
    };
    let selected = select(dataset, stage, &config.curriculum);
    let labels: Vec<InstanceLabel> = thread_pool(jobs)?.install(|| {
        selected
            .par_iter()
            .map(|(inst, others, d)| label_instance(&ctx, predictor, inst, others, *d, &config))
            .collect()
    });
    let predictor_id = predictor.id();
    let mut records = Vec::with_capacity(labels.len());
    let mut accepted = Vec::new();
    for (label, (inst, _, _)) in labels.iter().zip(&selected) {
        records.push(InstanceRecord::new(loop_index, label, inst));
        if let (Status::Verified, Some((pose, latent)), Some(cuboid), Some(v)) =
            (label.status, label.estimate, label.cuboid, &label.verification)
        {
            accepted.push(Autolabel {
                instance: label.id,
                pose,
                latent,
                cuboid,
                verification: v.clone(),
                loop_index,
                predictor: predictor_id.clone(),
            });
        }
    }
    Ok(LoopOutcome {
        loop_index,
        stage,
        predictor: predictor_id,
        labels,
        records,
        accepted,
    })
}

pub struct AutolabelRun {
    pub pool: LabelPool,
    pub loops: Vec<LoopOutcome>,
}

impl AutolabelRun {
    pub fn records(&self) -> Vec<InstanceRecord> {
        self.loops.iter().flat_map(|l| l.records.iter().cloned()).collect()
    }
}

/// Curriculum stage of loop `i`: easy first, then one level more per
/// loop, never beyond `stage`.
pub fn loop_stage(stage: Difficulty, loop_index: usize) -> Difficulty {
    let ladder = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];
    stage.min(ladder[loop_index.min(ladder.len() - 1)])
}

/// Runs `loops` loops, growing the pool and calling the predictor's update
/// hook after each.
pub fn run_autolabel(
    dataset: &Dataset,
    space: &ShapeSpace,
    predictor: &mut dyn CssPredictor,
    stage: Difficulty,
    loops: usize,
    config: &AutolabelConfig,
    jobs: usize,
) -> Result<AutolabelRun> {
    let mut pool = LabelPool::new();
    let mut outcomes = Vec::with_capacity(loops);
    for i in 0..loops {
        let outcome = run_loop(dataset, space, &*predictor, loop_stage(stage, i), i, config, jobs)?;
        for label in &outcome.accepted {
            pool.insert(label.clone())?;
        }
        predictor.update(&pool, i);
        outcomes.push(outcome);
    }
    Ok(AutolabelRun { pool, loops: outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_climb_and_respect_the_cap() {
        assert_eq!(loop_stage(Difficulty::Moderate, 0), Difficulty::Easy);
        assert_eq!(loop_stage(Difficulty::Moderate, 1), Difficulty::Moderate);
        assert_eq!(loop_stage(Difficulty::Moderate, 5), Difficulty::Moderate);
        assert_eq!(loop_stage(Difficulty::Easy, 3), Difficulty::Easy);
    }
}
