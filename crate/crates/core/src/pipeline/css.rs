use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::label::LabelPool;
use super::scene::{InstanceId, SceneInstance};
use crate::alignment::NocsMap;
use crate::error::{Error, Result};
use crate::isosurface::SurfaceExtractor;
use crate::renderer::{render, Camera, RenderConfig};
use crate::shapespace::LatentCode;

pub const PREDICTIONS_SCHEMA: &str = "sdf-autolabel/predictions/v1";

/// NOCS patch and latent estimate for one 2D label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CssPrediction {
    /// Camera of the patch (the label box resampled to a square).
    pub camera: Camera,
    pub nocs: NocsMap,
    pub latent: LatentCode,
}

/// What a predictor may look at besides the instance.
pub struct PredictContext<'a> {
    pub extractor: &'a SurfaceExtractor<'a>,
    /// Full-image camera.
    pub camera: Camera,
    pub patch_size: usize,
    pub render: RenderConfig,
    pub loop_index: usize,
}

impl PredictContext<'_> {
    pub fn patch_camera(&self, instance: &SceneInstance) -> Result<Camera> {
        self.camera.crop(instance.label.region(), self.patch_size)
    }
}

pub trait CssPredictor: Sync {
    fn id(&self) -> String;

    fn predict(&self, instance: &SceneInstance, ctx: &PredictContext<'_>) -> Result<CssPrediction>;

    /// Called after each loop with the accumulated pool.
    fn update(&mut self, _pool: &LabelPool, _completed_loop: usize) {}
}

/// Corruption applied by the oracle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleNoise {
    /// Per-channel Gaussian noise, clipped to [0, 1] after adding.
    pub nocs_sigma: f64,
    pub pixel_dropout: f64,
    /// Great-circle distance of the latent estimate from the truth.
    pub latent_angle_deg: f64,
}

impl OracleNoise {
    pub fn validated(self) -> Result<Self> {
        if !(self.nocs_sigma >= 0.0 && (0.0..=1.0).contains(&self.pixel_dropout) && self.latent_angle_deg >= 0.0) {
            return Err(Error::usage("oracle noise must be non-negative with dropout in [0, 1]"));
        }
        Ok(self)
    }
}

/// Ground-truth NOCS of the label patch, corrupted by `noise`. Pixels are
/// valid where the render covers them and the label mask contains them.
pub fn oracle_css(
    instance: &SceneInstance,
    ctx: &PredictContext<'_>,
    noise: &OracleNoise,
    seed: u64,
) -> Result<CssPrediction> {
    let camera = ctx.patch_camera(instance)?;
    let surface = ctx.extractor.project_surface(&instance.latent)?;
    let out = render(&surface, &instance.pose, &camera, &ctx.render)?;
    let label = instance.label.bitmap(ctx.camera.width, ctx.camera.height);
    let [u0, v0, u1, v1] = instance.label.region();
    let (sx, sy) = ((u1 - u0) / camera.width as f64, (v1 - v0) / camera.height as f64);
    let mut nocs = NocsMap::from_render(&out);
    for (px, valid) in nocs.valid.iter_mut().enumerate() {
        let (c, r) = ((px % camera.width) as f64 + 0.5, (px / camera.width) as f64 + 0.5);
        let full = ctx.camera.pixel_at([u0 + c * sx, v0 + r * sy]);
        *valid = *valid && full.is_some_and(|f| label[f]);
    }
    for (c, v) in nocs.colors.iter_mut().zip(&nocs.valid) {
        if !v {
            *c = [0.0; 3];
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if noise.nocs_sigma > 0.0 || noise.pixel_dropout > 0.0 {
        for (c, v) in nocs.colors.iter_mut().zip(nocs.valid.iter_mut()) {
            let jitter: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            let drop = rng.random::<f64>() < noise.pixel_dropout;
            if !*v {
                continue;
            }
            *c = std::array::from_fn(|k| (c[k] + noise.nocs_sigma * jitter[k]).clamp(0.0, 1.0));
            if drop {
                *v = false;
                *c = [0.0; 3];
            }
        }
    }
    let latent = if noise.latent_angle_deg > 0.0 {
        loop {
            let toward: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            if let Ok(z) = instance.latent.perturbed(toward, noise.latent_angle_deg.to_radians()) {
                break z;
            }
        }
    } else {
        instance.latent
    };
    Ok(CssPrediction { camera, nocs, latent })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Noise used in loop `i`; the last entry repeats for later loops.
    pub schedule: Vec<OracleNoise>,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            schedule: vec![OracleNoise::default()],
            seed: 0,
        }
    }
}

/// Ground-truth predictor whose noise level follows a schedule; the
/// update hook advances it by one loop.
pub struct OracleCss {
    config: OracleConfig,
    stage: usize,
}

impl OracleCss {
    pub fn new(config: OracleConfig) -> Result<Self> {
        if config.schedule.is_empty() {
            return Err(Error::usage("oracle noise schedule is empty"));
        }
        for n in &config.schedule {
            n.validated()?;
        }
        Ok(Self { config, stage: 0 })
    }

    pub fn noise(&self) -> OracleNoise {
        self.config.schedule[self.stage.min(self.config.schedule.len() - 1)]
    }
}

impl CssPredictor for OracleCss {
    fn id(&self) -> String {
        let n = self.noise();
        format!(
            "oracle(sigma={},dropout={},angle={})",
            n.nocs_sigma, n.pixel_dropout, n.latent_angle_deg
        )
    }

    fn predict(&self, instance: &SceneInstance, ctx: &PredictContext<'_>) -> Result<CssPrediction> {
        let seed = derive_seed(&[
            self.config.seed,
            instance.id.scene as u64,
            instance.id.index as u64,
            self.stage as u64,
        ]);
        oracle_css(instance, ctx, &self.noise(), seed)
    }

    fn update(&mut self, _pool: &LabelPool, _completed_loop: usize) {
        self.stage += 1;
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    instance: InstanceId,
    prediction: CssPrediction,
}

/// Predictions read from a line-delimited file: a schema header, then one
/// record per instance.
pub struct FilePredictor {
    source: String,
    predictions: BTreeMap<InstanceId, CssPrediction>,
}

impl FilePredictor {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::data("prediction file is empty")),
        };
        if header.schema != PREDICTIONS_SCHEMA {
            return Err(Error::data(format!(
                "unsupported prediction schema '{}'",
                header.schema
            )));
        }
        let mut predictions = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PredictionRecord = serde_json::from_str(&line)?;
            let p = &rec.prediction;
            if p.nocs.colors.len() != p.nocs.width * p.nocs.height || p.nocs.valid.len() != p.nocs.colors.len() {
                return Err(Error::data(format!(
                    "prediction {} has inconsistent sizes",
                    rec.instance
                )));
            }
            if p.nocs.colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::data(format!(
                    "prediction {} has NOCS values outside [0, 1]",
                    rec.instance
                )));
            }
            predictions.insert(rec.instance, rec.prediction);
        }
        Ok(Self {
            source: path.display().to_string(),
            predictions,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

impl CssPredictor for FilePredictor {
    fn id(&self) -> String {
        format!("file({})", self.source)
    }

    fn predict(&self, instance: &SceneInstance, _ctx: &PredictContext<'_>) -> Result<CssPrediction> {
        self.predictions
            .get(&instance.id)
            .cloned()
            .ok_or_else(|| Error::data(format!("no prediction for instance {}", instance.id)))
    }
}

/// Writes predictions in the format [`FilePredictor`] reads.
pub fn write_predictions<'a>(
    mut out: impl Write,
    predictions: impl IntoIterator<Item = (InstanceId, &'a CssPrediction)>,
) -> Result<()> {
    serde_json::to_writer(
        &mut out,
        &Header {
            schema: PREDICTIONS_SCHEMA.to_string(),
        },
    )?;
    writeln!(out)?;
    for (instance, prediction) in predictions {
        serde_json::to_writer(
            &mut out,
            &PredictionRecord {
                instance,
                prediction: prediction.clone(),
            },
        )?;
        writeln!(out)?;
    }
    Ok(())
}
