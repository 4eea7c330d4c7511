use std::fmt;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curriculum::{classify_difficulty, CurriculumConfig, Difficulty};
use super::derive_seed;
use super::lidar::{trace_lidar, LidarConfig};
use crate::error::{Error, Result};
use crate::geometry::{yaw_rotation, SimilarityTransform};
use crate::isosurface::{QueryGrid, SurfaceExtractor, SurfacePointSet, DEFAULT_BAND};
use crate::renderer::{render, Camera, RenderConfig, RenderOutput};
use crate::shapespace::{project_latent, LatentCode, ShapeSpace};

pub const SCENE_SCHEMA: &str = "sdf-autolabel/scenes/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub scenes: usize,
    pub instances_per_scene: usize,
    /// Meters along the optical axis.
    pub depth_range: [f64; 2],
    pub scale_range: [f64; 2],
    /// Height of the camera above the ground plane (m).
    pub camera_height: f64,
    /// Sample full 3D rotations instead of yaw-only poses.
    pub full_rotation: bool,
    pub grid_resolution: usize,
    /// Instances with fewer visible pixels are regenerated.
    pub min_visible_pixels: usize,
    pub max_retries: usize,
    pub lidar: LidarConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            scenes: 20,
            instances_per_scene: 4,
            depth_range: [5.0, 40.0],
            scale_range: [4.5, 5.5],
            camera_height: 1.65,
            full_rotation: false,
            grid_resolution: 48,
            min_visible_pixels: 40,
            max_retries: 50,
            lidar: LidarConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validated(self) -> Result<Self> {
        let [d0, d1] = self.depth_range;
        let [s0, s1] = self.scale_range;
        if !(d0 > 0.0 && d1 >= d0 && s0 > 0.0 && s1 >= s0) {
            return Err(Error::usage("depth and scale ranges must be positive and ordered"));
        }
        if self.instances_per_scene == 0 {
            return Err(Error::usage("a scene needs at least one instance"));
        }
        self.lidar.validated()?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceId {
    pub scene: u32,
    pub index: u32,
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.scene, self.index)
    }
}

impl std::str::FromStr for InstanceId {
    type Err = Error;
    /// Parses `scene-index`, e.g. `0001-09` or `1-9`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::usage(format!("instance id '{s}' is not of the form SCENE-INDEX"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        Ok(Self {
            scene: a.parse().map_err(|_| bad())?,
            index: b.parse().map_err(|_| bad())?,
        })
    }
}

/// A pixel region inside its bounding box `[u0, v0, u1, v1)`, stored as
/// alternating background/foreground run lengths in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub bbox: [usize; 4],
    pub runs: Vec<u32>,
}

impl LabelMask {
    /// Tight mask of the set pixels of a full-image bitmap, or `None` if
    /// none are set.
    pub fn from_bitmap(bitmap: &[bool], width: usize) -> Option<Self> {
        let height = bitmap.len() / width.max(1);
        let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in bitmap.iter().enumerate().filter(|(_, b)| **b) {
            let (c, r) = (i % width, i / width);
            u0 = u0.min(c);
            v0 = v0.min(r);
            u1 = u1.max(c + 1);
            v1 = v1.max(r + 1);
        }
        if u0 == usize::MAX || height == 0 {
            return None;
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for r in v0..v1 {
            for c in u0..u1 {
                if bitmap[r * width + c] != current {
                    runs.push(len);
                    current = !current;
                    len = 0;
                }
                len += 1;
            }
        }
        runs.push(len);
        Some(Self {
            bbox: [u0, v0, u1, v1],
            runs,
        })
    }

    pub fn box_width(&self) -> usize {
        self.bbox[2] - self.bbox[0]
    }

    pub fn box_height(&self) -> usize {
        self.bbox[3] - self.bbox[1]
    }

    /// Row-major bitmap over the bounding box.
    pub fn box_bitmap(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.box_width() * self.box_height());
        let mut value = false;
        for &run in &self.runs {
            out.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        out
    }

    /// Full-image bitmap.
    pub fn bitmap(&self, width: usize, height: usize) -> Vec<bool> {
        let mut out = vec![false; width * height];
        let bw = self.box_width();
        for (k, b) in self.box_bitmap().into_iter().enumerate() {
            if b {
                let (c, r) = (self.bbox[0] + k % bw, self.bbox[1] + k / bw);
                if c < width && r < height {
                    out[r * width + c] = true;
                }
            }
        }
        out
    }

    pub fn area(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }

    /// Box as continuous pixel bounds.
    pub fn region(&self) -> [f64; 4] {
        self.bbox.map(|v| v as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub id: InstanceId,
    pub pose: SimilarityTransform,
    pub latent: LatentCode,
    /// Visible silhouette; its box is the 2D label.
    pub label: LabelMask,
    /// The label touches the image border.
    pub border: bool,
    /// Frustum LIDAR returns, camera frame (m).
    pub lidar: Vec<[f64; 3]>,
    pub difficulty: Difficulty,
}

impl SceneInstance {
    pub fn box_height(&self) -> usize {
        self.label.box_height()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: u32,
    pub instances: Vec<SceneInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: String,
    pub seed: u64,
    pub camera: Camera,
    pub config: SceneConfig,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn instances(&self) -> impl Iterator<Item = &SceneInstance> {
        self.scenes.iter().flat_map(|s| s.instances.iter())
    }

    /// All labels of the scene an instance belongs to.
    pub fn scene_of(&self, id: InstanceId) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.index == id.scene)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(text)?;
        if d.schema != SCENE_SCHEMA {
            return Err(Error::data(format!("unsupported scene schema '{}'", d.schema)));
        }
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

struct Placement {
    pose: SimilarityTransform,
    latent: LatentCode,
    surface: SurfacePointSet,
}

fn sample_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if let Ok(z) = project_latent(v) {
            return z.as_array();
        }
    }
}

fn sample_placement(
    rng: &mut ChaCha8Rng,
    config: &SceneConfig,
    camera: &Camera,
    extractor: &SurfaceExtractor<'_>,
) -> Result<Placement> {
    let latent = LatentCode::new(sample_unit(rng))?;
    let rotation = if config.full_rotation {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
            .into_inner()
    } else {
        yaw_rotation(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
    };
    let depth = rng.random_range(config.depth_range[0]..=config.depth_range[1]);
    let u = rng.random_range(0.0..camera.width as f64);
    let scale = rng.random_range(config.scale_range[0]..=config.scale_range[1]);
    let surface = extractor.project_surface(&latent)?;
    let bottom = surface
        .points
        .iter()
        .map(|p| (rotation * Vector3::from(*p))[1])
        .fold(f64::NEG_INFINITY, f64::max);
    let x = (u - camera.ox) * depth / camera.fx;
    let y = config.camera_height - scale * bottom;
    Ok(Placement {
        pose: SimilarityTransform::new(rotation, Vector3::new(x, y, depth), scale),
        latent,
        surface,
    })
}

fn collides(a: &SimilarityTransform, b: &SimilarityTransform) -> bool {
    let dx = a.translation[0] - b.translation[0];
    let dz = a.translation[2] - b.translation[2];
    (dx * dx + dz * dz).sqrt() < 0.5 * (a.scale + b.scale) + 0.2
}

/// Ground-truth poses, labels and LIDAR for one scene.
pub fn generate_scene(
    config: &SceneConfig,
    extractor: &SurfaceExtractor<'_>,
    camera: &Camera,
    seed: u64,
    index: u32,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, index as u64, 0x5CE4E]));
    let render_config = RenderConfig::default();
    let mut placements: Vec<Placement> = Vec::new();
    let mut retries = 0usize;
    let bump = |retries: &mut usize| -> Result<()> {
        *retries += 1;
        if *retries > config.max_retries {
            return Err(Error::Generation(format!(
                "scene {index}: no valid placement after {} retries",
                config.max_retries
            )));
        }
        Ok(())
    };
    while placements.len() < config.instances_per_scene {
        let p = sample_placement(&mut rng, config, camera, extractor)?;
        if placements.iter().any(|q| collides(&p.pose, &q.pose)) {
            bump(&mut retries)?;
            continue;
        }
        placements.push(p);
    }

    // z-buffered ownership of pixels; weak instances are regenerated
    let (renders, labels) = loop {
        let renders: Vec<RenderOutput> = placements
            .iter()
            .map(|p| render(&p.surface, &p.pose, camera, &render_config))
            .collect::<Result<_>>()?;
        let labels = visible_labels(&renders, camera);
        let weak = labels
            .iter()
            .position(|l| l.as_ref().is_none_or(|m| m.area() < config.min_visible_pixels));
        let Some(k) = weak else { break (renders, labels) };
        bump(&mut retries)?;
        loop {
            let p = sample_placement(&mut rng, config, camera, extractor)?;
            let clash = placements
                .iter()
                .enumerate()
                .any(|(j, q)| j != k && collides(&p.pose, &q.pose));
            if !clash {
                placements[k] = p;
                break;
            }
            bump(&mut retries)?;
        }
    };
    drop(renders);
    let labels: Vec<LabelMask> = labels.into_iter().map(|l| l.expect("checked above")).collect();

    let lidar_seed = derive_seed(&[seed, index as u64, 0x11DA4]);
    let posed: Vec<(SimilarityTransform, LatentCode)> = placements.iter().map(|p| (p.pose, p.latent)).collect();
    let hits = trace_lidar(extractor.space(), &posed, &config.lidar, lidar_seed)?;
    let bitmaps: Vec<Vec<bool>> = labels.iter().map(|l| l.bitmap(camera.width, camera.height)).collect();
    let mut frustum: Vec<Vec<[f64; 3]>> = vec![Vec::new(); placements.len()];
    for h in hits {
        let Some(pixel) = camera.project(h).and_then(|uv| camera.pixel_at(uv)) else {
            continue;
        };
        if let Some(k) = bitmaps.iter().position(|b| b[pixel]) {
            frustum[k].push(h);
        }
    }

    let boxes: Vec<[usize; 4]> = labels.iter().map(|l| l.bbox).collect();
    let curriculum = CurriculumConfig::default();
    let instances = placements
        .into_iter()
        .zip(labels)
        .zip(frustum)
        .enumerate()
        .map(|(k, ((p, label), lidar))| {
            let b = label.bbox;
            let border = b[0] == 0 || b[1] == 0 || b[2] == camera.width || b[3] == camera.height;
            let difficulty = classify_difficulty(k, &boxes, border, &curriculum);
            SceneInstance {
                id: InstanceId {
                    scene: index,
                    index: k as u32,
                },
                pose: p.pose,
                latent: p.latent,
                label,
                border,
                lidar,
                difficulty,
            }
        })
        .collect();
    Ok(Scene { index, instances })
}

/// Visible silhouette of every render under nearest-depth ownership.
fn visible_labels(renders: &[RenderOutput], camera: &Camera) -> Vec<Option<LabelMask>> {
    let n = camera.pixel_count();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for px in 0..n {
        let mut best = f64::INFINITY;
        for (k, r) in renders.iter().enumerate() {
            if r.is_foreground(px) && r.depth[px] < best {
                best = r.depth[px];
                owner[px] = Some(k);
            }
        }
    }
    (0..renders.len())
        .map(|k| {
            let bitmap: Vec<bool> = owner.iter().map(|o| *o == Some(k)).collect();
            LabelMask::from_bitmap(&bitmap, camera.width)
        })
        .collect()
}

/// Generates `config.scenes` scenes with per-scene seeds derived from
/// `seed`; the output does not depend on the thread count.
pub fn generate_dataset(config: &SceneConfig, space: &ShapeSpace, seed: u64) -> Result<Dataset> {
    let config = config.clone().validated()?;
    let camera = Camera::kitti();
    let grid = QueryGrid::with_resolution(config.grid_resolution)?;
    let extractor = SurfaceExtractor::new(space, grid, DEFAULT_BAND);
    let scenes = (0..config.scenes as u32)
        .into_par_iter()
        .map(|i| generate_scene(&config, &extractor, &camera, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        schema: SCENE_SCHEMA.to_string(),
        seed,
        camera,
        config,
        scenes,
    })
}
