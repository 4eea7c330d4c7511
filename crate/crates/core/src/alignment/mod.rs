//! Pose, scale and shape recovery for one instance: NOCS correspondences,
//! RANSAC over Procrustes fits for the initial similarity transform, and
//! gradient-based joint refinement against 2D NOCS and 3D LIDAR evidence.

mod losses;
mod refine;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist3, SimilarityTransform};

pub use losses::{loss_2d, loss_3d, ColorIndex, LossValue, NocsMap};
pub use refine::{
    refine, write_trace, LossStructure, OptimizerSchedule, PixelPair, RefineProblem, RefineResult, Refiner, TraceRow,
    Variables,
};

pub type Tree3 = ImmutableKdTree<f64, u32, 3, 32>;

pub(crate) fn build_tree(points: &[[f64; 3]]) -> Tree3 {
    ImmutableKdTree::new_from_slice(points)
}

/// Nearest neighbour `(index, distance)`.
pub(crate) fn nearest(tree: &Tree3, q: &[f64; 3]) -> (usize, f64) {
    let nn = tree.nearest_one::<SquaredEuclidean>(q);
    (nn.item as usize, nn.distance.sqrt())
}

/// A model point paired with a scene point by NOCS color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub model: usize,
    pub scene: usize,
    /// NOCS-space distance.
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub const MIN_CORRESPONDENCES: usize = 4;

/// Mutual nearest neighbours in NOCS space below `threshold`.
///
/// A pair `(i, j)` is kept when scene color `j` is the nearest to model
/// color `i` and vice versa, so every model and scene point appears at
/// most once. Pairs are sorted by scene index.
pub fn nocs_correspondences(
    model_colors: &[[f64; 3]],
    scene_colors: &[[f64; 3]],
    threshold: f64,
) -> Result<CorrespondenceSet> {
    if model_colors.is_empty() || scene_colors.is_empty() {
        return Err(Error::usage("correspondence search needs non-empty point sets"));
    }
    let model_tree = build_tree(model_colors);
    let scene_tree = build_tree(scene_colors);
    let mut pairs = Vec::new();
    for (j, c) in scene_colors.iter().enumerate() {
        let (i, d) = nearest(&model_tree, c);
        if d >= threshold {
            continue;
        }
        let (back, _) = nearest(&scene_tree, &model_colors[i]);
        if back == j || scene_colors[back] == scene_colors[j] {
            pairs.push(Correspondence {
                model: i,
                scene: j,
                distance: d,
            });
        }
    }
    // duplicated scene colors: keep the lowest scene index per model point
    pairs.sort_by_key(|p| (p.model, p.scene));
    pairs.dedup_by_key(|p| p.model);
    pairs.sort_by_key(|p| p.scene);
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences {
            found: pairs.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    Ok(CorrespondenceSet { pairs })
}

/// Least-squares similarity `b ≈ s·R·a + t` with `det R = +1`.
pub fn procrustes(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<SimilarityTransform> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::Rank("need at least three point pairs".into()));
    }
    let n = a.len() as f64;
    let va: Vec<Vector3<f64>> = a.iter().map(|p| Vector3::from(*p)).collect();
    let vb: Vec<Vector3<f64>> = b.iter().map(|p| Vector3::from(*p)).collect();
    let mu_a = va.iter().sum::<Vector3<f64>>() / n;
    let mu_b = vb.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut cov_a = Matrix3::zeros();
    let mut var_a = 0.0;
    for (pa, pb) in va.iter().zip(&vb) {
        let da = pa - mu_a;
        cov += (pb - mu_b) * da.transpose();
        cov_a += da * da.transpose();
        var_a += da.norm_squared();
    }
    cov /= n;
    var_a /= n;
    let sa = cov_a.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sa.iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    if !(var_a > 0.0) || ev[1] <= 1e-10 * ev[0] {
        return Err(Error::Rank("source points are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let smallest = svd.singular_values.imin();
        s[(smallest, smallest)] = -1.0;
    }
    let r = u * s * v_t;
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let scale = (d * s).trace() / var_a;
    if !(scale > 0.0) {
        return Err(Error::Rank("degenerate scale estimate".into()));
    }
    let t = mu_b - r * mu_a * scale;
    Ok(SimilarityTransform::new(r, t, scale))
}

/// `⌈log(1 − p) / log(1 − wⁿ)⌉`.
pub fn ransac_iterations(p: f64, w: f64, n: u32) -> Result<usize> {
    if !(p > 0.0 && p < 1.0) || !(w > 0.0 && w <= 1.0) || n == 0 {
        return Err(Error::usage("need 0 < p < 1, 0 < w ≤ 1 and n ≥ 1"));
    }
    let wn = w.powi(n as i32);
    if wn >= 1.0 {
        return Ok(1);
    }
    Ok(((1.0 - p).ln() / (1.0 - wn).ln()).ceil().max(1.0) as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub success_probability: f64,
    pub inlier_ratio: f64,
    pub sample_size: u32,
    /// Meters.
    pub inlier_threshold: f64,
    pub seed: u64,
    /// Also score the leave-one-out fits of each sample.
    pub subset_hypotheses: bool,
    /// Maximum refits on the growing inlier set after a new best model.
    pub refit_rounds: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            success_probability: 0.9,
            inlier_ratio: 0.7,
            sample_size: 4,
            inlier_threshold: 0.2,
            seed: 0,
            subset_hypotheses: true,
            refit_rounds: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RansacResult {
    pub transform: SimilarityTransform,
    /// Indices into the correspondence list.
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

fn inliers_of(t: &SimilarityTransform, a: &[[f64; 3]], b: &[[f64; 3]], threshold: f64) -> Vec<usize> {
    (0..a.len())
        .filter(|&i| dist3(t.apply(a[i]), b[i]) < threshold)
        .collect()
}

fn fit_subset(a: &[[f64; 3]], b: &[[f64; 3]], idx: &[usize]) -> Result<SimilarityTransform> {
    let sa: Vec<[f64; 3]> = idx.iter().map(|&i| a[i]).collect();
    let sb: Vec<[f64; 3]> = idx.iter().map(|&i| b[i]).collect();
    procrustes(&sa, &sb)
}

/// Robust similarity between paired point lists `a[i] ↔ b[i]`.
pub fn ransac_procrustes(a: &[[f64; 3]], b: &[[f64; 3]], config: &RansacConfig) -> Result<RansacResult> {
    let n = config.sample_size as usize;
    if a.len() != b.len() {
        return Err(Error::usage("paired point lists differ in length"));
    }
    if a.len() < n.max(MIN_CORRESPONDENCES) {
        return Err(Error::InsufficientCorrespondences {
            found: a.len(),
            needed: n.max(MIN_CORRESPONDENCES),
        });
    }
    let k = ransac_iterations(config.success_probability, config.inlier_ratio, config.sample_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(SimilarityTransform, Vec<usize>)> = None;
    let threshold = config.inlier_threshold;
    for _ in 0..k {
        let mut idx = sample(&mut rng, a.len(), n).into_vec();
        idx.sort_unstable();
        let mut hypotheses = vec![idx.clone()];
        if config.subset_hypotheses && n > 3 {
            for skip in 0..n {
                hypotheses.push(
                    idx.iter()
                        .enumerate()
                        .filter(|(i, _)| *i != skip)
                        .map(|(_, v)| *v)
                        .collect(),
                );
            }
        }
        for h in hypotheses {
            let Ok(t) = fit_subset(a, b, &h) else { continue };
            let inl = inliers_of(&t, a, b, threshold);
            if best.as_ref().is_none_or(|(_, bi)| inl.len() > bi.len()) {
                let (t, inl) = local_refit(a, b, t, inl, config);
                if best.as_ref().is_none_or(|(_, bi)| inl.len() > bi.len()) {
                    best = Some((t, inl));
                }
            }
        }
    }
    let Some((t, inl)) = best else {
        return Err(Error::InitializationFailure { inliers: 0 });
    };
    if inl.len() < MIN_CORRESPONDENCES {
        return Err(Error::InitializationFailure { inliers: inl.len() });
    }
    Ok(RansacResult {
        transform: t,
        inliers: inl,
        iterations: k,
    })
}

/// Refits on the inlier set until it stops changing; the final model is
/// always a least-squares fit on its own inliers when one exists.
fn local_refit(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    mut t: SimilarityTransform,
    mut inl: Vec<usize>,
    config: &RansacConfig,
) -> (SimilarityTransform, Vec<usize>) {
    for _ in 0..config.refit_rounds.max(1) {
        if inl.len() < 3 {
            break;
        }
        let Ok(nt) = fit_subset(a, b, &inl) else { break };
        let ni = inliers_of(&nt, a, b, config.inlier_threshold);
        if ni.len() < inl.len() {
            break;
        }
        let same = ni == inl;
        t = nt;
        inl = ni;
        if same {
            break;
        }
    }
    (t, inl)
}
