//! Cuboid overlap, distance matching and average precision.

mod ablation;
mod eval;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;

pub use ablation::{ablation_suite, AblationConfig, AblationRow, MetricSet};
pub use eval::{evaluate_pool, ground_truth_cuboids, EvalRow};

/// A yaw-only 3D box. Yaw rotates about the vertical (y) axis; `length`
/// runs along the heading, `height` along y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: [f64; 3],
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
}

impl Cuboid {
    pub fn new(center: [f64; 3], length: f64, width: f64, height: f64, yaw: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0 && height > 0.0) {
            return Err(Error::usage("cuboid dimensions must be positive"));
        }
        Ok(Self {
            center,
            length,
            width,
            height,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    /// Footprint corners in the (x, z) ground plane, counter-clockwise in
    /// that coordinate order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let heading = [c, -s];
        let lateral = [s, c];
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let corner = |a: f64, b: f64| {
            [
                self.center[0] + a * hl * heading[0] + b * hw * lateral[0],
                self.center[2] + a * hl * heading[1] + b * hw * lateral[1],
            ]
        };
        let mut pts = [
            corner(1.0, 1.0),
            corner(-1.0, 1.0),
            corner(-1.0, -1.0),
            corner(1.0, -1.0),
        ];
        if signed_area(&pts) < 0.0 {
            pts.reverse();
        }
        pts
    }

    /// Whether a point lies inside (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dz = p[2] - self.center[2];
        let along = dx * c - dz * s;
        let across = dx * s + dz * c;
        along.abs() <= self.length / 2.0
            && across.abs() <= self.width / 2.0
            && (p[1] - self.center[1]).abs() <= self.height / 2.0
    }

    fn key(&self) -> [u64; 7] {
        [
            self.center[0].to_bits(),
            self.center[1].to_bits(),
            self.center[2].to_bits(),
            self.length.to_bits(),
            self.width.to_bits(),
            self.height.to_bits(),
            self.yaw.to_bits(),
        ]
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland–Hodgman clipping of `subject` by the convex
/// counter-clockwise polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn bev_intersection(a: &Cuboid, b: &Cuboid) -> f64 {
    // canonical argument order makes the result exactly symmetric
    let (a, b) = if a.key() <= b.key() { (a, b) } else { (b, a) };
    let poly = clip_polygon(&a.footprint(), &b.footprint());
    if poly.len() < 3 {
        return 0.0;
    }
    signed_area(&poly).abs()
}

/// Intersection over union of the ground-plane footprints.
pub fn bev_iou(a: &Cuboid, b: &Cuboid) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.length * a.width + b.length * b.width - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric intersection over union.
pub fn iou_3d(a: &Cuboid, b: &Cuboid) -> f64 {
    let top = (a.center[1] + a.height / 2.0).min(b.center[1] + b.height / 2.0);
    let bottom = (a.center[1] - a.height / 2.0).max(b.center[1] - b.height / 2.0);
    let overlap = (top - bottom).max(0.0);
    let inter = bev_intersection(a, b) * overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Ground-plane center distance.
pub fn center_distance(a: &Cuboid, b: &Cuboid) -> f64 {
    ((a.center[0] - b.center[0]).powi(2) + (a.center[2] - b.center[2]).powi(2)).sqrt()
}

/// Center-distance match, inclusive at the cutoff.
pub fn ns_match(a: &Cuboid, b: &Cuboid, cutoff: f64) -> bool {
    center_distance(a, b) <= cutoff
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "threshold")]
pub enum Matcher {
    /// BEV IoU at least the threshold.
    Bev(f64),
    /// 3D IoU at least the threshold.
    Iou3d(f64),
    /// Center distance at most the cutoff (meters).
    Ns(f64),
}

impl Matcher {
    /// Match quality, larger is better, or `None` if not a match.
    fn quality(&self, pred: &Cuboid, gt: &Cuboid) -> Option<f64> {
        match *self {
            Matcher::Bev(t) => Some(bev_iou(pred, gt)).filter(|v| *v >= t),
            Matcher::Iou3d(t) => Some(iou_3d(pred, gt)).filter(|v| *v >= t),
            Matcher::Ns(c) => ns_match(pred, gt, c).then(|| -center_distance(pred, gt)),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Matcher::Bev(t) => format!("bev@{t}"),
            Matcher::Iou3d(t) => format!("3d@{t}"),
            Matcher::Ns(c) => format!("ns@{c}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    /// Scores in processing order (descending, ties by prediction index).
    pub scores: Vec<f64>,
    pub true_positive: Vec<bool>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// Greedy matching in descending score order with all-point interpolated
/// average precision. Each ground truth is matched at most once.
pub fn average_precision(predictions: &[(Cuboid, f64)], ground_truth: &[Cuboid], matcher: Matcher) -> PrCurve {
    let predictions: Vec<(usize, Cuboid, f64)> = predictions.iter().map(|(c, s)| (0, *c, *s)).collect();
    let ground_truth: Vec<(usize, Cuboid)> = ground_truth.iter().map(|c| (0, *c)).collect();
    average_precision_framed(&predictions, &ground_truth, matcher)
}

/// [`average_precision`] over several frames: a prediction may only match
/// a ground truth carrying the same frame index.
pub fn average_precision_framed(
    predictions: &[(usize, Cuboid, f64)],
    ground_truth: &[(usize, Cuboid)],
    matcher: Matcher,
) -> PrCurve {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&i, &j| predictions[j].2.total_cmp(&predictions[i].2).then(i.cmp(&j)));
    let mut taken = vec![false; ground_truth.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let (frame, pred, _) = &predictions[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gt_frame, gt)) in ground_truth.iter().enumerate() {
            if taken[g] || gt_frame != frame {
                continue;
            }
            if let Some(q) = matcher.quality(pred, gt) {
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((g, q));
                }
            }
        }
        let hit = best.is_some();
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        tp_flags.push(hit);
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(if ground_truth.is_empty() {
            0.0
        } else {
            tp as f64 / ground_truth.len() as f64
        });
    }
    let ap = all_point_ap(&precision, &recall);
    PrCurve {
        scores: order.iter().map(|&i| predictions[i].2).collect(),
        true_positive: tp_flags,
        precision,
        recall,
        ap,
    }
}

fn all_point_ap(precision: &[f64], recall: &[f64]) -> f64 {
    if precision.is_empty() {
        return 0.0;
    }
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}
