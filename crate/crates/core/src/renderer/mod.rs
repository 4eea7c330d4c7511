//! Rasterization of oriented surface discs into NOCS images, depth maps and
//! silhouettes.
//!
//! Each surface sample is a disc in its tangent plane. A pixel ray meets
//! the plane at depth `d = n·p / n·K⁻¹(x, y, 1)`; the disc contributes with
//! tangential weight `M = max(diam − ‖p − P‖, 0)` and the contributions of
//! all discs at a pixel are blended with normalized weights.

mod image;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::isosurface::{faces_camera, SurfacePointSet};

pub use image::{write_depth, write_mask_ppm, write_nocs_ppm};

/// Pinhole intrinsics and image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub ox: f64,
    pub oy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, ox: f64, oy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::usage("focal lengths must be positive"));
        }
        if !(ox >= 0.0 && ox <= width as f64 && oy >= 0.0 && oy <= height as f64) {
            return Err(Error::usage("principal point must lie inside the image"));
        }
        Ok(Self {
            fx,
            fy,
            ox,
            oy,
            width,
            height,
        })
    }

    /// A 1242×375 driving-scene camera.
    pub fn kitti() -> Self {
        Self::new(721.5377, 721.5377, 609.5593, 172.854, 1242, 375).expect("valid intrinsics")
    }

    /// Square image with the principal point at the center.
    pub fn square(focal: f64, size: usize) -> Self {
        let c = size as f64 / 2.0;
        Self::new(focal, focal, c, c, size, size).expect("valid intrinsics")
    }

    /// Camera that renders the image region `[u0, u1) × [v0, v1)` resampled
    /// to `size × size` pixels. Its principal point may lie outside the
    /// patch.
    pub fn crop(&self, region: [f64; 4], size: usize) -> Result<Self> {
        let [u0, v0, u1, v1] = region;
        if !(u1 > u0 && v1 > v0) || size == 0 {
            return Err(Error::usage("crop region must have positive area"));
        }
        let sx = size as f64 / (u1 - u0);
        let sy = size as f64 / (v1 - v0);
        Ok(Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            ox: (self.ox - u0) * sx,
            oy: (self.oy - v0) * sy,
            width: size,
            height: size,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous image coordinates of a camera-frame point in front of
    /// the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        (p[2] > 0.0).then(|| [self.fx * p[0] / p[2] + self.ox, self.fy * p[1] / p[2] + self.oy])
    }

    /// `K⁻¹ (x, y, 1)ᵀ`.
    pub fn ray(&self, x: f64, y: f64) -> [f64; 3] {
        [(x - self.ox) / self.fx, (y - self.oy) / self.fy, 1.0]
    }

    /// Ray through the center of pixel `(col, row)`.
    pub fn pixel_ray(&self, pixel: usize) -> [f64; 3] {
        let (col, row) = (pixel % self.width, pixel / self.width);
        self.ray(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Pixel index containing the continuous coordinates, if inside.
    pub fn pixel_at(&self, uv: [f64; 2]) -> Option<usize> {
        let (c, r) = (uv[0].floor(), uv[1].floor());
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height)
            .then(|| r as usize * self.width + c as usize)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Compositing {
    /// `wᵢ ∝ Mᵢ·exp(−σ·Dᵢ)`.
    #[default]
    MaskWeighted,
    /// `wᵢ = softmax(−Dᵢ·σ·Mᵢ)`.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub sigma: f64,
    pub background: [f64; 3],
    /// Minimum `|n·K⁻¹(x, y, 1)|` for a disc to be intersected.
    pub epsilon: f64,
    pub compositing: Compositing,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sigma: 40.0,
            background: [0.0; 3],
            epsilon: 1e-6,
            compositing: Compositing::MaskWeighted,
        }
    }
}

impl RenderConfig {
    pub fn validated(self) -> Result<Self> {
        if !(self.sigma > 0.0) {
            return Err(Error::usage("sigma must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::usage("epsilon must be positive"));
        }
        Ok(self)
    }
}

/// Depth along the pixel ray where it meets the tangent plane of `(n, p)`.
/// `None` for grazing planes and intersections behind the camera.
pub fn plane_depth<S: Scalar>(n: [S; 3], p: [S; 3], ray: [f64; 3], epsilon: f64) -> Option<S> {
    let nv = n.map(|c| c.value());
    let pv = p.map(|c| c.value());
    let den = nv[0] * ray[0] + nv[1] * ray[1] + nv[2] * ray[2];
    if den.abs() < epsilon {
        return None;
    }
    let d = (nv[0] * pv[0] + nv[1] * pv[1] + nv[2] * pv[2]) / den;
    if !(d > 0.0) {
        return None;
    }
    let parents = [
        (p[0], nv[0] / den),
        (p[1], nv[1] / den),
        (p[2], nv[2] / den),
        (n[0], (pv[0] - d * ray[0]) / den),
        (n[1], (pv[1] - d * ray[1]) / den),
        (n[2], (pv[2] - d * ray[2]) / den),
    ];
    Some(S::custom(d, &parents))
}

/// `diam − ‖p − d·ray‖` without the clamp at zero.
pub fn disc_mask_raw<S: Scalar>(p: [S; 3], depth: S, ray: [f64; 3], diam: S) -> S {
    let d = depth.value();
    let diff: [f64; 3] = std::array::from_fn(|i| p[i].value() - d * ray[i]);
    let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
    let unit = if dist > 0.0 { diff.map(|c| c / dist) } else { [0.0; 3] };
    let parents = [
        (diam, 1.0),
        (p[0], -unit[0]),
        (p[1], -unit[1]),
        (p[2], -unit[2]),
        (depth, unit[0] * ray[0] + unit[1] * ray[1] + unit[2] * ray[2]),
    ];
    S::custom(diam.value() - dist, &parents)
}

/// `M = max(diam − ‖p − P‖, 0)`; at the rim the live branch is kept.
pub fn disc_mask(p: [f64; 3], plane_point: [f64; 3], diam: f64) -> f64 {
    (diam - crate::geometry::dist3(p, plane_point)).max(0.0)
}

/// Normalized blend weights of the discs at one pixel, in input order.
pub fn composite_weights(depths: &[f64], masks: &[f64], config: &RenderConfig) -> Vec<f64> {
    match config.compositing {
        Compositing::MaskWeighted => {
            let d0 = depths.iter().copied().fold(f64::INFINITY, f64::min);
            let a: Vec<f64> = depths
                .iter()
                .zip(masks)
                .map(|(d, m)| m * (-config.sigma * (d - d0)).exp())
                .collect();
            let total: f64 = a.iter().sum();
            a.into_iter().map(|v| v / total).collect()
        }
        Compositing::Literal => {
            let scores: Vec<f64> = depths.iter().zip(masks).map(|(d, m)| -d * config.sigma * m).collect();
            crate::autodiff::softmax_values(&scores)
        }
    }
}

/// Weighted color and depth of one pixel from `(D, M, color)` triples of
/// discs with `M > 0`.
pub fn composite(discs: &[(f64, f64, [f64; 3])], config: &RenderConfig) -> Option<([f64; 3], f64, Vec<f64>)> {
    if discs.is_empty() {
        return None;
    }
    let depths: Vec<f64> = discs.iter().map(|d| d.0).collect();
    let masks: Vec<f64> = discs.iter().map(|d| d.1).collect();
    let w = composite_weights(&depths, &masks, config);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for (wi, (d, _, c)) in w.iter().zip(discs) {
        for k in 0..3 {
            color[k] += wi * c[k];
        }
        depth += wi * d;
    }
    Some((color, depth, w))
}

/// A disc in camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub disc: u32,
    pub depth: f64,
    pub mask: f64,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub nocs: Vec<[f64; 3]>,
    /// `+∞` at background pixels.
    pub depth: Vec<f64>,
    pub mask: Vec<f64>,
    pub coverage: Vec<u32>,
    /// Contributions of pixel `i` are `contributions[offsets[i]..offsets[i + 1]]`,
    /// in disc order.
    pub offsets: Vec<u32>,
    pub contributions: Vec<Contribution>,
    /// Set when no disc was visible.
    pub empty: bool,
}

impl RenderOutput {
    pub fn contributions_at(&self, pixel: usize) -> &[Contribution] {
        &self.contributions[self.offsets[pixel] as usize..self.offsets[pixel + 1] as usize]
    }

    pub fn is_foreground(&self, pixel: usize) -> bool {
        self.mask[pixel] > 0.0
    }

    pub fn foreground_pixels(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i] > 0.0).collect()
    }
}

/// Rasterizes camera-frame discs of a common world diameter.
pub fn rasterize(discs: &[Disc], diameter: f64, camera: &Camera, config: &RenderConfig) -> RenderOutput {
    let npix = camera.pixel_count();
    let mut raw: Vec<(u32, u32, f64, f64)> = Vec::new();
    for (di, disc) in discs.iter().enumerate() {
        let Some((c0, c1, r0, r1)) = disc_pixel_box(disc.center, diameter, camera) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let ray = camera.ray(col as f64 + 0.5, row as f64 + 0.5);
                let Some(d) = plane_depth(disc.normal, disc.center, ray, config.epsilon) else {
                    continue;
                };
                let m = disc_mask(disc.center, ray.map(|r| r * d), diameter);
                if m > 0.0 {
                    raw.push(((row * camera.width + col) as u32, di as u32, d, m));
                }
            }
        }
    }
    // stable counting sort by pixel keeps disc order within a pixel
    let mut offsets = vec![0u32; npix + 1];
    for r in &raw {
        offsets[r.0 as usize + 1] += 1;
    }
    for i in 0..npix {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut contributions = vec![
        Contribution {
            disc: 0,
            depth: 0.0,
            mask: 0.0,
            weight: 0.0,
        };
        raw.len()
    ];
    for (pixel, disc, depth, mask) in raw {
        let slot = &mut cursor[pixel as usize];
        contributions[*slot as usize] = Contribution {
            disc,
            depth,
            mask,
            weight: 0.0,
        };
        *slot += 1;
    }
    let mut nocs = vec![config.background; npix];
    let mut depth = vec![f64::INFINITY; npix];
    let mut mask = vec![0.0; npix];
    let mut coverage = vec![0u32; npix];
    for pixel in 0..npix {
        let range = offsets[pixel] as usize..offsets[pixel + 1] as usize;
        if range.is_empty() {
            continue;
        }
        let cs = &mut contributions[range];
        let ds: Vec<f64> = cs.iter().map(|c| c.depth).collect();
        let ms: Vec<f64> = cs.iter().map(|c| c.mask).collect();
        let w = composite_weights(&ds, &ms, config);
        let mut color = [0.0; 3];
        let mut dp = 0.0;
        for (c, wi) in cs.iter_mut().zip(w) {
            c.weight = wi;
            let dc = discs[c.disc as usize].color;
            for k in 0..3 {
                color[k] += wi * dc[k];
            }
            dp += wi * c.depth;
        }
        nocs[pixel] = color;
        depth[pixel] = dp;
        mask[pixel] = 1.0;
        coverage[pixel] = cs.len() as u32;
    }
    RenderOutput {
        width: camera.width,
        height: camera.height,
        nocs,
        depth,
        mask,
        coverage,
        offsets,
        empty: contributions.is_empty(),
        contributions,
    }
}

/// Inclusive pixel ranges `(c0, c1, r0, r1)` that can see the disc: the
/// projection of the enclosing ball of radius `diameter`, padded by one
/// pixel.
fn disc_pixel_box(center: [f64; 3], diameter: f64, camera: &Camera) -> Option<(usize, usize, usize, usize)> {
    let r = diameter;
    let zn = center[2] - r;
    if zn <= 1e-9 {
        return None;
    }
    let extent = |c: f64, f: f64, o: f64| {
        let vals = [
            (c - r) / zn,
            (c - r) / (center[2] + r),
            (c + r) / zn,
            (c + r) / (center[2] + r),
        ];
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (f * lo + o, f * hi + o)
    };
    let (u0, u1) = extent(center[0], camera.fx, camera.ox);
    let (v0, v1) = extent(center[1], camera.fy, camera.oy);
    let span = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let a = (lo - 0.5).floor() - 1.0;
        let b = (hi - 0.5).ceil() + 1.0;
        if b < 0.0 || a > (n as f64 - 1.0) {
            return None;
        }
        Some((a.max(0.0) as usize, (b.min(n as f64 - 1.0)) as usize))
    };
    let (c0, c1) = span(u0, u1, camera.width)?;
    let (r0, r1) = span(v0, v1, camera.height)?;
    Some((c0, c1, r0, r1))
}

/// Posed, back-face culled discs of a surface set; also returns the
/// source indices of the kept samples.
pub fn posed_discs(points: &SurfacePointSet, pose: &SimilarityTransform) -> (Vec<Disc>, Vec<usize>) {
    let mut discs = Vec::new();
    let mut kept = Vec::new();
    for i in 0..points.len() {
        let c = pose.apply(points.points[i]);
        let n = pose.rotate(points.normals[i]);
        if faces_camera(c, n) {
            discs.push(Disc {
                center: c,
                normal: n,
                color: points.colors[i],
            });
            kept.push(i);
        }
    }
    (discs, kept)
}

/// Transforms, culls and rasterizes a surface set.
pub fn render(
    points: &SurfacePointSet,
    pose: &SimilarityTransform,
    camera: &Camera,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    if !(pose.scale > 0.0) {
        return Err(Error::usage("pose scale must be positive"));
    }
    let (discs, _) = posed_discs(points, pose);
    Ok(rasterize(&discs, points.diameter * pose.scale, camera, config))
}

/// A disc whose geometry and color are differentiable expressions.
#[derive(Clone, Copy, Debug)]
pub struct DiscExpr<S> {
    pub center: [S; 3],
    pub normal: [S; 3],
    pub color: [S; 3],
}

/// Differentiable color and depth of one pixel for a fixed set of
/// contributing discs.
pub fn pixel_expr<S: Scalar>(
    discs: &[DiscExpr<S>],
    contributors: &[u32],
    ray: [f64; 3],
    diameter: S,
    config: &RenderConfig,
) -> Option<([S; 3], S)> {
    let (color, combine) = pixel_blend(discs, contributors, ray, diameter, config)?;
    let depth = combine.apply(&combine.depths);
    Some((color, depth))
}

/// Like [`pixel_expr`] without the depth channel.
pub fn pixel_color_expr<S: Scalar>(
    discs: &[DiscExpr<S>],
    contributors: &[u32],
    ray: [f64; 3],
    diameter: S,
    config: &RenderConfig,
) -> Option<[S; 3]> {
    pixel_blend(discs, contributors, ray, diameter, config).map(|(c, _)| c)
}

/// Per-pixel blend of the contributing discs.
struct Blend<S> {
    depths: Vec<S>,
    /// Unnormalized weights (mask-weighted) or scores (literal).
    weights: Vec<S>,
    literal: bool,
}

impl<S: Scalar> Blend<S> {
    fn apply(&self, values: &[S]) -> S {
        if self.literal {
            S::softmax_combine(&self.weights, values)
        } else {
            S::normalized_combine(&self.weights, values)
        }
    }
}

fn pixel_blend<S: Scalar>(
    discs: &[DiscExpr<S>],
    contributors: &[u32],
    ray: [f64; 3],
    diameter: S,
    config: &RenderConfig,
) -> Option<([S; 3], Blend<S>)> {
    let mut depths = Vec::with_capacity(contributors.len());
    let mut masks = Vec::with_capacity(contributors.len());
    let mut colors: [Vec<S>; 3] = std::array::from_fn(|_| Vec::with_capacity(contributors.len()));
    for &c in contributors {
        let disc = &discs[c as usize];
        // skipping here only happens if a frozen contributor turned grazing
        let Some(d) = plane_depth(disc.normal, disc.center, ray, config.epsilon) else {
            continue;
        };
        masks.push(disc_mask_raw(disc.center, d, ray, diameter));
        depths.push(d);
        for k in 0..3 {
            colors[k].push(disc.color[k]);
        }
    }
    if depths.is_empty() {
        return None;
    }
    let weights: Vec<S> = match config.compositing {
        Compositing::MaskWeighted => {
            let d0 = depths.iter().map(|d| d.value()).fold(f64::INFINITY, f64::min);
            // a = M·exp(−σ(D − D₀)) as one node
            depths
                .iter()
                .zip(&masks)
                .map(|(d, m)| {
                    let e = (-config.sigma * (d.value() - d0)).exp();
                    let a = m.value() * e;
                    S::custom(a, &[(*m, e), (*d, -config.sigma * a)])
                })
                .collect()
        }
        Compositing::Literal => depths
            .iter()
            .zip(&masks)
            .map(|(d, m)| *d * *m * -config.sigma)
            .collect(),
    };
    let blend = Blend {
        depths,
        weights,
        literal: config.compositing == Compositing::Literal,
    };
    let color = std::array::from_fn(|k| blend.apply(&colors[k]));
    Some((color, blend))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isosurface::{project_surface, QueryGrid};
    use crate::shapespace::{LatentCode, Shape, ShapeSpace};

    #[test]
    fn fronto_parallel_depth() {
        let cam = Camera::square(100.0, 64);
        let n = [0.0, 0.0, -1.0];
        let p = [0.0, 0.0, 5.0];
        assert_eq!(plane_depth(n, p, cam.ray(cam.ox, cam.oy), 1e-6), Some(5.0));
        for (x, y) in [(0.5, 0.5), (40.2, 3.0), (63.5, 63.5)] {
            let d = plane_depth(n, p, cam.ray(x, y), 1e-6).unwrap();
            assert!((d - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tilted_plane_residual() {
        let cam = Camera::square(100.0, 64);
        let a = 10f64.to_radians();
        let n = [a.sin(), 0.0, -a.cos()];
        let p = [0.1, -0.2, 5.0];
        for (x, y) in [(10.5, 20.5), (32.0, 32.0), (60.5, 1.5)] {
            let r = cam.ray(x, y);
            let d = plane_depth(n, p, r, 1e-6).unwrap();
            let big_p = r.map(|c| c * d);
            let res: f64 = (0..3).map(|i| n[i] * (big_p[i] - p[i])).sum();
            assert!(res.abs() < 1e-9);
        }
    }

    #[test]
    fn grazing_plane_is_skipped() {
        let cam = Camera::square(100.0, 64);
        let r = cam.ray(32.0, 32.0);
        assert!(plane_depth([1.0, 0.0, 0.0], [0.0, 0.0, 5.0], r, 1e-6).is_none());
    }

    #[test]
    fn disc_mask_examples() {
        let p = [0.0, 0.0, 5.0];
        assert_eq!(disc_mask(p, p, 0.04), 0.04);
        assert_eq!(disc_mask(p, [0.04, 0.0, 5.0], 0.04), 0.0);
        assert!((disc_mask(p, [0.02, 0.0, 5.0], 0.04) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn composite_examples() {
        let cfg = RenderConfig::default();
        let (c, _, w) = composite(&[(5.0, 0.02, [0.1, 0.2, 0.3])], &cfg).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(c, [0.1, 0.2, 0.3]);
        let (c, _, w) = composite(&[(5.0, 0.02, [0.0, 0.0, 0.0]), (5.0, 0.02, [1.0, 0.5, 0.0])], &cfg).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        assert_eq!(c, [0.5, 0.25, 0.0]);
        for mode in [Compositing::MaskWeighted, Compositing::Literal] {
            let cfg = RenderConfig {
                sigma: 1e4,
                compositing: mode,
                ..Default::default()
            };
            let (_, _, w) = composite(&[(4.0, 0.02, [0.0; 3]), (6.0, 0.02, [1.0; 3])], &cfg).unwrap();
            assert!(w[0] > 1.0 - 1e-12, "{mode:?}: {w:?}");
        }
    }

    #[test]
    fn bounding_box_rasterization_matches_full_scan() {
        let space = ShapeSpace::default_cars();
        let z = LatentCode::new([0.0, 0.0, 1.0]).unwrap();
        let set = project_surface(&space, QueryGrid::with_resolution(16).unwrap(), &z).unwrap();
        let pose = SimilarityTransform::from_yaw(0.7, [0.3, 0.1, 6.0], 4.0);
        let cam = Camera::square(120.0, 48);
        let cfg = RenderConfig::default();
        let (discs, _) = posed_discs(&set, &pose);
        let fast = rasterize(&discs, set.diameter * pose.scale, &cam, &cfg);
        let mut count = 0;
        for pixel in 0..cam.pixel_count() {
            let ray = cam.pixel_ray(pixel);
            let mut hits = Vec::new();
            for (i, d) in discs.iter().enumerate() {
                if let Some(depth) = plane_depth(d.normal, d.center, ray, cfg.epsilon) {
                    let m = disc_mask(d.center, ray.map(|r| r * depth), set.diameter * pose.scale);
                    if m > 0.0 {
                        hits.push((i as u32, depth, m));
                    }
                }
            }
            let got = fast.contributions_at(pixel);
            assert_eq!(got.len(), hits.len());
            for (g, h) in got.iter().zip(&hits) {
                assert_eq!((g.disc, g.depth, g.mask), *h);
            }
            count += hits.len();
        }
        assert!(count > 0);
    }

    #[test]
    fn pixel_expression_matches_forward_render() {
        let space = ShapeSpace::single(Shape::sphere(0.5));
        let z = LatentCode::new([1.0, 0.0, 0.0]).unwrap();
        let set = project_surface(&space, QueryGrid::with_resolution(16).unwrap(), &z).unwrap();
        let pose = SimilarityTransform::from_yaw(0.0, [0.0, 0.0, 5.0], 1.0);
        let cam = Camera::square(200.0, 32);
        let cfg = RenderConfig::default();
        let (discs, _) = posed_discs(&set, &pose);
        let out = rasterize(&discs, set.diameter, &cam, &cfg);
        let exprs: Vec<DiscExpr<f64>> = discs
            .iter()
            .map(|d| DiscExpr {
                center: d.center,
                normal: d.normal,
                color: d.color,
            })
            .collect();
        for pixel in out.foreground_pixels() {
            let ids: Vec<u32> = out.contributions_at(pixel).iter().map(|c| c.disc).collect();
            let (c, d) = pixel_expr(&exprs, &ids, cam.pixel_ray(pixel), set.diameter, &cfg).unwrap();
            for k in 0..3 {
                assert!((c[k] - out.nocs[pixel][k]).abs() < 1e-12);
            }
            assert!((d - out.depth[pixel]).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_camera_maps_region_to_patch() {
        let cam = Camera::kitti();
        let region = [500.0, 100.0, 564.0, 132.0];
        let patch = cam.crop(region, 64).unwrap();
        let p = [0.3, 0.2, 10.0];
        let full = cam.project(p).unwrap();
        let local = patch.project(p).unwrap();
        assert!((local[0] - (full[0] - 500.0)).abs() < 1e-9);
        assert!((local[1] - (full[1] - 100.0) * 2.0).abs() < 1e-9);
    }
}
