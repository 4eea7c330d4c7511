//! Oriented surface samples from an SDF: normals from the spatial gradient
//! and a single projection step `p = x − n·f(x)` for every grid point in a
//! narrow band around the 0-level set.

use std::io::Write;
use std::path::Path;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;

use crate::autodiff::{Scalar, Tape};
use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;
use crate::shapespace::{
    blend_per_shape, nocs_color, nocs_color_s, shape_value_and_gradient, Backend, BlendSpace, LatentCode, ShapeSpace,
};

pub const DEFAULT_BAND: f64 = 0.03;
pub const DEFAULT_RESOLUTION: usize = 48;
pub const DEFAULT_HALF_EXTENT: f64 = 0.55;

/// Regular cell-centered grid over the cube `[lo, hi]³`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryGrid {
    resolution: usize,
    lo: f64,
    hi: f64,
}

impl Default for QueryGrid {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            lo: -DEFAULT_HALF_EXTENT,
            hi: DEFAULT_HALF_EXTENT,
        }
    }
}

impl QueryGrid {
    pub fn new(resolution: usize, lo: f64, hi: f64) -> Result<Self> {
        if resolution < 8 {
            return Err(Error::usage("grid resolution must be at least 8"));
        }
        if !(lo <= -0.5 && hi >= 0.5) {
            return Err(Error::usage("grid bounds must contain the unit-diameter ball"));
        }
        Ok(Self { resolution, lo, hi })
    }

    /// Default bounds at the given resolution.
    pub fn with_resolution(resolution: usize) -> Result<Self> {
        Self::new(resolution, -DEFAULT_HALF_EXTENT, DEFAULT_HALF_EXTENT)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Point of flat index `(i·n + j)·n + k`.
    pub fn point(&self, index: usize) -> [f64; 3] {
        let n = self.resolution;
        let h = self.spacing();
        let ijk = [index / (n * n), (index / n) % n, index % n];
        ijk.map(|c| self.lo + (c as f64 + 0.5) * h)
    }

    /// `h·√3`, the disc diameter for this grid.
    pub fn disc_diameter(&self) -> f64 {
        self.spacing() * 3f64.sqrt()
    }
}

/// Minimum pairwise distance of the query points times `√3`.
pub fn disc_diameter(points: &[[f64; 3]]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::usage("disc diameter needs at least two query points"));
    }
    let tree: ImmutableKdTree<f64, u32, 3, 32> = ImmutableKdTree::new_from_slice(points);
    let mut best = f64::INFINITY;
    for p in points {
        for nn in tree.nearest_n::<SquaredEuclidean>(p, std::num::NonZero::new(2).unwrap()) {
            let q = points[nn.item as usize];
            if q != *p {
                best = best.min(nn.distance);
            }
        }
    }
    if !best.is_finite() || best == 0.0 {
        // duplicates or only coincident pairs: fall back to the exact scan
        best = f64::INFINITY;
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let d = crate::geometry::dist3(points[i], points[j]);
                best = best.min(d * d);
            }
        }
    }
    Ok(best.sqrt() * 3f64.sqrt())
}

/// Unit normals `∇f/‖∇f‖` from a backward pass per query point; `None`
/// marks critical points with a vanishing gradient.
pub fn normals(space: &ShapeSpace, xs: &[[f64; 3]], z: &LatentCode) -> Vec<Option<[f64; 3]>> {
    let mut tape = Tape::new();
    xs.iter()
        .map(|x| {
            tape.reset();
            let p = tape.vars(*x);
            let zz = crate::autodiff::v3::lift(&p[0], z.as_array());
            let f = space.eval(p, zz);
            let g = tape.backward(f).expect("local root").wrt(p);
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            (n > MIN_GRADIENT).then(|| g.map(|c| c / n))
        })
        .collect()
}

const MIN_GRADIENT: f64 = 1e-12;

/// Projected surface samples with NOCS colors, sorted by grid index.
#[derive(Clone, Debug, Default)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    /// Grid index each sample was projected from.
    pub indices: Vec<u32>,
    /// Disc diameter in model units.
    pub diameter: f64,
    /// Band points dropped because the gradient vanished.
    pub dropped: usize,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn subset(&self, keep: &[usize]) -> SurfacePointSet {
        SurfacePointSet {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            normals: keep.iter().map(|&i| self.normals[i]).collect(),
            colors: keep.iter().map(|&i| self.colors[i]).collect(),
            indices: keep.iter().map(|&i| self.indices[i]).collect(),
            diameter: self.diameter,
            dropped: self.dropped,
        }
    }

    /// Tight axis-aligned bounds `(min, max)` of the points.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                std::array::from_fn(|i| lo[i].min(p[i])),
                std::array::from_fn(|i| hi[i].max(p[i])),
            )
        }))
    }

    /// ASCII point cloud: `x y z nx ny nz r g b` per line.
    pub fn write_ascii(&self, mut out: impl Write) -> Result<()> {
        for ((p, n), c) in self.points.iter().zip(&self.normals).zip(&self.colors) {
            writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                p[0], p[1], p[2], n[0], n[1], n[2], c[0], c[1], c[2]
            )?;
        }
        Ok(())
    }

    pub fn save_ascii(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ascii(file)
    }
}

/// One differentiable surface sample.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceSample<S> {
    pub index: u32,
    pub point: [S; 3],
    pub normal: [S; 3],
    pub color: [S; 3],
}

enum Candidates {
    /// Per-shape values and gradients at the grid points that can enter
    /// the band for some latent code.
    Blend {
        blend: BlendSpace,
        indices: Vec<u32>,
        per_shape: Vec<(f64, [f64; 3])>,
    },
    Dense,
}

/// Surface extraction for one shape space and grid.
///
/// For blended spaces the basis values and gradients at the grid points
/// are computed once; afterwards each extraction only depends on the
/// blend weights.
pub struct SurfaceExtractor<'a> {
    space: &'a ShapeSpace,
    grid: QueryGrid,
    band: f64,
    candidates: Candidates,
}

impl<'a> SurfaceExtractor<'a> {
    pub fn new(space: &'a ShapeSpace, grid: QueryGrid, band: f64) -> Self {
        let candidates = match space.backend() {
            Backend::AnalyticBlend(blend) => {
                let mut indices = Vec::new();
                let mut per_shape = Vec::new();
                for idx in 0..grid.len() {
                    let x = grid.point(idx);
                    let values: Vec<f64> = blend.shapes.iter().map(|s| s.eval(x)).collect();
                    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    // a convex combination stays within [lo, hi]
                    if lo <= band && hi >= -band {
                        indices.push(idx as u32);
                        per_shape.extend(blend.shapes.iter().map(|s| shape_value_and_gradient(s, x)));
                    }
                }
                Candidates::Blend {
                    blend: blend.clone(),
                    indices,
                    per_shape,
                }
            }
            Backend::TinyDecoder(_) => Candidates::Dense,
        };
        Self {
            space,
            grid,
            band,
            candidates,
        }
    }

    pub fn grid(&self) -> &QueryGrid {
        &self.grid
    }

    pub fn band(&self) -> f64 {
        self.band
    }

    pub fn space(&self) -> &ShapeSpace {
        self.space
    }

    /// Plain-valued extraction.
    pub fn project_surface(&self, z: &LatentCode) -> Result<SurfacePointSet> {
        let (samples, dropped) = self.extract(z.as_array(), None)?;
        let mut out = SurfacePointSet {
            diameter: self.grid.disc_diameter(),
            dropped,
            ..Default::default()
        };
        for s in samples {
            out.points.push(s.point);
            out.normals.push(s.normal);
            out.colors.push(nocs_color(s.point));
            out.indices.push(s.index);
        }
        Ok(out)
    }

    /// Differentiable extraction in `z`. With `frozen`, exactly the given
    /// grid indices are used instead of re-evaluating the band test.
    pub fn samples<S: Scalar>(&self, z: [S; 3], frozen: Option<&[u32]>) -> Result<Vec<SurfaceSample<S>>> {
        Ok(self.extract(z, frozen)?.0)
    }

    fn extract<S: Scalar>(&self, z: [S; 3], frozen: Option<&[u32]>) -> Result<(Vec<SurfaceSample<S>>, usize)> {
        let zv = z.map(|c| c.value());
        let mut out = Vec::new();
        let mut dropped = 0;
        let mut emit = |index: u32, x: [f64; 3], s: S, g: [S; 3]| match project_point(x, s, g) {
            Some((point, normal)) => out.push(SurfaceSample {
                index,
                point,
                normal,
                color: nocs_color_s(point),
            }),
            None => dropped += 1,
        };
        match &self.candidates {
            Candidates::Blend {
                blend,
                indices,
                per_shape,
            } => {
                let k = blend.shapes.len();
                let w_values = blend.weight_values(zv);
                let w = blend.weights(z);
                let mut frozen_iter = frozen.map(|f| f.iter().peekable());
                for (ci, &idx) in indices.iter().enumerate() {
                    let shapes = &per_shape[ci * k..(ci + 1) * k];
                    let selected = match frozen_iter.as_mut() {
                        Some(it) => {
                            if it.peek() == Some(&&idx) {
                                it.next();
                                true
                            } else {
                                false
                            }
                        }
                        None => {
                            let s: f64 = shapes.iter().zip(&w_values).map(|(f, w)| f.0 * w).sum();
                            s.abs() <= self.band
                        }
                    };
                    if selected {
                        let (s, g) = blend_weighted(shapes, &w);
                        emit(idx, self.grid.point(idx as usize), s, g);
                    }
                }
                if let Some(mut it) = frozen_iter {
                    if it.next().is_some() {
                        return Err(Error::usage("frozen index outside the candidate set"));
                    }
                }
            }
            Candidates::Dense => {
                let mut select = |idx: usize| {
                    let x = self.grid.point(idx);
                    if frozen.is_some() || self.space.eval(x, zv).abs() <= self.band {
                        let (s, g) = self.space.eval_with_gradient(x, z);
                        emit(idx as u32, x, s, g);
                    }
                };
                match frozen {
                    Some(f) => f.iter().for_each(|&i| select(i as usize)),
                    None => (0..self.grid.len()).for_each(&mut select),
                }
            }
        }
        if out.is_empty() {
            return Err(Error::DegenerateShape);
        }
        Ok((out, dropped))
    }
}

fn blend_weighted<S: Scalar>(shapes: &[(f64, [f64; 3])], w: &[S]) -> (S, [S; 3]) {
    blend_per_shape(shapes, w)
}

/// `p = x − n·s` with `n = g/‖g‖`, as fused nodes.
fn project_point<S: Scalar>(x: [f64; 3], s: S, g: [S; 3]) -> Option<([S; 3], [S; 3])> {
    let gv = g.map(|c| c.value());
    let gn = (gv[0] * gv[0] + gv[1] * gv[1] + gv[2] * gv[2]).sqrt();
    if !(gn > MIN_GRADIENT) {
        return None;
    }
    let n = gv.map(|c| c / gn);
    let sv = s.value();
    let normal: [S; 3] = std::array::from_fn(|j| {
        let parents: Vec<(S, f64)> = (0..3)
            .map(|k| {
                let kron = if j == k { 1.0 } else { 0.0 };
                (g[k], (kron - n[j] * n[k]) / gn)
            })
            .collect();
        S::custom(n[j], &parents)
    });
    let point: [S; 3] = std::array::from_fn(|j| {
        let mut parents: Vec<(S, f64)> = vec![(s, -n[j])];
        for k in 0..3 {
            let kron = if j == k { 1.0 } else { 0.0 };
            parents.push((g[k], -sv * (kron - n[j] * n[k]) / gn));
        }
        S::custom(x[j] - n[j] * sv, &parents)
    });
    Some((point, normal))
}

/// Surface extraction with the default band (convenience wrapper).
pub fn project_surface(space: &ShapeSpace, grid: QueryGrid, z: &LatentCode) -> Result<SurfacePointSet> {
    SurfaceExtractor::new(space, grid, DEFAULT_BAND).project_surface(z)
}

/// Keeps samples whose posed normal faces the camera at the origin:
/// `n_world · p_world < 0` (strict).
pub fn backface_cull(points: &SurfacePointSet, pose: &SimilarityTransform) -> SurfacePointSet {
    let keep: Vec<usize> = (0..points.len())
        .filter(|&i| faces_camera(pose.apply(points.points[i]), pose.rotate(points.normals[i])))
        .collect();
    points.subset(&keep)
}

pub fn faces_camera(p_world: [f64; 3], n_world: [f64; 3]) -> bool {
    p_world[0] * n_world[0] + p_world[1] * n_world[1] + p_world[2] * n_world[2] < 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference;
    use crate::shapespace::{project_latent, Shape};

    fn z0() -> LatentCode {
        LatentCode::new([1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn radial_sphere_normals() {
        let space = ShapeSpace::single(Shape::sphere(0.5));
        let n = normals(&space, &[[0.3, 0.0, 0.0], [0.0, -0.7, 0.0], [0.0; 3]], &z0());
        assert_eq!(n[0], Some([1.0, 0.0, 0.0]));
        assert_eq!(n[1], Some([0.0, -1.0, 0.0]));
        assert_eq!(n[2], None);
    }

    #[test]
    fn box_corner_normal_matches_finite_differences() {
        let shape = Shape::cuboid([0.3, 0.2, 0.1]);
        let space = ShapeSpace::single(shape.clone());
        let x = [0.34, 0.23, 0.12];
        let n = normals(&space, &[x], &z0())[0].unwrap();
        let g = central_difference(|p| shape.eval([p[0], p[1], p[2]]), &x, 1e-6).unwrap();
        let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        for i in 0..3 {
            assert!((n[i] - g[i] / gn).abs() < 1e-4);
        }
    }

    #[test]
    fn disc_diameter_examples() {
        let h = 0.05;
        let pts: Vec<[f64; 3]> = (0..4)
            .flat_map(|i| (0..4).map(move |j| [i as f64 * h, j as f64 * h, 0.0]))
            .collect();
        assert!((disc_diameter(&pts).unwrap() - 0.08660).abs() < 1e-5);
        let g = QueryGrid::new(48, -0.5, 0.5).unwrap();
        assert!((g.disc_diameter() - 0.03608).abs() < 1e-5);
        let line = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.25, 0.0, 0.0]];
        assert!((disc_diameter(&line).unwrap() - 0.17321).abs() < 1e-5);
        assert!(matches!(disc_diameter(&line[..1]), Err(Error::Usage(_))));
    }

    #[test]
    fn doubling_resolution_halves_diameter() {
        let a = QueryGrid::with_resolution(24).unwrap().disc_diameter();
        let b = QueryGrid::with_resolution(48).unwrap().disc_diameter();
        assert_eq!(a, 2.0 * b);
    }

    #[test]
    fn band_projection_on_sphere() {
        let space = ShapeSpace::single(Shape::sphere(0.5));
        let set = project_surface(&space, QueryGrid::default(), &z0()).unwrap();
        assert!(!set.is_empty());
        for (p, n) in set.points.iter().zip(&set.normals) {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.5).abs() < 1e-9);
            assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn explicit_band_examples() {
        let space = ShapeSpace::single(Shape::sphere(0.5));
        let z = z0();
        let s_far = space.sdf([0.6, 0.0, 0.0], &z);
        assert!(s_far.abs() > DEFAULT_BAND);
        let x = [0.52, 0.0, 0.0];
        let s = space.sdf(x, &z);
        let n = normals(&space, &[x], &z)[0].unwrap();
        let p: [f64; 3] = std::array::from_fn(|i| x[i] - n[i] * s);
        assert!((p[0] - 0.5).abs() < 1e-15 && p[1] == 0.0 && p[2] == 0.0);
    }

    #[test]
    fn empty_band_is_degenerate() {
        let space = ShapeSpace::single(Shape::sphere(0.001));
        let grid = QueryGrid::with_resolution(8).unwrap();
        assert!(matches!(
            project_surface(&space, grid, &z0()),
            Err(Error::DegenerateShape)
        ));
    }

    #[test]
    fn frozen_extraction_reproduces_selection() {
        let space = ShapeSpace::default_cars();
        let ex = SurfaceExtractor::new(&space, QueryGrid::with_resolution(24).unwrap(), DEFAULT_BAND);
        let z = project_latent([0.2, 0.5, -0.3]).unwrap();
        let set = ex.project_surface(&z).unwrap();
        let again = ex.samples(z.as_array(), Some(&set.indices)).unwrap();
        assert_eq!(again.len(), set.len());
        for (a, p) in again.iter().zip(&set.points) {
            assert_eq!(a.point, *p);
        }
    }

    #[test]
    fn backface_tie_is_dropped() {
        assert!(faces_camera([0.0, 0.0, 5.0], [0.0, 0.0, -1.0]));
        assert!(!faces_camera([0.0, 0.0, 5.0], [1.0, 0.0, 0.0]));
    }

    #[test]
    fn point_cloud_format() {
        let space = ShapeSpace::single(Shape::sphere(0.5));
        let set = project_surface(&space, QueryGrid::with_resolution(16).unwrap(), &z0()).unwrap();
        let mut buf = Vec::new();
        set.write_ascii(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), set.len());
        assert!(text.lines().all(|l| l.split(' ').count() == 9));
    }
}
