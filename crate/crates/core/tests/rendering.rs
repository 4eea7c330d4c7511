use sdf_autolabel::autodiff::{grad_check, sum, Var};
use sdf_autolabel::geometry::SimilarityTransform;
use sdf_autolabel::isosurface::{backface_cull, normals, project_surface, QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use sdf_autolabel::renderer::{
    composite_weights, posed_discs, rasterize, render, write_depth, write_nocs_ppm, Camera, Compositing, Disc,
    RenderConfig, RenderOutput,
};
use sdf_autolabel::shapespace::{project_latent, BlendSpace, LatentCode, Shape, ShapeSpace};
use sha2::{Digest, Sha256};

fn z_any() -> LatentCode {
    LatentCode::new([1.0, 0.0, 0.0]).unwrap()
}

fn sphere_render(resolution: usize, config: &RenderConfig) -> RenderOutput {
    let space = ShapeSpace::single(Shape::sphere(0.5));
    let set = project_surface(&space, QueryGrid::with_resolution(resolution).unwrap(), &z_any()).unwrap();
    let pose = SimilarityTransform::from_yaw(0.0, [0.0, 0.0, 5.0], 1.0);
    render(&set, &pose, &Camera::square(300.0, 128), config).unwrap()
}

/// Background components that do not reach the image border.
fn hole_count(mask: &[f64], width: usize, height: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut holes = 0;
    for start in 0..mask.len() {
        if seen[start] || mask[start] > 0.0 {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut touches_border = false;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            if r == 0 || c == 0 || r + 1 == height || c + 1 == width {
                touches_border = true;
            }
            let mut push = |j: usize| {
                if !seen[j] && mask[j] <= 0.0 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - width);
            }
            if r + 1 < height {
                push(i + width);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < width {
                push(i + 1);
            }
        }
        if !touches_border {
            holes += 1;
        }
    }
    holes
}

fn silhouette_iou(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.mask.iter().zip(&b.mask) {
        inter += (*x > 0.0 && *y > 0.0) as usize;
        union += (*x > 0.0 || *y > 0.0) as usize;
    }
    inter as f64 / union as f64
}

#[test]
fn sphere_silhouette_is_a_filled_disc() {
    let out = sphere_render(48, &RenderConfig::default());
    assert!(!out.empty);
    assert_eq!(hole_count(&out.mask, out.width, out.height), 0);
    // projected radius 300 · 0.5 / √(5² − 0.5²)
    let r = 300.0 * 0.5 / (25.0f64 - 0.25).sqrt();
    let area = out.foreground_pixels().len() as f64;
    let expected = std::f64::consts::PI * r * r;
    assert!((area - expected).abs() / expected < 0.05, "{area} vs {expected}");
}

#[test]
fn coarse_grid_silhouette_agrees_with_default() {
    let config = RenderConfig::default();
    let iou = silhouette_iou(&sphere_render(24, &config), &sphere_render(48, &config));
    assert!(iou >= 0.95, "{iou}");
}

#[test]
fn car_renders_are_watertight_and_normalized() {
    let space = ShapeSpace::default_cars();
    let ex = SurfaceExtractor::new(&space, QueryGrid::default(), DEFAULT_BAND);
    let camera = Camera::square(260.0, 96);
    for (k, z) in [[0.0, 0.6, 0.8], [0.8, 0.0, -0.6], [-0.48, -0.6, 0.64]]
        .into_iter()
        .enumerate()
    {
        let set = ex.project_surface(&LatentCode::new(z).unwrap()).unwrap();
        let pose = SimilarityTransform::from_yaw(0.4 + k as f64, [0.1, 0.2, 12.0], 4.5);
        let out = render(&set, &pose, &camera, &RenderConfig::default()).unwrap();
        assert_eq!(hole_count(&out.mask, out.width, out.height), 0, "latent {z:?}");
        for p in out.foreground_pixels() {
            let total: f64 = out.contributions_at(p).iter().map(|c| c.weight).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(out.depth[p] > 0.0);
        }
    }
}

#[test]
fn nearest_disc_weight_grows_with_sigma() {
    let out = sphere_render(24, &RenderConfig::default());
    let sigmas = [1.0, 10.0, 40.0, 200.0, 1e4];
    for p in out.foreground_pixels() {
        let c = out.contributions_at(p);
        if c.len() < 2 {
            continue;
        }
        let depths: Vec<f64> = c.iter().map(|c| c.depth).collect();
        let masks: Vec<f64> = c.iter().map(|c| c.mask).collect();
        let nearest = (0..c.len()).min_by(|&i, &j| depths[i].total_cmp(&depths[j])).unwrap();
        let mut prev = 0.0;
        for sigma in sigmas {
            let config = RenderConfig {
                sigma,
                ..Default::default()
            };
            let w = composite_weights(&depths, &masks, &config)[nearest];
            assert!(w >= prev - 1e-15, "pixel {p}: {w} < {prev} at sigma {sigma}");
            prev = w;
        }
    }
}

#[test]
fn opaque_limit_shows_the_nearest_disc() {
    let discs: Vec<Disc> = (0..5)
        .map(|i| Disc {
            center: [0.01 * i as f64, -0.008 * i as f64, 2.0 + 0.03 * i as f64],
            normal: [0.0, 0.0, -1.0],
            color: [0.1 * i as f64, 1.0 - 0.2 * i as f64, 0.5],
        })
        .collect();
    let camera = Camera::square(400.0, 48);
    let config = RenderConfig {
        sigma: 1e4,
        ..Default::default()
    };
    let out = rasterize(&discs, 0.1, &camera, &config);
    let mut overlapped = 0;
    for p in out.foreground_pixels() {
        let c = out.contributions_at(p);
        let front = c.iter().min_by(|a, b| a.depth.total_cmp(&b.depth)).unwrap();
        let want = discs[front.disc as usize].color;
        for k in 0..3 {
            assert!((out.nocs[p][k] - want[k]).abs() < 1e-3, "pixel {p}");
        }
        overlapped += (c.len() > 1) as usize;
    }
    assert!(overlapped > 50);

    // the literal score −D·σ·M favours rim discs (M → 0) whatever their depth
    let literal = rasterize(
        &discs,
        0.1,
        &camera,
        &RenderConfig {
            compositing: Compositing::Literal,
            ..config
        },
    );
    let wrong = literal
        .foreground_pixels()
        .into_iter()
        .filter(|&p| {
            let c = literal.contributions_at(p);
            let front = c.iter().min_by(|a, b| a.depth.total_cmp(&b.depth)).unwrap();
            (literal.nocs[p][1] - discs[front.disc as usize].color[1]).abs() > 1e-3
        })
        .count();
    assert!(wrong > 0);
}

#[test]
fn culling_keeps_the_visible_cap() {
    let space = ShapeSpace::single(Shape::sphere(0.5));
    let set = project_surface(&space, QueryGrid::default(), &z_any()).unwrap();
    // radius 0.25 m at 5 m: the visible cap is (1 − r/d)/2 of the sphere
    let pose = SimilarityTransform::from_yaw(0.0, [0.0, 0.0, 5.0], 0.5);
    let kept = backface_cull(&set, &pose).len() as f64 / set.len() as f64;
    assert!((0.45..=0.55).contains(&kept), "{kept}");
    assert!((kept - 0.5 * (1.0 - 0.25 / 5.0)).abs() < 0.02, "{kept}");
}

#[test]
fn exact_primitive_projection_and_band_membership() {
    for shape in [Shape::sphere(0.45), Shape::cuboid([0.4, 0.2, 0.15])] {
        let space = ShapeSpace::single(shape.clone());
        let grid = QueryGrid::default();
        let set = project_surface(&space, grid.clone(), &z_any()).unwrap();
        for p in &set.points {
            assert!(shape.eval(*p).abs() < 1e-9, "{shape:?} at {p:?}");
        }
        let xs: Vec<[f64; 3]> = (0..grid.len()).map(|i| grid.point(i)).collect();
        let ns = normals(&space, &xs, &z_any());
        let expected: Vec<u32> = (0..grid.len())
            .filter(|&i| shape.eval(xs[i]).abs() <= DEFAULT_BAND && ns[i].is_some())
            .map(|i| i as u32)
            .collect();
        assert_eq!(set.indices, expected);
    }
}

fn residual_stats(space: &ShapeSpace, ex: &SurfaceExtractor<'_>, latents: &[[f64; 3]]) -> (f64, f64) {
    let mut worst_median: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for z in latents {
        let z = project_latent(*z).unwrap();
        let set = ex.project_surface(&z).unwrap();
        let mut r: Vec<f64> = set.points.iter().map(|p| space.sdf(*p, &z).abs()).collect();
        r.sort_by(f64::total_cmp);
        worst_median = worst_median.max(r[r.len() / 2]);
        worst = worst.max(r[r.len() - 1]);
    }
    (worst_median, worst)
}

// Single-step projection of a field whose gradient norm is not 1. The
// median residual stays below 0.1 × band; the maxima are measured values.
#[test]
fn blended_projection_residual_is_pinned() {
    let latents = [[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.2, 1.0, 0.4], [0.5, 0.1, 0.9]];
    let primitives = ShapeSpace::blend(
        BlendSpace::new(
            vec![Shape::sphere(0.4), Shape::cuboid([0.35, 0.2, 0.2]), Shape::sphere(0.3)],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            8.0,
        )
        .unwrap(),
    );
    let ex = SurfaceExtractor::new(&primitives, QueryGrid::default(), DEFAULT_BAND);
    let (median, max) = residual_stats(&primitives, &ex, &latents);
    assert!(median < 0.1 * DEFAULT_BAND, "{median}");
    assert!(max < 0.008, "{max}");

    let cars = ShapeSpace::default_cars();
    let ex = SurfaceExtractor::new(&cars, QueryGrid::default(), DEFAULT_BAND);
    let (median, max) = residual_stats(
        &cars,
        &ex,
        &[[0.0, 0.6, 0.8], [1.0, 1.0, 1.0], [-0.6, 0.0, 0.8], [0.3, -0.9, 0.3]],
    );
    assert!(median < 0.1 * DEFAULT_BAND, "{median}");
    assert!(max < 0.035, "{max}");
}

#[test]
fn surface_points_are_differentiable_in_the_latent() {
    let space = ShapeSpace::default_cars();
    let ex = SurfaceExtractor::new(&space, QueryGrid::with_resolution(24).unwrap(), DEFAULT_BAND);
    let z0 = [0.48, 0.6, 0.64];
    let frozen = ex.project_surface(&LatentCode::new(z0).unwrap()).unwrap().indices;
    let check = grad_check(
        |_, z| {
            let samples = ex.samples([z[0], z[1], z[2]], Some(&frozen)).unwrap();
            let norms: Vec<Var<'_>> = samples
                .iter()
                .map(|s| (s.point[0] * s.point[0] + s.point[1] * s.point[1] + s.point[2] * s.point[2]).sqrt())
                .collect();
            sum(&norms)
        },
        &z0,
        1e-6,
    )
    .unwrap();
    assert!(check.max_relative_error < 1e-3, "{check:?}");
}

#[test]
fn golden_render_is_pinned() {
    let space = ShapeSpace::default_cars();
    let ex = SurfaceExtractor::new(&space, QueryGrid::default(), DEFAULT_BAND);
    let set = ex.project_surface(&LatentCode::new([0.0, 0.6, 0.8]).unwrap()).unwrap();
    let pose = SimilarityTransform::from_yaw(0.7, [0.0, 0.3, 9.0], 4.6);
    let out = render(&set, &pose, &Camera::square(90.0, 64), &RenderConfig::default()).unwrap();
    let mut bytes = Vec::new();
    write_nocs_ppm(&out, &mut bytes).unwrap();
    write_depth(&out, &mut bytes).unwrap();
    let digest = format!("{:x}", Sha256::digest(&bytes));
    assert_eq!(
        digest,
        "dec15c56d91df5ee3ece62d796ae86081d7f917caf4458b90b37311fca74a7e0"
    );
}

#[test]
fn render_is_bitwise_reproducible() {
    let a = sphere_render(32, &RenderConfig::default());
    let b = sphere_render(32, &RenderConfig::default());
    assert_eq!(a.nocs, b.nocs);
    assert_eq!(
        a.depth.iter().map(|d| d.to_bits()).collect::<Vec<_>>(),
        b.depth.iter().map(|d| d.to_bits()).collect::<Vec<_>>()
    );
    // the disc set itself is ordered by grid index
    let space = ShapeSpace::single(Shape::sphere(0.5));
    let set = project_surface(&space, QueryGrid::with_resolution(32).unwrap(), &z_any()).unwrap();
    let (_, kept) = posed_discs(&set, &SimilarityTransform::from_yaw(0.0, [0.0, 0.0, 5.0], 1.0));
    assert!(kept.windows(2).all(|w| w[0] < w[1]));
}
