use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdf_autolabel::alignment::{
    nocs_correspondences, ransac_procrustes, NocsMap, OptimizerSchedule, RansacConfig, RefineProblem, RefineResult,
    Refiner,
};
use sdf_autolabel::geometry::{exp_so3, yaw_rotation, SimilarityTransform};
use sdf_autolabel::gradcheck::check_composed;
use sdf_autolabel::isosurface::{QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use sdf_autolabel::pipeline::{
    generate_dataset, oracle_css, CssPrediction, Dataset, Difficulty, OracleNoise, PredictContext, SceneConfig,
    SceneInstance,
};
use sdf_autolabel::renderer::RenderConfig;
use sdf_autolabel::shapespace::ShapeSpace;

fn space() -> &'static ShapeSpace {
    static SPACE: OnceLock<ShapeSpace> = OnceLock::new();
    SPACE.get_or_init(ShapeSpace::default_cars)
}

fn extractor() -> &'static SurfaceExtractor<'static> {
    static EX: OnceLock<SurfaceExtractor<'static>> = OnceLock::new();
    EX.get_or_init(|| SurfaceExtractor::new(space(), QueryGrid::default(), DEFAULT_BAND))
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let config = SceneConfig {
            scenes: 4,
            ..Default::default()
        };
        generate_dataset(&config, space(), 33).unwrap()
    })
}

fn ctx() -> PredictContext<'static> {
    PredictContext {
        extractor: extractor(),
        camera: dataset().camera,
        patch_size: 64,
        render: RenderConfig::default(),
        loop_index: 0,
    }
}

/// Unoccluded, well-observed instances.
fn fixtures(n: usize) -> Vec<&'static SceneInstance> {
    let mut easy: Vec<_> = dataset()
        .instances()
        .filter(|i| i.difficulty == Difficulty::Easy && i.lidar.len() >= 150)
        .collect();
    easy.sort_by_key(|i| std::cmp::Reverse(i.lidar.len()));
    assert!(easy.len() >= n, "only {} easy fixtures", easy.len());
    easy.truncate(n);
    easy
}

fn prediction(inst: &SceneInstance, noise: OracleNoise) -> CssPrediction {
    oracle_css(inst, &ctx(), &noise, 17).unwrap()
}

fn refine(
    inst: &SceneInstance,
    pred: &CssPrediction,
    init: &SimilarityTransform,
    schedule: &OptimizerSchedule,
) -> RefineResult {
    let refiner = Refiner::new(RefineProblem {
        extractor: extractor(),
        camera: pred.camera,
        predicted: &pred.nocs,
        lidar: &inst.lidar,
        render: RenderConfig::default(),
    });
    refiner.run(init, &pred.latent, schedule).unwrap()
}

fn perturbed(pose: &SimilarityTransform, seed: u64) -> SimilarityTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let rotation = yaw_rotation(sign * 10f64.to_radians()) * pose.rotation_matrix();
    let t = pose.translation_vector() + Vector3::new(0.3 * dir.cos(), 0.0, 0.3 * dir.sin());
    SimilarityTransform::new(rotation, t, pose.scale)
}

fn assert_on_manifold(r: &RefineResult) {
    let m = r.pose.rotation_matrix();
    let err = (m.transpose() * m - nalgebra::Matrix3::identity()).abs().max();
    assert!(err < 1e-6, "orthonormality {err}");
    assert!(m.determinant() > 0.0);
    let z = r.latent.as_array();
    assert!(((z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt() - 1.0).abs() < 1e-12);
}

#[test]
fn composed_gradient_on_a_small_patch() {
    let c = check_composed(16, 1e-4, &OptimizerSchedule::default()).unwrap();
    assert!(c.max_relative_error < 1e-3, "{c:?}");
}

#[test]
fn single_term_gradients() {
    for (use_2d, use_3d) in [(true, false), (false, true)] {
        let schedule = OptimizerSchedule {
            use_2d,
            use_3d,
            ..Default::default()
        };
        let c = check_composed(32, 1e-5, &schedule).unwrap();
        assert!(c.max_relative_error < 1e-3, "2d {use_2d} 3d {use_3d}: {c:?}");
        // the latent enters both terms; a vanishing derivative would mean it was cut off
        assert!(c.analytic[4..].iter().any(|g| g.abs() > 1e-6), "{c:?}");
    }
}

#[test]
fn ground_truth_is_a_fixed_point() {
    for inst in fixtures(2) {
        let pred = prediction(inst, OracleNoise::default());
        let r = refine(inst, &pred, &inst.pose, &OptimizerSchedule::default());
        assert!(r.aborted.is_none());
        let first = r.trace[0].loss_2d + r.trace[0].loss_3d;
        assert!(r.final_loss() <= first + 1e-12, "{} > {first}", r.final_loss());
        let drift = r.pose.translation_distance_to(&inst.pose);
        let turn = r.pose.rotation_angle_to(&inst.pose).to_degrees();
        assert!(drift < 0.02 && turn < 0.5, "{}: {drift} m {turn}°", inst.id);
        assert_on_manifold(&r);
    }
}

#[test]
fn recovers_from_a_perturbed_start() {
    for (k, inst) in fixtures(3).into_iter().enumerate() {
        let pred = prediction(inst, OracleNoise::default());
        let start = perturbed(&inst.pose, k as u64);
        let r = refine(inst, &pred, &start, &OptimizerSchedule::default());
        let err = r.pose.translation_distance_to(&inst.pose);
        let yaw = sdf_autolabel::geometry::wrap_angle(r.pose.yaw() - inst.pose.yaw())
            .abs()
            .to_degrees();
        assert!(err < 0.1 && yaw < 2.0, "{}: {err} m {yaw}°", inst.id);
        assert_on_manifold(&r);
    }
}

#[test]
fn noisy_oracle_loss_decreases() {
    let inst = fixtures(1)[0];
    let pred = prediction(
        inst,
        OracleNoise {
            nocs_sigma: 0.05,
            ..Default::default()
        },
    );
    let r = refine(inst, &pred, &perturbed(&inst.pose, 7), &OptimizerSchedule::default());
    assert!(r.final_loss() < r.trace[0].loss_2d + r.trace[0].loss_3d);
    assert_eq!(r.trace.len(), 51);
}

#[test]
fn loss_is_the_plain_sum() {
    let inst = fixtures(1)[0];
    let pred = prediction(inst, OracleNoise::default());
    let refiner = Refiner::new(RefineProblem {
        extractor: extractor(),
        camera: pred.camera,
        predicted: &pred.nocs,
        lidar: &inst.lidar,
        render: RenderConfig::default(),
    });
    let start = perturbed(&inst.pose, 3);
    let schedule = OptimizerSchedule {
        iterations: 1,
        ..Default::default()
    };
    let (l2, l3) = refiner.loss(&start, pred.latent.as_array(), &schedule).unwrap();
    let r = refiner.run(&start, &pred.latent, &schedule).unwrap();
    assert!(l2.count > 0 && l3.count > 0);
    // tape and plain evaluation of the same terms agree to rounding
    approx::assert_relative_eq!(r.trace[0].loss_2d, l2.value, max_relative = 1e-12);
    approx::assert_relative_eq!(r.trace[0].loss_3d, l3.value, max_relative = 1e-12);
    assert_eq!(r.final_loss(), r.trace[1].loss_2d + r.trace[1].loss_3d);
}

#[test]
fn rotation_stays_orthonormal_every_step() {
    let inst = fixtures(1)[0];
    let pred = prediction(
        inst,
        OracleNoise {
            nocs_sigma: 0.1,
            latent_angle_deg: 20.0,
            ..Default::default()
        },
    );
    let mut pose = perturbed(&inst.pose, 11);
    let mut latent = pred.latent;
    for _ in 0..8 {
        let schedule = OptimizerSchedule {
            iterations: 1,
            ..Default::default()
        };
        let pred = CssPrediction { latent, ..pred.clone() };
        let r = refine(inst, &pred, &pose, &schedule);
        assert_on_manifold(&r);
        pose = r.pose;
        latent = r.latent;
    }
    // many composed increments without re-orthonormalization
    let mut m = inst.pose.rotation_matrix();
    for i in 0..100_000 {
        let a = i as f64 * 0.37;
        m *= exp_so3([0.01 * a.sin(), 0.02 * a.cos(), 0.015]);
    }
    assert!((m.transpose() * m - nalgebra::Matrix3::identity()).abs().max() < 1e-6);
}

#[test]
fn two_dimensional_evidence_alone_places_boxes_worse() {
    let mut err_2d = 0.0;
    let mut err_3d = 0.0;
    for (k, inst) in fixtures(3).into_iter().enumerate() {
        let pred = prediction(
            inst,
            OracleNoise {
                nocs_sigma: 0.05,
                ..Default::default()
            },
        );
        let start = perturbed(&inst.pose, 20 + k as u64);
        for (use_2d, use_3d, acc) in [(true, false, &mut err_2d), (false, true, &mut err_3d)] {
            let schedule = OptimizerSchedule {
                use_2d,
                use_3d,
                ..Default::default()
            };
            *acc += refine(inst, &pred, &start, &schedule)
                .pose
                .translation_distance_to(&inst.pose);
        }
    }
    assert!(err_2d > err_3d, "2d {err_2d} vs 3d {err_3d}");
}

#[test]
fn exact_oracle_correspondences_are_geometrically_correct() {
    for inst in fixtures(3) {
        let pred = prediction(inst, OracleNoise::default());
        let model = extractor().project_surface(&pred.latent).unwrap();
        let cam = &pred.camera;
        let (mut points, mut colors) = (Vec::new(), Vec::new());
        for l in &inst.lidar {
            if let Some(px) = cam.project(*l).and_then(|uv| cam.pixel_at(uv)) {
                if pred.nocs.valid[px] {
                    points.push(*l);
                    colors.push(pred.nocs.colors[px]);
                }
            }
        }
        let pairs = nocs_correspondences(&model.colors, &colors, 0.1).unwrap();
        let inlier = RansacConfig::default().inlier_threshold;
        let correct = pairs
            .pairs
            .iter()
            .filter(|p| {
                let a = inst.pose.apply(model.points[p.model]);
                let b = points[p.scene];
                (Vector3::from(a) - Vector3::from(b)).norm() < inlier
            })
            .count();
        let share = correct as f64 / pairs.len() as f64;
        assert!(share >= 0.9, "{}: {correct}/{}", inst.id, pairs.len());
    }
}

#[test]
fn ransac_survives_gross_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = SimilarityTransform::new(
        yaw_rotation(0.8) * exp_so3([0.05, 0.0, -0.03]),
        Vector3::new(1.5, 0.7, 12.0),
        4.2,
    );
    let a: Vec<[f64; 3]> = (0..50)
        .map(|_| {
            [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.25..0.25),
            ]
        })
        .collect();
    let b: Vec<[f64; 3]> = a
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = truth.apply(*p);
            if i % 10 < 3 {
                [
                    q[0] + rng.random_range(1.0..3.0),
                    q[1] - rng.random_range(1.0..3.0),
                    q[2] + rng.random_range(-3.0..3.0),
                ]
            } else {
                q
            }
        })
        .collect();
    let r = ransac_procrustes(&a, &b, &RansacConfig::default()).unwrap();
    assert!(r.transform.translation_distance_to(&truth) < 0.05);
    assert!(r.transform.rotation_angle_to(&truth).to_degrees() < 2.0);
    assert_eq!(r.inliers.len(), 35);
}

#[test]
fn nocs_map_from_render_marks_only_foreground() {
    let inst = fixtures(1)[0];
    let pred = prediction(inst, OracleNoise::default());
    let surface = extractor().project_surface(&inst.latent).unwrap();
    let out = sdf_autolabel::renderer::render(&surface, &inst.pose, &pred.camera, &RenderConfig::default()).unwrap();
    let map = NocsMap::from_render(&out);
    assert_eq!(map.valid_count(), out.foreground_pixels().len());
    assert!(pred.nocs.valid_count() <= map.valid_count());
}
