//! NOCS correspondences and RANSAC-Procrustes initialization on a posed
//! car whose LIDAR colors are read from the exact NOCS of each point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdf_autolabel::alignment::{nocs_correspondences, ransac_iterations, ransac_procrustes, RansacConfig};
use sdf_autolabel::geometry::SimilarityTransform;
use sdf_autolabel::isosurface::{QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use sdf_autolabel::shapespace::{nocs_color, LatentCode, ShapeSpace};

fn main() -> sdf_autolabel::Result<()> {
    let space = ShapeSpace::default_cars();
    let extractor = SurfaceExtractor::new(&space, QueryGrid::default(), DEFAULT_BAND);
    let z = LatentCode::new([0.6, 0.0, 0.8])?;
    let model = extractor.project_surface(&z)?;
    let truth = SimilarityTransform::from_yaw(-0.4, [2.0, 1.5, 14.0], 4.3);

    // a sparse "scan": every 9th surface point, 25% of them given a wrong color
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut scene, mut colors) = (Vec::new(), Vec::new());
    for p in model.points.iter().step_by(9) {
        scene.push(truth.apply(*p));
        let c = if rng.random_bool(0.25) {
            [rng.random(), rng.random(), rng.random()]
        } else {
            nocs_color(*p)
        };
        colors.push(c);
    }
    let pairs = nocs_correspondences(&model.colors, &colors, 0.1)?;
    let a: Vec<[f64; 3]> = pairs.pairs.iter().map(|p| model.points[p.model]).collect();
    let b: Vec<[f64; 3]> = pairs.pairs.iter().map(|p| scene[p.scene]).collect();
    let config = RansacConfig::default();
    let k = ransac_iterations(config.success_probability, config.inlier_ratio, config.sample_size)?;
    let r = ransac_procrustes(&a, &b, &config)?;
    println!(
        "{} scene points, {} mutual NOCS pairs, k = {k}",
        scene.len(),
        pairs.len()
    );
    println!("{} inliers at {} m", r.inliers.len(), config.inlier_threshold);
    println!(
        "translation error {:.4} m, rotation error {:.3}°, scale {:.3} (true {:.3})",
        r.transform.translation_distance_to(&truth),
        r.transform.rotation_angle_to(&truth).to_degrees(),
        r.transform.scale,
        truth.scale
    );
    Ok(())
}
