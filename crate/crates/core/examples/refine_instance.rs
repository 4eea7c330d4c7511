//! Labels one synthetic instance end to end with a noisy oracle and prints
//! the refinement loss trace as CSV.

use sdf_autolabel::alignment::{write_trace, RefineProblem, Refiner};
use sdf_autolabel::isosurface::{QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use sdf_autolabel::pipeline::{
    generate_dataset, oracle_css, AutolabelConfig, Difficulty, OracleNoise, PredictContext, SceneConfig,
};
use sdf_autolabel::shapespace::ShapeSpace;

fn main() -> sdf_autolabel::Result<()> {
    let space = ShapeSpace::default_cars();
    let extractor = SurfaceExtractor::new(&space, QueryGrid::default(), DEFAULT_BAND);
    let config = SceneConfig {
        scenes: 2,
        ..Default::default()
    };
    let dataset = generate_dataset(&config, &space, 1)?;
    let inst = dataset
        .instances()
        .find(|i| i.difficulty == Difficulty::Easy)
        .expect("fixture has an easy instance");
    let autolabel = AutolabelConfig::default();
    let ctx = PredictContext {
        extractor: &extractor,
        camera: dataset.camera,
        patch_size: autolabel.patch_size,
        render: autolabel.render.clone(),
        loop_index: 0,
    };
    let noise = OracleNoise {
        nocs_sigma: 0.05,
        pixel_dropout: 0.1,
        latent_angle_deg: 10.0,
    };
    let pred = oracle_css(inst, &ctx, &noise, 7)?;

    // start from a shifted and turned copy of the truth
    let start = sdf_autolabel::geometry::SimilarityTransform::from_yaw(
        inst.pose.yaw() + 0.15,
        [
            inst.pose.translation[0] + 0.25,
            inst.pose.translation[1],
            inst.pose.translation[2] - 0.2,
        ],
        inst.pose.scale * 0.95,
    );
    let refiner = Refiner::new(RefineProblem {
        extractor: &extractor,
        camera: pred.camera,
        predicted: &pred.nocs,
        lidar: &inst.lidar,
        render: autolabel.render.clone(),
    });
    let result = refiner.run(&start, &pred.latent, &autolabel.schedule)?;
    write_trace(std::io::stdout().lock(), &result.trace)?;
    eprintln!(
        "instance {}: translation error {:.3} m -> {:.3} m, yaw error {:.2}° -> {:.2}°",
        inst.id,
        start.translation_distance_to(&inst.pose),
        result.pose.translation_distance_to(&inst.pose),
        (start.yaw() - inst.pose.yaw()).to_degrees().abs(),
        sdf_autolabel::geometry::wrap_angle(result.pose.yaw() - inst.pose.yaw())
            .to_degrees()
            .abs()
    );
    Ok(())
}
