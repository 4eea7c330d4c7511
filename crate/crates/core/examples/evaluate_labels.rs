//! Cuboid overlap measures and average precision of an autolabel pool
//! against the ground truth it was produced from.

use sdf_autolabel::alignment::OptimizerSchedule;
use sdf_autolabel::isosurface::{QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use sdf_autolabel::metrics::{bev_iou, center_distance, evaluate_pool, ground_truth_cuboids, iou_3d, Cuboid, Matcher};
use sdf_autolabel::pipeline::{
    generate_dataset, run_autolabel, AutolabelConfig, Difficulty, OracleConfig, OracleCss, SceneConfig,
};
use sdf_autolabel::shapespace::ShapeSpace;

fn main() -> sdf_autolabel::Result<()> {
    let a = Cuboid::new([0.0, 0.0, 10.0], 4.2, 1.8, 1.5, 0.0)?;
    let b = Cuboid::new([0.4, 0.1, 10.3], 4.0, 1.7, 1.4, 0.2)?;
    println!(
        "BEV IoU {:.3}, 3D IoU {:.3}, center distance {:.3} m",
        bev_iou(&a, &b),
        iou_3d(&a, &b),
        center_distance(&a, &b)
    );

    let space = ShapeSpace::default_cars();
    let config = SceneConfig {
        scenes: 2,
        ..Default::default()
    };
    let dataset = generate_dataset(&config, &space, 4)?;
    let mut oracle = OracleCss::new(OracleConfig::default())?;
    let autolabel = AutolabelConfig {
        schedule: OptimizerSchedule {
            iterations: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = run_autolabel(&dataset, &space, &mut oracle, Difficulty::Moderate, 2, &autolabel, 1)?;
    let extractor = SurfaceExtractor::new(&space, QueryGrid::default(), DEFAULT_BAND);
    let truth = ground_truth_cuboids(&dataset, &extractor, Difficulty::Moderate)?;
    let matchers = [
        Matcher::Bev(0.5),
        Matcher::Iou3d(0.5),
        Matcher::Ns(0.5),
        Matcher::Ns(1.0),
    ];
    println!("{:<8} {:>6} {:>5} {:>5} {:>4}", "metric", "AP", "pred", "gt", "tp");
    for row in evaluate_pool(&run.pool, &truth, &matchers) {
        println!(
            "{:<8} {:>6.3} {:>5} {:>5} {:>4}",
            row.metric, row.ap, row.predictions, row.ground_truth, row.true_positives
        );
    }
    Ok(())
}
