//! Two curriculum loops over a small synthetic dataset with the oracle
//! predictor; prints per-instance records and the resulting pool size.

use sdf_autolabel::alignment::OptimizerSchedule;
use sdf_autolabel::pipeline::{
    generate_dataset, run_autolabel, write_records, AutolabelConfig, Difficulty, OracleConfig, OracleCss, OracleNoise,
    SceneConfig,
};
use sdf_autolabel::shapespace::ShapeSpace;

fn main() -> sdf_autolabel::Result<()> {
    let space = ShapeSpace::default_cars();
    let config = SceneConfig {
        scenes: 3,
        ..Default::default()
    };
    let dataset = generate_dataset(&config, &space, 2)?;
    let mut oracle = OracleCss::new(OracleConfig {
        schedule: vec![
            OracleNoise {
                nocs_sigma: 0.08,
                pixel_dropout: 0.1,
                latent_angle_deg: 15.0,
            },
            OracleNoise {
                nocs_sigma: 0.03,
                pixel_dropout: 0.1,
                latent_angle_deg: 5.0,
            },
        ],
        seed: 0,
    })?;
    let autolabel = AutolabelConfig {
        schedule: OptimizerSchedule {
            iterations: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = run_autolabel(&dataset, &space, &mut oracle, Difficulty::Moderate, 2, &autolabel, 1)?;
    for outcome in &run.loops {
        println!(
            "loop {} at {:?}: {} instances, verified fraction {:.2}",
            outcome.loop_index,
            outcome.stage,
            outcome.labels.len(),
            outcome.verified_fraction()
        );
        write_records(std::io::stdout().lock(), &outcome.records)?;
    }
    println!("pool holds {} verified labels", run.pool.len());
    Ok(())
}
