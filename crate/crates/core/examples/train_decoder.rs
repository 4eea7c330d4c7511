//! Fits the small MLP decoder to the analytic shape space and compares it
//! with the analytic field at a few points.

use sdf_autolabel::shapespace::{
    sample_training_set, train_decoder, Backend, DecoderTrainingConfig, LatentCode, ShapeSpace,
};

fn main() -> sdf_autolabel::Result<()> {
    let space = ShapeSpace::default_cars();
    let Backend::AnalyticBlend(blend) = space.backend() else {
        unreachable!("the default space is an analytic blend");
    };
    let codes: Vec<LatentCode> = blend
        .anchors
        .iter()
        .map(|a| LatentCode::new(*a))
        .collect::<Result<_, _>>()?;
    let train = sample_training_set(&space, &codes, 2000, 0);
    let held_out = sample_training_set(&space, &codes, 500, 1);
    let config = DecoderTrainingConfig {
        epochs: 20,
        ..Default::default()
    };
    let (decoder, report) = train_decoder(&train, &held_out, &codes, &config)?;
    println!(
        "{} parameters, {} training samples",
        decoder.parameter_count(),
        train.len()
    );
    for (epoch, loss) in report.epoch_loss.iter().enumerate().step_by(5) {
        println!("epoch {epoch:>3}: clamped L1 {loss:.5}");
    }
    println!("held-out clamped MAE {:.5}", report.held_out_mae);

    let learned = ShapeSpace::decoder(decoder);
    let z = &codes[0];
    for x in [[0.0, 0.0, 0.0], [0.3, -0.1, 0.0], [0.0, 0.0, 0.4]] {
        println!(
            "x {:?}: analytic {:+.4}, decoder {:+.4}",
            x,
            space.sdf(x, z),
            learned.sdf(x, z)
        );
    }
    Ok(())
}
