//! Writes the default run configuration as TOML and reads back an
//! override file.

use sdf_autolabel::config::RunConfig;

fn main() -> sdf_autolabel::Result<()> {
    let defaults = RunConfig::default();
    println!("{}", defaults.to_toml()?);
    let tuned = RunConfig::from_toml("seed = 3\n[optimizer]\niterations = 20\n[verification]\nmin_mask_iou = 0.6\n")?;
    let a = tuned.autolabel();
    println!(
        "# override: seed {}, {} iterations, mask IoU gate {}",
        a.seed, a.schedule.iterations, a.verification.min_mask_iou
    );
    match RunConfig::from_toml("[optimizer]\nlearning_rate = 1.0\n") {
        Err(e) => println!("# rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are rejected"),
    }
    Ok(())
}
