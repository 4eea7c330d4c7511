//! Tape gradients against central differences for every differentiable
//! stage and for the composed refinement loss.

use sdf_autolabel::alignment::OptimizerSchedule;
use sdf_autolabel::gradcheck::{check_composed, CheckModule};

fn main() -> sdf_autolabel::Result<()> {
    for module in CheckModule::ALL {
        let c = module.run()?;
        println!(
            "{:<12} {:>3} inputs, max relative error {:.2e}",
            format!("{module:?}"),
            c.analytic.len(),
            c.max_relative_error
        );
    }
    for (name, use_2d, use_3d) in [("2D only", true, false), ("3D only", false, true)] {
        let schedule = OptimizerSchedule {
            use_2d,
            use_3d,
            ..Default::default()
        };
        let c = check_composed(32, 1e-5, &schedule)?;
        println!(
            "{name:<12} {:>3} inputs, max relative error {:.2e}",
            c.analytic.len(),
            c.max_relative_error
        );
    }
    Ok(())
}
