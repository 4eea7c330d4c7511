//! The analytic car shape space: SDF values along the length axis for the
//! anchor shapes and a blend between them.

use sdf_autolabel::shapespace::{project_latent, Backend, ShapeSpace};

fn main() -> sdf_autolabel::Result<()> {
    let space = ShapeSpace::default_cars();
    let Backend::AnalyticBlend(blend) = space.backend() else {
        unreachable!("the default space is an analytic blend");
    };
    println!("{} anchor shapes, sharpness {}", blend.anchors.len(), blend.sharpness);

    let mut codes: Vec<[f64; 3]> = blend.anchors.clone();
    codes.push([0.5, 0.5, 0.5]);
    for raw in codes {
        let z = project_latent(raw)?;
        let weights: Vec<String> = blend
            .weight_values(z.as_array())
            .iter()
            .map(|w| format!("{w:.2}"))
            .collect();
        let profile: Vec<String> = (-5..=5)
            .map(|i| format!("{:+.3}", space.sdf([i as f64 * 0.1, 0.0, 0.0], &z)))
            .collect();
        println!("z = {:.2?} weights [{}]", z.as_array(), weights.join(", "));
        println!("  sdf along x: {}", profile.join(" "));
    }
    Ok(())
}
