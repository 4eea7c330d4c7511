//! Narrow-band surface points of one car: counts, residuals and the disc
//! diameter used for rendering. Pass a path to write the points as text.

use sdf_autolabel::isosurface::{QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use sdf_autolabel::shapespace::{LatentCode, ShapeSpace};

fn main() -> sdf_autolabel::Result<()> {
    let space = ShapeSpace::default_cars();
    let grid = QueryGrid::default();
    println!(
        "grid {}³, spacing {:.4}, disc diameter {:.4}",
        grid.resolution(),
        grid.spacing(),
        grid.disc_diameter()
    );
    let extractor = SurfaceExtractor::new(&space, grid, DEFAULT_BAND);
    let z = LatentCode::new([0.0, 0.6, 0.8])?;
    let set = extractor.project_surface(&z)?;

    let mut residual: Vec<f64> = set.points.iter().map(|p| space.sdf(*p, &z).abs()).collect();
    residual.sort_by(f64::total_cmp);
    println!("{} surface points", set.len());
    println!(
        "|sdf| median {:.2e}, max {:.2e}",
        residual[residual.len() / 2],
        residual[residual.len() - 1]
    );
    if let Some((lo, hi)) = set.bounds() {
        println!("extent {:.3?} to {:.3?}", lo, hi);
    }
    if let Some(path) = std::env::args().nth(1) {
        set.save_ascii(path.as_ref())?;
        println!("wrote {path}");
    }
    Ok(())
}
