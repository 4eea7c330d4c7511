//! Renders a posed car into NOCS, mask and depth images.
//! Usage: render_nocs [OUT_DIR]

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use sdf_autolabel::geometry::SimilarityTransform;
use sdf_autolabel::isosurface::{QueryGrid, SurfaceExtractor, DEFAULT_BAND};
use sdf_autolabel::renderer::{render, write_depth, write_mask_ppm, write_nocs_ppm, Camera, RenderConfig};
use sdf_autolabel::shapespace::{LatentCode, ShapeSpace};

fn main() -> sdf_autolabel::Result<()> {
    let out_dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    let space = ShapeSpace::default_cars();
    let extractor = SurfaceExtractor::new(&space, QueryGrid::default(), DEFAULT_BAND);
    let set = extractor.project_surface(&LatentCode::new([0.0, 0.6, 0.8])?)?;
    let pose = SimilarityTransform::from_yaw(0.6, [0.0, 0.0, 8.0], 4.5);
    let camera = Camera::square(160.0, 128);

    for sigma in [10.0, 40.0, 200.0] {
        let config = RenderConfig {
            sigma,
            ..Default::default()
        };
        let out = render(&set, &pose, &camera, &config)?;
        let prefix = out_dir.join(format!("car_sigma{sigma}"));
        write_nocs_ppm(&out, BufWriter::new(File::create(prefix.with_extension("nocs.ppm"))?))?;
        write_mask_ppm(&out, BufWriter::new(File::create(prefix.with_extension("mask.ppm"))?))?;
        write_depth(&out, BufWriter::new(File::create(prefix.with_extension("depth.txt"))?))?;
        println!(
            "sigma {sigma:>5}: {} foreground pixels -> {}.*",
            out.foreground_pixels().len(),
            prefix.display()
        );
    }
    Ok(())
}
