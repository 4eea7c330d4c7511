use std::io::Write;

use super::RenderOutput;
use crate::error::Result;

const PPM_SCHEMA: &str = "# sdf-autolabel/image/v1";
const DEPTH_SCHEMA: &str = "# sdf-autolabel/depth/v1";

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_ppm(mut out: impl Write, width: usize, height: usize, rgb: impl Iterator<Item = [f64; 3]>) -> Result<()> {
    write!(out, "P6\n{PPM_SCHEMA}\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = rgb.flat_map(|c| c.map(to_byte)).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Binary PPM of the NOCS image.
pub fn write_nocs_ppm(render: &RenderOutput, out: impl Write) -> Result<()> {
    write_ppm(out, render.width, render.height, render.nocs.iter().copied())
}

/// Binary PPM of the silhouette (white foreground).
pub fn write_mask_ppm(render: &RenderOutput, out: impl Write) -> Result<()> {
    write_ppm(out, render.width, render.height, render.mask.iter().map(|&m| [m; 3]))
}

/// ASCII depth dump: a header line with the size, then one row of
/// space-separated values per image row (`inf` for background).
pub fn write_depth(render: &RenderOutput, mut out: impl Write) -> Result<()> {
    writeln!(out, "{DEPTH_SCHEMA}\n{} {}", render.width, render.height)?;
    for row in render.depth.chunks(render.width) {
        let line: Vec<String> = row.iter().map(|d| format!("{d}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
