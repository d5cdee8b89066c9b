//! Grey-scale PNG dumps of intermediate maps.

use std::path::Path;

use anyhow::{Context, Result};
use dnt_core::features::HeatMap;
use dnt_core::tracking::FrameMaps;

/// Min-max stretched to 0..255, each cell drawn as a `zoom x zoom` block.
pub fn write_map_png(map: &HeatMap, zoom: usize, path: &Path) -> Result<()> {
    let zoom = zoom.max(1);
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (map.width * zoom, map.height * zoom);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = map.at(y as usize / zoom, x as usize / zoom);
        px.0 = [(((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8];
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// `f0001_boundary.png` plus `f0001_s1_output.png`, `_extracted`,
/// `_reference` for both streams.
pub fn write_frame_maps(maps: &FrameMaps, frame: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_map_png(&maps.boundary, 1, &dir.join(format!("f{frame:04}_boundary.png")))?;
    for (k, s) in maps.streams.iter().enumerate() {
        let zoom = (maps.boundary.width / s.output.width.max(1)).max(1);
        for (name, m) in [("output", &s.output), ("extracted", &s.extracted), ("reference", &s.reference)] {
            write_map_png(m, zoom, &dir.join(format!("f{frame:04}_s{}_{name}.png", k + 1)))?;
        }
    }
    Ok(())
}
