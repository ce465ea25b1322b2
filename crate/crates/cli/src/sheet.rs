//! Contact sheet: one column per frame, rows for rgb, depth and flow.

use std::path::Path;

use horizon_core::percept::{flow_color, FLOW_SIGMA};
use horizon_core::world::FrameBundle;
use horizon_core::{Error, Result};
use image::{Rgb, RgbImage};

const GAP: u32 = 1;

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Render up to `max_columns` evenly spaced frames into a PNG.
pub fn contact_sheet(frames: &[FrameBundle], max_columns: usize) -> Result<RgbImage> {
    if frames.is_empty() || max_columns == 0 {
        return Err(Error::Data("contact sheet needs at least one frame".into()));
    }
    let cols = frames.len().min(max_columns);
    let picks: Vec<usize> = (0..cols)
        .map(|i| if cols == 1 { 0 } else { i * (frames.len() - 1) / (cols - 1) })
        .collect();
    let (h, w) = (frames[0].height(), frames[0].width());
    let (dmin, dmax) = frames.iter().flat_map(|f| f.depth.iter()).fold(
        (f32::INFINITY, f32::NEG_INFINITY),
        |(lo, hi), &d| (lo.min(d), hi.max(d)),
    );
    let span = (dmax - dmin).max(1e-6);
    let cell_w = w as u32 + GAP;
    let cell_h = h as u32 + GAP;
    let mut img = RgbImage::from_pixel(cols as u32 * cell_w, 3 * cell_h, Rgb([32, 32, 32]));
    for (c, &k) in picks.iter().enumerate() {
        let f = &frames[k];
        let x0 = c as u32 * cell_w;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x0 + x as u32, y as u32);
                let rgb = [0, 1, 2].map(|ch| to_u8(f.rgb[[y, x, ch]] as f64));
                img.put_pixel(px, py, Rgb(rgb));
                let d = to_u8(1.0 - ((f.depth[[y, x]] - dmin) / span) as f64);
                img.put_pixel(px, py + cell_h, Rgb([d, d, d]));
                let fc = flow_color(f.flow[[y, x, 0]] as f64, f.flow[[y, x, 1]] as f64, FLOW_SIGMA, h, w);
                img.put_pixel(px, py + 2 * cell_h, Rgb(fc.map(to_u8)));
            }
        }
    }
    Ok(img)
}

pub fn write_contact_sheet(path: &Path, frames: &[FrameBundle], max_columns: usize) -> Result<()> {
    let img = contact_sheet(frames, max_columns)?;
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
