//! Class maps as binary PPM images.

use std::path::Path;

use crate::error::{Error, Result};

/// Fixed class colours; class `k` (1-based) uses entry `(k - 1) % len`.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub fn class_colour(class: u16) -> [u8; 3] {
    if class == 0 {
        [0, 0, 0]
    } else {
        PALETTE[(usize::from(class) - 1) % PALETTE.len()]
    }
}

/// P6 image of a row-major label map; 0 renders black.
pub fn render_ppm(labels: &[u16], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::dim("label map", height * width, labels.len()));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(labels.len() * 3);
    for &l in labels {
        out.extend_from_slice(&class_colour(l));
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, labels: &[u16], height: usize, width: usize) -> Result<()> {
    let bytes = render_ppm(labels, height, width)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
