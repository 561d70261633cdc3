//! 8-bit grayscale PNG rendering of volume slices.

use flim_core::volume::Grid2;

/// Min-max windows `grid` to 0..=255. A constant grid maps to mid-gray.
pub fn window(grid: &Grid2) -> Vec<u8> {
    let (lo, hi) = grid
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    grid.data
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect()
}

pub fn encode_gray(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(pixels).expect("in-memory PNG data");
    }
    out
}

/// PNG of a slice, rows along the first remaining axis.
pub fn slice_png(grid: &Grid2) -> Vec<u8> {
    encode_gray(grid.cols, grid.rows, &window(grid))
}
