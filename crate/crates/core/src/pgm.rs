//! Binary PGM (P5, maxval 255) output.

use std::fs;
use std::path::Path;

use crate::error::Result;

pub fn encode(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Maps `[0, 1]` to a gray level, rounding to nearest.
pub fn to_gray(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn write_unit(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let gray: Vec<u8> = values.iter().map(|&v| to_gray(v)).collect();
    fs::write(path, encode(width, height, &gray))?;
    Ok(())
}
