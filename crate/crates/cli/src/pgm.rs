//! Binary 8-bit PGM (P5) snapshots of single frames.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DMatrix;

/// Gray levels with `min → 0` and `max → 255`; a constant image maps to 128.
pub fn gray_levels(image: &DMatrix<f64>) -> Vec<u8> {
    let (lo, hi) = image.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let level = |v: f64| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    };
    // rows of the written image run from high y to low y
    let (nx, ny) = image.shape();
    let mut out = Vec::with_capacity(nx * ny);
    for iy in (0..ny).rev() {
        for ix in 0..nx {
            out.push(level(image[(ix, iy)]));
        }
    }
    out
}

/// Writes an `nx × ny` image indexed `[(ix, iy)]` as a `nx`-wide PGM.
pub fn encode(image: &DMatrix<f64>) -> Vec<u8> {
    let (nx, ny) = image.shape();
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    out.extend(gray_levels(image));
    out
}

pub fn write_pgm(path: &Path, image: &DMatrix<f64>) -> io::Result<()> {
    fs::write(path, encode(image))
}
