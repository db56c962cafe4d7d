//! Netpbm renders for inspection.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Class colours: sea, oil, look-alike, land, ship.
pub const PALETTE: [[u8; 3]; 5] = [
    [0, 0, 0],
    [0, 255, 255],
    [255, 0, 0],
    [0, 153, 0],
    [153, 76, 0],
];

/// Linear `[-1, 1] -> [0, 255]`, clamped.
pub fn to_gray(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Grayscale render of a `1 x H x W` (or `H x W`) image in `[-1, 1]`.
pub fn image_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::dim(format!("cannot render shape {s:?} as PGM"))),
    };
    let px: Vec<u8> = image.data().iter().map(|&v| to_gray(v)).collect();
    Ok(encode_pgm(w, h, &px))
}

/// Palette render of a class-index map.
pub fn mask_ppm(mask: &[usize], height: usize, width: usize) -> Result<Vec<u8>> {
    if mask.len() != height * width {
        return Err(Error::dim("mask length does not match extents"));
    }
    let mut rgb = Vec::with_capacity(mask.len() * 3);
    for &c in mask {
        rgb.extend_from_slice(PALETTE.get(c).unwrap_or(&[255, 255, 255]));
    }
    Ok(encode_ppm(width, height, &rgb))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
