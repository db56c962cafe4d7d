use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Which tiles survive cropping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePolicy {
    /// Fraction of tiles made entirely of `background_class` to keep.
    pub keep_background_only: f64,
    pub background_class: usize,
    pub seed: u64,
}

impl Default for TilePolicy {
    fn default() -> Self {
        Self {
            keep_background_only: 1.0,
            background_class: 0,
            seed: 0,
        }
    }
}

/// Tile origins along one axis: a non-overlapping grid whose final tile is
/// shifted back so that it ends exactly at the border.
pub fn tile_origins(extent: usize, tile: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=extent - tile).step_by(tile).collect();
    if out.last().map_or(true, |&o| o + tile < extent) {
        out.push(extent - tile);
    }
    out
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, tile: usize) -> Tensor<f32> {
    let (c, _, w) = t.chw().expect("validated");
    let h = t.shape()[1];
    let src = t.data();
    Tensor::from_fn(&[c, tile, tile], |i| {
        let ci = i / (tile * tile);
        let y = (i / tile) % tile;
        let x = i % tile;
        src[ci * h * w + (y0 + y) * w + x0 + x]
    })
}

/// Cuts an image (`1 x H x W`) and its one-hot mask (`C x H x W`) into
/// `tile x tile` pairs covering every pixel.
pub fn crop_tiles(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    tile: usize,
    policy: &TilePolicy,
) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let (_, h, w) = image.chw()?;
    let (classes, mh, mw) = mask.chw()?;
    if (h, w) != (mh, mw) {
        return Err(Error::dim(format!("image {h}x{w} vs mask {mh}x{mw}")));
    }
    if tile == 0 || tile > h || tile > w {
        return Err(Error::param(format!("tile {tile} does not fit {h}x{w}")));
    }
    if policy.background_class >= classes || !(0.0..=1.0).contains(&policy.keep_background_only) {
        return Err(Error::param("invalid tile policy"));
    }
    let mut rng = Rng::new(policy.seed);
    let mut out = Vec::new();
    for &y in &tile_origins(h, tile) {
        for &x in &tile_origins(w, tile) {
            let m = crop(mask, y, x, tile);
            let bg_only = m.channel(policy.background_class).iter().all(|&v| v == 1.0);
            if bg_only && !rng.bernoulli(policy.keep_background_only) {
                continue;
            }
            out.push((crop(image, y, x, tile), m));
        }
    }
    Ok(out)
}
