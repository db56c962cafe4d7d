//! Procedural SAR-like scenes.
//!
//! Sea is a mid-dark, slowly varying background. Oil slicks are thin,
//! elongated and very dark with sharp edges; look-alikes are broader dark
//! blobs with soft edges; land is a bright textured region entering from one
//! border; ships are one- or two-pixel bright targets. Intensities are
//! multiplied by mean-1 gamma speckle before being mapped onto `[-1, 1]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split, TargetKind};
use crate::error::{Error, Result};
use crate::numerics::ops::one_hot;
use crate::numerics::{Rng, Tensor};

pub const SEA: usize = 0;
pub const OIL: usize = 1;
pub const LOOK_ALIKE: usize = 2;
pub const LAND: usize = 3;
pub const SHIP: usize = 4;

pub const CLASS_NAMES: [&str; 5] = ["sea", "oil", "look-alike", "land", "ship"];

const SEA_LEVEL: f64 = 0.30;
const OIL_LEVEL: f64 = 0.05;
const LOOK_ALIKE_LEVEL: f64 = 0.12;
const LAND_LEVEL: f64 = 0.70;
const SHIP_LEVEL: f64 = 1.20;
/// Intensity mapped to +1 after normalization.
const FULL_SCALE: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Square tile extent.
    pub size: usize,
    /// 2..=5; classes beyond the count are never painted.
    pub num_classes: usize,
    /// Probability that a scene contains each class, indexed by class id.
    /// The sea entry is ignored (sea is the background).
    pub class_probs: Vec<f64>,
    /// Speckle looks; higher is smoother.
    pub looks: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 32,
            num_classes: 5,
            class_probs: vec![1.0, 0.7, 0.5, 0.35, 0.4],
            looks: 4.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::param(format!("scene size {} too small", self.size)));
        }
        if !(2..=5).contains(&self.num_classes) {
            return Err(Error::param(format!(
                "num_classes must be in 2..=5, got {}",
                self.num_classes
            )));
        }
        if self.class_probs.len() != self.num_classes {
            return Err(Error::param(format!(
                "{} class probabilities for {} classes",
                self.class_probs.len(),
                self.num_classes
            )));
        }
        if self.class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::param("class probabilities must lie in [0, 1]"));
        }
        if !(self.looks >= 1.0) {
            return Err(Error::param(format!("looks must be >= 1, got {}", self.looks)));
        }
        Ok(())
    }

    fn prob(&self, class: usize) -> f64 {
        self.class_probs.get(class).copied().unwrap_or(0.0)
    }
}

/// Smooth random field in roughly `[-1, 1]`: bilinear interpolation of a
/// coarse uniform lattice.
fn smooth_field(rng: &mut Rng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / (size - 1) as f64 * cells as f64;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 / (size - 1) as f64 * cells as f64;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Normalized elliptical distance of every pixel to a rotated ellipse.
fn ellipse_distance(size: usize, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 + 0.5 - cy;
            let dx = (i % size) as f64 + 0.5 - cx;
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            ((u / rx).powi(2) + (v / ry).powi(2)).sqrt()
        })
        .collect()
}

/// Generates one scene: image `1 x H x W` in `[-1, 1]` and its exactly
/// one-hot mask `C x H x W`.
pub fn generate_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    spec.validate()?;
    let n = spec.size;
    let sf = n as f64;
    let wind = smooth_field(rng, n, 3);
    let mut intensity: Vec<f64> = wind.iter().map(|w| SEA_LEVEL * (1.0 + 0.12 * w)).collect();
    let mut class = vec![SEA; n * n];

    if spec.num_classes > LOOK_ALIKE && rng.bernoulli(spec.prob(LOOK_ALIKE)) {
        for _ in 0..rng.int_inclusive(1, 2) {
            let d = ellipse_distance(
                n,
                rng.uniform_range(0.2, 0.8) * sf,
                rng.uniform_range(0.2, 0.8) * sf,
                rng.uniform_range(0.12, 0.22) * sf,
                rng.uniform_range(0.15, 0.28) * sf,
                rng.uniform_range(0.0, PI),
            );
            for (i, &di) in d.iter().enumerate() {
                // soft shoulder out to 1.4 radii
                let w = ((1.4 - di) / 0.8).clamp(0.0, 1.0);
                let w = w * w * (3.0 - 2.0 * w);
                intensity[i] = intensity[i] * (1.0 - w) + LOOK_ALIKE_LEVEL * w;
                if di < 1.0 {
                    class[i] = LOOK_ALIKE;
                }
            }
        }
    }

    if spec.num_classes > OIL && rng.bernoulli(spec.prob(OIL)) {
        for _ in 0..rng.int_inclusive(1, 2) {
            let d = ellipse_distance(
                n,
                rng.uniform_range(0.2, 0.8) * sf,
                rng.uniform_range(0.2, 0.8) * sf,
                rng.uniform_range(0.04, 0.08) * sf + 0.6,
                rng.uniform_range(0.22, 0.4) * sf,
                rng.uniform_range(0.0, PI),
            );
            for (i, &di) in d.iter().enumerate() {
                if di < 1.0 {
                    intensity[i] = OIL_LEVEL;
                    class[i] = OIL;
                }
            }
        }
    }

    if spec.num_classes > LAND && rng.bernoulli(spec.prob(LAND)) {
        let edge = rng.int_inclusive(0, 3);
        let depth = rng.uniform_range(0.15, 0.35) * sf;
        let phase = rng.uniform_range(0.0, 2.0 * PI);
        let freq = rng.uniform_range(1.0, 2.5) * 2.0 * PI / sf;
        let amp = rng.uniform_range(0.03, 0.1) * sf;
        let texture = smooth_field(rng, n, (n / 4).max(2));
        for i in 0..n * n {
            let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
            let (along, into) = match edge {
                0 => (x, y),
                1 => (x, sf - y),
                2 => (y, x),
                _ => (y, sf - x),
            };
            if into < depth + amp * (freq * along + phase).sin() {
                intensity[i] = LAND_LEVEL * (1.0 + 0.3 * texture[i]);
                class[i] = LAND;
            }
        }
    }

    if spec.num_classes > SHIP && rng.bernoulli(spec.prob(SHIP)) {
        for _ in 0..rng.int_inclusive(1, 3) {
            let two = rng.bernoulli(0.5);
            let ext = if two { 2 } else { 1 };
            let y = rng.int_inclusive(0, n - ext);
            let x = rng.int_inclusive(0, n - ext);
            for yy in y..y + ext {
                for xx in x..x + ext {
                    let i = yy * n + xx;
                    if class[i] != LAND {
                        intensity[i] = SHIP_LEVEL;
                        class[i] = SHIP;
                    }
                }
            }
        }
    }

    let looks = spec.looks;
    let image = Tensor::new(
        &[1, n, n],
        intensity
            .iter()
            .map(|&v| {
                let speckled = v * rng.gamma(looks, 1.0 / looks);
                (2.0 * speckled / FULL_SCALE - 1.0).clamp(-1.0, 1.0) as f32
            })
            .collect(),
    )?;
    let mask = one_hot(&class, spec.num_classes, n, n)?;
    Ok((image, mask))
}

/// Writes `n_train + n_test` scenes plus `manifest.json` under `out_dir`.
/// Scene `i` uses stream `i` of the master seed.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::new(out_dir, spec.num_classes);
    for i in 0..n_train + n_test {
        let mut rng = Rng::stream(spec.seed, i as u64);
        let (image, mask) = generate_scene(spec, &mut rng)?;
        let split = if i < n_train { Split::Train } else { Split::Test };
        manifest.push_sample(
            &format!("{i:05}"),
            &image,
            &mask,
            TargetKind::Onehot,
            split,
            i as u64,
        )?;
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
