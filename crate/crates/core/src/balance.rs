//! SNR-based balancing factor between the image and mask modalities.
//!
//! Both modalities are corrupted by the same schedule, so the ratio of
//! their SNRs at any `t` is the ratio of their clean mean powers. Scaling
//! the `{-1, 1}` mask by `b = sqrt(P(image) / P(mask))` makes that ratio 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean_power, Scalar, Tensor};
use crate::toydata::{DatasetManifest, Split, TargetKind};

/// Minimum pooled image power accepted before declaring the data degenerate.
pub const MIN_POWER: f64 = 1e-12;
/// Minimum usable factor.
pub const MIN_FACTOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancingFactor {
    pub b: f64,
    /// Pooled per-element mean power of the images.
    pub power_image: f64,
    /// Pooled per-element mean power of the normalized masks.
    pub power_mask: f64,
    pub dataset_id: String,
    pub num_samples: usize,
}

impl BalancingFactor {
    fn from_powers(
        power_image: f64,
        power_mask: f64,
        dataset_id: &str,
        num_samples: usize,
    ) -> Result<Self> {
        if power_image < MIN_POWER {
            return Err(Error::DegenerateSignal(format!(
                "pooled image power {power_image:e} below {MIN_POWER:e}"
            )));
        }
        if power_mask < MIN_POWER {
            return Err(Error::DegenerateSignal(format!(
                "pooled mask power {power_mask:e} below {MIN_POWER:e}"
            )));
        }
        let b = (power_image / power_mask).sqrt();
        if b < MIN_FACTOR {
            return Err(Error::DegenerateSignal(format!("balancing factor {b:e} too small")));
        }
        Ok(Self {
            b,
            power_image,
            power_mask,
            dataset_id: dataset_id.to_string(),
            num_samples,
        })
    }

    /// `SNR(x_t) / SNR(y'_t)` for masks scaled by `scale`; independent of `t`.
    pub fn snr_ratio(&self, scale: f64) -> f64 {
        self.power_image / (scale * scale * self.power_mask)
    }
}

/// Sum over channels of the spectral mean power, plus the element count.
fn spectral_energy<S: Scalar>(t: &Tensor<S>) -> Result<(f64, usize)> {
    let (c, h, w) = t.chw()?;
    let mut total = 0.0;
    for ci in 0..c {
        let plane = Tensor::new(&[h, w], t.channel(ci).to_vec())?;
        total += mean_power(&plane)?;
    }
    Ok((total, c * h * w))
}

/// Pooled DFT-based factor over `(image, normalized mask)` pairs.
pub fn balancing_factor_dft<'a, S: Scalar>(
    pairs: impl IntoIterator<Item = (&'a Tensor<S>, &'a Tensor<S>)>,
    dataset_id: &str,
) -> Result<BalancingFactor> {
    let (mut e_img, mut n_img, mut e_mask, mut n_mask, mut count) = (0.0, 0usize, 0.0, 0usize, 0);
    for (image, mask) in pairs {
        let (e, n) = spectral_energy(image)?;
        e_img += e;
        n_img += n;
        let (e, n) = spectral_energy(mask)?;
        e_mask += e;
        n_mask += n;
        count += 1;
    }
    if count == 0 {
        return Err(Error::param("cannot balance an empty dataset"));
    }
    BalancingFactor::from_powers(e_img / n_img as f64, e_mask / n_mask as f64, dataset_id, count)
}

/// Same factor via Parseval: spatial sums of squares replace the spectra.
pub fn balancing_factor_spatial<'a, S: Scalar>(
    pairs: impl IntoIterator<Item = (&'a Tensor<S>, &'a Tensor<S>)>,
    dataset_id: &str,
) -> Result<BalancingFactor> {
    let (mut e_img, mut n_img, mut e_mask, mut n_mask, mut count) = (0.0, 0usize, 0.0, 0usize, 0);
    for (image, mask) in pairs {
        e_img += image.sum_sq();
        n_img += image.len();
        e_mask += mask.sum_sq();
        n_mask += mask.len();
        count += 1;
    }
    if count == 0 {
        return Err(Error::param("cannot balance an empty dataset"));
    }
    BalancingFactor::from_powers(e_img / n_img as f64, e_mask / n_mask as f64, dataset_id, count)
}

/// Factor for the training split of a one-hot dataset, via the DFT.
pub fn compute_balancing_factor(dataset: &DatasetManifest) -> Result<BalancingFactor> {
    if dataset.target_kind() == Some(TargetKind::Logits) {
        return Err(Error::invalid("balancing needs one-hot masks, not logits"));
    }
    let samples = dataset.load_all(Some(Split::Train))?;
    let masks = samples
        .iter()
        .map(|s| normalize_mask(&s.target))
        .collect::<Result<Vec<_>>>()?;
    let id = dataset.checksum()?;
    balancing_factor_dft(samples.iter().map(|s| &s.image).zip(&masks), &id)
}

fn check_one_hot<S: Scalar>(onehot: &Tensor<S>) -> Result<(usize, usize)> {
    let (c, h, w) = onehot.chw()?;
    let plane = h * w;
    let d = onehot.data();
    for p in 0..plane {
        let mut hot = 0;
        for ci in 0..c {
            let v = d[ci * plane + p];
            if v == S::one() {
                hot += 1;
            } else if v != S::zero() {
                return Err(Error::invalid(format!(
                    "pixel {p}: value {v:?} is neither 0 nor 1"
                )));
            }
        }
        if hot != 1 {
            return Err(Error::invalid(format!("pixel {p}: {hot} hot classes")));
        }
    }
    Ok((c, plane))
}

/// `{0, 1}` one-hot to `{-1, 1}`: `2v - 1`.
pub fn normalize_mask<S: Scalar>(onehot: &Tensor<S>) -> Result<Tensor<S>> {
    check_one_hot(onehot)?;
    let two = S::of(2.0);
    Ok(onehot.map(|v| two * v - S::one()))
}

pub fn validate_one_hot<S: Scalar>(onehot: &Tensor<S>) -> Result<()> {
    check_one_hot(onehot).map(|_| ())
}

pub fn scale_mask<S: Scalar>(y0: &Tensor<S>, b: f64) -> Result<Tensor<S>> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::param(format!("balancing factor must be positive, got {b}")));
    }
    Ok(y0.scale(S::of(b)))
}

pub fn unscale_mask<S: Scalar>(y0_scaled: &Tensor<S>, b: f64) -> Result<Tensor<S>> {
    scale_mask(y0_scaled, 1.0 / b)
}
