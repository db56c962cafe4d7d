//! DDIM sampling of joint (image, logit) pairs and synthesis of the
//! generated dataset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{argmax_channels, gaussian, one_hot, softmax, Rng, Scalar, Tensor};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::toydata::container::write_tensor;
use crate::toydata::{DatasetManifest, Role, Split, TargetKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub num_samples: usize,
    /// Defaults to the factor recorded in the checkpoint.
    pub b: Option<f64>,
    /// Defaults to the schedule recorded in the checkpoint.
    pub schedule: Option<ScheduleParams>,
    /// Defaults to the training resolution recorded in the checkpoint.
    pub resolution: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 200,
            eta: 0.0,
            seed: 0,
            num_samples: 0,
            b: None,
            schedule: None,
            resolution: None,
        }
    }
}

/// Anything that maps a noisy stack at step `t` to `(x_hat, y_hat)`.
pub trait JointDenoiser {
    fn num_classes(&self) -> usize;
    fn predict(&self, stack: &Tensor<f32>, t: usize, sched: &NoiseSchedule) -> Result<(Tensor<f32>, Tensor<f32>)>;
}

impl JointDenoiser for Denoiser<f32> {
    fn num_classes(&self) -> usize {
        Denoiser::num_classes(self)
    }

    fn predict(&self, stack: &Tensor<f32>, t: usize, sched: &NoiseSchedule) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.forward(stack, t, sched)
    }
}

/// Deterministic DDIM update: `eps = (cur - a_t x0) / s_t`,
/// `next = a_prev x0 + s_prev eps`.
pub fn ddim_step<S: Scalar>(
    pred_clean: &Tensor<S>,
    current: &Tensor<S>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    ddim_step_eta(pred_clean, current, t, t_prev, sched, 0.0, None)
}

/// Scalar form of the update with explicit coefficients.
pub fn ddim_update(pred_clean: f64, current: f64, (a_t, s_t): (f64, f64), (a_prev, s_prev): (f64, f64)) -> f64 {
    let eps = (current - a_t * pred_clean) / s_t;
    a_prev * pred_clean + s_prev * eps
}

/// General DDIM update; `eta > 0` injects fresh noise drawn from `rng`.
pub fn ddim_step_eta<S: Scalar>(
    pred_clean: &Tensor<S>,
    current: &Tensor<S>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: Option<&mut Rng>,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    sched.check_t(t_prev)?;
    if t_prev >= t {
        return Err(Error::param(format!("ddim step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let (a_t, s_t) = (sched.alpha(t), sched.sigma(t));
    if s_t <= 0.0 {
        return Err(Error::param(format!("sigma is zero at t={t}")));
    }
    let (a_p, s_p) = (sched.alpha(t_prev), sched.sigma(t_prev));
    let s_eta = if eta > 0.0 {
        eta * ((s_p * s_p / (s_t * s_t)) * (1.0 - a_t * a_t / (a_p * a_p))).max(0.0).sqrt()
    } else {
        0.0
    };
    let dir = (s_p * s_p - s_eta * s_eta).max(0.0).sqrt();
    let mut next = current.zip_map(pred_clean, |cur, x0| {
        S::of(ddim_update(x0.as_f64(), cur.as_f64(), (a_t, s_t), (a_p, dir)))
    })?;
    if s_eta > 0.0 {
        let rng = rng.ok_or_else(|| Error::param("eta > 0 needs a random stream"))?;
        let z: Tensor<S> = gaussian(rng, current.shape());
        for (n, zi) in next.data_mut().iter_mut().zip(z.data()) {
            *n += S::of(s_eta) * *zi;
        }
    }
    Ok(next)
}

/// Evenly strided, strictly decreasing timesteps starting at `T`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::param(format!("ddim_steps must be in [1, {total}], got {steps}")));
    }
    Ok((1..=steps).rev().map(|k| (total * k + steps / 2) / steps).collect())
}

/// The `(b * (2 softmax(y_hat) - 1))` clean estimate for the mask branch.
pub fn rescale_logits<S: Scalar>(y_hat: &Tensor<S>, b: f64) -> Result<Tensor<S>> {
    let p = softmax(y_hat, 1.0)?;
    Ok(p.map(|v| S::of((v.as_f64() * 2.0 - 1.0) * b)))
}

#[derive(Clone, Debug)]
pub struct SampledPair {
    pub image: Tensor<f32>,
    pub logits: Tensor<f32>,
}

/// Mask-branch statistics after one update, for sanity envelopes.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub max_abs_mask: f64,
    /// `alpha_prev * b + sigma_prev * max|eps|`
    pub bound: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleSettings<'a> {
    pub sched: &'a NoiseSchedule,
    pub b: f64,
    pub ddim_steps: usize,
    pub eta: f64,
    pub size: usize,
}

/// Runs one reverse chain. Both branches start from N(0, I); the mask state
/// lives in b-scaled space throughout.
pub fn sample_pair_traced(
    model: &dyn JointDenoiser,
    settings: &SampleSettings<'_>,
    rng: &mut Rng,
    mut record: Option<&mut Vec<StepRecord>>,
) -> Result<SampledPair> {
    let SampleSettings {
        sched,
        b,
        ddim_steps,
        eta,
        size,
    } = *settings;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param(format!("eta must lie in [0, 1], got {eta}")));
    }
    if !(b > 0.0) {
        return Err(Error::param(format!("balancing factor must be positive, got {b}")));
    }
    let c = model.num_classes();
    let ts = ddim_timesteps(sched.steps(), ddim_steps)?;
    let mut x: Tensor<f32> = gaussian(rng, &[1, size, size]);
    let mut y: Tensor<f32> = gaussian(rng, &[c, size, size]);
    let mut logits = None;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let stack = Tensor::concat_channels(&[&x, &y])?;
        let (x_hat, y_hat) = model.predict(&stack, t, sched)?;
        let y_clean = rescale_logits(&y_hat, b)?;
        if let Some(rec) = record.as_deref_mut() {
            let s_t = sched.sigma(t);
            let a_t = sched.alpha(t);
            let max_eps = y
                .data()
                .iter()
                .zip(y_clean.data())
                .map(|(&cur, &c0)| ((cur as f64 - a_t * c0 as f64) / s_t).abs())
                .fold(0.0, f64::max);
            let bound = sched.alpha(t_prev) * b + sched.sigma(t_prev) * max_eps;
            x = ddim_step_eta(&x_hat, &x, t, t_prev, sched, eta, Some(rng))?;
            y = ddim_step_eta(&y_clean, &y, t, t_prev, sched, eta, Some(rng))?;
            rec.push(StepRecord {
                t,
                t_prev,
                max_abs_mask: y.max_abs() as f64,
                bound,
            });
        } else {
            x = ddim_step_eta(&x_hat, &x, t, t_prev, sched, eta, Some(rng))?;
            y = ddim_step_eta(&y_clean, &y, t, t_prev, sched, eta, Some(rng))?;
        }
        if !x.all_finite() || !y.all_finite() {
            return Err(Error::Divergence {
                step: i,
                msg: format!("sampler state became non-finite at t={t}"),
            });
        }
        logits = Some(y_hat);
    }
    Ok(SampledPair {
        image: x,
        logits: logits.expect("at least one ddim step"),
    })
}

pub fn sample_pair(model: &dyn JointDenoiser, settings: &SampleSettings<'_>, rng: &mut Rng) -> Result<SampledPair> {
    sample_pair_traced(model, settings, rng, None)
}

/// Everything needed to sample from a trained checkpoint.
pub struct SamplerSetup {
    pub model: Denoiser<f32>,
    pub sched: NoiseSchedule,
    pub b: f64,
    pub resolution: usize,
}

impl SamplerSetup {
    pub fn from_checkpoint(ck: &Checkpoint, config: &SamplerConfig) -> Result<Self> {
        let model = Denoiser::from_checkpoint(ck)?;
        let extra = &ck.header.extra;
        let b = match config.b {
            Some(b) => b,
            None => extra
                .get("b")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::invalid("checkpoint records no balancing factor"))?,
        };
        let sched_params = match config.schedule {
            Some(p) => p,
            None => serde_json::from_value(
                extra
                    .get("schedule")
                    .cloned()
                    .ok_or_else(|| Error::invalid("checkpoint records no schedule"))?,
            )?,
        };
        let resolution = match config.resolution {
            Some(r) => r,
            None => extra
                .get("resolution")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::invalid("checkpoint records no resolution"))? as usize,
        };
        Ok(Self {
            model,
            sched: NoiseSchedule::from_params(&sched_params)?,
            b,
            resolution,
        })
    }
}

/// Samples `config.num_samples` pairs (sample `i` uses stream `i` of the
/// seed) and writes them with their argmax masks plus `manifest.json`.
pub fn synthesize_dataset(
    model: &dyn JointDenoiser,
    sched: &NoiseSchedule,
    b: f64,
    size: usize,
    config: &SamplerConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let c = model.num_classes();
    let mut manifest = DatasetManifest::new(out_dir, c);
    let settings = SampleSettings {
        sched,
        b,
        ddim_steps: config.ddim_steps,
        eta: config.eta,
        size,
    };
    ddim_timesteps(sched.steps(), config.ddim_steps)?;
    for i in 0..config.num_samples {
        let mut rng = Rng::stream(config.seed, i as u64);
        let pair = sample_pair(model, &settings, &mut rng)?;
        let stem = format!("gen_{i:05}");
        let idx = manifest.push_sample(
            &stem,
            &pair.image,
            &pair.logits,
            TargetKind::Logits,
            Split::Train,
            i as u64,
        )?;
        let hard = one_hot::<f32>(&argmax_channels(&pair.logits)?, c, size, size)?;
        let dir = out_dir.join("hard_masks");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = format!("hard_masks/{stem}.dktn");
        write_tensor(&out_dir.join(&rel), &hard)?;
        let rec = &mut manifest.samples[idx];
        rec.role = Role::Generated;
        rec.hard_mask = Some(rel);
        if (i + 1) % 64 == 0 {
            log::debug!("synthesized {} / {}", i + 1, config.num_samples);
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ddim_step_examples() {
        let next = ddim_update(1.0, 1.0, (0.6, 0.8), (0.8, 0.6));
        assert!((next - 1.1).abs() < 1e-12);

        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let cur = Tensor::<f64>::full(&[1, 1, 1], 1.0);
        let x0 = Tensor::<f64>::full(&[1, 1, 1], 1.0);
        let next = ddim_step(&x0, &cur, 500, 200, &sched).unwrap();
        let (a, s, ap, sp) = (sched.alpha(500), sched.sigma(500), sched.alpha(200), sched.sigma(200));
        let eps = (1.0 - a) / s;
        assert!((next.data()[0] - (ap + sp * eps)).abs() < 1e-12);

        // prediction consistent with the state: eps = 0
        let x0 = Tensor::<f64>::full(&[1, 1, 1], 1.0 / a);
        let next = ddim_step(&x0, &cur, 500, 200, &sched).unwrap();
        assert!((next.data()[0] - ap / a).abs() < 1e-12);

        let last = ddim_step(&x0, &cur, 3, 0, &sched).unwrap();
        assert_eq!(last.data()[0], x0.data()[0]);

        assert!(ddim_step(&x0, &cur, 3, 3, &sched).is_err());
        assert!(ddim_step(&x0, &cur, 3, 0, &NoiseSchedule::linear(2, 1e-4, 0.02).unwrap()).is_err());
    }

    #[test]
    fn timesteps_strided() {
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        let ts = ddim_timesteps(200, 7).unwrap();
        assert_eq!(ts[0], 200);
        assert!(ts.windows(2).all(|w| w[0] > w[1]) && *ts.last().unwrap() >= 1);
        assert!(ddim_timesteps(10, 0).is_err());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn rescale_bounds() {
        let y = Tensor::<f64>::from_fn(&[3, 2, 2], |i| i as f64 - 5.0);
        let r = rescale_logits(&y, 0.4).unwrap();
        assert!(r.data().iter().all(|v| v.abs() < 0.4));
        let u = rescale_logits(&Tensor::<f64>::zeros(&[2, 1, 1]), 1.0).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }
}
