//! Variance-preserving linear noise schedule and the forward corruption of
//! an image / scaled-mask pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian, Rng, Scalar, Tensor};

/// Serialized schedule parameters (the per-step tables are recomputed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Per-timestep signal and noise scales.
///
/// Tables are indexed by `t = 0..=steps`; index 0 is the clean endpoint with
/// `alpha = 1`, `sigma = 0`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut sigma = vec![0.0; steps + 1];
        let mut alpha_bar = 1.0;
        for t in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            beta[t] = beta_start + (beta_end - beta_start) * frac;
            alpha_bar *= 1.0 - beta[t];
            alpha[t] = alpha_bar.sqrt();
            sigma[t] = (1.0 - alpha_bar).sqrt();
        }
        Ok(Self {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            beta,
            alpha,
            sigma,
        })
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::linear(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::param(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Signal-to-noise ratio of a corrupted signal whose clean part has the
    /// given per-element mean power (unit-variance noise).
    pub fn snr_at(&self, t: usize, mean_power_signal: f64) -> Result<f64> {
        self.check_t(t)?;
        let s = self.sigma[t];
        if s == 0.0 {
            return Err(Error::InfiniteSnr(t));
        }
        Ok(self.alpha[t].powi(2) * mean_power_signal / (s * s))
    }
}

/// `alpha_t * clean + sigma_t * noise`.
pub fn corrupt_with_noise<S: Scalar>(
    clean: &Tensor<S>,
    noise: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    let (a, s) = (S::of(sched.alpha(t)), S::of(sched.sigma(t)));
    clean.zip_map(noise, |c, n| a * c + s * n)
}

/// Whether the image and mask branches see the same noise draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTying {
    #[default]
    Independent,
    /// Both branches reuse one draw; only valid when channel counts allow it,
    /// so the image noise plane is broadcast over every mask channel.
    Tied,
}

/// Corrupted pair together with the injected noise.
#[derive(Clone, Debug)]
pub struct CorruptedPair<S = f32> {
    pub image: Tensor<S>,
    pub mask: Tensor<S>,
    pub noise_image: Tensor<S>,
    pub noise_mask: Tensor<S>,
}

/// Balanced forward corruption of an image and its already b-scaled mask.
pub fn corrupt_pair<S: Scalar>(
    x0: &Tensor<S>,
    y0_scaled: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    tying: NoiseTying,
) -> Result<CorruptedPair<S>> {
    sched.check_t(t)?;
    let noise_image: Tensor<S> = gaussian(rng, x0.shape());
    let noise_mask = match tying {
        NoiseTying::Independent => gaussian(rng, y0_scaled.shape()),
        NoiseTying::Tied => {
            let plane = noise_image.data();
            if y0_scaled.len() % plane.len() != 0 {
                return Err(Error::dim("tied noise needs matching spatial extents"));
            }
            Tensor::from_fn(y0_scaled.shape(), |i| plane[i % plane.len()])
        }
    };
    Ok(CorruptedPair {
        image: corrupt_with_noise(x0, &noise_image, t, sched)?,
        mask: corrupt_with_noise(y0_scaled, &noise_mask, t, sched)?,
        noise_image,
        noise_mask,
    })
}
