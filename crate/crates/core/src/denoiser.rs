//! The joint denoiser: `(1 + C) x H x W` corrupted stack plus timestep in,
//! clean-image estimate and class logits out (x0-prediction).

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::net::{EncoderDecoder, Init, NetConfig, Params, Tape};
use crate::numerics::{Rng, Scalar, Tensor};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub num_classes: usize,
    pub width: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            width: 32,
            embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 1 + self.num_classes,
            out_channels: 1 + self.num_classes,
            width: self.width,
            time_embed_dim: Some(self.embed_dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser<S = f32> {
    net: EncoderDecoder<S>,
    num_classes: usize,
}

pub struct DenoiserTape<S>(Tape<S>);

fn split_output<S: Scalar>(out: Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c, _, _) = out.chw()?;
    Ok((out.slice_channels(0, 1)?, out.slice_channels(1, c)?))
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(config: DenoiserConfig, rng: &mut Rng, init: Init) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::param("denoiser needs at least two classes"));
        }
        Ok(Self {
            net: EncoderDecoder::new(config.net_config(), rng, init)?,
            num_classes: config.num_classes,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Params<S>) -> Result<Self> {
        Ok(Self {
            net: EncoderDecoder::from_params(config.net_config(), params)?,
            num_classes: config.num_classes,
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        let net = self.net.config();
        DenoiserConfig {
            num_classes: self.num_classes,
            width: net.width,
            embed_dim: net.time_embed_dim.expect("denoiser is time conditioned"),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &Params<S> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut Params<S> {
        self.net.params_mut()
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            net: self.net.cast(),
            num_classes: self.num_classes,
        }
    }

    fn check(&self, stack: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<()> {
        if t == 0 || t > sched.steps() {
            return Err(Error::param(format!(
                "denoiser timestep {t} outside [1, {}]",
                sched.steps()
            )));
        }
        let (c, h, w) = stack.chw()?;
        if c != 1 + self.num_classes {
            return Err(Error::dim(format!(
                "stack has {c} channels, expected {}",
                1 + self.num_classes
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("spatial size {h}x{w} must be even")));
        }
        Ok(())
    }

    /// Returns `(x_hat 1 x H x W, y_hat C x H x W)`.
    pub fn forward(&self, stack: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check(stack, t, sched)?;
        split_output(self.net.forward(stack, Some(t))?)
    }

    pub fn forward_with_tape(
        &self,
        stack: &Tensor<S>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<(Tensor<S>, Tensor<S>, DenoiserTape<S>)> {
        self.check(stack, t, sched)?;
        let (out, tape) = self.net.forward_with_tape(stack, Some(t))?;
        let (x, y) = split_output(out)?;
        Ok((x, y, DenoiserTape(tape)))
    }

    /// Accumulates parameter gradients for upstream `grad_x` and `grad_y`.
    pub fn backward(
        &self,
        tape: DenoiserTape<S>,
        grad_x: &Tensor<S>,
        grad_y: &Tensor<S>,
        grads: &mut Params<S>,
    ) -> Result<()> {
        let grad = Tensor::concat_channels(&[grad_x, grad_y])?;
        self.net.backward(tape.0, &grad, grads)
    }
}

impl Denoiser<f32> {
    pub fn to_checkpoint(&self, step: u64, extra: serde_json::Value) -> Checkpoint {
        Checkpoint::new(
            ModelKind::Denoiser,
            *self.net.config(),
            self.num_classes,
            step,
            self.params().clone(),
            extra,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Denoiser)?;
        let net = ck.header.net;
        let config = DenoiserConfig {
            num_classes: ck.header.num_classes,
            width: net.width,
            embed_dim: net
                .time_embed_dim
                .ok_or_else(|| Error::invalid("denoiser checkpoint lacks time embedding"))?,
        };
        if config.net_config() != net {
            return Err(Error::invalid("checkpoint network config inconsistent with class count"));
        }
        Self::from_params(config, ck.params.clone())
    }
}
