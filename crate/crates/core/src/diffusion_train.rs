//! Joint diffusion training: L2 on the image branch plus cross-entropy on the
//! logit branch, with the mask normalized to +-1 and scaled by `b`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balance::{normalize_mask, scale_mask, validate_one_hot};
use crate::checkpoint::Checkpoint;
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserTape};
use crate::distill::ce_loss_grad;
use crate::error::{Error, Result};
use crate::net::{Init, Params};
use crate::numerics::ops::resize_bilinear;
use crate::numerics::{argmax_channels, one_hot, Rng, Scalar, Tensor};
use crate::optim::{AdamConfig, AdamState};
use crate::schedule::{corrupt_pair, NoiseSchedule, NoiseTying, ScheduleParams};
use crate::toydata::{DatasetManifest, Split, TargetKind};

/// Optional first phase on bilinearly down-sampled pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowResPhase {
    pub resolution: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub schedule: ScheduleParams,
    /// Overrides the factor stored in the dataset manifest.
    pub b: Option<f64>,
    pub resolution: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub tying: NoiseTying,
    pub l2_weight: f64,
    pub ce_weight: f64,
    pub low_res: Option<LowResPhase>,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            schedule: ScheduleParams {
                steps: 200,
                ..ScheduleParams::default()
            },
            b: None,
            resolution: 32,
            width: 32,
            embed_dim: 32,
            tying: NoiseTying::Independent,
            l2_weight: 1.0,
            ce_weight: 1.0,
            low_res: None,
            checkpoint_every: 0,
        }
    }
}

impl DiffTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if self.resolution == 0 || self.resolution % 2 != 0 {
            return Err(Error::param(format!("resolution {} must be even", self.resolution)));
        }
        if let Some(lr) = self.low_res {
            if lr.resolution == 0 || lr.resolution % 2 != 0 {
                return Err(Error::param("low-resolution phase needs an even resolution"));
            }
        }
        if self.l2_weight < 0.0 || self.ce_weight < 0.0 {
            return Err(Error::param("loss weights must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLoss {
    pub loss: f64,
    pub l2: f64,
    pub ce: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub l2: f64,
    pub ce: f64,
}

/// Builds the corrupted `(1 + C) x H x W` network input for one pair.
pub fn corrupted_stack<S: Scalar>(
    x0: &Tensor<S>,
    y0_onehot: &Tensor<S>,
    t: usize,
    rng: &mut Rng,
    sched: &NoiseSchedule,
    b: f64,
    tying: NoiseTying,
) -> Result<Tensor<S>> {
    let y = scale_mask(&normalize_mask(y0_onehot)?, b)?;
    let pair = corrupt_pair(x0, &y, t, sched, rng, tying)?;
    Tensor::concat_channels(&[&pair.image, &pair.mask])
}

/// Loss on a given prediction; returns the gradients w.r.t. `x_hat`, `y_hat`.
pub fn loss_terms<S: Scalar>(
    x_hat: &Tensor<S>,
    y_hat: &Tensor<S>,
    x0: &Tensor<S>,
    y0_onehot: &Tensor<S>,
) -> Result<(TrainLoss, Tensor<S>, Tensor<S>)> {
    x_hat.same_shape(x0)?;
    let n = x0.len() as f64;
    let l2 = x_hat
        .data()
        .iter()
        .zip(x0.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    let gx = x_hat.zip_map(x0, |a, b| S::of(2.0 * (a.as_f64() - b.as_f64()) / n))?;
    let (ce, gy) = ce_loss_grad(y0_onehot, y_hat)?;
    Ok((TrainLoss { loss: l2 + ce, l2, ce }, gx, gy))
}

/// Single-pair loss: normalize, scale by `b`, corrupt at `t`, predict.
pub fn train_loss<S: Scalar>(
    model: &Denoiser<S>,
    x0: &Tensor<S>,
    y0_onehot: &Tensor<S>,
    t: usize,
    rng: &mut Rng,
    sched: &NoiseSchedule,
    b: f64,
) -> Result<TrainLoss> {
    validate_one_hot(y0_onehot)?;
    let stack = corrupted_stack(x0, y0_onehot, t, rng, sched, b, NoiseTying::Independent)?;
    let (x_hat, y_hat) = model.forward(&stack, t, sched)?;
    loss_terms(&x_hat, &y_hat, x0, y0_onehot).map(|(l, _, _)| l)
}

/// Forward + backward for one pair. Gradients scaled by `weight` are added to `grads`.
#[allow(clippy::too_many_arguments)]
pub fn train_loss_grad<S: Scalar>(
    model: &Denoiser<S>,
    x0: &Tensor<S>,
    y0_onehot: &Tensor<S>,
    t: usize,
    rng: &mut Rng,
    sched: &NoiseSchedule,
    b: f64,
    tying: NoiseTying,
    (l2_weight, ce_weight): (f64, f64),
    weight: f64,
    grads: &mut Params<S>,
) -> Result<TrainLoss> {
    validate_one_hot(y0_onehot)?;
    let stack = corrupted_stack(x0, y0_onehot, t, rng, sched, b, tying)?;
    let (x_hat, y_hat, tape): (_, _, DenoiserTape<S>) = model.forward_with_tape(&stack, t, sched)?;
    let (mut loss, gx, gy) = loss_terms(&x_hat, &y_hat, x0, y0_onehot)?;
    loss.loss = l2_weight * loss.l2 + ce_weight * loss.ce;
    model.backward(
        tape,
        &gx.scale(S::of(weight * l2_weight)),
        &gy.scale(S::of(weight * ce_weight)),
        grads,
    )?;
    Ok(loss)
}

/// A training pair held in memory.
#[derive(Clone, Debug)]
pub struct Pair {
    pub image: Tensor<f32>,
    pub onehot: Tensor<f32>,
}

/// Bilinear resize of the image; the mask is resized bilinearly and
/// re-hardened by argmax so it stays one-hot.
pub fn resize_pair(pair: &Pair, size: usize) -> Result<Pair> {
    let (c, h, w) = pair.onehot.chw()?;
    if (h, w) == (size, size) {
        return Ok(pair.clone());
    }
    let image = resize_bilinear(&pair.image, size, size)?;
    let soft = resize_bilinear(&pair.onehot, size, size)?;
    let onehot = one_hot(&argmax_channels(&soft)?, c, size, size)?;
    Ok(Pair { image, onehot })
}

pub fn load_training_pairs(dataset: &DatasetManifest) -> Result<Vec<Pair>> {
    if dataset.target_kind() == Some(TargetKind::Logits) {
        return Err(Error::invalid("diffusion training needs one-hot masks, got logits"));
    }
    let pairs: Vec<Pair> = dataset
        .load_all(Some(Split::Train))?
        .into_iter()
        .map(|s| Pair {
            image: s.image,
            onehot: s.target,
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("dataset has no training samples"));
    }
    Ok(pairs)
}

/// Result of [`train_diffusion`].
pub struct DiffTrainOutcome {
    pub model: Denoiser<f32>,
    pub trace: Vec<TraceEntry>,
    pub b: f64,
    pub checkpoint: Checkpoint,
}

pub fn checkpoint_extra(config: &DiffTrainConfig, b: f64) -> serde_json::Value {
    serde_json::json!({
        "b": b,
        "schedule": config.schedule,
        "resolution": config.resolution,
        "seed": config.seed,
        "tying": config.tying,
    })
}

struct TraceSink {
    writer: Option<BufWriter<File>>,
    path: std::path::PathBuf,
}

impl TraceSink {
    fn push(&mut self, e: &TraceEntry) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(e)?;
            writeln!(w, "{line}").map_err(|err| Error::io(&self.path, err))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|err| Error::io(&self.path, err))?;
        }
        Ok(())
    }
}

/// Trains the joint denoiser on the train split. When `out_dir` is given the
/// loss trace (`loss_trace.jsonl`), periodic and final checkpoints are written there.
pub fn train_diffusion(
    config: &DiffTrainConfig,
    dataset: &DatasetManifest,
    out_dir: Option<&Path>,
) -> Result<DiffTrainOutcome> {
    config.validate()?;
    let b = config
        .b
        .or(dataset.balancing_factor.as_ref().map(|f| f.b))
        .ok_or_else(|| Error::param("no balancing factor: compute it for this dataset first"))?;
    let sched = NoiseSchedule::from_params(&config.schedule)?;
    let pairs = load_training_pairs(dataset)?;

    let model_cfg = DenoiserConfig {
        num_classes: dataset.num_classes,
        width: config.width,
        embed_dim: config.embed_dim,
    };
    let mut model = Denoiser::<f32>::new(model_cfg, &mut Rng::stream(config.seed, 0), Init::default())?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        model.params(),
    )?;

    let mut sink = TraceSink {
        writer: None,
        path: Default::default(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("loss_trace.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        sink = TraceSink {
            writer: Some(BufWriter::new(file)),
            path,
        };
    }

    let mut phases = Vec::new();
    if let Some(low) = config.low_res {
        phases.push((low.resolution, low.steps));
    }
    phases.push((config.resolution, config.steps));

    let mut rng = Rng::stream(config.seed, 1);
    let mut trace = Vec::with_capacity(phases.iter().map(|p| p.1).sum());
    let mut step = 0usize;
    for (resolution, steps) in phases {
        let data: Vec<Pair> = pairs.iter().map(|p| resize_pair(p, resolution)).collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        for _ in 0..steps {
            step += 1;
            let mut grads = model.params().zeros_like();
            let mut mean = TrainLoss::default();
            let k = 1.0 / config.batch_size as f64;
            for _ in 0..config.batch_size {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                let pair = &data[order[cursor]];
                cursor += 1;
                let t = rng.int_inclusive(1, sched.steps());
                let l = train_loss_grad(
                    &model,
                    &pair.image,
                    &pair.onehot,
                    t,
                    &mut rng,
                    &sched,
                    b,
                    config.tying,
                    (config.l2_weight, config.ce_weight),
                    k,
                    &mut grads,
                )?;
                mean.loss += k * l.loss;
                mean.l2 += k * l.l2;
                mean.ce += k * l.ce;
            }
            let entry = TraceEntry {
                step,
                loss: mean.loss,
                l2: mean.l2,
                ce: mean.ce,
            };
            trace.push(entry);
            sink.push(&entry)?;
            if !mean.loss.is_finite() {
                sink.flush()?;
                return Err(Error::Divergence {
                    step,
                    msg: format!("non-finite loss {}", mean.loss),
                });
            }
            if let Err(e) = adam.step(model.params_mut(), &grads) {
                sink.flush()?;
                return Err(match e {
                    Error::Divergence { msg, .. } => Error::Divergence { step, msg },
                    other => other,
                });
            }
            if let Some(dir) = out_dir {
                if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                    let ck = model.to_checkpoint(step as u64, checkpoint_extra(config, b));
                    ck.save(&dir.join("checkpoints").join(format!("step_{step:06}.ckpt")))?;
                }
            }
            if step % 100 == 0 {
                log::debug!("diffusion step {step}: loss {:.4}", mean.loss);
            }
        }
    }
    sink.flush()?;
    let checkpoint = model.to_checkpoint(step as u64, checkpoint_extra(config, b));
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("denoiser.ckpt"))?;
    }
    Ok(DiffTrainOutcome {
        model,
        trace,
        b,
        checkpoint,
    })
}
