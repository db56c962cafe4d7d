//! Student segmentation network and its training over D plus generated data.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::distill::{student_loss_grad, LossWeights, Source, Target, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, Report};
use crate::net::{EncoderDecoder, Init, NetConfig, Params, Tape};
use crate::numerics::{argmax_channels, one_hot, Rng, Scalar, Tensor};
use crate::optim::{AdamConfig, AdamState};
use crate::toydata::{DatasetManifest, Sample, Split, TargetKind};

#[derive(Clone, Debug)]
pub struct Student<S = f32> {
    net: EncoderDecoder<S>,
}

fn student_net(num_classes: usize, width: usize) -> NetConfig {
    NetConfig {
        in_channels: 1,
        out_channels: num_classes,
        width,
        time_embed_dim: None,
    }
}

impl<S: Scalar> Student<S> {
    pub fn new(num_classes: usize, width: usize, rng: &mut Rng, init: Init) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::param("student needs at least two classes"));
        }
        Ok(Self {
            net: EncoderDecoder::new(student_net(num_classes, width), rng, init)?,
        })
    }

    pub fn from_params(num_classes: usize, width: usize, params: Params<S>) -> Result<Self> {
        Ok(Self {
            net: EncoderDecoder::from_params(student_net(num_classes, width), params)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.net.config().out_channels
    }

    pub fn width(&self) -> usize {
        self.net.config().width
    }

    pub fn params(&self) -> &Params<S> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut Params<S> {
        self.net.params_mut()
    }

    pub fn cast<T: Scalar>(&self) -> Student<T> {
        Student { net: self.net.cast() }
    }

    /// `1 x H x W` image to `C x H x W` logits.
    pub fn forward(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        self.net.forward(image, None)
    }

    pub fn forward_with_tape(&self, image: &Tensor<S>) -> Result<(Tensor<S>, Tape<S>)> {
        self.net.forward_with_tape(image, None)
    }

    pub fn backward(&self, tape: Tape<S>, grad_logits: &Tensor<S>, grads: &mut Params<S>) -> Result<()> {
        self.net.backward(tape, grad_logits, grads)
    }

    /// Per-pixel argmax, ties to the lowest class index.
    pub fn predict_mask(&self, image: &Tensor<S>) -> Result<Vec<usize>> {
        argmax_channels(&self.forward(image)?)
    }
}

impl Student<f32> {
    pub fn to_checkpoint(&self, step: u64, extra: serde_json::Value) -> Checkpoint {
        Checkpoint::new(
            ModelKind::Student,
            *self.net.config(),
            self.num_classes(),
            step,
            self.params().clone(),
            extra,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Student)?;
        let net = ck.header.net;
        if net != student_net(ck.header.num_classes, net.width) {
            return Err(Error::invalid("student checkpoint has an inconsistent network config"));
        }
        Self::from_params(ck.header.num_classes, net.width, ck.params.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub width: usize,
    pub weights: LossWeights,
    pub temperature: f64,
    /// `|D^a| / |D|` actually used; the first `round(r |D|)` generated samples are taken.
    pub aug_ratio: f64,
    /// Replace generated soft labels by their argmax and train them like originals.
    pub hard_labels: bool,
    /// Evaluate every this many epochs (the final epoch is always evaluated); 0 = final only.
    pub eval_every: usize,
}

impl Default for StudentTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            width: 16,
            weights: LossWeights::default(),
            temperature: DEFAULT_TEMPERATURE,
            aug_ratio: 1.0,
            hard_labels: false,
            eval_every: 1,
        }
    }
}

impl StudentTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if !(self.aug_ratio >= 0.0) || !self.aug_ratio.is_finite() {
            return Err(Error::param(format!("aug_ratio must be >= 0, got {}", self.aug_ratio)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param("temperature must be positive"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Number of KD terms evaluated this epoch.
    pub kd_terms: usize,
    pub report: Option<Report>,
}

pub struct StudentOutcome {
    pub model: Student<f32>,
    pub trace: Vec<EpochRecord>,
    pub final_report: Option<Report>,
}

struct Item {
    image: Tensor<f32>,
    target: Tensor<f32>,
    source: Source,
}

fn harden(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = logits.chw()?;
    one_hot(&argmax_channels(logits)?, c, h, w)
}

/// Original train split plus the requested share of generated samples.
fn training_items(config: &StudentTrainConfig, d: &DatasetManifest, d_a: Option<&DatasetManifest>) -> Result<Vec<Item>> {
    if d.target_kind() == Some(TargetKind::Logits) {
        return Err(Error::invalid("original dataset must carry one-hot masks"));
    }
    let mut items: Vec<Item> = d
        .load_all(Some(Split::Train))?
        .into_iter()
        .map(|s: Sample| Item {
            image: s.image,
            target: s.target,
            source: Source::Original,
        })
        .collect();
    if items.is_empty() {
        return Err(Error::invalid("original dataset has no training samples"));
    }
    let wanted = (config.aug_ratio * items.len() as f64).round() as usize;
    if wanted == 0 {
        return Ok(items);
    }
    let d_a = d_a.ok_or_else(|| Error::param("aug_ratio > 0 needs a generated dataset"))?;
    if d_a.target_kind().is_some_and(|k| k != TargetKind::Logits) {
        return Err(Error::invalid("generated dataset must carry logits"));
    }
    if d_a.num_classes != d.num_classes {
        return Err(Error::invalid("class counts of D and D^a differ"));
    }
    if d_a.len() < wanted {
        return Err(Error::param(format!(
            "aug_ratio {} needs {wanted} generated samples, only {} available",
            config.aug_ratio,
            d_a.len()
        )));
    }
    for i in 0..wanted {
        let s = d_a.load_sample(i)?;
        let (target, source) = if config.hard_labels {
            (harden(&s.target)?, Source::Original)
        } else {
            (s.target, Source::Generated)
        };
        items.push(Item {
            image: s.image,
            target,
            source,
        });
    }
    Ok(items)
}

/// Confusion-matrix report of the student over a list of samples.
pub fn evaluate_student(model: &Student<f32>, samples: &[Sample]) -> Result<Option<Report>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut conf = Confusion::new(model.num_classes());
    for s in samples {
        let gt = argmax_channels(&s.target)?;
        conf.accumulate(&gt, &model.predict_mask(&s.image)?)?;
    }
    conf.report().map(Some)
}

/// Trains a student on the shuffled union of D's train split and the first
/// `round(aug_ratio |D|)` samples of `d_a`, evaluating on D's test split.
pub fn train_student(
    config: &StudentTrainConfig,
    d: &DatasetManifest,
    d_a: Option<&DatasetManifest>,
    out_dir: Option<&Path>,
) -> Result<StudentOutcome> {
    config.validate()?;
    let items = training_items(config, d, d_a)?;
    let test = d.load_all(Some(Split::Test))?;
    let mut model = Student::<f32>::new(d.num_classes, config.width, &mut Rng::stream(config.seed, 0), Init::default())?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        model.params(),
    )?;
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics_trace.jsonl");
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };

    let mut rng = Rng::stream(config.seed, 1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut kd_terms = 0;
        for batch in order.chunks(config.batch_size) {
            let k = 1.0 / batch.len() as f64;
            let mut grads = model.params().zeros_like();
            for &i in batch {
                let item = &items[i];
                let target = match item.source {
                    Source::Original => Target::Onehot(&item.target),
                    Source::Generated => Target::Logits(&item.target),
                };
                let (logits, tape) = model.forward_with_tape(&item.image)?;
                let (loss, grad) = student_loss_grad(item.source, target, &logits, &config.weights, config.temperature)?;
                kd_terms += loss.kd.is_some() as usize;
                epoch_loss += loss.total;
                model.backward(tape, &grad.scale(k as f32), &mut grads)?;
            }
            step += 1;
            adam.step(model.params_mut(), &grads).map_err(|e| match e {
                Error::Divergence { msg, .. } => Error::Divergence {
                    step: step as usize,
                    msg,
                },
                other => other,
            })?;
        }
        epoch_loss /= items.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence {
                step: step as usize,
                msg: format!("non-finite student loss in epoch {epoch}"),
            });
        }
        let evaluate = epoch == config.epochs || (config.eval_every > 0 && epoch % config.eval_every == 0);
        let report = if evaluate { evaluate_student(&model, &test)? } else { None };
        let rec = EpochRecord {
            epoch,
            loss: epoch_loss,
            kd_terms,
            report,
        };
        if let Some((w, path)) = &mut writer {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        log::debug!("student epoch {epoch}: loss {epoch_loss:.4}");
        trace.push(rec);
    }
    if let Some((w, path)) = &mut writer {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    let final_report = trace.last().and_then(|r| r.report.clone());
    if let Some(dir) = out_dir {
        let extra = serde_json::json!({ "train_config": config });
        model.to_checkpoint(step, extra).save(&dir.join("student.ckpt"))?;
    }
    Ok(StudentOutcome {
        model,
        trace,
        final_report,
    })
}
