//! Small convolutional encoder-decoder with exact reverse-mode gradients.
//!
//! Topology (width `W`, all convolutions 3x3 / pad 1):
//!
//! ```text
//! stem (in -> W) -> res -> res ──────────────┐ skip (added)
//!   -> avgpool 2x -> down (W -> 2W) -> res -> res
//!   -> nearest 2x -> up (2W -> W) + skip -> res -> res
//!   -> silu -> head (W -> out)
//! ```
//!
//! Residual block: `x + conv2(silu(conv1(silu(x)) + tbias))`. When time
//! conditioning is enabled, `tbias` is a learned linear projection of a
//! sinusoidal timestep embedding to one additive bias per channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{
    avg_pool2, avg_pool2_backward, conv3x3_backward, conv3x3_forward, silu, silu_grad, upsample2,
    upsample2_backward,
};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    /// Sinusoidal embedding size; `None` disables time conditioning.
    pub time_embed_dim: Option<usize>,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 {
            return Err(Error::param(format!("degenerate network config {self:?}")));
        }
        if matches!(self.time_embed_dim, Some(e) if e == 0 || e % 2 != 0) {
            return Err(Error::param("time embedding size must be even and positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Init {
    /// Start the output convolution at zero so the network predicts 0.
    pub zero_head: bool,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn from_named(entries: Vec<(String, Tensor<S>)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Self, k: S) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += k * y;
            }
        }
    }

    pub fn scale_all(&mut self, k: S) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= k;
            }
        }
    }

    fn push(&mut self, name: String, t: Tensor<S>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResSlot {
    conv1: ConvSlot,
    conv2: ConvSlot,
    time: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvSlot,
    res: [ResSlot; 6],
    down: ConvSlot,
    up: ConvSlot,
    head: ConvSlot,
}

struct LayoutBuilder<S, F> {
    params: Params<S>,
    make: F,
    time_embed_dim: Option<usize>,
}

impl<S: Scalar, F: FnMut(&str, &[usize], usize) -> Tensor<S>> LayoutBuilder<S, F> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> ConvSlot {
        let fan_in = cin * 9;
        let w = (self.make)(name, &[cout, cin, 3, 3], fan_in);
        let weight = self.params.push(format!("{name}.weight"), w);
        let b = (self.make)(name, &[cout], fan_in);
        let bias = self.params.push(format!("{name}.bias"), b);
        ConvSlot { weight, bias }
    }

    fn res(&mut self, idx: usize, ch: usize) -> ResSlot {
        let name = format!("res{idx}");
        let conv1 = self.conv(&format!("{name}.conv1"), ch, ch);
        let conv2 = self.conv(&format!("{name}.conv2"), ch, ch);
        let time = self.time_embed_dim.map(|e| {
            let w = (self.make)(&name, &[ch, e], e);
            let tw = self.params.push(format!("{name}.time.weight"), w);
            let b = (self.make)(&name, &[ch], e);
            let tb = self.params.push(format!("{name}.time.bias"), b);
            (tw, tb)
        });
        ResSlot { conv1, conv2, time }
    }
}

/// Builds the slot table and parameter list; `make(layer, shape, fan_in)`
/// supplies each tensor. Used both for initialization and to validate
/// loaded checkpoints.
fn build_layout<S: Scalar>(
    cfg: &NetConfig,
    make: impl FnMut(&str, &[usize], usize) -> Tensor<S>,
) -> (Layout, Params<S>) {
    let mut b = LayoutBuilder {
        params: Params {
            names: Vec::new(),
            tensors: Vec::new(),
        },
        make,
        time_embed_dim: cfg.time_embed_dim,
    };
    let w = cfg.width;
    let stem = b.conv("stem", cfg.in_channels, w);
    let r0 = b.res(0, w);
    let r1 = b.res(1, w);
    let down = b.conv("down", w, 2 * w);
    let r2 = b.res(2, 2 * w);
    let r3 = b.res(3, 2 * w);
    let up = b.conv("up", 2 * w, w);
    let r4 = b.res(4, w);
    let r5 = b.res(5, w);
    let head = b.conv("head", w, cfg.out_channels);
    (
        Layout {
            stem,
            res: [r0, r1, r2, r3, r4, r5],
            down,
            up,
            head,
        },
        b.params,
    )
}

/// Sinusoidal embedding `[sin(t f_i), cos(t f_i)]`, `f_i = 10000^(-i / (E/2))`.
pub fn timestep_embedding<S: Scalar>(t: usize, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = S::of(arg.sin());
        out[half + i] = S::of(arg.cos());
    }
    out
}

struct ResCache<S> {
    input: Tensor<S>,
    cols1: Vec<S>,
    pre2: Tensor<S>,
    cols2: Vec<S>,
}

/// Activations recorded by a forward pass for the matching backward pass.
pub struct Tape<S> {
    embedding: Option<Vec<S>>,
    stem_cols: Vec<S>,
    res: Vec<ResCache<S>>,
    down_cols: Vec<S>,
    up_cols: Vec<S>,
    head_input: Tensor<S>,
    head_cols: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct EncoderDecoder<S = f32> {
    config: NetConfig,
    layout: Layout,
    params: Params<S>,
}

fn silu_map<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(silu)
}

fn mul_silu_grad<S: Scalar>(grad: &mut Tensor<S>, pre: &Tensor<S>) {
    for (g, &z) in grad.data_mut().iter_mut().zip(pre.data()) {
        *g *= silu_grad(z);
    }
}

fn pair_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

impl<S: Scalar> EncoderDecoder<S> {
    /// Uniform `+-1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new(config: NetConfig, rng: &mut Rng, init: Init) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build_layout(&config, |name, shape, fan_in| {
            if init.zero_head && name == "head" {
                return Tensor::zeros(shape);
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| S::of(rng.uniform_range(-bound, bound)))
        });
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: NetConfig, params: Params<S>) -> Result<Self> {
        config.validate()?;
        let (layout, template) = build_layout::<S>(&config, |_, shape, _| Tensor::zeros(shape));
        if template.names != params.names {
            return Err(Error::invalid("parameter names do not match the architecture"));
        }
        for (name, (a, b)) in template.names.iter().zip(template.tensors.iter().zip(&params.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<S> {
        &mut self.params
    }

    pub fn into_params(self) -> Params<S> {
        self.params
    }

    pub fn cast<T: Scalar>(&self) -> EncoderDecoder<T> {
        EncoderDecoder {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    fn p(&self, i: usize) -> &Tensor<S> {
        &self.params.tensors[i]
    }

    fn conv(&self, slot: ConvSlot, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
        conv3x3_forward(x, self.p(slot.weight), self.p(slot.bias))
    }

    fn time_bias(&self, slot: &ResSlot, emb: &[S]) -> Option<Vec<S>> {
        let (tw, tb) = slot.time?;
        let weight = self.p(tw);
        let e = emb.len();
        Some(
            self.p(tb)
                .data()
                .iter()
                .enumerate()
                .map(|(c, &b)| {
                    b + weight.data()[c * e..(c + 1) * e]
                        .iter()
                        .zip(emb)
                        .map(|(&w, &v)| w * v)
                        .sum::<S>()
                })
                .collect(),
        )
    }

    fn res_forward(
        &self,
        slot: &ResSlot,
        x: Tensor<S>,
        emb: Option<&[S]>,
        tape: Option<&mut Vec<ResCache<S>>>,
    ) -> Result<Tensor<S>> {
        let (mut pre2, cols1) = self.conv(slot.conv1, &silu_map(&x))?;
        if let Some(bias) = emb.and_then(|e| self.time_bias(slot, e)) {
            let plane = pre2.len() / bias.len();
            for (c, b) in bias.iter().enumerate() {
                for v in &mut pre2.data_mut()[c * plane..(c + 1) * plane] {
                    *v += *b;
                }
            }
        }
        let (branch, cols2) = self.conv(slot.conv2, &silu_map(&pre2))?;
        let out = x.zip_map(&branch, |a, b| a + b)?;
        if let Some(t) = tape {
            t.push(ResCache {
                input: x,
                cols1,
                pre2,
                cols2,
            });
        }
        Ok(out)
    }

    /// Forward pass on one `in_channels x H x W` input (H, W even).
    pub fn forward(&self, input: &Tensor<S>, t: Option<usize>) -> Result<Tensor<S>> {
        self.run(input, t, false).map(|(out, _)| out)
    }

    /// Forward pass that also records the activations needed by [`Self::backward`].
    pub fn forward_with_tape(&self, input: &Tensor<S>, t: Option<usize>) -> Result<(Tensor<S>, Tape<S>)> {
        self.run(input, t, true)
            .map(|(out, tape)| (out, tape.expect("tape requested")))
    }

    fn run(&self, input: &Tensor<S>, t: Option<usize>, record: bool) -> Result<(Tensor<S>, Option<Tape<S>>)> {
        let (c, h, w) = input.chw()?;
        if c != self.config.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("spatial extents must be even, got {h}x{w}")));
        }
        let embedding = match (self.config.time_embed_dim, t) {
            (Some(e), Some(t)) => Some(timestep_embedding::<S>(t, e)),
            (Some(_), None) => return Err(Error::param("time-conditioned network needs a timestep")),
            (None, _) => None,
        };
        let emb = embedding.as_deref();
        let mut res_tape = record.then(Vec::new);
        let layout = &self.layout;

        let (mut h0, stem_cols) = self.conv(layout.stem, input)?;
        h0 = self.res_forward(&layout.res[0], h0, emb, res_tape.as_mut())?;
        let skip = self.res_forward(&layout.res[1], h0, emb, res_tape.as_mut())?;
        let (mut mid, down_cols) = self.conv(layout.down, &avg_pool2(&skip)?)?;
        mid = self.res_forward(&layout.res[2], mid, emb, res_tape.as_mut())?;
        mid = self.res_forward(&layout.res[3], mid, emb, res_tape.as_mut())?;
        let (mut up, up_cols) = self.conv(layout.up, &upsample2(&mid)?)?;
        up.add_assign(&skip)?;
        up = self.res_forward(&layout.res[4], up, emb, res_tape.as_mut())?;
        up = self.res_forward(&layout.res[5], up, emb, res_tape.as_mut())?;
        let (out, head_cols) = self.conv(layout.head, &silu_map(&up))?;

        let tape = res_tape.map(|res| Tape {
            embedding,
            stem_cols,
            res,
            down_cols,
            up_cols,
            head_input: up,
            head_cols,
        });
        Ok((out, tape))
    }

    fn conv_back(
        &self,
        slot: ConvSlot,
        cols: &[S],
        grad_out: &Tensor<S>,
        grads: &mut Params<S>,
        want_input: bool,
    ) -> Option<Tensor<S>> {
        let (gw, gb) = pair_mut(&mut grads.tensors, slot.weight, slot.bias);
        conv3x3_backward(cols, self.p(slot.weight), grad_out, gw, gb, want_input)
    }

    fn res_backward(
        &self,
        slot: &ResSlot,
        cache: ResCache<S>,
        grad_out: Tensor<S>,
        emb: Option<&[S]>,
        grads: &mut Params<S>,
    ) -> Tensor<S> {
        let mut d_pre2 = self
            .conv_back(slot.conv2, &cache.cols2, &grad_out, grads, true)
            .expect("input grad requested");
        mul_silu_grad(&mut d_pre2, &cache.pre2);
        if let (Some((tw, tb)), Some(emb)) = (slot.time, emb) {
            let plane = d_pre2.len() / grads.tensors[tb].len();
            let e = emb.len();
            let (gw, gb) = pair_mut(&mut grads.tensors, tw, tb);
            for (c, gbc) in gb.data_mut().iter_mut().enumerate() {
                let s: S = d_pre2.data()[c * plane..(c + 1) * plane].iter().copied().sum();
                *gbc += s;
                for (g, &v) in gw.data_mut()[c * e..(c + 1) * e].iter_mut().zip(emb) {
                    *g += s * v;
                }
            }
        }
        let mut d_in = self
            .conv_back(slot.conv1, &cache.cols1, &d_pre2, grads, true)
            .expect("input grad requested");
        mul_silu_grad(&mut d_in, &cache.input);
        d_in.add_assign(&grad_out).expect("same shape");
        d_in
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, tape: Tape<S>, grad_out: &Tensor<S>, grads: &mut Params<S>) -> Result<()> {
        if grads.names != self.params.names {
            return Err(Error::dim("gradient store does not match the network"));
        }
        let Tape {
            embedding,
            stem_cols,
            res,
            down_cols,
            up_cols,
            head_input,
            head_cols,
        } = tape;
        let emb = embedding.as_deref();
        let layout = &self.layout;
        let mut caches: Vec<Option<ResCache<S>>> = res.into_iter().map(Some).collect();
        let mut take = |i: usize| caches[i].take().expect("each block cached once");

        let mut d = self
            .conv_back(layout.head, &head_cols, grad_out, grads, true)
            .expect("input grad requested");
        mul_silu_grad(&mut d, &head_input);
        d = self.res_backward(&layout.res[5], take(5), d, emb, grads);
        d = self.res_backward(&layout.res[4], take(4), d, emb, grads);
        let d_skip = d.clone();
        let d_up = self
            .conv_back(layout.up, &up_cols, &d, grads, true)
            .expect("input grad requested");
        d = upsample2_backward(&d_up);
        d = self.res_backward(&layout.res[3], take(3), d, emb, grads);
        d = self.res_backward(&layout.res[2], take(2), d, emb, grads);
        let d_pool = self
            .conv_back(layout.down, &down_cols, &d, grads, true)
            .expect("input grad requested");
        d = avg_pool2_backward(&d_pool);
        d.add_assign(&d_skip)?;
        d = self.res_backward(&layout.res[1], take(1), d, emb, grads);
        d = self.res_backward(&layout.res[0], take(0), d, emb, grads);
        self.conv_back(layout.stem, &stem_cols, &d, grads, false);
        Ok(())
    }
}
