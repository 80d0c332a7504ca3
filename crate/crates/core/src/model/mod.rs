//! Timestep-conditioned attention U-Net with per-task input stems and output heads.

mod params;

pub use params::{Param, ParamStore};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tape, Tensor, Var};
use crate::{Error, Result, Task};
use params::uniform_fan_in;

/// Output head selector. `Denoise` is the noise-prediction head used only by
/// self-supervised pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Ss,
    Cd,
    Denoise,
}

impl From<Task> for Head {
    fn from(task: Task) -> Self {
        match task {
            Task::Ss => Head::Ss,
            Task::Cd => Head::Cd,
        }
    }
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Ss => "ss",
            Head::Cd => "cd",
            Head::Denoise => "denoise",
        }
    }

    /// Change detection consumes a channel-stacked image pair.
    fn takes_pair(self) -> bool {
        matches!(self, Head::Cd)
    }

    fn stem_name(self) -> &'static str {
        if self.takes_pair() {
            "stem.pair"
        } else {
            "stem.image"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Channels of one image; change detection stems take twice this.
    pub in_channels: usize,
    pub out_classes: usize,
    pub stage_channels: Vec<usize>,
    pub num_resolutions: usize,
    pub time_embed_dim: usize,
    pub attention_at_bottleneck: bool,
    pub use_timestep_conditioning: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_classes: 2,
            stage_channels: vec![128, 256, 512],
            num_resolutions: 5,
            time_embed_dim: 512,
            attention_at_bottleneck: true,
            use_timestep_conditioning: true,
        }
    }
}

impl UNetConfig {
    /// Small configuration used for desk-scale training and the acceptance suite.
    pub fn desk() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            num_resolutions: 3,
            time_embed_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.out_classes < 2 {
            return Err(Error::Config(format!("out_classes = {} must be >= 2", self.out_classes)));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be non-empty and positive".into()));
        }
        if self.num_resolutions < self.stage_channels.len() {
            return Err(Error::Config(format!(
                "num_resolutions = {} is smaller than the {} listed stages",
                self.num_resolutions,
                self.stage_channels.len()
            )));
        }
        if self.use_timestep_conditioning && (self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0) {
            return Err(Error::Config(format!(
                "time_embed_dim = {} must be even and >= 4",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Channel width at resolution level `i`; levels past the list reuse the last width.
    pub fn width(&self, level: usize) -> usize {
        self.stage_channels[level.min(self.stage_channels.len() - 1)]
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.num_resolutions - 1)
    }
}

/// Sinusoidal timestep encoding: `[sin(t w_k) ..., cos(t w_k) ...]` with
/// `w_k = exp(-k ln(1e4) / (dim/2 - 1))`. Returns `[len(t), dim]`.
pub fn timestep_embedding<F: Float>(t: &[usize], dim: usize) -> Result<Tensor<F>> {
    if dim % 2 != 0 || dim < 4 {
        return Err(Error::Config(format!("embedding dimension {dim} must be even and >= 4")));
    }
    let half = dim / 2;
    let scale = (1e4f64).ln() / (half - 1) as f64;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let tf = step as f64;
        data.extend((0..half).map(|k| F::from_f64_lossy((tf * (-(k as f64) * scale).exp()).sin())));
        data.extend((0..half).map(|k| F::from_f64_lossy((tf * (-(k as f64) * scale).exp()).cos())));
    }
    Ok(Tensor::from_vec(&[t.len(), dim], data))
}

fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Option<Linear>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Attention {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
    heads: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    time: Option<(Linear, Linear)>,
    encoder: Vec<(ResBlock, Option<Conv>)>,
    mid: ResBlock,
    attention: Option<Attention>,
    decoder: Vec<(ResBlock, Option<Conv>)>,
    out_norm: Norm,
}

struct Builder<'a, F, R: ?Sized> {
    store: ParamStore<F>,
    rng: &'a mut R,
}

impl<F: Float, R: Rng + ?Sized> Builder<'_, F, R> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Conv {
        let fan_in = c_in * k * k;
        let w = self.store.add(format!("{name}.weight"), uniform_fan_in(&[c_out, c_in, k, k], fan_in, self.rng));
        let b = self.store.add(format!("{name}.bias"), uniform_fan_in(&[c_out], fan_in, self.rng));
        Conv { w, b, stride, pad: k / 2 }
    }

    fn zero_conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Conv {
        let w = self.store.add(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in, 1, 1]));
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv { w, b, stride: 1, pad: 0 }
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> Linear {
        let w = self.store.add(format!("{name}.weight"), uniform_fan_in(&[n_out, n_in], n_in, self.rng));
        let b = self.store.add(format!("{name}.bias"), uniform_fan_in(&[n_out], n_in, self.rng));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::full(&[c], F::one()));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        Norm {
            gamma,
            beta,
            groups: norm_groups(c),
        }
    }

    fn res_block(&mut self, name: &str, c_in: usize, c_out: usize, temb: Option<usize>) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), c_in),
            conv1: self.conv(&format!("{name}.conv1"), c_in, c_out, 3, 1),
            time: temb.map(|d| self.linear(&format!("{name}.time"), d, c_out)),
            norm2: self.norm(&format!("{name}.norm2"), c_out),
            conv2: self.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip: (c_in != c_out).then(|| self.conv(&format!("{name}.skip"), c_in, c_out, 1, 1)),
        }
    }
}

/// The denoising network: shared trunk, one input stem per input arity and one
/// 1x1 output projection per head.
#[derive(Debug)]
pub struct DenoiserModel<F> {
    config: UNetConfig,
    heads: Vec<Head>,
    store: ParamStore<F>,
    layout: Layout,
    stems: Vec<(Head, Conv)>,
    outputs: Vec<(Head, Conv)>,
    samples_forwarded: AtomicU64,
}

impl<F: Float> Clone for DenoiserModel<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            heads: self.heads.clone(),
            store: self.store.clone(),
            layout: self.layout.clone(),
            stems: self.stems.clone(),
            outputs: self.outputs.clone(),
            samples_forwarded: AtomicU64::new(self.samples_forwarded.load(Ordering::Relaxed)),
        }
    }
}

impl<F: Float> DenoiserModel<F> {
    /// Builds a model with the requested heads. Initialization depends only on
    /// the config, the head list and the rng state.
    pub fn build<R: Rng + ?Sized>(config: &UNetConfig, heads: &[Head], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut heads = heads.to_vec();
        heads.sort();
        heads.dedup();
        if heads.is_empty() {
            return Err(Error::Config("a model needs at least one head".into()));
        }
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
        };
        let levels = config.num_resolutions;
        let temb_dim = config.use_timestep_conditioning.then_some(config.time_embed_dim);

        let time = temb_dim.map(|d| (b.linear("time.fc1", d, d), b.linear("time.fc2", d, d)));

        let mut stems: Vec<(Head, Conv)> = Vec::new();
        for &h in &heads {
            if let Some((_, existing)) = stems.iter().find(|(o, _)| o.stem_name() == h.stem_name()) {
                let existing = existing.clone();
                stems.push((h, existing));
            } else {
                let c_in = if h.takes_pair() {
                    2 * config.in_channels
                } else {
                    config.in_channels
                };
                let conv = b.conv(h.stem_name(), c_in, config.width(0), 3, 1);
                stems.push((h, conv));
            }
        }

        let mut encoder = Vec::with_capacity(levels);
        for i in 0..levels {
            let w = config.width(i);
            let res = b.res_block(&format!("enc.{i}.res"), w, w, temb_dim);
            let down = (i + 1 < levels).then(|| b.conv(&format!("enc.{i}.down"), w, config.width(i + 1), 3, 2));
            encoder.push((res, down));
        }
        let w_last = config.width(levels - 1);
        let mid = b.res_block("mid.res", w_last, w_last, temb_dim);
        let attention = config.attention_at_bottleneck.then(|| Attention {
            norm: b.norm("mid.attn.norm", w_last),
            q: b.conv("mid.attn.q", w_last, w_last, 1, 1),
            k: b.conv("mid.attn.k", w_last, w_last, 1, 1),
            v: b.conv("mid.attn.v", w_last, w_last, 1, 1),
            proj: b.conv("mid.attn.proj", w_last, w_last, 1, 1),
            heads: if w_last % 4 == 0 { 4 } else { 1 },
        });
        let mut decoder = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let w = config.width(i);
            let res = b.res_block(&format!("dec.{i}.res"), 2 * w, w, temb_dim);
            let up = (i > 0).then(|| b.conv(&format!("dec.{i}.up"), w, config.width(i - 1), 3, 1));
            decoder.push((res, up));
        }
        let out_norm = b.norm("out.norm", config.width(0));
        let outputs = heads
            .iter()
            .map(|&h| {
                let k = if h == Head::Denoise {
                    config.in_channels
                } else {
                    config.out_classes
                };
                (h, b.zero_conv(&format!("head.{}", h.name()), config.width(0), k))
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            heads,
            store: b.store,
            layout: Layout {
                time,
                encoder,
                mid,
                attention,
                decoder,
                out_norm,
            },
            stems,
            outputs,
            samples_forwarded: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn has_head(&self, head: Head) -> bool {
        self.heads.contains(&head)
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_parameters()
    }

    /// Number of samples pushed through [`DenoiserModel::forward_tape`] so far.
    pub fn samples_forwarded(&self) -> u64 {
        self.samples_forwarded.load(Ordering::Relaxed)
    }

    /// Whether a parameter belongs to an output head rather than the shared trunk.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    pub fn input_channels(&self, head: Head) -> usize {
        if head.takes_pair() {
            2 * self.config.in_channels
        } else {
            self.config.in_channels
        }
    }

    pub fn output_channels(&self, head: Head) -> usize {
        if head == Head::Denoise {
            self.config.in_channels
        } else {
            self.config.out_classes
        }
    }

    fn check_input(&self, shape: &[usize], t: &[usize], head: Head) -> Result<()> {
        if !self.has_head(head) {
            return Err(Error::Config(format!("model has no '{}' head", head.name())));
        }
        if shape.len() != 4 {
            return Err(Error::Shape(format!("expected [B, C, H, W] input, got {shape:?}")));
        }
        let expected = self.input_channels(head);
        if shape[1] != expected {
            return Err(Error::Shape(format!(
                "'{}' head expects {expected} input channels, got {}",
                head.name(),
                shape[1]
            )));
        }
        let m = self.config.spatial_multiple();
        if shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} must be a positive multiple of {m}; pad the input",
                shape[2], shape[3]
            )));
        }
        if t.len() != shape[0] {
            return Err(Error::Shape(format!("{} timesteps for a batch of {}", t.len(), shape[0])));
        }
        Ok(())
    }

    fn p(&self, tape: &mut Tape<F>, id: usize) -> Var {
        tape.param(id, self.store.value(id))
    }

    fn conv(&self, tape: &mut Tape<F>, c: &Conv, x: Var) -> Var {
        let w = self.p(tape, c.w);
        let b = self.p(tape, c.b);
        tape.conv2d(x, w, Some(b), c.stride, c.pad)
    }

    fn norm_act(&self, tape: &mut Tape<F>, n: &Norm, x: Var) -> Var {
        let g = self.p(tape, n.gamma);
        let b = self.p(tape, n.beta);
        let y = tape.group_norm(x, g, b, n.groups);
        tape.silu(y)
    }

    fn res_block(&self, tape: &mut Tape<F>, r: &ResBlock, x: Var, temb: Option<Var>) -> Var {
        let h = self.norm_act(tape, &r.norm1, x);
        let mut h = self.conv(tape, &r.conv1, h);
        if let (Some(lin), Some(temb)) = (&r.time, temb) {
            let w = self.p(tape, lin.w);
            let b = self.p(tape, lin.b);
            let e = tape.linear(temb, w, b);
            h = tape.add_channel(h, e);
        }
        let h = self.norm_act(tape, &r.norm2, h);
        let h = self.conv(tape, &r.conv2, h);
        let skip = match &r.skip {
            Some(c) => self.conv(tape, c, x),
            None => x,
        };
        tape.add(h, skip)
    }

    fn attention(&self, tape: &mut Tape<F>, a: &Attention, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let d = c / a.heads;
        let n = h * w;
        let g = self.p(tape, a.norm.gamma);
        let be = self.p(tape, a.norm.beta);
        let normed = tape.group_norm(x, g, be, a.norm.groups);
        let q = self.conv(tape, &a.q, normed);
        let k = self.conv(tape, &a.k, normed);
        let v = self.conv(tape, &a.v, normed);
        let q = tape.reshape(q, &[batch * a.heads, d, n]);
        let k = tape.reshape(k, &[batch * a.heads, d, n]);
        let v = tape.reshape(v, &[batch * a.heads, d, n]);
        let scores = tape.bmm(q, k, true, false);
        let scores = tape.scale(scores, F::from_f64_lossy(1.0 / (d as f64).sqrt()));
        let probs = tape.softmax_last(scores);
        let out = tape.bmm(v, probs, false, true);
        let out = tape.reshape(out, &[batch, c, h, w]);
        let out = self.conv(tape, &a.proj, out);
        tape.add(out, x)
    }

    /// Records a forward pass on `tape` and returns the `[B, K, H, W]` logits
    /// (or `[B, C, H, W]` noise prediction for the denoise head).
    pub fn forward_tape(&self, tape: &mut Tape<F>, x: Var, t: &[usize], head: Head) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        self.check_input(&shape, t, head)?;
        self.samples_forwarded.fetch_add(shape[0] as u64, Ordering::Relaxed);
        let l = &self.layout;

        let temb = match &l.time {
            Some((fc1, fc2)) => {
                let emb = tape.constant(timestep_embedding(t, self.config.time_embed_dim)?);
                let (w1, b1) = (self.p(tape, fc1.w), self.p(tape, fc1.b));
                let h = tape.linear(emb, w1, b1);
                let h = tape.silu(h);
                let (w2, b2) = (self.p(tape, fc2.w), self.p(tape, fc2.b));
                let h = tape.linear(h, w2, b2);
                Some(tape.silu(h))
            }
            None => None,
        };

        let stem = &self.stems.iter().find(|(h, _)| *h == head).expect("checked head").1;
        let mut h = self.conv(tape, stem, x);
        let mut skips = Vec::with_capacity(l.encoder.len());
        for (res, down) in &l.encoder {
            h = self.res_block(tape, res, h, temb);
            skips.push(h);
            if let Some(down) = down {
                h = self.conv(tape, down, h);
            }
        }
        h = self.res_block(tape, &l.mid, h, temb);
        if let Some(attn) = &l.attention {
            h = self.attention(tape, attn, h);
        }
        for (res, up) in &l.decoder {
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat_channels(h, skip);
            h = self.res_block(tape, res, h, temb);
            if let Some(up) = up {
                h = tape.upsample2x(h);
                h = self.conv(tape, up, h);
            }
        }
        h = self.norm_act(tape, &l.out_norm, h);
        let out = &self.outputs.iter().find(|(o, _)| *o == head).expect("checked head").1;
        let logits = self.conv(tape, out, h);
        if !tape.value(logits).all_finite() {
            return Err(Error::Numeric("non-finite activations in forward pass".into()));
        }
        Ok(logits)
    }

    /// Gradient-free forward pass on a batch `[B, C, H, W]`.
    pub fn forward(&self, x: &Tensor<F>, t: &[usize], head: Head) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward_tape(&mut tape, xv, t, head)?;
        Ok(tape.value(out).clone())
    }

    /// Snapshot of every parameter as 32-bit arrays, in registration order.
    pub fn state(&self) -> ModelState {
        ModelState {
            arrays: self
                .store
                .iter()
                .map(|(_, p)| NamedArray {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    /// Loads every array of `state`; names and shapes must match this model exactly.
    pub fn load_state(&mut self, state: &ModelState) -> Result<()> {
        if state.arrays.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "state has {} arrays, model has {}",
                state.arrays.len(),
                self.store.len()
            )));
        }
        for a in &state.arrays {
            let id = self
                .store
                .id(&a.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", a.name)))?;
            self.assign(id, a)?;
        }
        Ok(())
    }

    /// Copies name- and shape-matched trunk parameters from `state`, leaving
    /// heads untouched. Returns how many arrays were transferred.
    pub fn transfer_trunk(&mut self, state: &ModelState) -> Result<usize> {
        let mut count = 0;
        for a in &state.arrays {
            if Self::is_head_param(&a.name) {
                continue;
            }
            if let Some(id) = self.store.id(&a.name) {
                if self.store.value(id).shape() == a.shape.as_slice() {
                    self.assign(id, a)?;
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    fn assign(&mut self, id: usize, a: &NamedArray) -> Result<()> {
        if self.store.value(id).shape() != a.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, state holds {:?}",
                a.name,
                self.store.value(id).shape(),
                a.shape
            )));
        }
        let t = self.store.value_mut(id);
        for (d, &s) in t.data_mut().iter_mut().zip(&a.data) {
            *d = F::from_f64_lossy(s as f64);
        }
        Ok(())
    }
}

/// A named 32-bit array.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat name -> array map of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelState {
    pub arrays: Vec<NamedArray>,
}

impl ModelState {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> UNetConfig {
        UNetConfig {
            stage_channels: vec![8, 16, 32],
            num_resolutions: 3,
            time_embed_dim: 16,
            ..UNetConfig::default()
        }
    }

    fn randomize_heads(model: &mut DenoiserModel<f32>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = model
            .params()
            .iter()
            .filter(|(_, p)| DenoiserModel::<f32>::is_head_param(&p.name))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            for v in model.params_mut().value_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn embedding_at_zero_is_sin_zero_cos_one() {
        let e = timestep_embedding::<f64>(&[0], 8).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_matches_closed_form() {
        // dim 4: w_0 = 1, w_1 = exp(-ln(1e4)) = 1e-4
        let e = timestep_embedding::<f64>(&[1], 4).unwrap();
        let expected = [1f64.sin(), 1e-4f64.sin(), 1f64.cos(), 1e-4f64.cos()];
        for (a, b) in e.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let a = timestep_embedding::<f32>(&[5], 128).unwrap();
        assert_eq!(a, timestep_embedding::<f32>(&[5], 128).unwrap());
        assert!(matches!(timestep_embedding::<f32>(&[1], 7), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DenoiserModel::<f32>::build(&small(), &[Head::Ss], &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let y = model.forward(&x, &[10], Head::Ss).unwrap();
        assert_eq!(y.shape(), &[1, 2, 64, 64]);
    }

    #[test]
    fn zero_initialized_head_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DenoiserModel::<f32>::build(&small(), &[Head::Cd], &mut rng).unwrap();
        let x = crate::schedule::standard_normal_like(&[1, 6, 16, 16], &mut rng);
        let y = model.forward(&x, &[400], Head::Cd).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_deterministic() {
        let a = DenoiserModel::<f32>::build(&small(), &[Head::Ss, Head::Cd], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = DenoiserModel::<f32>::build(&small(), &[Head::Cd, Head::Ss], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn identical_batch_entries_give_identical_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = DenoiserModel::<f32>::build(&small(), &[Head::Ss], &mut rng).unwrap();
        randomize_heads(&mut model, 2);
        let one = crate::schedule::standard_normal_like::<f32, _>(&[3, 16, 16], &mut rng);
        let x = Tensor::stack(&[one.clone(), one]).unwrap();
        let y = model.forward(&x, &[7, 7], Head::Ss).unwrap();
        assert_eq!(y.outer(0), y.outer(1));
    }

    #[test]
    fn conditioning_flag_controls_timestep_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = crate::schedule::standard_normal_like::<f32, _>(&[1, 3, 16, 16], &mut rng);
        let cfg = UNetConfig {
            use_timestep_conditioning: false,
            ..small()
        };
        let mut model = DenoiserModel::<f32>::build(&cfg, &[Head::Ss], &mut rng).unwrap();
        randomize_heads(&mut model, 3);
        assert_eq!(model.forward(&x, &[1], Head::Ss).unwrap(), model.forward(&x, &[900], Head::Ss).unwrap());

        let mut model = DenoiserModel::<f32>::build(&small(), &[Head::Ss], &mut rng).unwrap();
        randomize_heads(&mut model, 3);
        assert_ne!(model.forward(&x, &[1], Head::Ss).unwrap(), model.forward(&x, &[900], Head::Ss).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DenoiserModel::<f32>::build(&small(), &[Head::Ss], &mut rng).unwrap();
        let err = model.forward(&Tensor::zeros(&[1, 3, 18, 16]), &[0], Head::Ss).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("pad")));
        let err = model.forward(&Tensor::zeros(&[1, 6, 16, 16]), &[0], Head::Cd).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(UNetConfig { num_resolutions: 2, ..small() }.validate().is_err());
    }

    #[test]
    fn wider_stages_mean_more_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = DenoiserModel::<f32>::build(&small(), &[Head::Ss], &mut rng).unwrap();
        let wide = UNetConfig {
            stage_channels: vec![16, 32, 64],
            ..small()
        };
        let b = DenoiserModel::<f32>::build(&wide, &[Head::Ss], &mut rng).unwrap();
        assert!(b.count_parameters() > a.count_parameters());
    }

    #[test]
    fn trunk_transfer_skips_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pre = DenoiserModel::<f32>::build(&small(), &[Head::Denoise], &mut rng).unwrap();
        let mut task = DenoiserModel::<f32>::build(&small(), &[Head::Ss], &mut rng).unwrap();
        let n = task.transfer_trunk(&pre.state()).unwrap();
        let trunk = pre.params().len() - 2;
        assert_eq!(n, trunk);
        assert_eq!(task.state().get("enc.0.res.conv1.weight"), pre.state().get("enc.0.res.conv1.weight"));
        assert!(task.state().get("head.ss.weight").is_some());
    }
}
