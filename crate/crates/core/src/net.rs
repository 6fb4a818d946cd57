//! Multilayer perceptron feature extractors with hand-written backprop.
//!
//! An expert embeds `x` as `head(trunk(x))`. The trunk is shared by all
//! experts and ends in a hidden activation; a head's last layer is linear so
//! embeddings have full real support. A transient [`LinearHead`] maps the
//! embedding to task logits while an expert is being fine-tuned.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ClassBank;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Hidden widths of the shared trunk; empty means no sharing.
    #[serde(default)]
    pub trunk_layers: Vec<usize>,
    /// Hidden widths of each expert head before the embedding layer.
    #[serde(default)]
    pub head_layers: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub rng_seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.trunk_layers.iter().chain(&self.head_layers).any(|w| *w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn trunk_out_dim(&self) -> usize {
        self.trunk_layers.last().copied().unwrap_or(self.input_dim)
    }

    /// Parameter count of the trunk from the layer widths alone.
    pub fn trunk_param_count(&self) -> usize {
        chain_param_count(self.input_dim, &self.trunk_layers)
    }

    pub fn head_param_count(&self) -> usize {
        let mut widths = self.head_layers.clone();
        widths.push(self.embed_dim);
        chain_param_count(self.trunk_out_dim(), &widths)
    }
}

fn chain_param_count(input: usize, widths: &[usize]) -> usize {
    let mut fan_in = input;
    let mut total = 0;
    for w in widths {
        total += w * fan_in + w;
        fan_in = *w;
    }
    total
}

/// Fully connected layer, weights stored row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform He-style initialization, `U(−√(6/fan_in), √(6/fan_in))`,
    /// zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut d = Self::zeros(dim, dim);
        for i in 0..dim {
            d.weights[i * dim + i] = 1.0;
        }
        d
    }

    pub fn param_len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates `∂L/∂W` and `∂L/∂b` into `grad` (weights then bias) and
    /// returns `∂L/∂x`.
    fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (gw, gb) = grad.split_at_mut(self.weights.len());
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &go) in grad_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            gb[o] += go;
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut gw[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += go * x[i];
                grad_in[i] += go * row[i];
            }
        }
        grad_in
    }
}

/// Per-layer values recorded on the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    /// Whether the activation is also applied after the last layer.
    pub activate_last: bool,
}

impl Mlp {
    pub fn init(
        input: usize,
        widths: &[usize],
        activation: Activation,
        activate_last: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for w in widths {
            layers.push(Dense::init(fan_in, *w, rng));
            fan_in = *w;
        }
        Self {
            layers,
            activation,
            activate_last,
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.inputs)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.outputs)
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(Dense::param_len).sum()
    }

    fn activated(&self, idx: usize) -> bool {
        idx + 1 < self.layers.len() || self.activate_last
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        match self.input_dim() {
            Some(d) if d != x.len() => Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activated(i) {
                for v in &mut h {
                    *v = self.activation.apply(*v);
                }
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = if self.activated(i) {
                z.iter().map(|v| self.activation.apply(*v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Accumulates parameter gradients into `grad` (flat, same order as
    /// [`Mlp::flat_params`]) and returns the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_len();
        }
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activated(i) {
                for (gv, z) in g.iter_mut().zip(&cache.pre[i]) {
                    *gv *= self.activation.derivative(*z);
                }
            }
            let slot = &mut grad[offsets[i]..offsets[i] + layer.param_len()];
            g = layer.backward(&cache.inputs[i], &g, slot);
        }
        g
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_len(), "flat parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for l in &self.layers {
            l.inputs.hash(&mut h);
            l.outputs.hash(&mut h);
            for v in l.weights.iter().chain(&l.bias) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Shared layers `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub mlp: Mlp,
    pub frozen: bool,
}

impl Trunk {
    pub fn init(cfg: &NetConfig, rng: &mut SeededRng) -> Self {
        Self {
            mlp: Mlp::init(cfg.input_dim, &cfg.trunk_layers, cfg.activation, true, rng),
            frozen: false,
        }
    }

    /// Identity map when the trunk has no layers.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(x)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_len()
    }
}

/// Expert-specific layers `g_k`, ending in a linear embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHead {
    pub mlp: Mlp,
    pub index: usize,
    pub trained: bool,
}

impl ExpertHead {
    pub fn init(cfg: &NetConfig, index: usize, rng: &mut SeededRng) -> Self {
        let mut widths = cfg.head_layers.clone();
        widths.push(cfg.embed_dim);
        Self {
            mlp: Mlp::init(cfg.trunk_out_dim(), &widths, cfg.activation, false, rng),
            index,
            trained: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.output_dim().unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_len()
    }
}

/// Task-local classifier over the embedding, discarded after the task.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub layer: Dense,
}

impl LinearHead {
    pub fn init(embed_dim: usize, classes: usize, rng: &mut SeededRng) -> Self {
        Self {
            layer: Dense::init(embed_dim, classes, rng),
        }
    }

    pub fn logits(&self, e: &[f64]) -> Vec<f64> {
        self.layer.forward(e)
    }
}

/// `r = g ∘ f(x)`.
pub fn forward_embed(trunk: &Trunk, head: &ExpertHead, x: &[f64]) -> Result<Vec<f64>> {
    let h = trunk.forward(x)?;
    head.mlp.forward(&h)
}

/// How the task loss is assembled for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    /// Distillation weight; ignored when `teacher` is `None`.
    pub alpha: f64,
    /// Frozen copy of the expert taken before fine-tuning. `None` means the
    /// loss is plain cross-entropy.
    pub teacher: Option<&'a ExpertHead>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `None` when the trunk is frozen.
    pub trunk: Option<Vec<f64>>,
    pub head: Vec<f64>,
    pub linear: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean cross-entropy of `logits` against target indices.
pub fn cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(l, t)| -log_softmax(l)[*t])
        .sum::<f64>()
        / n
}

/// `(1 − α)·CE + α·mean‖e_new − e_old‖`, or CE alone without old embeddings.
pub fn task_loss(
    logits: &[Vec<f64>],
    targets: &[usize],
    embed_new: &[Vec<f64>],
    embed_old: Option<&[Vec<f64>]>,
    alpha: f64,
) -> f64 {
    let ce = cross_entropy(logits, targets);
    match embed_old {
        None => ce,
        Some(old) => {
            let kd = embed_new
                .iter()
                .zip(old)
                .map(|(a, b)| l2_dist(a, b))
                .sum::<f64>()
                / embed_new.len() as f64;
            (1.0 - alpha) * ce + alpha * kd
        }
    }
}

/// Loss and gradients for one batch of `(input, target index)` pairs.
///
/// Trunk gradients are produced only when the trunk is not frozen.
pub fn backward(
    trunk: &Trunk,
    head: &ExpertHead,
    linear: &LinearHead,
    batch: &[(&[f64], usize)],
    loss: LossSpec<'_>,
) -> Result<(f64, Gradients)> {
    let n = batch.len() as f64;
    let train_trunk = !trunk.frozen && trunk.mlp.param_len() > 0;
    let mut g_trunk = vec![0.0; if train_trunk { trunk.mlp.param_len() } else { 0 }];
    let mut g_head = vec![0.0; head.mlp.param_len()];
    let mut g_lin = vec![0.0; linear.layer.param_len()];
    let (ce_w, kd_w) = match loss.teacher {
        Some(_) => (1.0 - loss.alpha, loss.alpha),
        None => (1.0, 0.0),
    };
    let mut total = 0.0;

    for (x, target) in batch {
        let (trunk_cache, h) = if train_trunk {
            let c = trunk.mlp.forward_cached(x)?;
            let out = c.output.clone();
            (Some(c), out)
        } else {
            (None, trunk.forward(x)?)
        };
        let head_cache = head.mlp.forward_cached(&h)?;
        let e = &head_cache.output;
        let logits = linear.logits(e);
        if *target >= logits.len() {
            return Err(Error::DimensionMismatch {
                expected: logits.len(),
                got: *target + 1,
            });
        }
        let lsm = log_softmax(&logits);
        total += ce_w * -lsm[*target];

        let mut g_logits: Vec<f64> = lsm.iter().map(|l| ce_w * l.exp() / n).collect();
        g_logits[*target] -= ce_w / n;
        let mut g_e = linear.layer.backward(e, &g_logits, &mut g_lin);

        // Gradient reaching `h` through the frozen teacher, only needed when the trunk trains.
        let mut g_h_teacher = None;
        if let Some(teacher) = loss.teacher {
            let teacher_cache = teacher.mlp.forward_cached(&h)?;
            let old = &teacher_cache.output;
            let d = l2_dist(e, old);
            total += kd_w * d;
            // The norm is not differentiable at zero drift; use the zero subgradient.
            if d > 0.0 {
                let g_kd: Vec<f64> = e.iter().zip(old).map(|(a, b)| kd_w * (a - b) / (d * n)).collect();
                for (ge, g) in g_e.iter_mut().zip(&g_kd) {
                    *ge += g;
                }
                if train_trunk {
                    let neg: Vec<f64> = g_kd.iter().map(|g| -g).collect();
                    let mut scratch = vec![0.0; teacher.mlp.param_len()];
                    g_h_teacher = Some(teacher.mlp.backward(&teacher_cache, &neg, &mut scratch));
                }
            }
        }

        let mut g_h = head.mlp.backward(&head_cache, &g_e, &mut g_head);
        if let Some(extra) = g_h_teacher {
            for (a, b) in g_h.iter_mut().zip(extra) {
                *a += b;
            }
        }
        if let Some(c) = trunk_cache {
            trunk.mlp.backward(&c, &g_h, &mut g_trunk);
        }
    }

    Ok((
        total / n,
        Gradients {
            trunk: train_trunk.then_some(g_trunk),
            head: g_head,
            linear: g_lin,
        },
    ))
}

/// SGD hyperparameters with a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, divisor)`: from `epoch` on, the rate is divided by `divisor`.
    #[serde(default)]
    pub milestones: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![(30, 10.0), (45, 10.0)],
        }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(m, _)| epoch >= *m)
            .fold(self.lr, |lr, (_, d)| lr / d)
    }
}

/// Momentum buffers, one per parameter block.
#[derive(Debug, Clone)]
pub struct OptState {
    pub config: SgdConfig,
    buffers: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(config: SgdConfig, block_sizes: &[usize]) -> Self {
        Self {
            config,
            buffers: block_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// `v ← m·v − lr(epoch)·(g + wd·p)`, `p ← p + v` on block `slot`.
    pub fn sgd_step(&mut self, slot: usize, params: &mut [f64], grads: &[f64], epoch: usize) {
        let lr = self.config.lr_at(epoch);
        let (m, wd) = (self.config.momentum, self.config.weight_decay);
        let buf = &mut self.buffers[slot];
        assert_eq!(buf.len(), params.len(), "optimizer block shape");
        for ((v, p), g) in buf.iter_mut().zip(params.iter_mut()).zip(grads) {
            *v = m * *v - lr * (g + wd * *p);
            *p += *v;
        }
    }
}

/// Parameter footprint of a model split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trunk: usize,
    pub heads: usize,
    pub gaussians: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.trunk + self.heads + self.gaussians
    }
}

/// `|θ_f| + Σ_k |θ_g_k| + Σ_k Σ_c |stored class parameters|`.
pub fn param_count(trunk: &Trunk, heads: &[ExpertHead], banks: &[ClassBank]) -> ParamCounts {
    ParamCounts {
        trunk: trunk.param_count(),
        heads: heads.iter().map(ExpertHead::param_count).sum(),
        gaussians: banks.iter().map(ClassBank::param_count).sum(),
    }
}
