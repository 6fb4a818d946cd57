//! The expert-selection task loop.
//!
//! For the first `K` tasks expert `t` is trained with cross-entropy only (the
//! trunk is trained jointly on task 1 and frozen afterwards). From task
//! `K + 1` on, every expert embeds the new task's data, per-class Gaussians
//! are fitted, and the expert whose new-class distributions overlap least
//! (largest summed symmetrized KL) is fine-tuned with cross-entropy plus
//! feature distillation against its own pre-task snapshot. Class banks grow
//! by fitting the new classes in every trained expert; old classes are never
//! refit.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{fit_gaussian, overlap_score, ClassBank, ClassGaussian, ClassId, RepresentationMode};
use crate::net::{backward, ExpertHead, LinearHead, LossSpec, Mlp, NetConfig, OptState, SgdConfig, Trunk};
use crate::rng::{child_seed, derive_seed, SeededRng, Stream};
use crate::scenarios::{Sample, TaskData};

const LINEAR_HEAD_STREAM: u64 = 0x11EA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Least overlap: largest summed symmetrized KL.
    #[default]
    KlMax,
    KlMin,
    /// Uniform draw from the strategy stream.
    Random,
    /// Expert `1 + ((t − 1) mod K)`.
    RoundRobin,
    /// Every expert is fine-tuned on every task (plain ensemble baseline).
    TrainAll,
}

impl SelectionStrategy {
    pub fn uses_kl(self) -> bool {
        matches!(self, SelectionStrategy::KlMax | SelectionStrategy::KlMin)
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::KlMax => "kl-max",
            SelectionStrategy::KlMin => "kl-min",
            SelectionStrategy::Random => "random",
            SelectionStrategy::RoundRobin => "round-robin",
            SelectionStrategy::TrainAll => "train-all",
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl-max" => Ok(SelectionStrategy::KlMax),
            "kl-min" => Ok(SelectionStrategy::KlMin),
            "random" => Ok(SelectionStrategy::Random),
            "round-robin" => Ok(SelectionStrategy::RoundRobin),
            "train-all" => Ok(SelectionStrategy::TrainAll),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub experts: usize,
    pub alpha: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, divisor)` learning-rate milestones.
    pub milestones: Vec<(usize, f64)>,
    /// Covariance shrinkage.
    pub eps: f64,
    pub representation: RepresentationMode,
    pub strategy: SelectionStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            experts: 5,
            alpha: 0.99,
            tau: 3.0,
            epochs: 60,
            batch_size: 64,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            milestones: sgd.milestones,
            eps: 1e-4,
            representation: RepresentationMode::FullCovariance,
            strategy: SelectionStrategy::KlMax,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.experts == 0 {
            return bad("experts must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay ≥ 0");
        }
        if self.milestones.iter().any(|(_, d)| !(*d > 0.0)) {
            return bad("milestone divisors must be positive");
        }
        if !(self.eps >= 0.0) {
            return bad("eps must be ≥ 0");
        }
        Ok(())
    }
}

/// Seeds of the named random streams used during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub strategy: u64,
}

impl Seeds {
    pub fn from_global(seed: u64) -> Self {
        Self {
            init: derive_seed(seed, Stream::Init),
            shuffle: derive_seed(seed, Stream::Shuffle),
            strategy: derive_seed(seed, Stream::Strategy),
        }
    }
}

/// Trunk, experts and their class banks.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub net: NetConfig,
    pub trunk: Trunk,
    pub heads: Vec<ExpertHead>,
    pub banks: Vec<ClassBank>,
    /// Classes of each completed task, in order.
    pub task_classes: Vec<Vec<ClassId>>,
}

impl EnsembleState {
    /// Fresh ensemble; parameters are drawn from `net.rng_seed`.
    pub fn new(net: &NetConfig, experts: usize) -> Result<Self> {
        net.validate()?;
        if experts == 0 {
            return Err(Error::Config("experts must be ≥ 1".into()));
        }
        let trunk = Trunk::init(net, &mut SeededRng::new(child_seed(net.rng_seed, 0)));
        let heads = (0..experts)
            .map(|k| {
                ExpertHead::init(net, k, &mut SeededRng::new(child_seed(net.rng_seed, 1 + k as u64)))
            })
            .collect();
        Ok(Self {
            net: net.clone(),
            trunk,
            heads,
            banks: vec![ClassBank::new(); experts],
            task_classes: Vec::new(),
        })
    }

    pub fn experts(&self) -> usize {
        self.heads.len()
    }

    pub fn tasks_completed(&self) -> usize {
        self.task_classes.len()
    }

    pub fn trained_experts(&self) -> Vec<usize> {
        (0..self.heads.len()).filter(|k| self.heads[*k].trained).collect()
    }

    pub fn seen_classes(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.task_classes.iter().flatten().copied().collect();
        set.into_iter().collect()
    }

    /// Embedding of `x` by expert `k`.
    pub fn embed(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.trunk.forward(x)?;
        self.heads[k].mlp.forward(&h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Bootstrap,
    Selection,
    TrainAll,
}

/// One record per task, emitted as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    /// One-based task number.
    pub task: usize,
    pub classes: Vec<ClassId>,
    pub phase: Phase,
    /// One-based indices of the fine-tuned experts.
    pub chosen: Vec<usize>,
    /// Selection-phase overlap per expert (`None` when not computed).
    pub overlaps: Vec<Option<f64>>,
    /// Mean loss of the last epoch, per fine-tuned expert.
    pub final_losses: Vec<f64>,
    pub wall_ms: f64,
}

/// Outcome of the selection step.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Zero-based index of the chosen expert.
    pub expert: usize,
    pub overlaps: Vec<Option<f64>>,
    /// Per expert, Gaussians of the new classes fitted before fine-tuning.
    pub fits: Vec<Vec<(ClassId, ClassGaussian)>>,
    /// Mode the fits were made in.
    pub fit_mode: RepresentationMode,
}

fn group_by_class<'a>(samples: &'a [Sample], classes: &[ClassId]) -> Vec<Vec<&'a [f64]>> {
    classes
        .iter()
        .map(|c| samples.iter().filter(|s| s.class == *c).map(|s| s.x.as_slice()).collect())
        .collect()
}

/// Fits one model per class in expert `k`'s latent space.
pub fn fit_classes(
    state: &EnsembleState,
    k: usize,
    samples: &[Sample],
    classes: &[ClassId],
    mode: RepresentationMode,
    eps: f64,
) -> Result<Vec<(ClassId, ClassGaussian)>> {
    group_by_class(samples, classes)
        .into_iter()
        .zip(classes)
        .map(|(xs, c)| {
            let embedded = xs
                .iter()
                .map(|x| state.embed(k, x))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f64]> = embedded.iter().map(Vec::as_slice).collect();
            Ok((*c, fit_gaussian(&refs, mode, eps)?))
        })
        .collect()
}

/// Lowest index among the maximal (or minimal) finite scores.
fn extreme_index(scores: &[Option<f64>], maximize: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores.iter().enumerate() {
        let Some(v) = s.filter(|v| !v.is_nan()) else { continue };
        let better = match best {
            None => true,
            Some((_, b)) => {
                if maximize {
                    v > b
                } else {
                    v < b
                }
            }
        };
        if better {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Picks the expert to fine-tune on `task`, which is the stream's task with
/// zero-based index `state.tasks_completed()`.
pub fn select_expert(
    state: &EnsembleState,
    task: &TaskData,
    config: &TrainConfig,
    seeds: &Seeds,
) -> Result<Selection> {
    let t = state.tasks_completed();
    let k_total = state.experts();
    if t < k_total || state.trained_experts().len() < k_total {
        return Err(Error::Config(format!(
            "selection needs all {k_total} experts trained (task {})",
            t + 1
        )));
    }
    let multi_class = task.classes.len() >= 2;
    if config.strategy.uses_kl() && !multi_class {
        return Err(Error::SingleClassTask(t + 1));
    }
    let fit_mode = match config.representation {
        RepresentationMode::Prototype => RepresentationMode::FullCovariance,
        m => m,
    };

    let per_expert: Vec<(Vec<(ClassId, ClassGaussian)>, Option<f64>)> = (0..k_total)
        .into_par_iter()
        .map(|k| {
            let fits = fit_classes(state, k, &task.train, &task.classes, fit_mode, config.eps)?;
            let overlap = if multi_class {
                let mut bank = ClassBank::new();
                for (c, g) in &fits {
                    bank.insert(*c, g.clone())?;
                }
                Some(overlap_score(&bank, &task.classes)?)
            } else {
                None
            };
            Ok((fits, overlap))
        })
        .collect::<Result<_>>()?;
    let (fits, overlaps): (Vec<_>, Vec<_>) = per_expert.into_iter().unzip();

    let expert = match config.strategy {
        SelectionStrategy::KlMax => extreme_index(&overlaps, true).unwrap_or(0),
        SelectionStrategy::KlMin => extreme_index(&overlaps, false).unwrap_or(0),
        SelectionStrategy::Random => {
            SeededRng::new(child_seed(seeds.strategy, t as u64)).below(k_total)
        }
        SelectionStrategy::RoundRobin => t % k_total,
        SelectionStrategy::TrainAll => 0,
    };
    Ok(Selection {
        expert,
        overlaps,
        fits,
        fit_mode,
    })
}

/// Drives training of an [`EnsembleState`] one task at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub seeds: Seeds,
}

impl Trainer {
    pub fn new(config: TrainConfig, seeds: Seeds) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, seeds })
    }

    /// Trains expert `k` on `task`. The trunk is updated only if it is not
    /// frozen. With `distill` the loss adds feature distillation against a
    /// snapshot of the expert taken here. Returns the last epoch's mean loss.
    fn fine_tune(&self, state: &mut EnsembleState, k: usize, task: &TaskData, distill: bool) -> Result<f64> {
        let cfg = &self.config;
        let t = state.tasks_completed() as u64;
        let classes = &task.classes;
        let targets: Vec<usize> = task
            .train
            .iter()
            .map(|s| classes.binary_search(&s.class).map_err(|_| Error::MissingClass(s.class)))
            .collect::<Result<_>>()?;
        if task.train.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }

        let train_trunk = !state.trunk.frozen && state.trunk.param_count() > 0;
        // With a frozen trunk its features are computed once and the
        // expert trains on them through an identity trunk.
        let identity = Trunk {
            mlp: Mlp {
                layers: Vec::new(),
                activation: state.net.activation,
                activate_last: true,
            },
            frozen: true,
        };
        let inputs: Vec<Vec<f64>> = if train_trunk {
            task.train.iter().map(|s| s.x.clone()).collect()
        } else {
            task.train
                .iter()
                .map(|s| state.trunk.forward(&s.x))
                .collect::<Result<_>>()?
        };

        let teacher = distill.then(|| state.heads[k].clone());
        let lin_seed = child_seed(child_seed(self.seeds.init, LINEAR_HEAD_STREAM), t);
        let mut linear = LinearHead::init(
            state.heads[k].embed_dim(),
            classes.len(),
            &mut SeededRng::new(child_seed(lin_seed, k as u64)),
        );
        let mut shuffle = SeededRng::new(child_seed(child_seed(self.seeds.shuffle, t), k as u64));

        let mut blocks = Vec::new();
        if train_trunk {
            blocks.push(state.trunk.param_count());
        }
        blocks.push(state.heads[k].param_count());
        blocks.push(linear.layer.param_len());
        let mut opt = OptState::new(cfg.sgd(), &blocks);

        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut last_epoch_loss = 0.0;
        for epoch in 0..cfg.epochs {
            shuffle.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<(&[f64], usize)> =
                    chunk.iter().map(|&i| (inputs[i].as_slice(), targets[i])).collect();
                let trunk_ref = if train_trunk { &state.trunk } else { &identity };
                let spec = LossSpec {
                    alpha: cfg.alpha,
                    teacher: teacher.as_ref(),
                };
                let (loss, grads) = backward(trunk_ref, &state.heads[k], &linear, &batch, spec)?;
                epoch_loss += loss * batch.len() as f64;

                let mut slot = 0;
                if let Some(g) = grads.trunk.as_ref().filter(|_| train_trunk) {
                    let mut p = state.trunk.mlp.flat_params();
                    opt.sgd_step(slot, &mut p, g, epoch);
                    state.trunk.mlp.set_flat_params(&p);
                    slot += 1;
                }
                let mut p = state.heads[k].mlp.flat_params();
                opt.sgd_step(slot, &mut p, &grads.head, epoch);
                state.heads[k].mlp.set_flat_params(&p);
                slot += 1;
                let mut p = linear.layer.weights.clone();
                p.extend_from_slice(&linear.layer.bias);
                opt.sgd_step(slot, &mut p, &grads.linear, epoch);
                let nw = linear.layer.weights.len();
                linear.layer.weights.copy_from_slice(&p[..nw]);
                linear.layer.bias.copy_from_slice(&p[nw..]);
            }
            last_epoch_loss = epoch_loss / inputs.len() as f64;
        }
        state.heads[k].trained = true;
        Ok(last_epoch_loss)
    }

    fn check_task(&self, state: &EnsembleState, task: &TaskData) -> Result<()> {
        if task.classes.is_empty() {
            return Err(Error::TooFewClasses(0));
        }
        let seen: BTreeSet<ClassId> = state.task_classes.iter().flatten().copied().collect();
        if let Some(c) = task.classes.iter().find(|c| seen.contains(c)) {
            return Err(Error::ClassCollision(*c));
        }
        if task.train.iter().any(|s| task.classes.binary_search(&s.class).is_err()) {
            return Err(Error::Config(format!(
                "task {} has samples outside its class set",
                state.tasks_completed() + 1
            )));
        }
        Ok(())
    }

    /// Trains the next task and updates the class banks.
    pub fn train_task(&self, state: &mut EnsembleState, task: &TaskData) -> Result<TaskLog> {
        let start = Instant::now();
        let mut sorted = task.clone();
        sorted.classes.sort_unstable();
        sorted.classes.dedup();
        let task = &sorted;
        self.check_task(state, task)?;

        let t = state.tasks_completed();
        let k_total = state.experts();
        let cfg = &self.config;
        let mut overlaps = vec![None; k_total];
        let mut reusable: Vec<Option<Vec<(ClassId, ClassGaussian)>>> = vec![None; k_total];
        let mut final_losses = Vec::new();

        let (phase, chosen) = if cfg.strategy == SelectionStrategy::TrainAll {
            for k in 0..k_total {
                final_losses.push(self.fine_tune(state, k, task, t > 0)?);
                state.trunk.frozen = true;
            }
            (Phase::TrainAll, (0..k_total).collect::<Vec<_>>())
        } else if t < k_total {
            final_losses.push(self.fine_tune(state, t, task, false)?);
            state.trunk.frozen = true;
            (Phase::Bootstrap, vec![t])
        } else {
            let sel = select_expert(state, task, cfg, &self.seeds)?;
            overlaps = sel.overlaps;
            if sel.fit_mode == cfg.representation {
                for (k, fits) in sel.fits.into_iter().enumerate() {
                    if k != sel.expert {
                        reusable[k] = Some(fits);
                    }
                }
            }
            final_losses.push(self.fine_tune(state, sel.expert, task, true)?);
            (Phase::Selection, vec![sel.expert])
        };

        for k in state.trained_experts() {
            let fits = match reusable[k].take() {
                Some(f) => f,
                None => fit_classes(state, k, &task.train, &task.classes, cfg.representation, cfg.eps)?,
            };
            for (c, g) in fits {
                state.banks[k].insert(c, g)?;
            }
        }
        state.task_classes.push(task.classes.clone());

        Ok(TaskLog {
            task: t + 1,
            classes: task.classes.clone(),
            phase,
            chosen: chosen.iter().map(|k| k + 1).collect(),
            overlaps,
            final_losses,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}
