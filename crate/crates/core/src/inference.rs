//! Bayes-ensemble prediction.
//!
//! Each trained expert scores the embedding of `x` against its class bank,
//! turns the scores into a temperature softmax over the candidate classes it
//! holds, and the per-class probabilities are averaged over the experts that
//! hold that class. The averaged vector is renormalized and its argmax is the
//! prediction. Candidates are all seen classes (task-agnostic) or one task's
//! classes (task-aware).

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::{log_likelihood, ClassId};
use crate::scenarios::Sample;
use crate::trainer::EnsembleState;

/// Softmax of `logits / tau` with max-subtraction.
pub fn temp_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    TaskAgnostic,
    /// Zero-based task index.
    TaskAware(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertScores {
    /// Zero-based expert index.
    pub expert: usize,
    /// Candidate classes this expert holds.
    pub classes: Vec<ClassId>,
    pub log_likelihoods: Vec<f64>,
    pub softmax: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionTrace {
    pub candidates: Vec<ClassId>,
    pub experts: Vec<ExpertScores>,
    /// Averaged probability per candidate, summing to one.
    pub averaged: Vec<f64>,
    pub predicted: ClassId,
}

fn candidates_for(state: &EnsembleState, mode: EvalMode) -> Result<Vec<ClassId>> {
    match mode {
        EvalMode::TaskAgnostic => Ok(state.seen_classes()),
        EvalMode::TaskAware(t) => state
            .task_classes
            .get(t)
            .cloned()
            .ok_or(Error::UnknownTask(t + 1)),
    }
}

/// Per-sample log-likelihoods of every seen class under every trained
/// expert. `None` marks classes an expert does not hold.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub experts: Vec<usize>,
    pub classes: Vec<ClassId>,
    /// `[sample][expert][class]`.
    pub scores: Vec<Vec<Vec<Option<f64>>>>,
}

impl ScoreTable {
    fn class_slot(&self, c: ClassId) -> Result<usize> {
        self.classes.binary_search(&c).map_err(|_| Error::MissingClass(c))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Ensemble prediction of sample `i` over `candidates`.
    pub fn predict(&self, i: usize, candidates: &[ClassId], tau: f64) -> Result<PredictionTrace> {
        let slots = candidates
            .iter()
            .map(|c| self.class_slot(*c))
            .collect::<Result<Vec<_>>>()?;
        let mut sums = vec![0.0; candidates.len()];
        let mut holders = vec![0usize; candidates.len()];
        let mut experts = Vec::with_capacity(self.experts.len());
        for (e, &k) in self.experts.iter().enumerate() {
            let row = &self.scores[i][e];
            let held: Vec<usize> = (0..candidates.len()).filter(|&j| row[slots[j]].is_some()).collect();
            if held.is_empty() {
                continue;
            }
            let lls: Vec<f64> = held.iter().map(|&j| row[slots[j]].unwrap()).collect();
            let probs = temp_softmax(&lls, tau);
            for (&j, p) in held.iter().zip(&probs) {
                sums[j] += p;
                holders[j] += 1;
            }
            experts.push(ExpertScores {
                expert: k,
                classes: held.iter().map(|&j| candidates[j]).collect(),
                log_likelihoods: lls,
                softmax: probs,
            });
        }
        if experts.is_empty() {
            return Err(Error::NoTrainedExperts);
        }
        let mut averaged: Vec<f64> = sums
            .iter()
            .zip(&holders)
            .map(|(s, h)| if *h == 0 { 0.0 } else { s / *h as f64 })
            .collect();
        let z: f64 = averaged.iter().sum();
        for a in &mut averaged {
            *a /= z;
        }
        let mut best = 0;
        for j in 1..averaged.len() {
            if averaged[j] > averaged[best] {
                best = j;
            }
        }
        Ok(PredictionTrace {
            candidates: candidates.to_vec(),
            experts,
            averaged,
            predicted: candidates[best],
        })
    }

    /// Argmax of one expert's own log-likelihoods over the classes it holds
    /// among `candidates`.
    pub fn predict_single(&self, i: usize, expert_slot: usize, candidates: &[ClassId]) -> Option<ClassId> {
        let row = &self.scores[i][expert_slot];
        let mut best: Option<(ClassId, f64)> = None;
        for &c in candidates {
            let Ok(slot) = self.class_slot(c) else { continue };
            if let Some(v) = row[slot] {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((c, v));
                }
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Scores every input against every seen class of every trained expert.
pub fn score_inputs(state: &EnsembleState, inputs: &[&[f64]]) -> Result<ScoreTable> {
    let experts = state.trained_experts();
    if experts.is_empty() {
        return Err(Error::NoTrainedExperts);
    }
    let classes = state.seen_classes();
    let scores = inputs
        .par_iter()
        .map(|x| {
            let h = state.trunk.forward(x)?;
            experts
                .iter()
                .map(|&k| {
                    let r = state.heads[k].mlp.forward(&h)?;
                    let bank = &state.banks[k];
                    classes
                        .iter()
                        .map(|c| bank.get(*c).map(|g| log_likelihood(g, &r)).transpose())
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable {
        experts,
        classes,
        scores,
    })
}

pub fn predict(state: &EnsembleState, x: &[f64], mode: EvalMode, tau: f64) -> Result<PredictionTrace> {
    let candidates = candidates_for(state, mode)?;
    let table = score_inputs(state, &[x])?;
    table.predict(0, &candidates, tau)
}

/// Fraction of correctly predicted samples.
pub fn evaluate(state: &EnsembleState, samples: &[Sample], mode: EvalMode, tau: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let candidates = candidates_for(state, mode)?;
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let table = score_inputs(state, &inputs)?;
    let mut correct = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if table.predict(i, &candidates, tau)?.predicted == s.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
