//! Sequential training over a task stream with evaluation after every task.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{ClassId, RepresentationMode};
use crate::inference::{evaluate, score_inputs, EvalMode, PredictionTrace, ScoreTable};
use crate::metrics::{
    avg_inc_accuracy, expert_relative_accuracy, forgetting, intransigence, overlap_report, AccuracyMatrix,
    OverlapRow,
};
use crate::net::{param_count, ParamCounts};
use crate::scenarios::{Sample, TaskData};
use crate::trainer::{EnsembleState, SelectionStrategy, TaskLog, Trainer};

/// Evaluations recorded after each task; carried across save and load.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunHistory {
    pub logs: Vec<TaskLog>,
    pub agnostic: AccuracyMatrix,
    pub aware: AccuracyMatrix,
    /// Task-agnostic accuracy on the union of seen test sets, per step.
    pub step_accuracy: Vec<f64>,
    /// Task-aware accuracy on the union of seen test sets, per step.
    pub step_accuracy_aware: Vec<f64>,
    /// Accuracy of a jointly trained reference on each new task.
    pub joint: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub joint_reference: bool,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tasks: usize,
    pub experts: usize,
    pub strategy: SelectionStrategy,
    pub representation: RepresentationMode,
    pub tau: f64,
    pub alpha: f64,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub accuracy_matrix_task_aware: Vec<Vec<f64>>,
    pub step_accuracy: Vec<f64>,
    pub step_accuracy_task_aware: Vec<f64>,
    pub avg_inc_accuracy: f64,
    pub avg_inc_accuracy_task_aware: f64,
    pub final_accuracy: f64,
    pub forgetting: Option<f64>,
    pub intransigence: Option<f64>,
    pub joint_accuracy: Option<Vec<f64>>,
    /// Experts × tasks, column-mean centered.
    pub relative_accuracy: Vec<Vec<f64>>,
    /// One-based experts the relative-accuracy rows refer to.
    pub relative_accuracy_experts: Vec<usize>,
    pub overlap: Vec<OverlapRow>,
    pub chosen: Vec<Vec<usize>>,
    pub params: ParamCounts,
}

/// One traced prediction of the final evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub sample: usize,
    /// One-based task the sample belongs to.
    pub task: usize,
    pub label: ClassId,
    #[serde(flatten)]
    pub trace: PredictionTrace,
}

pub struct RunOutput {
    pub report: RunReport,
    pub traces: Vec<TraceRecord>,
}

/// Concatenated test samples of the first `n` tasks and their ranges.
fn seen_tests(tasks: &[TaskData], n: usize) -> (Vec<&Sample>, Vec<Range<usize>>) {
    let mut samples = Vec::new();
    let mut ranges = Vec::with_capacity(n);
    for task in &tasks[..n] {
        let start = samples.len();
        samples.extend(task.test.iter());
        ranges.push(start..samples.len());
    }
    (samples, ranges)
}

/// Per-task and pooled accuracies of the current state over the test sets of
/// the tasks seen so far.
pub struct StepEval {
    pub agnostic: Vec<f64>,
    pub aware: Vec<f64>,
    pub pooled: f64,
    pub pooled_aware: f64,
    pub table: ScoreTable,
    pub labels: Vec<ClassId>,
    pub ranges: Vec<Range<usize>>,
}

pub fn evaluate_step(state: &EnsembleState, tasks: &[TaskData], tau: f64) -> Result<StepEval> {
    let n = state.tasks_completed();
    if n > tasks.len() {
        return Err(Error::UnknownTask(n));
    }
    let (samples, ranges) = seen_tests(tasks, n);
    if samples.is_empty() || ranges.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyEvalSet);
    }
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let labels: Vec<ClassId> = samples.iter().map(|s| s.class).collect();
    let table = score_inputs(state, &inputs)?;
    let seen = state.seen_classes();
    let mut agnostic = Vec::with_capacity(n);
    let mut aware = Vec::with_capacity(n);
    let (mut hits, mut hits_aware) = (0usize, 0usize);
    for (j, range) in ranges.iter().enumerate() {
        let own = &state.task_classes[j];
        let (mut a, mut b) = (0usize, 0usize);
        for i in range.clone() {
            if table.predict(i, &seen, tau)?.predicted == labels[i] {
                a += 1;
            }
            if table.predict(i, own, tau)?.predicted == labels[i] {
                b += 1;
            }
        }
        hits += a;
        hits_aware += b;
        agnostic.push(a as f64 / range.len() as f64);
        aware.push(b as f64 / range.len() as f64);
    }
    let total = samples.len() as f64;
    Ok(StepEval {
        agnostic,
        aware,
        pooled: hits as f64 / total,
        pooled_aware: hits_aware as f64 / total,
        table,
        labels,
        ranges,
    })
}

/// Accuracy on task `k`'s test set of a single expert trained jointly on the
/// union of tasks `0..=k`.
pub fn joint_reference_accuracy(
    state_template: &EnsembleState,
    trainer: &Trainer,
    tasks: &[TaskData],
    k: usize,
) -> Result<f64> {
    let mut joint = EnsembleState::new(&state_template.net, 1)?;
    let mut config = trainer.config.clone();
    config.experts = 1;
    config.strategy = SelectionStrategy::KlMax;
    let joint_trainer = Trainer::new(config, trainer.seeds)?;
    let mut merged = TaskData {
        index: 0,
        classes: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for task in &tasks[..=k] {
        merged.classes.extend_from_slice(&task.classes);
        merged.train.extend(task.train.iter().cloned());
    }
    merged.classes.sort_unstable();
    joint_trainer.train_task(&mut joint, &merged)?;
    evaluate(&joint, &tasks[k].test, EvalMode::TaskAgnostic, trainer.config.tau)
}

/// Trains the remaining tasks of `tasks` (from `state.tasks_completed()`),
/// evaluating after each, and builds the report.
pub fn run_stream(
    trainer: &Trainer,
    state: &mut EnsembleState,
    history: &mut RunHistory,
    tasks: &[TaskData],
    options: RunOptions,
) -> Result<RunOutput> {
    if tasks.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if options.joint_reference && history.joint.is_none() {
        if history.logs.is_empty() {
            history.joint = Some(Vec::new());
        } else {
            return Err(Error::MissingReference);
        }
    }
    let tau = trainer.config.tau;
    let mut last: Option<StepEval> = None;
    for k in state.tasks_completed()..tasks.len() {
        let log = trainer.train_task(state, &tasks[k])?;
        history.logs.push(log);
        let step = evaluate_step(state, tasks, tau)?;
        history.agnostic.push_row(step.agnostic.clone())?;
        history.aware.push_row(step.aware.clone())?;
        history.step_accuracy.push(step.pooled);
        history.step_accuracy_aware.push(step.pooled_aware);
        if let Some(joint) = history.joint.as_mut().filter(|_| options.joint_reference) {
            joint.push(joint_reference_accuracy(state, trainer, tasks, k)?);
        }
        last = Some(step);
    }
    let step = match last {
        Some(s) => s,
        None => evaluate_step(state, tasks, tau)?,
    };
    let traces = if options.trace {
        let seen = state.seen_classes();
        let mut out = Vec::with_capacity(step.labels.len());
        for (j, range) in step.ranges.iter().enumerate() {
            for i in range.clone() {
                out.push(TraceRecord {
                    sample: i,
                    task: j + 1,
                    label: step.labels[i],
                    trace: step.table.predict(i, &seen, tau)?,
                });
            }
        }
        out
    } else {
        Vec::new()
    };
    let report = build_report(trainer, state, history, &step);
    Ok(RunOutput { report, traces })
}

fn build_report(trainer: &Trainer, state: &EnsembleState, history: &RunHistory, step: &StepEval) -> RunReport {
    let cfg = &trainer.config;
    let relative = expert_relative_accuracy(&step.table, &step.labels, &step.ranges, &state.seen_classes());
    let intr = history
        .joint
        .as_ref()
        .and_then(|j| intransigence(&history.agnostic, j).ok());
    RunReport {
        tasks: state.tasks_completed(),
        experts: state.experts(),
        strategy: cfg.strategy,
        representation: cfg.representation,
        tau: cfg.tau,
        alpha: cfg.alpha,
        accuracy_matrix: history.agnostic.rows().to_vec(),
        accuracy_matrix_task_aware: history.aware.rows().to_vec(),
        step_accuracy: history.step_accuracy.clone(),
        step_accuracy_task_aware: history.step_accuracy_aware.clone(),
        avg_inc_accuracy: avg_inc_accuracy(&history.step_accuracy).unwrap_or(0.0),
        avg_inc_accuracy_task_aware: avg_inc_accuracy(&history.step_accuracy_aware).unwrap_or(0.0),
        final_accuracy: step.pooled,
        forgetting: forgetting(&history.agnostic),
        intransigence: intr,
        joint_accuracy: history.joint.clone(),
        relative_accuracy: relative,
        relative_accuracy_experts: step.table.experts.iter().map(|k| k + 1).collect(),
        overlap: overlap_report(&history.logs),
        chosen: history.logs.iter().map(|l| l.chosen.clone()).collect(),
        params: param_count(&state.trunk, &state.heads, &state.banks),
    }
}
