mod common;

use common::*;
use seed_cl::config::RunConfig;
use seed_cl::error::Error;
use seed_cl::inference::{evaluate, EvalMode};
use seed_cl::runner::{evaluate_step, run_stream, RunHistory, RunOptions, RunOutput};
use seed_cl::scenarios::TaskData;
use seed_cl::state::RunStateFile;
use seed_cl::trainer::{EnsembleState, Phase, SelectionStrategy, Trainer};

fn run(cfg: &RunConfig, tasks: &[TaskData], options: RunOptions) -> (EnsembleState, RunHistory, RunOutput) {
    let trainer = Trainer::new(cfg.training.clone(), cfg.seeds()).unwrap();
    let mut state = EnsembleState::new(&cfg.net(), cfg.training.experts).unwrap();
    let mut history = RunHistory::default();
    let out = run_stream(&trainer, &mut state, &mut history, tasks, options).unwrap();
    (state, history, out)
}

fn without_timing(mut h: RunHistory) -> RunHistory {
    for l in &mut h.logs {
        l.wall_ms = 0.0;
    }
    h
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = small_config(21, 3, 6, 2);
    let tasks = cfg.tasks().unwrap();
    let (straight_state, straight_hist, straight_out) = run(&cfg, &tasks, RunOptions::default());

    let (half_state, half_hist, _) = run(&cfg, &tasks[..3], RunOptions::default());
    let file = RunStateFile {
        config: cfg.to_toml(),
        seeds: cfg.seeds(),
        state: half_state,
        history: half_hist,
    };
    let mut loaded = RunStateFile::from_bytes(&file.to_bytes()).unwrap();
    let trainer = Trainer::new(cfg.training.clone(), loaded.seeds).unwrap();
    let out = run_stream(&trainer, &mut loaded.state, &mut loaded.history, &tasks, RunOptions::default()).unwrap();

    assert_eq!(loaded.state, straight_state);
    assert_eq!(without_timing(loaded.history), without_timing(straight_hist));
    assert_eq!(
        serde_json::to_string(&out.report).unwrap(),
        serde_json::to_string(&straight_out.report).unwrap()
    );
}

#[test]
fn saved_state_reproduces_final_accuracy_row() {
    let cfg = small_config(22, 2, 4, 2);
    let tasks = cfg.tasks().unwrap();
    let (state, history, _) = run(&cfg, &tasks, RunOptions::default());
    let file = RunStateFile {
        config: cfg.to_toml(),
        seeds: cfg.seeds(),
        state,
        history,
    };
    let loaded = RunStateFile::from_bytes(&file.to_bytes()).unwrap();
    let step = evaluate_step(&loaded.state, &tasks, cfg.training.tau).unwrap();
    assert_eq!(&step.agnostic, loaded.history.agnostic.rows().last().unwrap());
    assert_eq!(&step.aware, loaded.history.aware.rows().last().unwrap());
    for (j, task) in tasks.iter().enumerate() {
        let acc = evaluate(&loaded.state, &task.test, EvalMode::TaskAgnostic, cfg.training.tau).unwrap();
        assert_eq!(acc, step.agnostic[j]);
    }
}

#[test]
fn train_all_updates_every_head_after_bootstrap() {
    let mut cfg = small_config(23, 3, 5, 2);
    cfg.training.strategy = SelectionStrategy::TrainAll;
    let tasks = cfg.tasks().unwrap();
    let trainer = Trainer::new(cfg.training.clone(), cfg.seeds()).unwrap();
    let mut state = EnsembleState::new(&cfg.net(), 3).unwrap();
    for (t, task) in tasks.iter().enumerate() {
        let before: Vec<u64> = state.heads.iter().map(|h| h.mlp.checksum()).collect();
        let log = trainer.train_task(&mut state, task).unwrap();
        if t >= 3 {
            assert_eq!(log.phase, Phase::TrainAll);
            assert_eq!(log.chosen, vec![1, 2, 3]);
            for (k, h) in state.heads.iter().enumerate() {
                assert_ne!(h.mlp.checksum(), before[k], "head {k} unchanged on task {}", t + 1);
            }
        }
    }
}

#[test]
fn kl_strategies_pick_extreme_overlap() {
    for (strategy, want_max) in [(SelectionStrategy::KlMax, true), (SelectionStrategy::KlMin, false)] {
        let mut cfg = small_config(24, 3, 6, 2);
        cfg.training.strategy = strategy;
        let tasks = cfg.tasks().unwrap();
        let (_, history, out) = run(&cfg, &tasks, RunOptions::default());
        let selections: Vec<_> = history.logs.iter().filter(|l| l.phase == Phase::Selection).collect();
        assert_eq!(selections.len(), 3);
        for log in selections {
            let scores: Vec<f64> = log.overlaps.iter().map(|o| o.unwrap()).collect();
            let mut best = 0;
            for k in 1..scores.len() {
                let better = if want_max { scores[k] > scores[best] } else { scores[k] < scores[best] };
                if better {
                    best = k;
                }
            }
            assert_eq!(log.chosen, vec![best + 1]);
        }
        assert!(out.report.overlap.iter().take(3).all(|r| !r.selection));
    }
}

#[test]
fn round_robin_and_random_follow_their_rules() {
    let mut cfg = small_config(25, 2, 6, 2);
    cfg.training.strategy = SelectionStrategy::RoundRobin;
    let tasks = cfg.tasks().unwrap();
    let (_, history, _) = run(&cfg, &tasks, RunOptions::default());
    for log in &history.logs {
        assert_eq!(log.chosen, vec![1 + (log.task - 1) % 2]);
    }

    cfg.training.strategy = SelectionStrategy::Random;
    let (_, a, _) = run(&cfg, &tasks, RunOptions::default());
    let (_, b, _) = run(&cfg, &tasks, RunOptions::default());
    assert_eq!(without_timing(a), without_timing(b));
}

#[test]
fn report_metrics_are_consistent() {
    let mut cfg = small_config(26, 3, 5, 2);
    cfg.output.joint_reference = true;
    let tasks = cfg.tasks().unwrap();
    let (_, history, out) = run(&cfg, &tasks, RunOptions { joint_reference: true, trace: true });
    let r = &out.report;

    assert_eq!(r.avg_inc_accuracy, mean(&r.step_accuracy));
    for (k, row) in r.accuracy_matrix.iter().enumerate() {
        let counts: Vec<f64> = tasks[..=k].iter().map(|t| t.test.len() as f64).collect();
        let pooled = row.iter().zip(&counts).map(|(a, n)| a * n).sum::<f64>() / counts.iter().sum::<f64>();
        assert!((pooled - r.step_accuracy[k]).abs() < 1e-12);
        for (a, b) in row.iter().zip(&r.accuracy_matrix_task_aware[k]) {
            assert!(b >= a);
        }
    }
    for j in 0..r.tasks {
        let col: Vec<f64> = r.relative_accuracy.iter().map(|row| row[j]).collect();
        assert!(mean(&col).abs() < 1e-12, "column {j}: {col:?}");
    }
    let joint = r.joint_accuracy.as_ref().unwrap();
    assert_eq!(joint.len(), 5);
    let final_row = r.accuracy_matrix.last().unwrap();
    let intr = (0..5).map(|k| joint[k] - r.accuracy_matrix[k][k]).sum::<f64>() / 5.0;
    assert!((r.intransigence.unwrap() - intr).abs() < 1e-12);
    assert_eq!(r.final_accuracy, *r.step_accuracy.last().unwrap());
    assert_eq!(final_row.len(), 5);

    // The trace reproduces the final row.
    let mut hits = vec![0usize; 5];
    for t in &out.traces {
        if t.trace.predicted == t.label {
            hits[t.task - 1] += 1;
        }
        assert!((t.trace.averaged.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for j in 0..5 {
        assert_eq!(hits[j] as f64 / tasks[j].test.len() as f64, final_row[j]);
    }
    assert_eq!(history.logs.len(), 5);
}

#[test]
fn single_task_has_no_forgetting() {
    let cfg = small_config(27, 2, 1, 3);
    let tasks = cfg.tasks().unwrap();
    let (_, _, out) = run(&cfg, &tasks, RunOptions::default());
    assert_eq!(out.report.forgetting, None);
    assert_eq!(out.report.tasks, 1);
    assert_eq!(out.report.avg_inc_accuracy, out.report.final_accuracy);
}

#[test]
fn evaluation_rejects_bad_inputs() {
    let cfg = small_config(28, 2, 2, 2);
    let tasks = cfg.tasks().unwrap();
    let fresh = EnsembleState::new(&cfg.net(), 2).unwrap();
    assert!(matches!(
        evaluate(&fresh, &tasks[0].test, EvalMode::TaskAgnostic, 3.0),
        Err(Error::NoTrainedExperts)
    ));
    let (state, _, _) = run(&cfg, &tasks, RunOptions::default());
    assert!(matches!(evaluate(&state, &[], EvalMode::TaskAgnostic, 3.0), Err(Error::EmptyEvalSet)));
    assert!(matches!(
        evaluate(&state, &tasks[0].test, EvalMode::TaskAware(7), 3.0),
        Err(Error::UnknownTask(8))
    ));
}
