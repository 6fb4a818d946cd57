//! Command-line driver: `run`, `eval` and `inspect`.
//!
//! Exit codes: 0 success, 1 configuration error (nothing written), 2 runtime
//! error. `SEED_CL_THREADS` caps the worker pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::gaussian::RepresentationMode;
use crate::metrics::{expert_matrix_csv, expert_relative_accuracy, overlap_csv, overlap_report};
use crate::runner::{evaluate_step, run_stream, RunHistory, RunOptions, RunReport};
use crate::state::RunStateFile;
use crate::trainer::{EnsembleState, SelectionStrategy, Trainer};

pub const THREADS_ENV: &str = "SEED_CL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "seed-cl", version, about = "Class-incremental learning with an expert ensemble")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train over the task stream and write reports plus the final state.
    Run(RunArgs),
    /// Re-evaluate a saved state on its test data.
    Eval(EvalArgs),
    /// Print a table derived from a saved state as CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strategy: Option<SelectionStrategy>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub representation: Option<RepresentationMode>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Write per-sample prediction traces of the final evaluation.
    #[arg(long)]
    pub trace: bool,
    /// Continue from a saved state instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many tasks.
    #[arg(long)]
    pub until_task: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Agnostic,
    Aware,
    Both,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub state: PathBuf,
    /// Evaluate on the data of this config instead of the stored one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InspectWhat {
    Overlap,
    Diversity,
    Params,
}

#[derive(Debug, clap::Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long, value_enum)]
    pub what: InspectWhat,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Output goes to `stdout`; diagnostics to standard error.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Run(a) => cmd_run(&a, stdout),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Inspect(a) => cmd_inspect(&a, stdout),
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

fn unix_secs() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn cmd_run(a: &RunArgs, _stdout: &mut dyn std::io::Write) -> Result<(), Failure> {
    let started = unix_secs();
    let clock = Instant::now();
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply(&Overrides {
        seed: a.seed,
        strategy: a.strategy,
        experts: a.experts,
        tau: a.tau,
        alpha: a.alpha,
        representation: a.representation,
        out_dir: a.out_dir.clone(),
        trace: a.trace,
    });
    cfg.validate()?;
    let tasks = cfg.tasks().map_err(|e| match e {
        Error::Config(m) => Failure::Config(m),
        other => Failure::Runtime(other.to_string()),
    })?;
    let until = a.until_task.unwrap_or(tasks.len());
    if until == 0 || until > tasks.len() {
        return Err(Failure::Config(format!(
            "--until-task must lie in 1..={}",
            tasks.len()
        )));
    }

    let trainer = Trainer::new(cfg.training.clone(), cfg.seeds())?;
    let (mut state, mut history) = match &a.resume {
        Some(path) => {
            let saved = RunStateFile::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            if saved.seeds != cfg.seeds() || saved.state.net != cfg.net() || saved.state.experts() != cfg.training.experts {
                return Err(Failure::Config("resumed state does not match the configuration".into()));
            }
            (saved.state, saved.history)
        }
        None => (EnsembleState::new(&cfg.net(), cfg.training.experts)?, RunHistory::default()),
    };
    if state.tasks_completed() >= until {
        return Err(Failure::Config("nothing left to train".into()));
    }

    let out = &cfg.output.out_dir;
    let output = run_stream(
        &trainer,
        &mut state,
        &mut history,
        &tasks[..until],
        RunOptions {
            joint_reference: cfg.output.joint_reference,
            trace: cfg.output.trace,
        },
    )?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_reports(out, &output.report, &history)?;
    if cfg.output.trace {
        let mut s = String::new();
        for t in &output.traces {
            s.push_str(&serde_json::to_string(t).expect("serializable"));
            s.push('\n');
        }
        write_file(out, "trace.jsonl", &s)?;
    }
    let config_echo = cfg.to_toml();
    write_file(out, "config.toml", &config_echo)?;
    let file = RunStateFile {
        config: config_echo,
        seeds: cfg.seeds(),
        state,
        history,
    };
    let state_path = out.join("state.bin");
    file.save(&state_path).map_err(|e| Failure::Runtime(format!("{}: {e}", state_path.display())))?;
    let meta = json!({
        "started_unix": started,
        "finished_unix": unix_secs(),
        "wall_seconds": clock.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
        "version": env!("CARGO_PKG_VERSION"),
        "resumed_from": a.resume.as_ref().map(|p| p.display().to_string()),
    });
    write_file(out, "metadata.json", &to_json(&meta))?;
    Ok(())
}

fn write_reports(out: &Path, report: &RunReport, history: &RunHistory) -> Result<(), Failure> {
    write_file(out, "accuracy_matrix.csv", &history.agnostic.to_csv())?;
    write_file(out, "accuracy_matrix_task_aware.csv", &history.aware.to_csv())?;
    let experts: Vec<usize> = report.relative_accuracy_experts.iter().map(|k| k - 1).collect();
    let relative = expert_matrix_csv(&report.relative_accuracy, &experts, report.tasks);
    write_file(out, "relative_accuracy.csv", &relative)?;
    write_file(out, "overlap.csv", &overlap_csv(&report.overlap, report.experts))?;
    let summary = json!({
        "tasks": report.tasks,
        "experts": report.experts,
        "strategy": report.strategy,
        "representation": report.representation,
        "tau": report.tau,
        "alpha": report.alpha,
        "avg_inc_accuracy": report.avg_inc_accuracy,
        "avg_inc_accuracy_task_aware": report.avg_inc_accuracy_task_aware,
        "final_accuracy": report.final_accuracy,
        "forgetting": report.forgetting,
        "intransigence": report.intransigence,
        "params": report.params.total(),
    });
    write_file(out, "summary.json", &to_json(&summary))?;
    write_file(out, "report.json", &to_json(report))?;
    let mut log = String::new();
    for l in &history.logs {
        log.push_str(&serde_json::to_string(l).expect("serializable"));
        log.push('\n');
    }
    write_file(out, "task_log.jsonl", &log)
}

fn load_state(path: &Path) -> Result<RunStateFile, Failure> {
    RunStateFile::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn stored_config(file: &RunStateFile) -> Result<RunConfig, Failure> {
    RunConfig::from_toml(&file.config).map_err(|e| Failure::Runtime(format!("stored configuration: {e}")))
}

fn cmd_eval(a: &EvalArgs, stdout: &mut dyn std::io::Write) -> Result<(), Failure> {
    let file = load_state(&a.state)?;
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => stored_config(&file)?,
    };
    let tau = a.tau.unwrap_or(cfg.training.tau);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Failure::Config("tau must be positive".into()));
    }
    let tasks = cfg.tasks().map_err(|e| Failure::Runtime(e.to_string()))?;
    let state = &file.state;
    let n = state.tasks_completed();
    if n > tasks.len() {
        return Err(Failure::Runtime(format!("state has {n} tasks but the data only {}", tasks.len())));
    }
    for (j, t) in tasks[..n].iter().enumerate() {
        let mut classes = t.classes.clone();
        classes.sort_unstable();
        if classes != state.task_classes[j] {
            return Err(Failure::Runtime(Error::MissingClass(classes[0]).to_string()));
        }
    }
    let step = evaluate_step(state, &tasks, tau)?;
    let mut obj = serde_json::Map::new();
    obj.insert("tasks".into(), json!(n));
    obj.insert("tau".into(), json!(tau));
    if a.mode != ModeArg::Aware {
        obj.insert("task_agnostic".into(), json!(step.agnostic));
        obj.insert("task_agnostic_pooled".into(), json!(step.pooled));
    }
    if a.mode != ModeArg::Agnostic {
        obj.insert("task_aware".into(), json!(step.aware));
        obj.insert("task_aware_pooled".into(), json!(step.pooled_aware));
    }
    writeln!(stdout, "{}", serde_json::Value::Object(obj)).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(())
}

fn cmd_inspect(a: &InspectArgs, stdout: &mut dyn std::io::Write) -> Result<(), Failure> {
    let file = load_state(&a.state)?;
    let state = &file.state;
    let text = match a.what {
        InspectWhat::Overlap => overlap_csv(&overlap_report(&file.history.logs), state.experts()),
        InspectWhat::Params => {
            let p = crate::net::param_count(&state.trunk, &state.heads, &state.banks);
            format!(
                "component,count\ntrunk,{}\nheads,{}\ngaussians,{}\ntotal,{}\n",
                p.trunk,
                p.heads,
                p.gaussians,
                p.total()
            )
        }
        InspectWhat::Diversity => {
            let cfg = stored_config(&file)?;
            let tasks = cfg.tasks().map_err(|e| Failure::Runtime(e.to_string()))?;
            let step = evaluate_step(state, &tasks, cfg.training.tau)?;
            let m = expert_relative_accuracy(&step.table, &step.labels, &step.ranges, &state.seen_classes());
            expert_matrix_csv(&m, &step.table.experts, step.ranges.len())
        }
    };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Failure::Runtime(e.to_string()))
}
