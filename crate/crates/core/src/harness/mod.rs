//! Experiment runner: configs in, CSV/JSON/SVG artifacts out.

pub mod config;
pub mod plot;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning_loop::{best_safe_return, count_blocked, count_violations, EpisodeKind, EpisodeRecord, Experiment, ExperimentResult};

pub use config::{bundled, ExperimentConfig, ResolvedExperiment, BUNDLED};
pub use plot::{learning_curve_svg, Curve, PlotOptions};
pub use report::{baseline_random, plot_episodes_csv, run_multi_seed, MultiSeedReport, ReportRow};

/// Version of the summary.json / report.json layout.
pub const SUMMARY_VERSION: u32 = 1;
/// Environment variable naming the output directory (default `./runs`).
pub const OUTPUT_DIR_VAR: &str = "SPS_OUTPUT_DIR";

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub output_dir: PathBuf,
    /// Record real wall-clock times. Off by default so artifacts are byte-reproducible.
    pub wall_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            output_dir: default_output_dir(),
            wall_time: false,
        }
    }
}

/// One line of episodes.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub run_id: String,
    pub seed: u64,
    pub episode: usize,
    pub kind: EpisodeKind,
    pub steps: usize,
    pub native_return: f64,
    pub violated: bool,
    pub violation_step: Option<usize>,
    pub blocked: bool,
    pub xi: f64,
    pub predicted_risk: Option<f64>,
    pub wall_ms: u64,
}

impl EpisodeRow {
    fn new(run_id: &str, seed: u64, rec: &EpisodeRecord, wall_ms: u64) -> Self {
        EpisodeRow {
            run_id: run_id.into(),
            seed,
            episode: rec.index,
            kind: rec.kind,
            steps: rec.steps(),
            native_return: rec.native_return(),
            violated: rec.violated,
            violation_step: rec.violation_step,
            blocked: rec.kind == EpisodeKind::Blocked,
            xi: rec.xi,
            predicted_risk: rec.predicted_risk,
            wall_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub iteration: usize,
    pub kind: EpisodeKind,
    pub native_return: f64,
    pub violated: bool,
    pub blocked: bool,
    pub wall_ms: u64,
}

/// Return statistics of one iteration. Iteration 0 holds the random rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStat {
    pub iteration: usize,
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub violations: usize,
    pub blocked: usize,
    pub best_safe_return: Option<f64>,
    pub iterations: Vec<IterationStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: u32,
    pub run_id: String,
    pub config: String,
    pub env: String,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub episodes: usize,
    pub per_episode: Vec<EpisodeSummary>,
    pub aggregates: Aggregates,
    pub error: Option<String>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-iteration returns: evaluation episodes when present, otherwise the executed learned episode.
pub fn iteration_returns(history: &[(usize, EpisodeKind, f64)]) -> Vec<(usize, Vec<f64>)> {
    let last = history.iter().map(|h| h.0).max().unwrap_or(0);
    (0..=last)
        .filter_map(|it| {
            let of = |k: EpisodeKind| history.iter().filter(|h| h.0 == it && h.1 == k).map(|h| h.2).collect::<Vec<_>>();
            let values = if it == 0 {
                of(EpisodeKind::Random)
            } else {
                let eval = of(EpisodeKind::Eval);
                if eval.is_empty() {
                    of(EpisodeKind::Learned)
                } else {
                    eval
                }
            };
            (!values.is_empty()).then_some((it, values))
        })
        .collect()
}

fn summarize(resolved: &ResolvedExperiment, run_id: &str, rows: &[EpisodeRow], history: &[EpisodeRecord], error: Option<String>) -> RunSummary {
    let per_episode = history
        .iter()
        .zip(rows)
        .map(|(rec, row)| EpisodeSummary {
            episode: rec.index,
            iteration: rec.iteration,
            kind: rec.kind,
            native_return: row.native_return,
            violated: rec.violated,
            blocked: row.blocked,
            wall_ms: row.wall_ms,
        })
        .collect::<Vec<_>>();
    let triples: Vec<_> = history.iter().map(|r| (r.iteration, r.kind, r.native_return())).collect();
    let iterations = iteration_returns(&triples)
        .into_iter()
        .map(|(iteration, v)| {
            let (mean, std) = mean_std(&v);
            IterationStat {
                iteration,
                mean,
                std,
                episodes: v.len(),
            }
        })
        .collect();
    RunSummary {
        version: SUMMARY_VERSION,
        run_id: run_id.into(),
        config: resolved.name.clone(),
        env: resolved.env.spec().name.clone(),
        seed: resolved.run.seed,
        epsilon: resolved.safety.as_ref().map(|s| s.epsilon),
        episodes: history.len(),
        per_episode,
        aggregates: Aggregates {
            violations: count_violations(history),
            blocked: count_blocked(history),
            best_safe_return: best_safe_return(history),
            iterations,
        },
        error,
    }
}

pub fn run_id(config_name: &str, seed: u64) -> String {
    format!("{config_name}_s{seed}")
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub rows: Vec<EpisodeRow>,
    pub result: ExperimentResult,
}

pub fn write_episodes_csv(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record([
            "run_id",
            "seed",
            "episode",
            "kind",
            "steps",
            "native_return",
            "violated",
            "violation_step",
            "blocked",
            "xi",
            "predicted_risk",
            "wall_ms",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes_csv(path: &Path) -> Result<Vec<EpisodeRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn summary_curve(summary: &RunSummary) -> Curve {
    let it = &summary.aggregates.iterations;
    Curve {
        iterations: it.iter().map(|s| s.iteration as f64).collect(),
        mean: it.iter().map(|s| s.mean).collect(),
        std: it.iter().map(|s| s.std).collect(),
    }
}

fn write_run_files(dir: &Path, summary: &RunSummary, rows: &[EpisodeRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_episodes_csv(&dir.join("episodes.csv"), rows)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    let svg = learning_curve_svg(
        &summary_curve(summary),
        &PlotOptions {
            title: summary.run_id.clone(),
            baseline: None,
        },
    );
    std::fs::write(dir.join("learning_curve.svg"), svg)?;
    Ok(())
}

/// Runs a resolved experiment and writes its artifacts under `opts.output_dir/<run_id>/`.
/// On failure the episodes recorded so far are still written, with the error in summary.json.
pub fn run_resolved(resolved: &ResolvedExperiment, opts: &RunOptions) -> Result<RunArtifacts> {
    let id = run_id(&resolved.name, resolved.run.seed);
    let dir = opts.output_dir.join(&id);
    let seed = resolved.run.seed;
    let mut history: Vec<EpisodeRecord> = Vec::new();
    let mut rows: Vec<EpisodeRow> = Vec::new();
    let mut clock = Instant::now();
    let mut sink = |rec: &EpisodeRecord| -> Result<()> {
        let wall_ms = if opts.wall_time { clock.elapsed().as_millis() as u64 } else { 0 };
        clock = Instant::now();
        rows.push(EpisodeRow::new(&id, seed, rec, wall_ms));
        history.push(rec.clone());
        Ok(())
    };
    let outcome = Experiment::new(resolved.env.clone(), resolved.run.clone(), resolved.reward.clone(), &mut sink)
        .and_then(|e| e.run(resolved.safety.clone()));
    match outcome {
        Ok(result) => {
            let summary = summarize(resolved, &id, &rows, &history, None);
            write_run_files(&dir, &summary, &rows)?;
            let state = &result.final_state;
            std::fs::write(dir.join("model.toml"), state.model.to_text())?;
            std::fs::write(dir.join("policy.toml"), state.deployed.as_ref().unwrap_or(&state.policy).to_text())?;
            Ok(RunArtifacts { dir, summary, rows, result })
        }
        Err(e) => {
            let summary = summarize(resolved, &id, &rows, &history, Some(e.to_string()));
            write_run_files(&dir, &summary, &rows)?;
            Err(e)
        }
    }
}

/// Loads `path` (a file or a bundled config name), applies the seed override and runs it.
pub fn run_from_config(path: &str, seed: Option<u64>, opts: &RunOptions) -> Result<RunArtifacts> {
    let (name, cfg) = ExperimentConfig::load(path)?;
    let resolved = cfg.resolve(&name, seed)?;
    run_resolved(&resolved, opts)
}
