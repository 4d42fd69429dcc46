//! Multi-seed aggregation, random-policy baseline and plotting from logged episodes.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ResolvedExperiment;
use super::{iteration_returns, learning_curve_svg, mean_std, read_episodes_csv, run_resolved, Curve, IterationStat, PlotOptions, RunOptions, RunSummary, SUMMARY_VERSION};
use crate::error::{Error, Result};
use crate::learning_loop::{execute_episode, EpisodeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    /// Seeds contributing to the row.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub run_id: String,
    pub violations: usize,
    pub blocked: usize,
    pub best_safe_return: Option<f64>,
    /// Per-iteration means, iteration 0 first.
    pub returns: Vec<Option<f64>>,
    /// Running maximum of the learned-iteration means.
    pub best_so_far: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub version: u32,
    pub config: String,
    pub epsilon: Option<f64>,
    pub seeds: Vec<u64>,
    pub failed: usize,
    pub rows: Vec<ReportRow>,
    /// Across-seed statistics of the per-iteration mean return.
    pub iterations: Vec<IterationStat>,
    pub random_baseline: f64,
    pub per_seed: Vec<SeedOutcome>,
}

impl MultiSeedReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "config: {}  seeds: {}", self.config, seeds.join(","));
        if let Some(e) = self.epsilon {
            let _ = writeln!(out, "{:<14}{e}", "epsilon");
        }
        for r in &self.rows {
            let _ = writeln!(out, "{:<14}{:.3} ± {:.3}  (n = {})", r.label, r.mean, r.std, r.count);
        }
        let _ = writeln!(out, "{:<14}{:.3}", "Random policy", self.random_baseline);
        let _ = writeln!(out, "\niteration  mean ± std");
        for s in &self.iterations {
            let _ = writeln!(out, "{:>9}  {:.3} ± {:.3}", s.iteration, s.mean, s.std);
        }
        if self.failed > 0 {
            let _ = writeln!(out, "\n{} seed(s) failed", self.failed);
        }
        out
    }
}

fn outcome_of(summary: &RunSummary) -> SeedOutcome {
    let last = summary.aggregates.iterations.iter().map(|s| s.iteration).max().unwrap_or(0);
    let mut returns = vec![None; last + 1];
    for s in &summary.aggregates.iterations {
        returns[s.iteration] = Some(s.mean);
    }
    let mut best: Option<f64> = None;
    let best_so_far = returns
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i > 0 {
                if let Some(v) = r {
                    best = Some(best.map_or(*v, |b: f64| b.max(*v)));
                }
            }
            best
        })
        .collect();
    SeedOutcome {
        seed: summary.seed,
        run_id: summary.run_id.clone(),
        violations: summary.aggregates.violations,
        blocked: summary.aggregates.blocked,
        best_safe_return: summary.aggregates.best_safe_return,
        returns,
        best_so_far,
        error: None,
    }
}

fn row(label: &str, values: &[f64]) -> ReportRow {
    let (mean, std) = mean_std(values);
    ReportRow {
        label: label.into(),
        mean,
        std,
        count: values.len(),
    }
}

/// Dispatches `jobs` over a pool of worker threads; results keep the input order.
fn parallel_map<T: Sync, U: Send>(jobs: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<U>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("result slots poisoned").into_iter().map(|o| o.expect("every job ran")).collect()
}

/// Runs every seed independently and aggregates the survivors.
/// Writes report.json, report.txt and learning_curve.svg under `<output>/<config>_multi/`.
pub fn run_multi_seed(resolved: &ResolvedExperiment, seeds: &[u64], opts: &RunOptions) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let runs = parallel_map(seeds, |&seed| {
        let mut r = resolved.clone();
        r.run.seed = seed;
        run_resolved(&r, opts).map(|a| a.summary)
    });
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut ok = Vec::new();
    for (seed, run) in seeds.iter().zip(runs) {
        match run {
            Ok(summary) => {
                per_seed.push(outcome_of(&summary));
                ok.push(summary);
            }
            Err(e) => {
                log::warn!("seed {seed} failed: {e}; aggregating the remaining seeds");
                per_seed.push(SeedOutcome {
                    seed: *seed,
                    run_id: super::run_id(&resolved.name, *seed),
                    violations: 0,
                    blocked: 0,
                    best_safe_return: None,
                    returns: Vec::new(),
                    best_so_far: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::InvalidArgument(format!("all {} seeds failed", seeds.len())));
    }
    let good: Vec<&SeedOutcome> = per_seed.iter().filter(|s| s.error.is_none()).collect();
    let rows = vec![
        row("Con. Viol.", &good.iter().map(|s| s.violations as f64).collect::<Vec<_>>()),
        row("Best return", &good.iter().filter_map(|s| s.best_safe_return).collect::<Vec<_>>()),
        row("Blocked Ep.", &good.iter().map(|s| s.blocked as f64).collect::<Vec<_>>()),
    ];
    let longest = good.iter().map(|s| s.returns.len()).max().unwrap_or(0);
    let iterations = (0..longest)
        .filter_map(|it| {
            let v: Vec<f64> = good.iter().filter_map(|s| s.returns.get(it).copied().flatten()).collect();
            (!v.is_empty()).then(|| {
                let (mean, std) = mean_std(&v);
                IterationStat {
                    iteration: it,
                    mean,
                    std,
                    episodes: v.len(),
                }
            })
        })
        .collect::<Vec<_>>();
    let random_baseline = baseline_random(resolved, seeds)?;
    let report = MultiSeedReport {
        version: SUMMARY_VERSION,
        config: resolved.name.clone(),
        epsilon: resolved.safety.as_ref().map(|s| s.epsilon),
        seeds: seeds.to_vec(),
        failed: seeds.len() - ok.len(),
        rows,
        iterations,
        random_baseline,
        per_seed,
    };
    let dir = opts.output_dir.join(format!("{}_multi", resolved.name));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(dir.join("report.txt"), report.to_table())?;
    let curve = Curve {
        iterations: report.iterations.iter().map(|s| s.iteration as f64).collect(),
        mean: report.iterations.iter().map(|s| s.mean).collect(),
        std: report.iterations.iter().map(|s| s.std).collect(),
    };
    let svg = learning_curve_svg(
        &curve,
        &PlotOptions {
            title: format!("{} ({} seeds)", resolved.name, ok.len()),
            baseline: Some(random_baseline),
        },
    );
    std::fs::write(dir.join("learning_curve.svg"), svg)?;
    Ok(report)
}

/// Mean native return of uniform-random controls over the same episode budget (J + N per seed).
pub fn baseline_random(resolved: &ResolvedExperiment, seeds: &[u64]) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let budget = resolved.run.initial_rollouts + resolved.run.episodes;
    let bounds = resolved.env.spec().control_bounds.clone();
    let mut returns = Vec::with_capacity(budget * seeds.len());
    for &seed in seeds {
        let mut env = resolved.env.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        for _ in 0..budget {
            let rec = execute_episode(
                &mut env,
                |_, r: &mut ChaCha8Rng| Ok(DVector::from_iterator(bounds.len(), bounds.iter().map(|b| r.gen_range(b.lower..=b.upper)))),
                resolved.run.horizon,
                resolved.run.subs,
                &mut rng,
            )?;
            returns.push(rec.native_return());
        }
    }
    Ok(mean_std(&returns).0)
}

/// Assigns iterations from the order of episode kinds: random rollouts are iteration 0,
/// and each blocked or learned row that does not follow a blocked row opens a new iteration.
/// Consecutive iterations that were entirely blocked cannot be told apart and merge.
pub fn reconstruct_iterations(kinds: &[EpisodeKind]) -> Vec<usize> {
    let mut it = 0;
    let mut prev: Option<EpisodeKind> = None;
    kinds
        .iter()
        .map(|&k| {
            if matches!(k, EpisodeKind::Learned | EpisodeKind::Blocked) && prev != Some(EpisodeKind::Blocked) {
                it += 1;
            }
            prev = Some(k);
            it
        })
        .collect()
}

/// Renders learning_curve.svg from an episodes.csv (one or several runs).
/// Returns the path of the written file.
pub fn plot_episodes_csv(csv_path: &Path, output_dir: &Path) -> Result<PathBuf> {
    let rows = read_episodes_csv(csv_path)?;
    let mut runs: BTreeMap<&str, Vec<&super::EpisodeRow>> = BTreeMap::new();
    for r in &rows {
        runs.entry(r.run_id.as_str()).or_default().push(r);
    }
    let mut per_iteration: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs.values() {
        let kinds: Vec<EpisodeKind> = run.iter().map(|r| r.kind).collect();
        let its = reconstruct_iterations(&kinds);
        let triples: Vec<_> = run.iter().zip(&its).map(|(r, &it)| (it, r.kind, r.native_return)).collect();
        for (it, v) in iteration_returns(&triples) {
            per_iteration.entry(it).or_default().push(mean_std(&v).0);
        }
    }
    let mut curve = Curve {
        iterations: vec![],
        mean: vec![],
        std: vec![],
    };
    for (it, v) in per_iteration {
        let (m, s) = mean_std(&v);
        curve.iterations.push(it as f64);
        curve.mean.push(m);
        curve.std.push(s);
    }
    let title = csv_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let svg = learning_curve_svg(&curve, &PlotOptions { title, baseline: None });
    std::fs::create_dir_all(output_dir)?;
    let out = output_dir.join("learning_curve.svg");
    std::fs::write(&out, svg)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use EpisodeKind::*;

    #[test]
    fn iterations_from_kind_sequence() {
        let kinds = [Random, Random, Blocked, Learned, Eval, Eval, Learned, Eval, Blocked, Blocked, Learned];
        assert_eq!(reconstruct_iterations(&kinds), vec![0, 0, 1, 1, 1, 1, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn best_so_far_is_a_running_maximum_over_learned_iterations() {
        let summary = RunSummary {
            version: 1,
            run_id: "r".into(),
            config: "c".into(),
            env: "e".into(),
            seed: 0,
            epsilon: None,
            episodes: 0,
            per_episode: vec![],
            aggregates: super::super::Aggregates {
                violations: 0,
                blocked: 0,
                best_safe_return: None,
                iterations: [(0, 10.0), (1, 1.0), (2, 3.0), (4, 2.0)]
                    .iter()
                    .map(|&(iteration, mean)| IterationStat {
                        iteration,
                        mean,
                        std: 0.0,
                        episodes: 1,
                    })
                    .collect(),
            },
            error: None,
        };
        let o = outcome_of(&summary);
        assert_eq!(o.returns, vec![Some(10.0), Some(1.0), Some(3.0), None, Some(2.0)]);
        assert_eq!(o.best_so_far, vec![None, Some(1.0), Some(3.0), Some(3.0), Some(3.0)]);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let jobs: Vec<u64> = (0..17).collect();
        assert_eq!(parallel_map(&jobs, |x| x * x), jobs.iter().map(|x| x * x).collect::<Vec<_>>());
    }
}
