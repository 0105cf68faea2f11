//! Sweep orchestration: runs every cell of a plan, streaming rows to disk.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use super::plan::{ExperimentPlan, RunCell};
use super::results::{read_runs, write_aggregates, RowAppender, RunRow, RUN_COLUMNS};
use super::svg::emit_report;
use crate::error::{Error, Result};
use crate::experiment::{
    aggregate_results_by, me_seed, run_condition, run_me_single, tally_me, ConditionKey, MeRun, MeTally,
};
use crate::mnist::{Mnist, N_CLASSES};
use crate::model::Arch;
use crate::scenegen::{ExemplarMode, MeMode, ME_PAIRS};

pub const RUNS_FILE: &str = "runs.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SNAPSHOT_FILE: &str = "plan.snapshot";
pub const ME_RUNS_FILE: &str = "me_runs.csv";
pub const ME_PROBES_FILE: &str = "me_probes.csv";
pub const ME_SUMMARY_FILE: &str = "me_summary.csv";

const TIMING_COLUMNS: [&str; 6] = ["condition_k", "exemplar_mode", "n_pairs", "arch", "seed", "duration_seconds"];
const PROBE_COLUMNS: [&str; 10] =
    ["me_mode", "excluded", "run", "seed", "me_class", "match_probability", "a_q0", "a_q1", "a_q2", "a_q3"];
const ME_SUMMARY_COLUMNS: [&str; 9] =
    ["me_mode", "runs", "novel", "foil", "blank", "non_match", "preference", "blank_fraction", "non_match_fraction"];

/// Runs `work` over `jobs` on up to `workers` threads. Results are handed
/// to `sink` on the calling thread, which makes it the single writer.
pub fn run_jobs<J, O, W, S>(jobs: &[J], workers: usize, work: W, mut sink: S) -> Result<()>
where
    J: Sync,
    O: Send,
    W: Fn(&J) -> O + Sync,
    S: FnMut(&J, O) -> Result<()>,
{
    if workers <= 1 || jobs.len() <= 1 {
        for j in jobs {
            sink(j, work(j))?;
        }
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, O)>();
        for _ in 0..workers.min(jobs.len()) {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() || tx.send((i, work(&jobs[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, out) in rx {
            if let Err(e) = sink(&jobs[i], out) {
                // stop handing out work; running jobs finish and are dropped
                next.store(jobs.len(), Ordering::SeqCst);
                return Err(e);
            }
        }
        Ok(())
    })
}

#[derive(Debug)]
pub struct ReportBundle {
    pub runs_csv: PathBuf,
    pub aggregate_csv: PathBuf,
    pub timings_csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub snapshot: PathBuf,
    pub completed: usize,
    pub skipped: usize,
    pub failures: Vec<(RunCell, Error)>,
}

fn checkpoint_name(c: &RunCell) -> String {
    format!("k{}_{}_{}_{}_s{}.ckpt", c.key.k, c.key.mode.as_str(), c.key.n_pairs, c.key.arch.as_str(), c.seed)
}

fn key_fields(key: &ConditionKey, seed: u64) -> Vec<String> {
    vec![key.k.to_string(), key.mode.as_str().into(), key.n_pairs.to_string(), key.arch.as_str().into(), seed.to_string()]
}

/// Executes a plan. The dataset is loaded before any training, so a missing
/// or unreadable file fails fast. With `resume`, cells already present in
/// the run CSV are skipped and new rows are appended.
pub fn run_experiment(plan: &ExperimentPlan, resume: bool) -> Result<ReportBundle> {
    let out = &plan.out_dir;
    fs::create_dir_all(out)?;
    let data = Mnist::load(&plan.data_dir)?;
    let snapshot = out.join(SNAPSHOT_FILE);
    fs::write(&snapshot, plan.snapshot())?;

    let runs_csv = out.join(RUNS_FILE);
    let timings_csv = out.join(TIMINGS_FILE);
    let done: BTreeSet<RunCell> = if resume && runs_csv.exists() {
        read_runs(&runs_csv)?.into_iter().map(|r| RunCell { key: r.key, seed: r.seed }).collect()
    } else {
        BTreeSet::new()
    };
    let all = plan.run_cells();
    let pending: Vec<RunCell> = all.iter().copied().filter(|c| !done.contains(c)).collect();
    let skipped = all.len() - pending.len();
    let mut runs = RowAppender::open(&runs_csv, &RUN_COLUMNS, !resume)?;
    let mut timings = RowAppender::open(&timings_csv, &TIMING_COLUMNS, !resume)?;
    let ckpt_dir = out.join("checkpoints");
    if plan.save_checkpoints {
        fs::create_dir_all(&ckpt_dir)?;
    }

    let total = pending.len();
    let mut completed = 0;
    let mut failures = Vec::new();
    run_jobs(
        &pending,
        plan.workers,
        |c| {
            let (result, params) = run_condition(&data, c.key, c.seed, plan.epochs, plan.strict_mismatch)?;
            if plan.save_checkpoints {
                params.save(&ckpt_dir.join(checkpoint_name(c)))?;
            }
            Ok(result)
        },
        |c, outcome: Result<_>| {
            match outcome {
                Ok(r) => {
                    completed += 1;
                    log::info!(
                        "[{completed}/{total}] k={} {} n={} {} seed={}: train {:.3} eval {:.3} ({:.0}s)",
                        c.key.k,
                        c.key.mode.as_str(),
                        c.key.n_pairs,
                        c.key.arch.as_str(),
                        c.seed,
                        r.final_train_acc,
                        r.eval_acc,
                        r.metrics.duration_seconds
                    );
                    runs.append(
                        RunRow {
                            key: c.key,
                            seed: c.seed,
                            final_train_acc: r.final_train_acc,
                            eval_acc: Some(r.eval_acc),
                            me_mode: None,
                            me_class: None,
                            duration_seconds: plan.record_timing.then_some(r.metrics.duration_seconds),
                        }
                        .record(),
                    )?;
                    let mut t = key_fields(&c.key, c.seed);
                    t.push(r.metrics.duration_seconds.to_string());
                    timings.append(t)?;
                }
                Err(e) => {
                    log::error!("cell {c:?} failed: {e}");
                    failures.push((*c, e));
                }
            }
            Ok(())
        },
    )?;

    let (aggregate_csv, plots) = render_runs(out, out)?;
    Ok(ReportBundle { runs_csv, aggregate_csv, timings_csv, plots, snapshot, completed, skipped, failures })
}

/// Aggregates `runs.csv` from `csv_dir` and writes the aggregate CSV and
/// plots into `out_dir`.
pub fn render_runs(csv_dir: &Path, out_dir: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    let rows: Vec<RunRow> =
        read_runs(&csv_dir.join(RUNS_FILE))?.into_iter().filter(|r| r.eval_acc.is_some()).collect();
    let aggregate_csv = out_dir.join(AGGREGATE_FILE);
    if rows.is_empty() {
        return Err(Error::Usage(format!("{} has no evaluation rows", csv_dir.join(RUNS_FILE).display())));
    }
    fs::create_dir_all(out_dir)?;
    let aggregates = aggregate_results_by(rows.iter().map(|r| (r.key, r.eval_acc.unwrap())))?;
    write_aggregates(&aggregate_csv, &aggregates)?;
    let plots = emit_report(&aggregates, out_dir)?;
    Ok((aggregate_csv, plots))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct MeJob {
    pub mode: MeMode,
    pub excluded: u8,
    pub run: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeSweepConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub modes: Vec<MeMode>,
    pub runs_per_class: usize,
    pub seed: u64,
    pub epochs: usize,
    pub workers: usize,
}

/// Key columns shared by every ME row: the k=2 fixed-exemplar base set.
pub fn me_condition() -> ConditionKey {
    ConditionKey { k: 2, mode: ExemplarMode::Fixed, n_pairs: ME_PAIRS, arch: Arch::ObjectCnn }
}

/// Runs the mutual-exclusivity protocol for each mode. Rows go to the ME run
/// CSV (same schema as the main run CSV), probe details to a sidecar, and
/// the per-mode tallies to a summary CSV.
pub fn run_me_sweep(cfg: &MeSweepConfig, resume: bool) -> Result<Vec<(MeMode, MeTally)>> {
    if cfg.runs_per_class == 0 {
        return Err(Error::Config("runs per class must be at least 1".into()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let data = Mnist::load(&cfg.data_dir)?;
    let runs_csv = cfg.out_dir.join(ME_RUNS_FILE);
    let done: BTreeSet<(MeMode, u64)> = if resume && runs_csv.exists() {
        read_runs(&runs_csv)?.into_iter().filter_map(|r| r.me_mode.map(|m| (m, r.seed))).collect()
    } else {
        BTreeSet::new()
    };
    let jobs: Vec<MeJob> = cfg
        .modes
        .iter()
        .flat_map(|&mode| {
            (0..N_CLASSES as u8).flat_map(move |excluded| (0..cfg.runs_per_class).map(move |run| MeJob { mode, excluded, run }))
        })
        .filter(|j| !done.contains(&(j.mode, me_seed(cfg.seed, j.excluded, j.run))))
        .collect();
    let mut rows = RowAppender::open(&runs_csv, &RUN_COLUMNS, !resume)?;
    let mut probes = RowAppender::open(&cfg.out_dir.join(ME_PROBES_FILE), &PROBE_COLUMNS, !resume)?;
    let total = jobs.len();
    let mut completed = 0;
    run_jobs(
        &jobs,
        cfg.workers,
        |j| run_me_single(&data, j.mode, j.excluded, j.run, cfg.seed, cfg.epochs),
        |j, outcome: Result<MeRun>| {
            let r = outcome?;
            completed += 1;
            log::info!(
                "[{completed}/{total}] me {} excluded={} run={}: {} (p={:.3})",
                j.mode.as_str(),
                j.excluded,
                j.run,
                r.classification.as_str(),
                r.match_probability
            );
            rows.append(
                RunRow {
                    key: me_condition(),
                    seed: r.seed,
                    final_train_acc: r.final_train_acc,
                    eval_acc: None,
                    me_mode: Some(j.mode),
                    me_class: Some(r.classification),
                    duration_seconds: None,
                }
                .record(),
            )?;
            let mut p = vec![
                j.mode.as_str().to_string(),
                j.excluded.to_string(),
                j.run.to_string(),
                r.seed.to_string(),
                r.classification.as_str().to_string(),
                r.match_probability.to_string(),
            ];
            p.extend(r.attention.iter().map(|a| a.to_string()));
            probes.append(p)
        },
    )?;
    write_me_summary(&cfg.out_dir, &cfg.out_dir)
}

/// Tallies the ME run CSV in `csv_dir` per mode and writes the summary CSV
/// into `out_dir`.
pub fn write_me_summary(csv_dir: &Path, out_dir: &Path) -> Result<Vec<(MeMode, MeTally)>> {
    let rows = read_runs(&csv_dir.join(ME_RUNS_FILE))?;
    let modes: BTreeSet<MeMode> = rows.iter().filter_map(|r| r.me_mode).collect();
    let tallies: Vec<(MeMode, MeTally)> = modes
        .into_iter()
        .map(|m| (m, tally_me(rows.iter().filter(|r| r.me_mode == Some(m)).filter_map(|r| r.me_class))))
        .collect();
    let mut w = RowAppender::open(&out_dir.join(ME_SUMMARY_FILE), &ME_SUMMARY_COLUMNS, true)?;
    for (m, t) in &tallies {
        use crate::experiment::MeClass::*;
        w.append(vec![
            m.as_str().into(),
            t.total.to_string(),
            t.count(Novel).to_string(),
            t.count(Foil).to_string(),
            t.count(Blank).to_string(),
            t.count(NonMatch).to_string(),
            t.preference.map(|p| p.to_string()).unwrap_or_default(),
            t.blank_fraction.to_string(),
            t.non_match_fraction.to_string(),
        ])?;
    }
    Ok(tallies)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_runner_visits_every_job_once() {
        for workers in [1, 3] {
            let jobs: Vec<u32> = (0..20).collect();
            let mut seen = Vec::new();
            run_jobs(&jobs, workers, |&j| j * 2, |&j, o| {
                assert_eq!(o, j * 2);
                seen.push(j);
                Ok(())
            })
            .unwrap();
            seen.sort();
            assert_eq!(seen, jobs);
        }
    }

    #[test]
    fn sink_error_stops_the_run() {
        let jobs: Vec<u32> = (0..50).collect();
        let mut n = 0;
        let r = run_jobs(&jobs, 2, |&j| j, |_, _| {
            n += 1;
            if n == 3 { Err(Error::Usage("stop".into())) } else { Ok(()) }
        });
        assert!(r.is_err());
        assert_eq!(n, 3);
    }
}
