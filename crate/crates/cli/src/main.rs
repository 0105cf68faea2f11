use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use xsl_core::experiment::{evaluate_4afc, ME_EPOCHS, EVAL_PER_WORD};
use xsl_core::mnist::Mnist;
use xsl_core::model::{init_params, Arch, ModelParams};
use xsl_core::report::sweep::{ME_RUNS_FILE, RUNS_FILE};
use xsl_core::report::{
    export_attention, parse_plan, render_runs, run_experiment, run_me_sweep, write_me_summary, MeSweepConfig,
};
use xsl_core::scenegen::{
    generate_eval_trials, generate_matching_trials, substream, DatasetConfig, ExemplarMode, MeMode,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Index of `mi_option_purge_delay` in mimalloc's option enum (the same in
/// its v2 and v3 headers). `libmimalloc-sys` does not name it, so the crate
/// version is pinned.
const MI_OPTION_PURGE_DELAY: libmimalloc_sys::mi_option_t = 15;

const DATA_ENV: &str = "XSL_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Parser)]
#[command(name = "xsl", version, about = "Cross-situational word learning on MNIST scenes")]
struct Cli {
    /// MNIST directory (IDX files, optionally gzipped).
    #[arg(long, global = true, env = DATA_ENV)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of a plan file and write run/aggregate CSVs and plots.
    TrainSweep {
        plan: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// First seed; a cell with n seeds uses seed..seed+n.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strict_mismatch: bool,
        /// Force every cell onto this architecture.
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip cells already present in the run CSV.
        #[arg(long)]
        resume: bool,
    },
    /// 4AFC evaluation of a checkpoint (or fresh weights) on generated trials.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "object_cnn")]
        arch: Arch,
        #[arg(long, default_value = "fixed")]
        mode: ExemplarMode,
        #[arg(long, default_value_t = EVAL_PER_WORD)]
        per_word: usize,
        /// Seeds trial generation, and the weights when no checkpoint is given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-trial CSV of chosen quadrants.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mutual-exclusivity protocol: every excluded class, several runs each.
    Me {
        #[arg(long, value_enum, default_value_t = MeChoice::Both)]
        mode: MeChoice,
        #[arg(long, default_value_t = 10)]
        runs_per_class: usize,
        #[arg(long, default_value_t = ME_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "results/me")]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Write attention heatmaps for one generated scene.
    ExportAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "object_cnn")]
        arch: Arch,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value = "fixed")]
        mode: ExemplarMode,
        #[arg(long, default_value_t = 0)]
        trial_seed: u64,
        /// Initialization seed when no checkpoint is given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "attention")]
        out: PathBuf,
    },
    /// Aggregate existing CSVs and redraw plots.
    Report {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MeChoice {
    MatchOnly,
    MatchPlusMismatch,
    Both,
}

fn data_dir(cli: &Option<PathBuf>) -> PathBuf {
    cli.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn load_params(checkpoint: &Option<PathBuf>, arch: Arch, seed: u64) -> Result<ModelParams<f32>> {
    match checkpoint {
        Some(p) => ModelParams::load(p, arch).with_context(|| format!("loading checkpoint {}", p.display())),
        None => {
            log::warn!("no checkpoint given; using freshly initialized weights (seed {seed})");
            Ok(init_params(arch, seed))
        }
    }
}

fn main() -> ExitCode {
    // Training allocates and frees the same large buffers every batch.
    // Keeping freed pages mapped avoids refaulting them, which dominates
    // batch time on some virtualized hosts.
    unsafe { libmimalloc_sys::mi_option_set(MI_OPTION_PURGE_DELAY, -1) };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::TrainSweep { plan, workers, epochs, seed, strict_mismatch, arch, out, resume } => {
            let text = fs::read_to_string(&plan).with_context(|| format!("reading plan {}", plan.display()))?;
            let mut p = parse_plan(&text, cli.data_dir.as_deref())?;
            if let Some(w) = workers {
                p.workers = w.max(1);
            }
            if let Some(e) = epochs {
                p.epochs = e;
            }
            if let Some(s) = seed {
                p.base_seed = s;
            }
            p.strict_mismatch |= strict_mismatch;
            if let Some(a) = arch {
                for c in &mut p.cells {
                    c.key.arch = a;
                }
            }
            if let Some(o) = out {
                p.out_dir = o;
            }
            log::info!("{} run cells -> {}", p.run_cells().len(), p.out_dir.display());
            let bundle = run_experiment(&p, resume)?;
            println!("runs:      {}", bundle.runs_csv.display());
            println!("aggregate: {}", bundle.aggregate_csv.display());
            for f in &bundle.plots {
                println!("plot:      {}", f.display());
            }
            println!("completed {} cells, skipped {} already present", bundle.completed, bundle.skipped);
            if !bundle.failures.is_empty() {
                for (c, e) in &bundle.failures {
                    eprintln!("failed: {c:?}: {e}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval { checkpoint, arch, mode, per_word, seed, out } => {
            let data = Mnist::load(&data_dir(&cli.data_dir))?;
            let params = load_params(&checkpoint, arch, seed)?;
            let store = match mode {
                ExemplarMode::Fixed => &data.train,
                ExemplarMode::Varying => &data.test,
            };
            let trials = generate_eval_trials(store, mode, &mut substream(seed, 2), per_word)?;
            let (acc, records) = evaluate_4afc(&params, &trials)?;
            println!("4AFC accuracy {acc:.4} over {} trials", records.len());
            if let Some(path) = out {
                let mut s = String::from("trial,target_word,target_quadrant,chosen_quadrant,correct\n");
                for (i, r) in records.iter().enumerate() {
                    s.push_str(&format!(
                        "{i},{},{},{},{}\n",
                        r.target_word,
                        r.target_quadrant,
                        r.chosen_quadrant,
                        r.correct()
                    ));
                }
                fs::write(&path, s)?;
            }
        }
        Command::Me { mode, runs_per_class, epochs, seed, workers, out, resume } => {
            let modes = match mode {
                MeChoice::MatchOnly => vec![MeMode::MatchOnly],
                MeChoice::MatchPlusMismatch => vec![MeMode::MatchPlusMismatch],
                MeChoice::Both => vec![MeMode::MatchOnly, MeMode::MatchPlusMismatch],
            };
            let cfg = MeSweepConfig {
                data_dir: data_dir(&cli.data_dir),
                out_dir: out,
                modes,
                runs_per_class,
                seed,
                epochs,
                workers,
            };
            for (m, t) in run_me_sweep(&cfg, resume)? {
                print_tally(m, &t);
            }
        }
        Command::ExportAttention { checkpoint, arch, k, mode, trial_seed, seed, out } => {
            let data = Mnist::load(&data_dir(&cli.data_dir))?;
            let params = load_params(&checkpoint, arch, seed)?;
            let cfg = DatasetConfig { k, exemplar_mode: mode, n_pairs: k, seed: trial_seed, strict_mismatch: false };
            let store = match mode {
                ExemplarMode::Fixed => &data.train,
                ExemplarMode::Varying => &data.test,
            };
            let trial = generate_matching_trials(&cfg, store, &mut substream(trial_seed, 0))?.remove(0);
            let stem = format!("trial{trial_seed}");
            for f in export_attention(&params, &trial.scene.pixels, &trial.caption, &out, &stem)? {
                println!("{}", f.display());
            }
        }
        Command::Report { dir, out } => {
            let out = out.unwrap_or_else(|| dir.clone());
            let mut any = false;
            if dir.join(RUNS_FILE).exists() {
                let (agg, plots) = render_runs(&dir, &out)?;
                println!("aggregate: {}", agg.display());
                for p in plots {
                    println!("plot:      {}", p.display());
                }
                any = true;
            }
            if dir.join(ME_RUNS_FILE).exists() {
                for (m, t) in write_me_summary(&dir, &out)? {
                    print_tally(m, &t);
                }
                any = true;
            }
            if !any {
                bail!("{} holds neither {RUNS_FILE} nor {ME_RUNS_FILE}", dir.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_tally(mode: MeMode, t: &xsl_core::experiment::MeTally) {
    use xsl_core::experiment::MeClass::*;
    let pref = t.preference.map(|p| format!("{p:.3}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{}: {} runs, novel {} foil {} blank {} non_match {}; preference {pref}, blank fraction {:.3}",
        mode.as_str(),
        t.total,
        t.count(Novel),
        t.count(Foil),
        t.count(Blank),
        t.count(NonMatch),
        t.blank_fraction
    );
}
