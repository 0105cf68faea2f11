//! Flat `key = value` experiment plans with repeated `[cell]` blocks.
//!
//! Top-level keys set defaults for the whole sweep. Each `[cell]` block names
//! one or more conditions; comma-separated values expand to their cartesian
//! product. `#` starts a comment.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{ConditionKey, MAIN_EPOCHS};
use crate::model::Arch;
use crate::scenegen::{DatasetConfig, ExemplarMode};

pub const DEFAULT_SEEDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanCell {
    pub key: ConditionKey,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentPlan {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub strict_mismatch: bool,
    pub workers: usize,
    pub save_checkpoints: bool,
    /// Writes wall-clock durations into the run CSV, which makes its bytes
    /// differ between repeats. Off by default; timings always go to the
    /// sidecar file.
    pub record_timing: bool,
    pub cells: Vec<PlanCell>,
}

/// One unit of work: a condition and one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunCell {
    pub key: ConditionKey,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn run_cells(&self) -> Vec<RunCell> {
        self.cells
            .iter()
            .flat_map(|c| (0..c.seeds as u64).map(move |i| RunCell { key: c.key, seed: self.base_seed + i }))
            .collect()
    }

    /// Canonical text with every default written out and one block per
    /// condition. Parsing it yields an identical plan.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("data_dir = {}\n", self.data_dir.display()));
        s.push_str(&format!("out = {}\n", self.out_dir.display()));
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("seeds = {}\n", self.seeds));
        s.push_str(&format!("base_seed = {}\n", self.base_seed));
        s.push_str(&format!("strict_mismatch = {}\n", self.strict_mismatch));
        s.push_str(&format!("workers = {}\n", self.workers));
        s.push_str(&format!("checkpoints = {}\n", self.save_checkpoints));
        s.push_str(&format!("record_timing = {}\n", self.record_timing));
        for c in &self.cells {
            s.push_str(&format!(
                "\n[cell]\nk = {}\nmode = {}\nn_pairs = {}\narch = {}\nseeds = {}\n",
                c.key.k,
                c.key.mode.as_str(),
                c.key.n_pairs,
                c.key.arch.as_str(),
                c.seeds
            ));
        }
        s
    }
}

fn err(line: usize, key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: key '{key}': {msg}"))
}

fn parse_one<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| err(line, key, format!("invalid value '{v}' ({e})")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|p| parse_one(line, key, p.trim())).collect()
}

#[derive(Default)]
struct CellDraft {
    header_line: usize,
    k: Option<Vec<usize>>,
    mode: Option<Vec<ExemplarMode>>,
    n_pairs: Option<Vec<usize>>,
    arch: Option<Vec<Arch>>,
    seeds: Option<usize>,
}

/// Parses a plan. `data_dir_override` (from the environment) takes
/// precedence over any `data_dir` in the text.
pub fn parse_plan(text: &str, data_dir_override: Option<&Path>) -> Result<ExperimentPlan> {
    let mut data_dir: Option<PathBuf> = None;
    let mut out_dir = PathBuf::from("results");
    let mut epochs = MAIN_EPOCHS;
    let mut seeds = DEFAULT_SEEDS;
    let mut base_seed = 0u64;
    let mut strict_mismatch = false;
    let mut workers = 1usize;
    let mut save_checkpoints = false;
    let mut record_timing = false;
    let mut drafts: Vec<CellDraft> = Vec::new();
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "[cell]" {
            drafts.push(CellDraft { header_line: n, ..CellDraft::default() });
            continue;
        }
        if line.starts_with('[') {
            return Err(err(n, line, "unknown section"));
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {n}: expected 'key = value', got '{line}'")));
        };
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(err(n, key, "empty value"));
        }
        if let Some(cell) = drafts.last_mut() {
            match key {
                "k" => cell.k = Some(parse_list(n, key, value)?),
                "mode" | "exemplar_mode" => cell.mode = Some(parse_list(n, key, value)?),
                "n_pairs" => cell.n_pairs = Some(parse_list(n, key, value)?),
                "arch" => cell.arch = Some(parse_list(n, key, value)?),
                "seeds" => cell.seeds = Some(parse_one(n, key, value)?),
                _ => return Err(err(n, key, "unknown key in [cell] block")),
            }
            continue;
        }
        match key {
            "data_dir" => data_dir = Some(PathBuf::from(value)),
            "out" => out_dir = PathBuf::from(value),
            "epochs" => epochs = parse_one(n, key, value)?,
            "seeds" => seeds = parse_one(n, key, value)?,
            "base_seed" => base_seed = parse_one(n, key, value)?,
            "strict_mismatch" => strict_mismatch = parse_one(n, key, value)?,
            "workers" => workers = parse_one(n, key, value)?,
            "checkpoints" => save_checkpoints = parse_one(n, key, value)?,
            "record_timing" => record_timing = parse_one(n, key, value)?,
            _ => return Err(err(n, key, "unknown key")),
        }
    }

    let data_dir = match (data_dir_override, data_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p,
        (None, None) => return Err(err(last_line + 1, "data_dir", "missing dataset path")),
    };
    if seeds == 0 {
        return Err(err(0, "seeds", "must be at least 1"));
    }
    if workers == 0 {
        return Err(err(0, "workers", "must be at least 1"));
    }
    if drafts.is_empty() {
        return Err(err(last_line + 1, "[cell]", "plan has no cells"));
    }

    let mut cells = Vec::new();
    for d in drafts {
        let n = d.header_line;
        let ks = d.k.ok_or_else(|| err(n, "k", "missing in [cell] block"))?;
        let modes = d.mode.ok_or_else(|| err(n, "mode", "missing in [cell] block"))?;
        let sizes = d.n_pairs.ok_or_else(|| err(n, "n_pairs", "missing in [cell] block"))?;
        let archs = d.arch.unwrap_or_else(|| vec![Arch::ObjectCnn]);
        let cell_seeds = d.seeds.unwrap_or(seeds);
        if cell_seeds == 0 {
            return Err(err(n, "seeds", "must be at least 1"));
        }
        for &arch in &archs {
            for &k in &ks {
                for &mode in &modes {
                    for &n_pairs in &sizes {
                        DatasetConfig { k, exemplar_mode: mode, n_pairs, seed: 0, strict_mismatch }
                            .validate()
                            .map_err(|e| err(n, "n_pairs", e))?;
                        cells.push(PlanCell { key: ConditionKey { k, mode, n_pairs, arch }, seeds: cell_seeds });
                    }
                }
            }
        }
    }
    Ok(ExperimentPlan {
        data_dir,
        out_dir,
        epochs,
        seeds,
        base_seed,
        strict_mismatch,
        workers,
        save_checkpoints,
        record_timing,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = "data_dir = /data\nepochs = 10\n[cell]\nk = 2,3,4\nmode = fixed\nn_pairs = 36,72,144,360,720\n";

    #[test]
    fn grid_expands_to_run_cells() {
        let plan = parse_plan(GRID, None).unwrap();
        assert_eq!(plan.cells.len(), 15);
        assert_eq!(plan.run_cells().len(), 75);
        assert!(plan.cells.iter().all(|c| c.seeds == DEFAULT_SEEDS));
        assert!(plan.snapshot().contains("seeds = 5"));
    }

    #[test]
    fn indivisible_pairs_rejected() {
        let e = parse_plan("data_dir = d\n[cell]\nk = 2\nmode = fixed\nn_pairs = 35\n", None).unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Config(_)));
        assert!(msg.contains("line 2") && msg.contains("n_pairs"), "{msg}");
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = parse_plan("data_dir = d\nepochz = 3\n", None).unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("epochz"), "{e}");
        let e = parse_plan("data_dir = d\n[cell]\nk = two\n", None).unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("'k'"), "{e}");
        let e = parse_plan("[cell]\nk = 2\nmode = fixed\nn_pairs = 4\n", None).unwrap_err().to_string();
        assert!(e.contains("data_dir"), "{e}");
    }

    #[test]
    fn override_wins_and_snapshot_round_trips() {
        let plan = parse_plan(GRID, Some(Path::new("/elsewhere"))).unwrap();
        assert_eq!(plan.data_dir, PathBuf::from("/elsewhere"));
        assert_eq!(parse_plan(&plan.snapshot(), None).unwrap(), plan);
    }

    #[test]
    fn per_cell_seed_override() {
        let text = "data_dir = d\nseeds = 2\nbase_seed = 7\n[cell]\nk = 2\nmode = varying\nn_pairs = 72\nseeds = 1\n[cell]\nk = 3\nmode = fixed\nn_pairs = 72\narch = scene_cnn\n";
        let plan = parse_plan(text, None).unwrap();
        let cells = plan.run_cells();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![7, 7, 8]);
        assert_eq!(cells[1].key.arch, Arch::SceneCnn);
    }
}
