//! Run and aggregate CSV files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! value read back compares equal to the one written and repeated runs
//! produce identical bytes.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::{AggregateResult, ConditionKey, MeClass};
use crate::model::Arch;
use crate::scenegen::{ExemplarMode, MeMode};

pub const RUN_COLUMNS: [&str; 10] = [
    "condition_k",
    "exemplar_mode",
    "n_pairs",
    "arch",
    "seed",
    "final_train_acc",
    "eval_acc",
    "me_mode",
    "me_class",
    "duration_seconds",
];

pub const AGGREGATE_COLUMNS: [&str; 7] =
    ["condition_k", "exemplar_mode", "n_pairs", "arch", "mean", "ci95_halfwidth", "n"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub key: ConditionKey,
    pub seed: u64,
    pub final_train_acc: f64,
    pub eval_acc: Option<f64>,
    pub me_mode: Option<MeMode>,
    pub me_class: Option<MeClass>,
    pub duration_seconds: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.key.k.to_string(),
            self.key.mode.as_str().into(),
            self.key.n_pairs.to_string(),
            self.key.arch.as_str().into(),
            self.seed.to_string(),
            self.final_train_acc.to_string(),
            opt(self.eval_acc),
            opt(self.me_mode.map(MeMode::as_str)),
            opt(self.me_class.map(MeClass::as_str)),
            opt(self.duration_seconds),
        ]
    }

    fn parse(rec: &csv::StringRecord, line: u64) -> Result<Self> {
        if rec.len() != RUN_COLUMNS.len() {
            return Err(Error::Format(format!("line {line}: expected {} fields, got {}", RUN_COLUMNS.len(), rec.len())));
        }
        let f = |i: usize| rec[i].trim();
        let num = |i: usize| -> Result<f64> {
            f(i).parse().map_err(|_| Error::Format(format!("line {line}: bad {} '{}'", RUN_COLUMNS[i], f(i))))
        };
        let int = |i: usize| -> Result<u64> {
            f(i).parse().map_err(|_| Error::Format(format!("line {line}: bad {} '{}'", RUN_COLUMNS[i], f(i))))
        };
        let opt_num = |i: usize| -> Result<Option<f64>> { if f(i).is_empty() { Ok(None) } else { num(i).map(Some) } };
        Ok(RunRow {
            key: ConditionKey {
                k: int(0)? as usize,
                mode: f(1).parse()?,
                n_pairs: int(2)? as usize,
                arch: f(3).parse()?,
            },
            seed: int(4)?,
            final_train_acc: num(5)?,
            eval_acc: opt_num(6)?,
            me_mode: if f(7).is_empty() { None } else { Some(f(7).parse()?) },
            me_class: if f(8).is_empty() { None } else { Some(f(8).parse()?) },
            duration_seconds: opt_num(9)?,
        })
    }
}

/// Appends one row per call and flushes, so an interrupted sweep keeps every
/// completed row.
pub struct RowAppender {
    file: File,
}

impl RowAppender {
    /// Opens `path` for appending, writing the header if the file is new or
    /// empty. With `truncate` any existing rows are discarded first.
    pub fn open(path: &Path, header: &[&str], truncate: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(!truncate).write(true).truncate(truncate).open(path)?;
        if file.metadata()?.len() == 0 {
            file.write_all(line(header.iter().map(|s| s.to_string())).as_bytes())?;
        }
        Ok(RowAppender { file })
    }

    pub fn append(&mut self, fields: Vec<String>) -> Result<()> {
        self.file.write_all(line(fields).as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

fn line(fields: impl IntoIterator<Item = String>) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(fields.into_iter().collect::<Vec<_>>()).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are utf-8")
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::ReaderBuilder::new().from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RUN_COLUMNS {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            RunRow::parse(&rec, line)
        })
        .collect()
}

pub fn write_aggregates(path: &Path, aggregates: &[AggregateResult]) -> Result<()> {
    let mut w = RowAppender::open(path, &AGGREGATE_COLUMNS, true)?;
    for a in aggregates {
        w.append(vec![
            a.key.k.to_string(),
            a.key.mode.as_str().into(),
            a.key.n_pairs.to_string(),
            a.key.arch.as_str().into(),
            a.mean.to_string(),
            a.ci95_halfwidth.to_string(),
            a.n.to_string(),
        ])?;
    }
    Ok(())
}

pub fn read_aggregates(path: &Path) -> Result<Vec<AggregateResult>> {
    let mut r = csv::ReaderBuilder::new().from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != AGGREGATE_COLUMNS.len() {
            return Err(Error::Format(format!("aggregate row has {} fields", rec.len())));
        }
        let bad = |i: usize| Error::Format(format!("bad {} '{}'", AGGREGATE_COLUMNS[i], &rec[i]));
        out.push(AggregateResult {
            key: ConditionKey {
                k: rec[0].parse().map_err(|_| bad(0))?,
                mode: rec[1].parse::<ExemplarMode>()?,
                n_pairs: rec[2].parse().map_err(|_| bad(2))?,
                arch: rec[3].parse::<Arch>()?,
            },
            mean: rec[4].parse().map_err(|_| bad(4))?,
            ci95_halfwidth: rec[5].parse().map_err(|_| bad(5))?,
            n: rec[6].parse().map_err(|_| bad(6))?,
        });
    }
    Ok(out)
}
