//! Hand-written SVG accuracy plots.

use std::collections::BTreeSet;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::AggregateResult;
use crate::model::Arch;
use crate::scenegen::ExemplarMode;

pub const CHANCE: f64 = 0.25;
const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub mean: f64,
    pub ci: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
}

pub struct Axis {
    pub label: String,
    pub ticks: Vec<f64>,
    pub log: bool,
}

impl Axis {
    fn project(&self, v: f64) -> f64 {
        let f = |x: f64| if self.log { x.ln() } else { x };
        let lo = f(self.ticks.iter().copied().fold(f64::INFINITY, f64::min));
        let hi = f(self.ticks.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        // pad half a step on each side so end points do not touch the frame
        let pad = if hi > lo { (hi - lo) * 0.05 } else { 1.0 };
        LEFT + (f(v) - lo + pad) / (hi - lo + 2.0 * pad) * (W - LEFT - RIGHT)
    }
}

fn y_of(v: f64) -> f64 {
    TOP + (1.0 - v.clamp(0.0, 1.0)) * (H - TOP - BOTTOM)
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 { format!("{}", v as i64) } else { format!("{v}") }
}

/// Renders accuracy series with 95% CI bars and a dashed chance line.
pub fn plot(title: &str, x: &Axis, series: &[Series]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (W - RIGHT + LEFT) / 2.0, escape(title));
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, y_of(0.0), y_of(1.0));
    let _ = writeln!(s, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for i in 0..=4 {
        let v = i as f64 * 0.25;
        let y = y_of(v);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#e0e0e0"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0);
    }
    for &t in &x.ticks {
        let px = x.project(t);
        let _ = writeln!(s, r#"<line x1="{px}" y1="{y0}" x2="{px}" y2="{}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(s, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, y0 + 18.0, fmt_tick(t));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 15.0, escape(&x.label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">accuracy</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let yc = y_of(CHANCE);
    let _ = writeln!(
        s,
        r#"<line class="chance" x1="{x0}" y1="{yc}" x2="{x1}" y2="{yc}" stroke="gray" stroke-dasharray="6,4" data-y="{CHANCE}"/>"#
    );
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<g class="series" data-label="{}" stroke="{c}" fill="{c}">"#, escape(&ser.label));
        let pts: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", x.project(p.x), y_of(p.mean))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke-width="2"/>"#, pts.join(" "));
        for p in &ser.points {
            let px = x.project(p.x);
            let (lo, hi) = (y_of(p.mean - p.ci), y_of(p.mean + p.ci));
            let _ = writeln!(s, r#"<line class="ci" x1="{px:.2}" y1="{lo:.2}" x2="{px:.2}" y2="{hi:.2}"/>"#);
            for y in [lo, hi] {
                let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}"/>"#, px - 4.0, px + 4.0);
            }
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{:.2}" r="3.5" data-mean="{}"/>"#, y_of(p.mean), p.mean);
        }
        let ly = TOP + 20.0 * i as f64 + 10.0;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke-width="2"/>"#, x1 + 15.0, x1 + 40.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" stroke="none">{}</text>"#, x1 + 46.0, ly + 4.0, escape(&ser.label));
        let _ = writeln!(s, "</g>");
    }
    let ly = TOP + 20.0 * series.len() as f64 + 10.0;
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="gray" stroke-dasharray="6,4"/><text x="{}" y="{}">chance</text>"#,
        x1 + 15.0,
        x1 + 40.0,
        x1 + 46.0,
        ly + 4.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes one plot per exemplar mode (accuracy against training pairs, one
/// series per scene complexity) and, when both architectures are present,
/// a plot comparing them across complexity.
pub fn emit_report(aggregates: &[AggregateResult], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if aggregates.is_empty() {
        return Err(Error::Usage("aggregate table is empty; nothing to plot".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let archs: BTreeSet<Arch> = aggregates.iter().map(|a| a.key.arch).collect();
    for mode in [ExemplarMode::Fixed, ExemplarMode::Varying] {
        let rows: Vec<&AggregateResult> = aggregates.iter().filter(|a| a.key.mode == mode).collect();
        if rows.is_empty() {
            continue;
        }
        let arch = if rows.iter().any(|a| a.key.arch == Arch::ObjectCnn) { Arch::ObjectCnn } else { Arch::SceneCnn };
        let rows: Vec<&AggregateResult> = rows.into_iter().filter(|a| a.key.arch == arch).collect();
        let ks: BTreeSet<usize> = rows.iter().map(|a| a.key.k).collect();
        let sizes: BTreeSet<usize> = rows.iter().map(|a| a.key.n_pairs).collect();
        let series: Vec<Series> = ks
            .iter()
            .map(|&k| Series {
                label: format!("{k} objects"),
                points: rows
                    .iter()
                    .filter(|a| a.key.k == k)
                    .map(|a| Point { x: a.key.n_pairs as f64, mean: a.mean, ci: a.ci95_halfwidth })
                    .collect(),
            })
            .collect();
        let axis = Axis {
            label: "matching word-object pairs".into(),
            ticks: sizes.iter().map(|&n| n as f64).collect(),
            log: true,
        };
        let title = format!("{} exemplars, {}", mode.as_str(), arch.as_str());
        let path = out_dir.join(format!("accuracy_{}.svg", mode.as_str()));
        fs::write(&path, plot(&title, &axis, &series))?;
        written.push(path);
    }
    if archs.len() == 2 {
        // the largest training size at which both architectures were run,
        // preferring varying exemplars
        let both = |mode: ExemplarMode, n: usize| {
            archs.iter().all(|&arch| aggregates.iter().any(|a| a.key.mode == mode && a.key.n_pairs == n && a.key.arch == arch))
        };
        let pick = [ExemplarMode::Varying, ExemplarMode::Fixed].into_iter().find_map(|mode| {
            aggregates.iter().filter(|a| a.key.mode == mode && both(mode, a.key.n_pairs)).map(|a| a.key.n_pairs).max().map(|n| (mode, n))
        });
        if let Some((mode, n)) = pick {
            let rows: Vec<&AggregateResult> =
                aggregates.iter().filter(|a| a.key.mode == mode && a.key.n_pairs == n).collect();
            let ks: BTreeSet<usize> = rows.iter().map(|a| a.key.k).collect();
            let series: Vec<Series> = archs
                .iter()
                .map(|&arch| Series {
                    label: arch.as_str().into(),
                    points: rows
                        .iter()
                        .filter(|a| a.key.arch == arch)
                        .map(|a| Point { x: a.key.k as f64, mean: a.mean, ci: a.ci95_halfwidth })
                        .collect(),
                })
                .collect();
            let axis = Axis { label: "objects per scene".into(), ticks: ks.iter().map(|&k| k as f64).collect(), log: false };
            let title = format!("object vs scene encoder, {} exemplars, {n} pairs", mode.as_str());
            let path = out_dir.join("arch_comparison.svg");
            fs::write(&path, plot(&title, &axis, &series))?;
            written.push(path);
        }
    }
    Ok(written)
}
