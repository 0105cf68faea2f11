//! Plans, sweeps, result files, attention export and plots.

pub mod attention;
pub mod plan;
pub mod results;
pub mod svg;
pub mod sweep;

pub use attention::export_attention;
pub use plan::{parse_plan, ExperimentPlan, RunCell};
pub use results::{read_aggregates, read_runs, RunRow};
pub use svg::emit_report;
pub use sweep::{render_runs, run_experiment, run_me_sweep, write_me_summary, MeSweepConfig, ReportBundle};
