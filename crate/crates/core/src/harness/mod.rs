//! Evaluation harness: BLEU scoring and the experiment scenarios.

mod bleu;
pub mod experiment;

pub use bleu::{bleu_corpus, BleuStats, MAX_ORDER};
pub use experiment::{
    render_report, run_experiment, ExperimentSpec, Report, ReportFormat, ReportRow, ScenarioKind,
    ScenarioSpec,
};
