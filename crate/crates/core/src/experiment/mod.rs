//! Config-driven experiments: running a task stream, the cumulative ablation
//! chain, and the result/diagnostic files with their readers.

mod ablation;
mod config;
mod reports;
mod run;

pub use ablation::{parse_stages, run_ablation, AblationReport, AblationRow, VariantSummary};
pub use config::{DatasetSpec, ModelSpec, RunConfig, Variant, VARIANT_CHAIN};
pub use reports::{
    emit_reports, read_deltas, read_gram, read_importance, read_omega, read_results,
    recompute_metrics, write_results, Recomputed, WallClock, DELTAS_FILE, GRAM_FILE,
    IMPORTANCE_FILE, OMEGA_FILE, RESULTS_FILE, TIMINGS_FILE,
};
pub use run::{
    build_backbone, build_dataset, run_experiment, run_on_dataset, DeltaRow, GramRow,
    ImportanceRow, OmegaRow, ResultsDoc, RunArtifacts,
};
