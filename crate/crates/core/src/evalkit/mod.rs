//! Evaluation: AUROC, test-set reports, sweeps, ablations and plots.

mod experiment;
mod metrics;
mod plot;

pub use experiment::{
    ablation_run, auroc_of, baseline_report, beta_sweep, evaluate_test, fingerprint, gan_report, run_gan, run_gan_all,
    sensitivity_sweep, tail_report, AblationKind, AblationResult, EvalReport, ExperimentSpec, GanRun, Pooling, Scorer,
    SweepParam,
};
pub use metrics::{auroc, mean_stderr, tail_mean, wasserstein_seq_distance};
pub use plot::{emit_plots, read_metrics_csv, MetricsTable};
