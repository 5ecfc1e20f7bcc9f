//! Recognition-based metrics, per-region reports and ablation sweeps.

pub mod attributes;
pub mod metrics;
pub mod report;
pub mod run;

pub use attributes::{AttributeClassifier, AttributeConfig, AttributeExample};
pub use metrics::{cosine, frechet_distance, identity_similarity, kid_mmd, mean_sd, poly_kernel};
pub use report::{MetricReport, RegionRow, REPORT_HEADER};
pub use run::{
    ablation_csv, ablation_sweep, attribute_examples, evaluate_per_region, pair_separation, recognizer_examples,
    write_outputs, Ablation, AblationRow, EvalConfig, EvalOutcome, EvalSample,
};
