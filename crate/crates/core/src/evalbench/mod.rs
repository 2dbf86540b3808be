//! Metrics, probes, the ablation matrix, embedding dumps and the attention
//! complexity benchmark.

mod ablation;
mod bench;
mod dump;
mod metrics;
mod probe;

pub use ablation::{
    reference_scores, render_ablation_csv, run_ablation, single_branch_report, AblationRow,
    ReferenceScores, ABLATION_HEADER, FUSION_COMBOS,
};
pub use bench::{
    analytic_space_factor, analytic_time_ratio, blocked_self_attention, complexity_benchmark,
    render_bench_csv, BenchConfig, BenchSize, ComplexityProfile, BENCH_HEADER,
};
pub use dump::{model_embeddings, store_embeddings, write_embedding_dump, EmbeddingDump};
pub use metrics::{
    compute_metrics, render_metrics_csv, write_csv, ClassMetrics, MetricReport, MetricRow,
    METRICS_HEADER,
};
pub use probe::{LinearProbe, ProbeConfig};
