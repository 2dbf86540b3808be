//! Two-stage training: per-modality encoders with cross-modal distillation,
//! then fusion on the frozen features.

mod config;
mod log;
mod stage1;
mod stage2;
mod sweep;

pub use config::{
    BranchName, DatasetConfig, EvalConfig, FeaturePaths, ModelConfig, Objective, RunConfig,
    Stage1Config, Stage2Config, SweepConfig, SynthSettings, TextConfig, TextEncoderKind, PRESETS,
};
pub use log::{LogRecord, TrainingLog};
pub use stage1::{batch_chunks, build_branch, train_stage1, Stage1Data, Stage1Output};
pub use stage2::{
    evaluate_fusion, predict_fusion, train_concat_on, train_fusion, train_stage2, train_stage2_on,
    ConcatOutput, FusionRun, FusionSettings, Stage2Data, Stage2Output, StepRecord,
};
pub use sweep::{grid_config, render_sweep_csv, sweep, thread_budget, SweepRow, SWEEP_HEADER};
