//! Training loop, evaluation metrics and ablation presets.

pub mod ablation;
pub mod metrics;
pub mod sampling;
pub mod trainer;

pub use ablation::{mean_se, run_ablation, variance, AblationReport, Preset, Setting, SettingResult};
pub use metrics::{average_precision, class_recall, compute_metrics, EvalItem, MetricsReport};
pub use sampling::{sample_frames, FrameSampling};
pub use trainer::{evaluate, inference_grid, train, EpochRecord, EvalMode, Precision, TrainConfig, TrainOutcome};
