pub mod data;
pub mod dtformer;
pub mod error;
pub mod explain;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod relation;
pub mod train;

pub use data::{DatasetMeta, VideoSample};
pub use error::{LairError, Result};
pub use explain::{ExplanationTrace, SemanticBank};
pub use model::{ArchConfig, LairModel, ModelConfig};
pub use train::{MetricsReport, TrainConfig};
