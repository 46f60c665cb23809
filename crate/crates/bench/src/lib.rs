//! Shared fixtures for the benches.

use lair_core::data::{generate_dataset, SplitRatios, VideoSample, WorldSpec};
use lair_core::model::{ArchConfig, LairModel, ModelConfig, VideoGrid};
use lair_core::Result;

pub struct Fixture {
    pub model: LairModel,
    pub samples: Vec<VideoSample>,
    pub grids: Vec<VideoGrid>,
}

/// A default-sized model and one batch of `batch` videos.
pub fn fixture(batch: usize) -> Result<Fixture> {
    let spec = WorldSpec::default();
    let data = generate_dataset(&spec, batch.max(1) * 2, SplitRatios::default())?;
    let model = LairModel::new(ModelConfig::from_meta(&data.meta, ArchConfig::default()), 0)?;
    let frames: Vec<usize> = (0..spec.t_frames).collect();
    let samples: Vec<VideoSample> = data.samples.into_iter().take(batch).collect();
    let grids = samples.iter().map(|s| model.grid(s, &frames)).collect::<Result<Vec<_>>>()?;
    Ok(Fixture { model, samples, grids })
}
