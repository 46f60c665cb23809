//! Dataset format, loader and synthetic relation-transition generator.

pub mod generate;
pub mod schema;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LairError, Result};

pub use generate::{
    default_rules, generate_dataset, write_dataset, ActionRule, GenerateSpec, GeneratedDataset, SplitRatios,
    WorldSpec,
};
pub use schema::{
    load_dataset, open_dataset, validate_sample, write_meta, write_videos, BBox, DatasetMeta, RelationToken,
    Triple, VideoReader, VideoSample, MANIFEST_FILE, META_FILE, SCHEMA_VERSION, VIDEOS_FILE,
};

/// One scene-held-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub test_scenes: Vec<usize>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Split membership by video id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub spec_hash: String,
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub folds: Vec<Fold>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Video ids of a split. `"all"` is every id; `"fold{i}-train"` and
    /// `"fold{i}-test"` address the scene-held-out folds.
    pub fn split(&self, name: &str) -> Result<Vec<String>> {
        if let Some(ids) = self.splits.get(name) {
            return Ok(ids.clone());
        }
        if name == "all" {
            let mut ids: Vec<String> = self.splits.values().flatten().cloned().collect();
            ids.sort();
            ids.dedup();
            return Ok(ids);
        }
        if let Some(rest) = name.strip_prefix("fold") {
            if let Some((idx, part)) = rest.split_once('-') {
                if let Ok(i) = idx.parse::<usize>() {
                    if let Some(f) = self.folds.get(i) {
                        match part {
                            "train" => return Ok(f.train.clone()),
                            "test" => return Ok(f.test.clone()),
                            _ => {}
                        }
                    }
                }
            }
        }
        Err(LairError::NotFound(format!("split '{name}'")))
    }
}

/// Samples of `samples` whose ids appear in `ids`, in `ids` order.
pub fn select_split(samples: &[VideoSample], ids: &[String]) -> Result<Vec<VideoSample>> {
    let by_id: BTreeMap<&str, &VideoSample> = samples.iter().map(|s| (s.video_id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| LairError::NotFound(format!("video '{id}'")))
        })
        .collect()
}
