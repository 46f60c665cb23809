//! Dataset file format.
//!
//! A dataset directory holds
//! * `meta.json`: one [`DatasetMeta`] record (vocabularies and grid sizes),
//! * `videos.jsonl`: one [`VideoSample`] per line,
//! * `manifest.json`: split membership (see [`super::Manifest`]).

use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LairError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const VIDEOS_FILE: &str = "videos.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Normalized `[x1, y1, x2, y2]`.
pub type BBox = [f64; 4];

/// One human–object relation at one (frame, slot) position.
///
/// The category fields form the semantic stream; they may be absent for
/// video-only data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationToken {
    pub subject_feat: Vec<f64>,
    pub object_feat: Vec<f64>,
    pub union_feat: Vec<f64>,
    pub subject_box: BBox,
    pub object_box: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_cat: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_cat: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_cat: Option<usize>,
    pub valid: bool,
}

impl RelationToken {
    /// Padding slot: zero features, no relation.
    pub fn padding(d_visual: usize, d_union: usize) -> Self {
        Self {
            subject_feat: vec![0.0; d_visual],
            object_feat: vec![0.0; d_visual],
            union_feat: vec![0.0; d_union],
            subject_box: [0.0, 0.0, 1.0, 1.0],
            object_box: [0.0, 0.0, 1.0, 1.0],
            subject_cat: None,
            relation_cat: None,
            object_cat: None,
            valid: false,
        }
    }

    pub fn triple(&self) -> Option<Triple> {
        Some(Triple {
            subject: self.subject_cat?,
            relation: self.relation_cat?,
            object: self.object_cat?,
        })
    }

    /// Removes the semantic stream.
    pub fn strip_semantics(&mut self) {
        self.subject_cat = None;
        self.relation_cat = None;
        self.object_cat = None;
    }
}

/// (subject category, relation category, object category).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// A video: `frames[f][k]` is slot `k` of raw frame `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub video_id: String,
    pub labels: Vec<usize>,
    pub frames: Vec<Vec<RelationToken>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<usize>,
    /// Ground-truth positions `(frame, slot)` that realize a planted
    /// relation transition (synthetic data only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub key_tokens: Vec<(usize, usize)>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn strip_semantics(&mut self) {
        self.frames.iter_mut().flatten().for_each(RelationToken::strip_semantics);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub categories: Vec<String>,
    pub relations: Vec<String>,
    pub actions: Vec<String>,
    /// Frames sampled per video by the model.
    pub t_frames: usize,
    pub k_slots: usize,
    pub num_classes: usize,
    pub d_visual: usize,
    pub d_union: usize,
    pub multi_label: bool,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(LairError::Parse {
                line: 1,
                field: field.into(),
                message,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            return fail("schema_version", format!("unsupported version {}", self.schema_version));
        }
        if self.categories.is_empty() {
            return fail("categories", "empty vocabulary".into());
        }
        if self.relations.is_empty() {
            return fail("relations", "empty vocabulary".into());
        }
        if self.num_classes == 0 || self.actions.len() != self.num_classes {
            return fail("actions", format!("{} names for {} classes", self.actions.len(), self.num_classes));
        }
        if self.t_frames == 0 || self.k_slots == 0 {
            return fail("t_frames", "T and K must be positive".into());
        }
        Ok(())
    }

    pub fn num_triples(&self) -> usize {
        self.categories.len() * self.relations.len() * self.categories.len()
    }

    pub fn triple_id(&self, t: Triple) -> usize {
        (t.subject * self.relations.len() + t.relation) * self.categories.len() + t.object
    }

    pub fn triple_from_id(&self, id: usize) -> Triple {
        let nc = self.categories.len();
        let nr = self.relations.len();
        Triple {
            subject: id / (nr * nc),
            relation: (id / nc) % nr,
            object: id % nc,
        }
    }

    pub fn triple_label(&self, t: Triple) -> String {
        format!(
            "{} {} {}",
            self.categories[t.subject], self.relations[t.relation], self.categories[t.object]
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| LairError::Parse {
            line: e.line(),
            field: "meta".into(),
            message: e.to_string(),
        })?;
        meta.validate()?;
        Ok(meta)
    }
}

fn box_ok(b: &BBox) -> bool {
    b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] < b[2] && b[1] < b[3]
}

/// Checks one decoded sample against the metadata; errors name `line`.
pub fn validate_sample(s: &VideoSample, meta: &DatasetMeta, line: usize) -> Result<()> {
    let fail = |field: &str, message: String| {
        Err(LairError::Parse {
            line,
            field: field.into(),
            message,
        })
    };
    if s.frames.is_empty() {
        return fail("frames", "video has no frames".into());
    }
    if meta.multi_label && s.labels.is_empty() {
        return fail("labels", "multi-label video without labels".into());
    }
    if !meta.multi_label && s.labels.len() != 1 {
        return fail("labels", format!("single-label video has {} labels", s.labels.len()));
    }
    if let Some(&c) = s.labels.iter().find(|&&c| c >= meta.num_classes) {
        return fail("labels", format!("class {c} outside 0..{}", meta.num_classes));
    }
    for (f, frame) in s.frames.iter().enumerate() {
        if frame.len() != meta.k_slots {
            return fail("frames", format!("frame {f} has {} slots, expected {}", frame.len(), meta.k_slots));
        }
        for (k, tok) in frame.iter().enumerate() {
            if tok.subject_feat.len() != meta.d_visual || tok.object_feat.len() != meta.d_visual {
                return fail("subject_feat", format!("token ({f},{k}) visual feature length mismatch"));
            }
            if tok.union_feat.len() != meta.d_union {
                return fail("union_feat", format!("token ({f},{k}) union feature length mismatch"));
            }
            if !tok.valid {
                continue;
            }
            if !box_ok(&tok.subject_box) {
                return fail("subject_box", format!("token ({f},{k}) box not normalized/ordered"));
            }
            if !box_ok(&tok.object_box) {
                return fail("object_box", format!("token ({f},{k}) box not normalized/ordered"));
            }
            for (field, v, n) in [
                ("subject_cat", tok.subject_cat, meta.categories.len()),
                ("relation_cat", tok.relation_cat, meta.relations.len()),
                ("object_cat", tok.object_cat, meta.categories.len()),
            ] {
                if let Some(v) = v {
                    if v >= n {
                        return fail(field, format!("token ({f},{k}) id {v} outside vocabulary of {n}"));
                    }
                }
            }
        }
    }
    for &(f, k) in &s.key_tokens {
        if f >= s.frames.len() || k >= meta.k_slots || !s.frames[f][k].valid {
            return fail("key_tokens", format!("key token ({f},{k}) is not a valid position"));
        }
    }
    Ok(())
}

/// Streaming reader over `videos.jsonl`.
pub struct VideoReader {
    lines: Lines<BufReader<File>>,
    line: usize,
    meta: DatasetMeta,
}

impl VideoReader {
    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }
}

impl Iterator for VideoReader {
    type Item = Result<VideoSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<VideoSample>(&text).map_err(|e| LairError::Parse {
                line: self.line,
                field: field_hint(&e),
                message: e.to_string(),
            });
            return Some(parsed.and_then(|s| validate_sample(&s, &self.meta, self.line).map(|_| s)));
        }
    }
}

fn field_hint(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "record".into())
}

/// Opens a dataset directory for streaming iteration.
pub fn open_dataset(dir: &Path) -> Result<VideoReader> {
    let meta = DatasetMeta::load(&dir.join(META_FILE))?;
    let f = File::open(dir.join(VIDEOS_FILE))?;
    Ok(VideoReader {
        lines: BufReader::new(f).lines(),
        line: 0,
        meta,
    })
}

/// Loads every sample of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<VideoSample>)> {
    let reader = open_dataset(dir)?;
    let meta = reader.meta().clone();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok((meta, samples))
}

pub fn write_meta(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

pub fn write_videos<'a>(dir: &Path, samples: impl IntoIterator<Item = &'a VideoSample>) -> Result<()> {
    use std::io::Write;
    let f = File::create(dir.join(VIDEOS_FILE))?;
    let mut w = std::io::BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
