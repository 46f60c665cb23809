//! Video-only inference and nearest-neighbour semantic explanations.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::VideoSample;
use crate::dtformer::{Sampling, SelectionMask};
use crate::error::{invalid, LairError, Result};
use crate::heads::{classify, predictions, ActionPrediction, HeadKind};
use crate::model::LairModel;
use crate::numerics::{Graph, Tensor};
use crate::train::inference_grid;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Joint-space embedding of one selected visual token.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedToken {
    pub t: usize,
    pub k: usize,
    /// Source frame index in the raw video.
    pub frame: usize,
    pub subject_cat: Option<usize>,
    pub object_cat: Option<usize>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub video_id: String,
    pub prediction: ActionPrediction,
    pub mask: SelectionMask,
    /// Tokens with `U = 1`, in row-major `(t, k)` order.
    pub selected: Vec<SelectedToken>,
}

/// Runs the video branch alone with uniform frame sampling and noise-free
/// selection. Semantic fields of the sample are never read.
pub fn infer_video(model: &LairModel, sample: &VideoSample) -> Result<Inference> {
    let grid = inference_grid(model, sample)?;
    let mut g = Graph::new();
    let branch = model.visual_branch(&mut g, &grid, Sampling::Greedy, 1.0, 0)?;
    let p = classify(&mut g, &model.store, &model.heads, HeadKind::Video, branch.encoded.z)?;
    let prediction = predictions(&g, p, model.config.multi_label).remove(0);
    let mask = branch.encoded.mask.clone();
    let emb = g.value(branch.embeddings);
    let k_slots = grid.k_slots;
    let selected = mask
        .retained()
        .into_iter()
        .map(|(t, k)| {
            let i = t * k_slots + k;
            let tok = &grid.tokens[i];
            SelectedToken {
                t,
                k,
                frame: grid.frame_index[t],
                subject_cat: tok.subject_cat,
                object_cat: tok.object_cat,
                embedding: emb.row(i).to_vec(),
            }
        })
        .collect();
    Ok(Inference {
        video_id: sample.video_id.clone(),
        prediction,
        mask,
        selected,
    })
}

/// One embedding per `(subject, relation, object)` triple of the vocabulary.
///
/// A relation embedding depends on the other relations of its video (the
/// encoder mixes in a pooled global code), so a triple is represented by
/// the mean of its `f_s` embeddings over a set of reference videos, not by
/// the embedding of the triple on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticBank {
    /// Rows indexed by triple id, L2-normalised; zero for unseen triples.
    pub embeddings: Tensor,
    /// Reference tokens behind each row; triples with none are never returned.
    pub support: Vec<usize>,
    pub labels: Vec<String>,
    pub relations: Vec<String>,
    pub objects: Vec<String>,
    /// Hash of the parameters the bank was built from.
    pub fingerprint: String,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

pub fn model_fingerprint(model: &LairModel) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.store.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

impl SemanticBank {
    /// Builds the bank from the semantic stream of `reference` (normally the
    /// training split).
    pub fn build(model: &LairModel, reference: &[VideoSample]) -> Result<Self> {
        if reference.is_empty() {
            return Err(invalid("semantic bank needs at least one reference video"));
        }
        let c = &model.config;
        let (n, d) = (c.num_triples(), c.arch.d_model);
        let mut sums = vec![0.0; n * d];
        let mut support = vec![0usize; n];
        for sample in reference {
            let grid = inference_grid(model, sample)?;
            let mut g = Graph::new();
            let e = model.semantic_embeddings(&mut g, &grid)?;
            for (row, (s, r, o)) in grid.valid_rows().into_iter().zip(grid.triples()?) {
                let id = c.triple_id(s, r, o);
                for (acc, v) in sums[id * d..(id + 1) * d].iter_mut().zip(normalize(g.value(e).row(row))) {
                    *acc += v;
                }
                support[id] += 1;
            }
        }
        let rows: Vec<f64> = sums.chunks(d).flat_map(normalize).collect();
        let mut labels = Vec::with_capacity(n);
        let mut relations = Vec::with_capacity(n);
        let mut objects = Vec::with_capacity(n);
        for id in 0..n {
            let (s, r, o) = c.triple_from_id(id);
            labels.push(format!("{} {} {}", c.categories[s], c.relations[r], c.categories[o]));
            relations.push(c.relations[r].clone());
            objects.push(c.categories[o].clone());
        }
        Ok(Self {
            embeddings: Tensor::matrix(n, d, rows)?,
            support,
            labels,
            relations,
            objects,
            fingerprint: model_fingerprint(model),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_current(&self, model: &LairModel) -> bool {
        self.fingerprint == model_fingerprint(model)
    }

    /// Cosine nearest neighbour among supported triples; ties go to the
    /// lowest triple id.
    pub fn nearest(&self, query: &[f64]) -> Result<(usize, f64)> {
        if query.len() != self.embeddings.cols() {
            return Err(invalid(format!(
                "query has {} dims, bank has {}",
                query.len(),
                self.embeddings.cols()
            )));
        }
        if !self.support.iter().any(|&n| n > 0) {
            return Err(invalid("empty semantic bank"));
        }
        let q = normalize(query);
        let mut best = (0, f64::NEG_INFINITY);
        for id in (0..self.len()).filter(|&i| self.support[i] > 0) {
            let cos: f64 = self.embeddings.row(id).iter().zip(&q).map(|(a, b)| a * b).sum();
            if cos > best.1 {
                best = (id, cos);
            }
        }
        Ok((best.0, (1.0 - best.1).clamp(0.0, 2.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracedToken {
    pub t: usize,
    pub k: usize,
    pub frame: usize,
    pub subject: Option<String>,
    pub object: Option<String>,
    pub triple_id: usize,
    pub label: String,
    /// Cosine distance `1 − cos`, in `[0, 2]`.
    pub distance: f64,
}

/// Relation sequence of one slot with consecutive repeats collapsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub k: usize,
    pub object: String,
    pub relations: Vec<String>,
}

impl Transition {
    pub fn contains(&self, from: &str, to: &str) -> bool {
        self.relations.windows(2).any(|w| w[0] == from && w[1] == to)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredAction {
    pub action: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationTrace {
    pub schema_version: u32,
    pub video_id: String,
    pub t_frames: usize,
    pub k_slots: usize,
    pub predicted: Vec<ScoredAction>,
    pub scores: Vec<ScoredAction>,
    pub tokens: Vec<TracedToken>,
    pub transitions: Vec<Transition>,
}

/// Maps every selected token to its nearest semantic label and summarises
/// the label sequence of each slot over time.
pub fn explain(inference: &Inference, bank: &SemanticBank, model: &LairModel) -> Result<ExplanationTrace> {
    let c = &model.config;
    let name = |id: Option<usize>| id.and_then(|i| c.categories.get(i).cloned());
    let mut tokens = Vec::with_capacity(inference.selected.len());
    for s in &inference.selected {
        let (id, distance) = bank.nearest(&s.embedding)?;
        tokens.push(TracedToken {
            t: s.t,
            k: s.k,
            frame: s.frame,
            subject: name(s.subject_cat),
            object: name(s.object_cat),
            triple_id: id,
            label: bank.labels[id].clone(),
            distance,
        });
    }
    let mut transitions = Vec::new();
    for k in 0..inference.mask.k_slots {
        let mut slot: Vec<&TracedToken> = tokens.iter().filter(|t| t.k == k).collect();
        if slot.is_empty() {
            continue;
        }
        slot.sort_by_key(|t| t.t);
        let mut relations: Vec<String> = Vec::new();
        for t in &slot {
            let r = &bank.relations[t.triple_id];
            if relations.last() != Some(r) {
                relations.push(r.clone());
            }
        }
        transitions.push(Transition {
            k,
            object: bank.objects[slot[0].triple_id].clone(),
            relations,
        });
    }
    let scored = |a: usize| ScoredAction {
        action: c.actions[a].clone(),
        score: inference.prediction.scores[a],
    };
    Ok(ExplanationTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        video_id: inference.video_id.clone(),
        t_frames: inference.mask.t_frames,
        k_slots: inference.mask.k_slots,
        predicted: inference.prediction.predicted().into_iter().map(scored).collect(),
        scores: (0..c.num_classes()).map(scored).collect(),
        tokens,
        transitions,
    })
}

impl ExplanationTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let trace: Self = serde_json::from_str(text).map_err(|e| LairError::Parse {
            line: e.line(),
            field: "trace".into(),
            message: e.to_string(),
        })?;
        if trace.schema_version != TRACE_SCHEMA_VERSION {
            return Err(invalid(format!(
                "trace schema version {} (supported: {TRACE_SCHEMA_VERSION})",
                trace.schema_version
            )));
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Static SVG timeline: one row per slot, one column per sampled frame,
    /// selected tokens labelled with their nearest relation.
    pub fn to_svg(&self) -> String {
        let (cw, rh, left, top) = (130.0, 44.0, 70.0, 60.0);
        let width = left + cw * self.t_frames as f64 + 20.0;
        let height = top + rh * self.k_slots as f64 + 30.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
        );
        let title = self.predicted.iter().map(|p| format!("{} ({:.2})", p.action, p.score)).collect::<Vec<_>>();
        let _ = writeln!(
            s,
            r#"<text x="10" y="20" font-size="14">{}: {}</text>"#,
            escape(&self.video_id),
            escape(&title.join(", "))
        );
        for t in 0..self.t_frames {
            let x = left + cw * t as f64;
            let _ = writeln!(s, r#"<text x="{}" y="{}">t={t}</text>"#, x + 4.0, top - 8.0);
        }
        for k in 0..self.k_slots {
            let y = top + rh * k as f64;
            let _ = writeln!(s, r#"<text x="10" y="{}">slot {k}</text>"#, y + rh / 2.0 + 4.0);
            for t in 0..self.t_frames {
                let x = left + cw * t as f64;
                let tok = self.tokens.iter().find(|o| o.t == t && o.k == k);
                let fill = if tok.is_some() { "#cfe3f7" } else { "#f2f2f2" };
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}" stroke="#999"/>"##,
                    x + 1.0,
                    y + 1.0,
                    cw - 2.0,
                    rh - 2.0
                );
                if let Some(o) = tok {
                    let _ = writeln!(
                        s,
                        r#"<text x="{}" y="{}"><title>{}</title>{}</text>"#,
                        x + 4.0,
                        y + rh / 2.0 + 4.0,
                        escape(&format!("{} (d={:.3})", o.label, o.distance)),
                        escape(&o.label.splitn(2, ' ').nth(1).unwrap_or(&o.label).to_string())
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: Vec<f64>, d: usize) -> SemanticBank {
        let n = rows.len() / d;
        SemanticBank {
            embeddings: Tensor::matrix(n, d, rows).unwrap(),
            support: vec![1; n],
            labels: (0..n).map(|i| format!("p r{i} o")).collect(),
            relations: (0..n).map(|i| format!("r{i}")).collect(),
            objects: vec!["o".into(); n],
            fingerprint: String::new(),
        }
    }

    #[test]
    fn orthonormal_bank() {
        let b = bank(vec![1.0, 0.0, 0.0, 1.0], 2);
        let (id, d) = b.nearest(&[1.0, 0.0]).unwrap();
        assert_eq!((id, d), (0, 0.0));
        // second label: cosine distance 1, i.e. L2 distance √2 between unit vectors
        let cos: f64 = b.embeddings.row(1).iter().zip([1.0, 0.0]).map(|(a, q)| a * q).sum();
        assert_eq!(1.0 - cos, 1.0);
        assert!((((2.0 - 2.0 * cos) as f64).sqrt() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ties_take_lowest_id() {
        let b = bank(vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0], 2);
        assert_eq!(b.nearest(&[3.0, 0.0]).unwrap().0, 1);
        assert!(b.nearest(&[1.0]).is_err());
    }

    #[test]
    fn unseen_triples_are_skipped() {
        let mut b = bank(vec![1.0, 0.0, 0.0, 1.0], 2);
        b.support[0] = 0;
        assert_eq!(b.nearest(&[1.0, 0.1]).unwrap().0, 1);
        b.support[1] = 0;
        assert!(b.nearest(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn transition_contains() {
        let tr = Transition {
            k: 0,
            object: "cup".into(),
            relations: vec!["holding".into(), "not_holding".into()],
        };
        assert!(tr.contains("holding", "not_holding"));
        assert!(!tr.contains("not_holding", "holding"));
    }
}
