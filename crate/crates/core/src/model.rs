//! The dual-branch model: relation encoders, DT-Former(s), heads and the
//! combined training objective.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, RelationToken, VideoSample};
use crate::dtformer::{dtformer_forward, DtConfig, DtFormerParams, EncodedVideo, Sampling, SelectionMask};
use crate::error::{invalid, LairError, Result};
use crate::heads::{
    classification_loss, classify, loss_sim, loss_tss, loss_xm, predictions, ActionPrediction, HeadKind, Heads,
    LossBreakdown, LossWeights, TEMP_INIT,
};
use crate::numerics::gumbel::splitmix;
use crate::numerics::{Checkpoint, Graph, Init, InitMeta, NodeId, NoiseKey, ParamId, ParamStore, Tensor};
use crate::relation::{
    encode_joint, semantic_relation_features, visual_relation_features, JointEncoderParams, SemanticRelationParams,
    VisualDims, VisualRelationParams,
};

/// Architecture hyper-parameters independent of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub d_hidden: usize,
    pub d_embed: usize,
    pub d_model: usize,
    pub box_resolution: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Anchor ranks of the pooling weights.
    pub gpo_len: usize,
    pub selector_dim: usize,
    pub selector_hidden: usize,
    pub keep_bias: f64,
    pub weight_std: f64,
    pub temporal_select: bool,
    pub spatial_select: bool,
    pub attention_mask: bool,
    pub shared_dtformer: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_hidden: 16,
            d_embed: 16,
            d_model: 32,
            box_resolution: 8,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            gpo_len: 8,
            selector_dim: 8,
            selector_hidden: 8,
            keep_bias: 2.0,
            weight_std: 0.02,
            temporal_select: true,
            spatial_select: true,
            attention_mask: true,
            shared_dtformer: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub t_frames: usize,
    pub k_slots: usize,
    pub d_visual: usize,
    pub d_union: usize,
    pub categories: Vec<String>,
    pub relations: Vec<String>,
    pub actions: Vec<String>,
    pub multi_label: bool,
}

impl ModelConfig {
    pub fn from_meta(meta: &DatasetMeta, arch: ArchConfig) -> Self {
        Self {
            arch,
            t_frames: meta.t_frames,
            k_slots: meta.k_slots,
            d_visual: meta.d_visual,
            d_union: meta.d_union,
            categories: meta.categories.clone(),
            relations: meta.relations.clone(),
            actions: meta.actions.clone(),
            multi_label: meta.multi_label,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.actions.len()
    }

    pub fn tokens(&self) -> usize {
        self.t_frames * self.k_slots
    }

    pub fn num_triples(&self) -> usize {
        self.categories.len() * self.relations.len() * self.categories.len()
    }

    pub fn triple_id(&self, s: usize, r: usize, o: usize) -> usize {
        (s * self.relations.len() + r) * self.categories.len() + o
    }

    pub fn triple_from_id(&self, id: usize) -> (usize, usize, usize) {
        let (nc, nr) = (self.categories.len(), self.relations.len());
        (id / (nr * nc), (id / nc) % nr, id % nc)
    }

    pub fn dt_config(&self) -> DtConfig {
        let a = &self.arch;
        DtConfig {
            t_frames: self.t_frames,
            k_slots: self.k_slots,
            d_model: a.d_model,
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            mlp_ratio: a.mlp_ratio,
            selector_dim: a.selector_dim,
            selector_hidden: a.selector_hidden,
            keep_bias: a.keep_bias,
            temporal_select: a.temporal_select,
            spatial_select: a.spatial_select,
            attention_mask: a.attention_mask,
        }
    }
}

/// A video resampled to `T` frames, tokens row-major over `(t, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoGrid {
    pub video_id: String,
    pub t_frames: usize,
    pub k_slots: usize,
    pub frame_index: Vec<usize>,
    pub tokens: Vec<RelationToken>,
    pub valid: Vec<bool>,
    /// Planted key-token positions, if the sample records any.
    pub key: Vec<bool>,
    pub labels: Vec<usize>,
}

impl VideoGrid {
    pub fn new(sample: &VideoSample, frames: &[usize], k_slots: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(frames.len() * k_slots);
        let mut key = Vec::with_capacity(frames.len() * k_slots);
        for &f in frames {
            let frame = sample
                .frames
                .get(f)
                .ok_or_else(|| invalid(format!("frame {f} outside video of {} frames", sample.len())))?;
            if frame.len() != k_slots {
                return Err(invalid(format!("frame {f} has {} slots, expected {k_slots}", frame.len())));
            }
            for (k, tok) in frame.iter().enumerate() {
                tokens.push(tok.clone());
                key.push(sample.key_tokens.contains(&(f, k)));
            }
        }
        let valid = tokens.iter().map(|t| t.valid).collect();
        Ok(Self {
            video_id: sample.video_id.clone(),
            t_frames: frames.len(),
            k_slots,
            frame_index: frames.to_vec(),
            tokens,
            valid,
            key,
            labels: sample.labels.clone(),
        })
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&i| self.valid[i]).collect()
    }

    /// Triple of each valid token, in `valid_rows` order.
    pub fn triples(&self) -> Result<Vec<(usize, usize, usize)>> {
        self.valid_rows()
            .into_iter()
            .map(|i| {
                let t = &self.tokens[i];
                match (t.subject_cat, t.relation_cat, t.object_cat) {
                    (Some(s), Some(r), Some(o)) => Ok((s, r, o)),
                    _ => Err(invalid(format!(
                        "video '{}' token ({}, {}) has no semantic categories",
                        self.video_id,
                        i / self.k_slots,
                        i % self.k_slots
                    ))),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LairModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualRelationParams,
    pub semantic: SemanticRelationParams,
    pub enc_v: JointEncoderParams,
    pub enc_s: JointEncoderParams,
    pub dt_v: DtFormerParams,
    pub dt_s: DtFormerParams,
    pub heads: Heads,
    pub log_temp: ParamId,
}

/// Checkpoint metadata record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub init: InitMeta,
    #[serde(default)]
    pub training: serde_json::Value,
}

/// Per-video output of one branch.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// `[TK×D]` joint-space token embeddings (zero rows at invalid slots).
    pub embeddings: NodeId,
    pub encoded: EncodedVideo,
}

/// Which terms enter the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub sim: bool,
    pub tss: bool,
    pub xm: bool,
    /// Train the language branch at all (`false` = video-only baseline).
    pub language_branch: bool,
    pub max_pairs: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            sim: true,
            tss: true,
            xm: true,
            language_branch: true,
            max_pairs: 256,
        }
    }
}

/// Graph nodes and values of one batch forward pass.
pub struct ForwardOutput {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    pub video: Vec<ActionPrediction>,
    /// Language and video-to-language head outputs (with the language branch).
    pub p_s: Option<NodeId>,
    pub p_v2s: Option<NodeId>,
    pub masks_v: Vec<SelectionMask>,
    pub masks_s: Vec<SelectionMask>,
}

/// Noise-site base of (video position, branch).
fn site_base(video: u64, branch: u64) -> u64 {
    splitmix(video.wrapping_mul(2).wrapping_add(branch))
}

impl LairModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let a = config.arch.clone();
        if config.categories.is_empty() || config.relations.is_empty() || config.actions.is_empty() {
            return Err(invalid("vocabularies and action list must be non-empty"));
        }
        let mut store = ParamStore::new(seed, a.weight_std);
        let visual = VisualRelationParams::new(
            &mut store,
            "rel",
            VisualDims {
                d_visual: config.d_visual,
                d_union: config.d_union,
                d_hidden: a.d_hidden,
                box_resolution: a.box_resolution,
            },
        )?;
        let semantic =
            SemanticRelationParams::new(&mut store, "sem", config.categories.len(), config.relations.len(), a.d_embed)?;
        let enc_v = JointEncoderParams::new(&mut store, "enc_v", visual.out_dim(), a.d_model, a.gpo_len)?;
        let enc_s = JointEncoderParams::new(&mut store, "enc_s", semantic.out_dim(), a.d_model, a.gpo_len)?;
        let dt = config.dt_config();
        let (dt_v, dt_s) = if a.shared_dtformer {
            let p = DtFormerParams::new(&mut store, "dt", &dt)?;
            (p.clone(), p)
        } else {
            (DtFormerParams::new(&mut store, "dt_v", &dt)?, DtFormerParams::new(&mut store, "dt_s", &dt)?)
        };
        let heads = Heads::new(&mut store, a.d_model, config.num_classes(), config.multi_label)?;
        let log_temp = store.add("contrastive.log_temp", &[1], Init::Const(TEMP_INIT.ln()))?;
        Ok(Self {
            config,
            store,
            visual,
            semantic,
            enc_v,
            enc_s,
            dt_v,
            dt_s,
            heads,
            log_temp,
        })
    }

    pub fn grid(&self, sample: &VideoSample, frames: &[usize]) -> Result<VideoGrid> {
        if frames.len() != self.config.t_frames {
            return Err(invalid(format!(
                "{} frames sampled but the model expects T = {}",
                frames.len(),
                self.config.t_frames
            )));
        }
        VideoGrid::new(sample, frames, self.config.k_slots)
    }

    fn check_grid(&self, grid: &VideoGrid) -> Result<()> {
        if grid.t_frames != self.config.t_frames || grid.k_slots != self.config.k_slots {
            return Err(invalid(format!(
                "grid is {}×{}, model expects {}×{}",
                grid.t_frames, grid.k_slots, self.config.t_frames, self.config.k_slots
            )));
        }
        if !grid.valid.iter().any(|&v| v) {
            return Err(invalid(format!("video '{}' has no valid tokens", grid.video_id)));
        }
        Ok(())
    }

    /// `V` for one grid.
    pub fn visual_embeddings(&self, g: &mut Graph, grid: &VideoGrid) -> Result<NodeId> {
        self.check_grid(grid)?;
        let rows = grid.valid_rows();
        let toks: Vec<&RelationToken> = rows.iter().map(|&i| &grid.tokens[i]).collect();
        let feats = visual_relation_features(g, &self.store, &self.visual, &toks)?;
        encode_joint(g, &self.store, &self.enc_v, feats, &rows, self.config.tokens())
    }

    /// `S` for one grid.
    pub fn semantic_embeddings(&self, g: &mut Graph, grid: &VideoGrid) -> Result<NodeId> {
        self.check_grid(grid)?;
        let rows = grid.valid_rows();
        let triples = grid.triples()?;
        let feats = semantic_relation_features(g, &self.store, &self.semantic, &triples)?;
        encode_joint(g, &self.store, &self.enc_s, feats, &rows, self.config.tokens())
    }

    pub fn visual_branch(
        &self,
        g: &mut Graph,
        grid: &VideoGrid,
        sampling: Sampling,
        temperature: f64,
        video: u64,
    ) -> Result<BranchOutput> {
        let embeddings = self.visual_embeddings(g, grid)?;
        let encoded = dtformer_forward(
            g,
            &self.store,
            &self.dt_v,
            embeddings,
            &grid.valid,
            sampling,
            temperature,
            site_base(video, 0),
        )?;
        Ok(BranchOutput { embeddings, encoded })
    }

    pub fn semantic_branch(
        &self,
        g: &mut Graph,
        grid: &VideoGrid,
        sampling: Sampling,
        temperature: f64,
        video: u64,
    ) -> Result<BranchOutput> {
        let embeddings = self.semantic_embeddings(g, grid)?;
        let encoded = dtformer_forward(
            g,
            &self.store,
            &self.dt_s,
            embeddings,
            &grid.valid,
            sampling,
            temperature,
            site_base(video, 1),
        )?;
        Ok(BranchOutput { embeddings, encoded })
    }

    /// Forward pass of a batch and the weighted objective.
    ///
    /// `step` keys both the selector noise and the contrastive pair sample.
    pub fn forward_loss(
        &self,
        g: &mut Graph,
        grids: &[VideoGrid],
        objective: &ObjectiveConfig,
        sampling: Sampling,
        temperature: f64,
        pair_key: NoiseKey,
    ) -> Result<ForwardOutput> {
        objective.weights.validate()?;
        if grids.is_empty() {
            return Err(invalid("empty batch"));
        }
        let c = self.config.num_classes();
        let multi = self.config.multi_label;
        let mut targets = Vec::with_capacity(grids.len() * c);
        for gr in grids {
            targets.extend(crate::heads::targets_from_labels(&gr.labels, c)?);
        }
        let targets = Tensor::matrix(grids.len(), c, targets)?;

        let mut vis = Vec::with_capacity(grids.len());
        let mut sem = Vec::with_capacity(grids.len());
        for (i, gr) in grids.iter().enumerate() {
            vis.push(self.visual_branch(g, gr, sampling, temperature, i as u64)?);
            if objective.language_branch {
                sem.push(self.semantic_branch(g, gr, sampling, temperature, i as u64)?);
            }
        }
        let zv: Vec<NodeId> = vis.iter().map(|b| b.encoded.z).collect();
        let zv = g.concat_rows(&zv)?;
        let p_v = classify(g, &self.store, &self.heads, HeadKind::Video, zv)?;
        let l_v = classification_loss(g, p_v, &targets, multi)?;
        let mut parts = vec![l_v];
        let (mut p_s_node, mut p_v2s_node) = (None, None);
        let mut bd = LossBreakdown {
            weights: objective.weights,
            ..LossBreakdown::default()
        };
        bd.l_v = g.scalar(l_v);

        if objective.language_branch {
            let zs: Vec<NodeId> = sem.iter().map(|b| b.encoded.z).collect();
            let zs = g.concat_rows(&zs)?;
            let p_s = classify(g, &self.store, &self.heads, HeadKind::Language, zs)?;
            p_s_node = Some(p_s);
            let l_s = classification_loss(g, p_s, &targets, multi)?;
            bd.l_s = g.scalar(l_s);
            parts.push(l_s);

            if objective.sim {
                let l = self.sim_term(g, grids, &vis, &sem, objective.max_pairs, pair_key)?;
                bd.l_sim = g.scalar(l);
                parts.push(g.scale(l, objective.weights.delta));
            }
            if objective.tss {
                let uv: Vec<NodeId> = vis.iter().map(|b| b.encoded.u).collect();
                let us: Vec<NodeId> = sem.iter().map(|b| b.encoded.u).collect();
                let uv = g.concat_rows(&uv)?;
                let us = g.concat_rows(&us)?;
                let l = loss_tss(g, uv, us)?;
                bd.l_tss = g.scalar(l);
                parts.push(g.scale(l, objective.weights.zeta));
            }
            if objective.xm {
                let p_v2s = classify(g, &self.store, &self.heads, HeadKind::VideoToLanguage, zv)?;
                p_v2s_node = Some(p_v2s);
                let l = loss_xm(g, p_s, p_v2s, multi)?;
                bd.l_xm = g.scalar(l);
                parts.push(g.scale(l, objective.weights.eta));
            }
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        bd.l_cls = bd.l_v + bd.l_s;
        bd.total = g.scalar(total);
        if !bd.total.is_finite() {
            return Err(LairError::NonFinite(format!("training objective {:?}", bd)));
        }
        Ok(ForwardOutput {
            total,
            breakdown: bd,
            video: predictions(g, p_v, multi),
            p_s: p_s_node,
            p_v2s: p_v2s_node,
            masks_v: vis.iter().map(|b| b.encoded.mask.clone()).collect(),
            masks_s: sem.iter().map(|b| b.encoded.mask.clone()).collect(),
        })
    }

    fn sim_term(
        &self,
        g: &mut Graph,
        grids: &[VideoGrid],
        vis: &[BranchOutput],
        sem: &[BranchOutput],
        max_pairs: usize,
        pair_key: NoiseKey,
    ) -> Result<NodeId> {
        let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
        for (b, gr) in grids.iter().enumerate() {
            for (row, (s, r, o)) in gr.valid_rows().into_iter().zip(gr.triples()?) {
                pairs.push((b, row, self.config.triple_id(s, r, o)));
            }
        }
        if max_pairs > 0 && pairs.len() > max_pairs {
            let mut keep = sample_indices(&mut pair_key.rng(), pairs.len(), max_pairs).into_vec();
            keep.sort_unstable();
            pairs = keep.into_iter().map(|i| pairs[i]).collect();
        }
        let mut vs = Vec::new();
        let mut ss = Vec::new();
        for (b, _) in grids.iter().enumerate() {
            let rows: Vec<usize> = pairs.iter().filter(|p| p.0 == b).map(|p| p.1).collect();
            if rows.is_empty() {
                continue;
            }
            vs.push(g.gather_rows(vis[b].embeddings, &rows)?);
            ss.push(g.gather_rows(sem[b].embeddings, &rows)?);
        }
        let v = g.concat_rows(&vs)?;
        let s = g.concat_rows(&ss)?;
        let groups: Vec<usize> = pairs.iter().map(|p| p.2).collect();
        let lt = g.param(&self.store, self.log_temp);
        loss_sim(g, v, s, lt, Some(&groups))
    }

    pub fn checkpoint(&self, seed: u64, training: serde_json::Value) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            init: self.store.meta().clone(),
            training,
        };
        Ok(Checkpoint::from_store(&self.store, seed, serde_json::to_string(&meta)?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, CheckpointMeta)> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| LairError::Checkpoint(format!("metadata: {e}")))?;
        let mut model = Self::new(meta.model.clone(), meta.init.seed)?;
        ck.restore_into(&mut model.store)?;
        Ok((model, meta))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SplitRatios, WorldSpec};

    pub(crate) fn tiny_world() -> (DatasetMeta, Vec<VideoSample>) {
        let spec = WorldSpec {
            num_classes: 3,
            t_frames: 4,
            k_slots: 3,
            min_frames: 4,
            max_frames: 4,
            d_visual: 4,
            d_union: 4,
            ..WorldSpec::default()
        };
        let d = generate_dataset(&spec, 6, SplitRatios::default()).unwrap();
        (d.meta, d.samples)
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            d_hidden: 4,
            d_embed: 4,
            d_model: 8,
            box_resolution: 2,
            n_layers: 1,
            n_heads: 2,
            gpo_len: 4,
            selector_dim: 4,
            selector_hidden: 4,
            weight_std: 0.3,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn forward_loss_is_finite_and_consistent() {
        let (meta, samples) = tiny_world();
        let model = LairModel::new(ModelConfig::from_meta(&meta, tiny_arch()), 1).unwrap();
        let grids: Vec<VideoGrid> = samples[..3].iter().map(|s| model.grid(s, &[0, 1, 2, 3]).unwrap()).collect();
        let mut g = Graph::new();
        let out = model
            .forward_loss(
                &mut g,
                &grids,
                &ObjectiveConfig::default(),
                Sampling::Hard { seed: 0, step: 0 },
                1.0,
                NoiseKey::new(0, 0, 0),
            )
            .unwrap();
        let b = out.breakdown;
        let expect = b.l_v + b.l_s + 0.1 * b.l_sim + b.l_tss + 0.1 * b.l_xm;
        assert!((b.total - expect).abs() < 1e-9);
        assert_eq!(out.video.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip_restores_parameters() {
        let (meta, _) = tiny_world();
        let model = LairModel::new(ModelConfig::from_meta(&meta, tiny_arch()), 5).unwrap();
        let ck = model.checkpoint(5, serde_json::Value::Null).unwrap();
        let (back, m) = LairModel::from_checkpoint(&Checkpoint::read_from(&ck.to_bytes()[..]).unwrap()).unwrap();
        assert_eq!(m.model, model.config);
        for ((n1, t1), (n2, t2)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(n1, n2);
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn wrong_frame_count_is_rejected() {
        let (meta, samples) = tiny_world();
        let model = LairModel::new(ModelConfig::from_meta(&meta, tiny_arch()), 1).unwrap();
        assert!(model.grid(&samples[0], &[0, 1, 2]).is_err());
    }
}
