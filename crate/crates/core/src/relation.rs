//! Visual and semantic relation features and the joint-space encoders.
//!
//! Visual relation feature of a token:
//! `[W_s·v_subj, W_o·v_obj, W_u·(u ⊕ f_box(map(b_subj, b_obj)))]`.
//! Semantic relation feature: `[E_cat(subj), E_rel(rel), E_cat(obj)]`.
//! Each branch then projects tokens to local vectors, pools them with a
//! rank-weighted pooling operator into a global vector, concatenates the
//! global vector onto every local one and maps the result to the joint space.

use crate::data::{BBox, RelationToken};
use crate::error::{invalid, Result};
use crate::numerics::{Graph, Linear, NodeId, ParamId, ParamStore, Tensor};

/// Rasterizes two boxes into a `[2×R×R]` binary map; a cell is set when its
/// center lies inside the box (closed boundaries).
pub fn box_config_map(subject: &BBox, object: &BBox, resolution: usize) -> Result<Tensor> {
    if resolution == 0 {
        return Err(invalid("box map resolution must be positive"));
    }
    let r = resolution;
    let mut data = vec![0.0; 2 * r * r];
    for (ch, b) in [subject, object].into_iter().enumerate() {
        for row in 0..r {
            let cy = (row as f64 + 0.5) / r as f64;
            if cy < b[1] || cy > b[3] {
                continue;
            }
            for col in 0..r {
                let cx = (col as f64 + 0.5) / r as f64;
                if cx >= b[0] && cx <= b[2] {
                    data[ch * r * r + row * r + col] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[2, r, r], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisualDims {
    pub d_visual: usize,
    pub d_union: usize,
    pub d_hidden: usize,
    pub box_resolution: usize,
}

/// `W_s`, `W_o`, `W_u` and `f_box`.
#[derive(Clone, Debug)]
pub struct VisualRelationParams {
    pub dims: VisualDims,
    pub subject: Linear,
    pub object: Linear,
    pub union: Linear,
    pub f_box: Linear,
}

impl VisualRelationParams {
    pub fn new(store: &mut ParamStore, name: &str, dims: VisualDims) -> Result<Self> {
        let map_len = 2 * dims.box_resolution * dims.box_resolution;
        Ok(Self {
            dims,
            subject: Linear::new(store, &format!("{name}.w_s"), dims.d_visual, dims.d_hidden)?,
            object: Linear::new(store, &format!("{name}.w_o"), dims.d_visual, dims.d_hidden)?,
            union: Linear::new(store, &format!("{name}.w_u"), dims.d_union, dims.d_hidden)?,
            f_box: Linear::new(store, &format!("{name}.f_box"), map_len, dims.d_union)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        3 * self.dims.d_hidden
    }
}

/// Visual relation features for a list of tokens, `[n × 3·D_h]`.
pub fn visual_relation_features(
    g: &mut Graph,
    store: &ParamStore,
    p: &VisualRelationParams,
    tokens: &[&RelationToken],
) -> Result<NodeId> {
    let d = p.dims;
    let n = tokens.len();
    if n == 0 {
        return Err(invalid("no tokens to encode"));
    }
    let map_len = 2 * d.box_resolution * d.box_resolution;
    let mut subj = Vec::with_capacity(n * d.d_visual);
    let mut obj = Vec::with_capacity(n * d.d_visual);
    let mut uni = Vec::with_capacity(n * d.d_union);
    let mut maps = Vec::with_capacity(n * map_len);
    for tok in tokens {
        if tok.subject_feat.len() != d.d_visual || tok.object_feat.len() != d.d_visual {
            return Err(invalid(format!(
                "visual feature length {}/{} does not match d_v = {}",
                tok.subject_feat.len(),
                tok.object_feat.len(),
                d.d_visual
            )));
        }
        if tok.union_feat.len() != d.d_union {
            return Err(invalid(format!(
                "union feature length {} does not match d_u = {}",
                tok.union_feat.len(),
                d.d_union
            )));
        }
        subj.extend_from_slice(&tok.subject_feat);
        obj.extend_from_slice(&tok.object_feat);
        uni.extend_from_slice(&tok.union_feat);
        maps.extend(box_config_map(&tok.subject_box, &tok.object_box, d.box_resolution)?.into_data());
    }
    let subj = g.constant(Tensor::matrix(n, d.d_visual, subj)?);
    let obj = g.constant(Tensor::matrix(n, d.d_visual, obj)?);
    let uni = g.constant(Tensor::matrix(n, d.d_union, uni)?);
    let maps = g.constant(Tensor::matrix(n, map_len, maps)?);

    let hs = p.subject.forward(g, store, subj)?;
    let ho = p.object.forward(g, store, obj)?;
    let boxf = p.f_box.forward(g, store, maps)?;
    let fused = g.add(uni, boxf)?;
    let hu = p.union.forward(g, store, fused)?;
    g.concat_cols(&[hs, ho, hu])
}

/// Single-token convenience wrapper returning the plain feature vector.
pub fn build_visual_relation_feature(
    store: &ParamStore,
    p: &VisualRelationParams,
    tok: &RelationToken,
) -> Result<Vec<f64>> {
    if !tok.valid {
        return Err(invalid("cannot build a relation feature for an invalid token"));
    }
    let mut g = Graph::new();
    let f = visual_relation_features(&mut g, store, p, &[tok])?;
    Ok(g.value(f).data().to_vec())
}

/// Category and relation embedding tables.
#[derive(Clone, Debug)]
pub struct SemanticRelationParams {
    pub n_categories: usize,
    pub n_relations: usize,
    pub d_embed: usize,
    pub categories: ParamId,
    pub relations: ParamId,
}

impl SemanticRelationParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_categories: usize,
        n_relations: usize,
        d_embed: usize,
    ) -> Result<Self> {
        if n_categories == 0 || n_relations == 0 {
            return Err(invalid("vocabularies must be non-empty"));
        }
        Ok(Self {
            n_categories,
            n_relations,
            d_embed,
            categories: store.add_weight(&format!("{name}.cat_embed"), &[n_categories, d_embed])?,
            relations: store.add_weight(&format!("{name}.rel_embed"), &[n_relations, d_embed])?,
        })
    }

    pub fn out_dim(&self) -> usize {
        3 * self.d_embed
    }
}

/// Semantic relation features for `(subject, relation, object)` id triples,
/// `[n × 3·D_e]`.
pub fn semantic_relation_features(
    g: &mut Graph,
    store: &ParamStore,
    p: &SemanticRelationParams,
    triples: &[(usize, usize, usize)],
) -> Result<NodeId> {
    if triples.is_empty() {
        return Err(invalid("no triples to encode"));
    }
    for &(s, r, o) in triples {
        if s >= p.n_categories || o >= p.n_categories {
            return Err(invalid(format!("category id {} outside vocabulary of {}", s.max(o), p.n_categories)));
        }
        if r >= p.n_relations {
            return Err(invalid(format!("relation id {r} outside vocabulary of {}", p.n_relations)));
        }
    }
    let cats = g.param(store, p.categories);
    let rels = g.param(store, p.relations);
    let subj: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let rel: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let obj: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let es = g.gather_rows(cats, &subj)?;
    let er = g.gather_rows(rels, &rel)?;
    let eo = g.gather_rows(cats, &obj)?;
    g.concat_cols(&[es, er, eo])
}

pub fn build_semantic_relation_feature(
    store: &ParamStore,
    p: &SemanticRelationParams,
    subject: usize,
    relation: usize,
    object: usize,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let f = semantic_relation_features(&mut g, store, p, &[(subject, relation, object)])?;
    Ok(g.value(f).data().to_vec())
}

/// Projection, rank-weighted pooling and output map of one branch encoder.
#[derive(Clone, Debug)]
pub struct JointEncoderParams {
    pub local: Linear,
    /// Learned pooling logits at `gpo_len` anchor ranks; interpolated to the
    /// actual number of tokens.
    pub gpo_logits: ParamId,
    pub gpo_len: usize,
    pub out: Linear,
    pub d_model: usize,
}

impl JointEncoderParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_model: usize, gpo_len: usize) -> Result<Self> {
        if gpo_len == 0 {
            return Err(invalid("pooling needs at least one anchor rank"));
        }
        Ok(Self {
            local: Linear::new(store, &format!("{name}.local"), d_in, d_model)?,
            gpo_logits: store.add(&format!("{name}.gpo_logits"), &[gpo_len], crate::numerics::Init::Zeros)?,
            gpo_len,
            out: Linear::new(store, &format!("{name}.out"), 2 * d_model, d_model)?,
            d_model,
        })
    }
}

/// `[n × gpo_len]` linear interpolation from anchor ranks onto `n` ranks.
fn rank_interpolation(n: usize, anchors: usize) -> Tensor {
    let mut m = vec![0.0; n * anchors];
    for r in 0..n {
        let pos = if n == 1 || anchors == 1 {
            0.0
        } else {
            r as f64 * (anchors - 1) as f64 / (n - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(anchors - 1);
        let frac = pos - lo as f64;
        m[r * anchors + lo] += 1.0 - frac;
        if hi != lo {
            m[r * anchors + hi] += frac;
        }
    }
    Tensor::matrix(n, anchors, m).expect("interpolation shape")
}

/// Pooling weights over `n` ranks (non-negative, sum 1).
pub fn gpo_weights(g: &mut Graph, store: &ParamStore, p: &JointEncoderParams, n: usize) -> Result<NodeId> {
    let interp = g.constant(rank_interpolation(n, p.gpo_len));
    let logits = g.param(store, p.gpo_logits);
    let logits = g.reshape(logits, &[p.gpo_len, 1])?;
    let per_rank = g.matmul(interp, logits)?;
    let per_rank = g.reshape(per_rank, &[1, n])?;
    g.softmax(per_rank, None)
}

/// Encodes the `[n × d_in]` features of the valid tokens of one grid and
/// scatters them to `[rows × D]`, with zero rows at `valid_rows`' complement.
pub fn encode_joint(
    g: &mut Graph,
    store: &ParamStore,
    p: &JointEncoderParams,
    features: NodeId,
    valid_rows: &[usize],
    rows: usize,
) -> Result<NodeId> {
    let n = g.value(features).rows();
    if n == 0 || valid_rows.is_empty() {
        return Err(invalid("encoder needs at least one valid token"));
    }
    if valid_rows.len() != n {
        return Err(invalid(format!("{} feature rows for {} valid positions", n, valid_rows.len())));
    }
    let local = p.local.forward(g, store, features)?;
    let w = gpo_weights(g, store, p, n)?;
    let global = g.sorted_pool(local, w)?;
    let broadcast = g.gather_rows(global, &vec![0; n])?;
    let joined = g.concat_cols(&[local, broadcast])?;
    let out = p.out.forward(g, store, joined)?;
    g.scatter_rows(out, valid_rows, rows)
}

/// GPO global vector alone (exposed for tests and diagnostics).
pub fn gpo_pool(g: &mut Graph, store: &ParamStore, p: &JointEncoderParams, local: NodeId) -> Result<NodeId> {
    let n = g.value(local).rows();
    let w = gpo_weights(g, store, p, n)?;
    g.sorted_pool(local, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_boxes_cover_everything() {
        let m = box_config_map(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0], 4).unwrap();
        assert_eq!(m.shape(), &[2, 4, 4]);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_boxes_rasterize_by_cell_centers() {
        let m = box_config_map(&[0.0, 0.0, 0.5, 1.0], &[0.5, 0.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(&m.data()[..4], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(&m.data()[4..], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn thin_box_between_centers_is_empty() {
        let m = box_config_map(&[0.4, 0.4, 0.6, 0.6], &[0.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert!(m.data()[..4].iter().all(|&v| v == 0.0));
        assert!(box_config_map(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0], 0).is_err());
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for n in 1..10 {
            for a in 1..6 {
                let m = rank_interpolation(n, a);
                for r in 0..n {
                    assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
