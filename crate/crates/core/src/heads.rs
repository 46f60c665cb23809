//! Classification heads and the training objectives.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, LairError, Result};
use crate::numerics::{Graph, Linear, NodeId, ParamStore, Tensor};

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// `P^v` from `z^v`.
    Video,
    /// `P^s` from `z^s`.
    Language,
    /// `P^{v2s}` from `z^v`, estimating `P^s`.
    VideoToLanguage,
}

impl FromStr for HeadKind {
    type Err = LairError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v" => Ok(Self::Video),
            "s" => Ok(Self::Language),
            "v2s" => Ok(Self::VideoToLanguage),
            other => Err(invalid(format!("unknown head '{other}' (expected v, s or v2s)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPrediction {
    pub scores: Vec<f64>,
    pub multi_label: bool,
}

impl ActionPrediction {
    /// Predicted label set: argmax (single-label) or scores ≥ 0.5.
    pub fn predicted(&self) -> Vec<usize> {
        if self.multi_label {
            (0..self.scores.len()).filter(|&c| self.scores[c] >= 0.5).collect()
        } else {
            let mut best = 0;
            for (c, &s) in self.scores.iter().enumerate() {
                if s > self.scores[best] {
                    best = c;
                }
            }
            vec![best]
        }
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub video: Linear,
    pub language: Linear,
    pub video_to_language: Linear,
    pub num_classes: usize,
    pub multi_label: bool,
}

impl Heads {
    pub fn new(store: &mut ParamStore, d_model: usize, num_classes: usize, multi_label: bool) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid("need at least one class"));
        }
        Ok(Self {
            video: Linear::new(store, "head.v", d_model, num_classes)?,
            language: Linear::new(store, "head.s", d_model, num_classes)?,
            video_to_language: Linear::new(store, "head.v2s", d_model, num_classes)?,
            num_classes,
            multi_label,
        })
    }

    pub fn get(&self, kind: HeadKind) -> &Linear {
        match kind {
            HeadKind::Video => &self.video,
            HeadKind::Language => &self.language,
            HeadKind::VideoToLanguage => &self.video_to_language,
        }
    }
}

/// Class probabilities `[B×C]` for video vectors `z [B×D]`.
pub fn classify(g: &mut Graph, store: &ParamStore, heads: &Heads, kind: HeadKind, z: NodeId) -> Result<NodeId> {
    if !g.value(z).is_finite() {
        return Err(LairError::NonFinite("video representation".into()));
    }
    let logits = heads.get(kind).forward(g, store, z)?;
    if heads.multi_label {
        Ok(g.sigmoid(logits))
    } else {
        g.softmax(logits, None)
    }
}

pub fn predictions(g: &Graph, probs: NodeId, multi_label: bool) -> Vec<ActionPrediction> {
    let v = g.value(probs);
    (0..v.rows())
        .map(|r| ActionPrediction {
            scores: v.row(r).to_vec(),
            multi_label,
        })
        .collect()
}

/// One-hot / multi-hot target row for class ids.
pub fn targets_from_labels(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut y = vec![0.0; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(invalid(format!("label {l} outside 0..{num_classes}")));
        }
        y[l] = 1.0;
    }
    Ok(y)
}

fn check_targets(targets: &Tensor, shape: &[usize], multi_label: bool) -> Result<()> {
    if targets.rows() * targets.cols() != shape.iter().product::<usize>() || targets.cols() != *shape.last().unwrap_or(&0) {
        return Err(shape_err("targets must match prediction shape"));
    }
    if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(invalid("labels must be 0 or 1"));
    }
    if !multi_label {
        for r in 0..targets.rows() {
            if targets.row(r).iter().sum::<f64>() != 1.0 {
                return Err(invalid("single-label target rows need exactly one positive"));
            }
        }
    }
    Ok(())
}

/// Cross-entropy of `probs [B×C]` against `targets [B×C]`, averaged over the
/// batch (and over classes for per-class BCE in multi-label mode).
pub fn classification_loss(g: &mut Graph, probs: NodeId, targets: &Tensor, multi_label: bool) -> Result<NodeId> {
    let shape = g.value(probs).shape().to_vec();
    check_targets(targets, &shape, multi_label)?;
    let (b, c) = (g.value(probs).rows(), g.value(probs).cols());
    let y = g.constant(targets.reshaped(&shape)?);
    let logp = g.log_clamped(probs, PROB_FLOOR);
    let pos = g.mul(y, logp)?;
    if !multi_label {
        let s = g.sum(pos);
        return Ok(g.scale(s, -1.0 / b as f64));
    }
    let ones = g.constant(Tensor::full(&shape, 1.0));
    let q = g.sub(ones, probs)?;
    let logq = g.log_clamped(q, PROB_FLOOR);
    let not_y = g.constant(Tensor::new(&shape, targets.data().iter().map(|v| 1.0 - v).collect())?);
    let neg = g.mul(not_y, logq)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0 / (b * c) as f64))
}

/// `(l_v, l_s, l_cls)` nodes.
pub fn loss_cls(
    g: &mut Graph,
    p_v: NodeId,
    p_s: NodeId,
    targets: &Tensor,
    multi_label: bool,
) -> Result<(NodeId, NodeId, NodeId)> {
    let lv = classification_loss(g, p_v, targets, multi_label)?;
    let ls = classification_loss(g, p_s, targets, multi_label)?;
    let total = g.add(lv, ls)?;
    Ok((lv, ls, total))
}

/// Learnable contrastive temperature bounds.
pub const TEMP_MIN: f64 = 1.0;
pub const TEMP_MAX: f64 = 100.0;
pub const TEMP_INIT: f64 = 10.0;

/// Symmetric InfoNCE over aligned rows of `v` and `s` (`[n×D]`).
///
/// `log_temp` is a scalar node holding `ln t`; it is clamped to
/// `[ln 1, ln 100]`. `groups[i]` (optional) labels the semantic triple of
/// pair `i`; another pair with the same label is left out of `i`'s
/// denominator.
pub fn loss_sim(g: &mut Graph, v: NodeId, s: NodeId, log_temp: NodeId, groups: Option<&[usize]>) -> Result<NodeId> {
    let n = g.value(v).rows();
    if n == 0 || g.value(s).rows() != n || g.value(v).cols() != g.value(s).cols() {
        return Err(shape_err("contrastive inputs must be aligned non-empty batches"));
    }
    if let Some(gr) = groups {
        if gr.len() != n {
            return Err(shape_err("one group label per pair"));
        }
    }
    let x = g.row_normalize(v)?;
    let y = g.row_normalize(s)?;
    let sim = g.matmul_tb(x, y)?;
    let lt = g.clamp(log_temp, TEMP_MIN.ln(), TEMP_MAX.ln());
    let t = g.exp(lt);
    let logits = g.scale_by(sim, t)?;
    let mask = groups.map(|gr| {
        (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                i == j || gr[i] != gr[j]
            })
            .collect::<Vec<bool>>()
    });
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let rows = g.log_softmax(logits, mask.clone())?;
    let a = g.pick(rows, &diag)?;
    let logits_t = g.transpose(logits);
    let cols = g.log_softmax(logits_t, mask)?;
    let b = g.pick(cols, &diag)?;
    let sa = g.sum(a);
    let sb = g.sum(b);
    let s = g.add(sa, sb)?;
    Ok(g.scale(s, -1.0 / (2 * n) as f64))
}

/// `mean[(u^v − u^s)² + |u^s|]` over all positions; masks are `{0,1}`-valued
/// (or relaxed to `[0,1]`), so `|u^s| = u^s`.
pub fn loss_tss(g: &mut Graph, u_v: NodeId, u_s: NodeId) -> Result<NodeId> {
    if g.value(u_v).shape() != g.value(u_s).shape() {
        return Err(shape_err("selection masks must share T and K"));
    }
    let d = g.sub(u_v, u_s)?;
    let sq = g.mul(d, d)?;
    let all = g.add(sq, u_s)?;
    Ok(g.mean(all))
}

/// `KL(P^s ‖ P^{v2s})` averaged over the batch, with `P^s` detached.
/// Multi-label mode uses the mean per-class Bernoulli KL.
pub fn loss_xm(g: &mut Graph, p_s: NodeId, p_v2s: NodeId, multi_label: bool) -> Result<NodeId> {
    if g.value(p_s).shape() != g.value(p_v2s).shape() {
        return Err(shape_err("distributions must have the same length"));
    }
    let (b, c) = (g.value(p_s).rows(), g.value(p_s).cols());
    let shape = g.value(p_s).shape().to_vec();
    let p = g.detach(p_s);
    let p = g.clamp(p, 0.0, 1.0);
    let q = g.clamp(p_v2s, 0.0, 1.0);
    // 0·log 0 = 0: the weight is unclamped, only the logarithms see the floor
    let kl_terms = |g: &mut Graph, p: NodeId, q: NodeId| -> Result<NodeId> {
        let lp = g.log_clamped(p, PROB_FLOOR);
        let lq = g.log_clamped(q, PROB_FLOOR);
        let d = g.sub(lp, lq)?;
        g.mul(p, d)
    };
    let pos = kl_terms(g, p, q)?;
    if !multi_label {
        let s = g.sum(pos);
        return Ok(g.scale(s, 1.0 / b as f64));
    }
    let ones = g.constant(Tensor::full(&shape, 1.0));
    let p1 = g.sub(ones, p)?;
    let q1 = g.sub(ones, q)?;
    let neg = kl_terms(g, p1, q1)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both);
    Ok(g.scale(s, 1.0 / (b * c) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta: f64,
    pub zeta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta: 0.1,
            zeta: 1.0,
            eta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("delta", self.delta), ("zeta", self.zeta), ("eta", self.eta)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(invalid(format!("loss weight {name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_v: f64,
    pub l_s: f64,
    pub l_cls: f64,
    pub l_sim: f64,
    pub l_tss: f64,
    pub l_xm: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `total = l_cls + δ·l_sim + ζ·l_tss + η·l_xm` on plain values.
pub fn loss_total(l_v: f64, l_s: f64, l_sim: f64, l_tss: f64, l_xm: f64, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let parts = [l_v, l_s, l_sim, l_tss, l_xm];
    if parts.iter().any(|p| !p.is_finite()) {
        return Err(LairError::NonFinite("loss component".into()));
    }
    let l_cls = l_v + l_s;
    Ok(LossBreakdown {
        l_v,
        l_s,
        l_cls,
        l_sim,
        l_tss,
        l_xm,
        total: l_cls + weights.delta * l_sim + weights.zeta * l_tss + weights.eta * l_xm,
        weights,
    })
}

/// Value-level wrappers around the graph losses.
pub mod eval {
    use super::*;

    fn row(g: &mut Graph, v: &[f64]) -> Result<NodeId> {
        Ok(g.constant(Tensor::matrix(1, v.len(), v.to_vec())?))
    }

    pub fn cross_entropy(pred: &ActionPrediction, targets: &[f64]) -> Result<f64> {
        if pred.scores.len() != targets.len() {
            return Err(shape_err("label vector must match the class count"));
        }
        let mut g = Graph::new();
        let p = row(&mut g, &pred.scores)?;
        let l = classification_loss(&mut g, p, &Tensor::matrix(1, targets.len(), targets.to_vec())?, pred.multi_label)?;
        Ok(g.scalar(l))
    }

    pub fn sim(v: &[Vec<f64>], s: &[Vec<f64>], temperature: f64, groups: Option<&[usize]>) -> Result<f64> {
        if v.is_empty() || v.len() != s.len() {
            return Err(shape_err("aligned non-empty batches required"));
        }
        let d = v[0].len();
        let mut g = Graph::new();
        let vm = g.constant(Tensor::matrix(v.len(), d, v.concat())?);
        let sm = g.constant(Tensor::matrix(s.len(), d, s.concat())?);
        let lt = g.constant(Tensor::scalar(temperature.ln()));
        let l = loss_sim(&mut g, vm, sm, lt, groups)?;
        Ok(g.scalar(l))
    }

    pub fn tss(u_v: &[f64], u_s: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(u_v.to_vec()));
        let b = g.constant(Tensor::vector(u_s.to_vec()));
        let l = loss_tss(&mut g, a, b)?;
        Ok(g.scalar(l))
    }

    pub fn xm(p_s: &ActionPrediction, p_v2s: &ActionPrediction) -> Result<f64> {
        if p_s.scores.len() != p_v2s.scores.len() || p_s.multi_label != p_v2s.multi_label {
            return Err(shape_err("predictions must share length and mode"));
        }
        let mut g = Graph::new();
        let a = row(&mut g, &p_s.scores)?;
        let b = row(&mut g, &p_v2s.scores)?;
        let l = loss_xm(&mut g, a, b, p_s.multi_label)?;
        Ok(g.scalar(l))
    }
}

#[cfg(test)]
mod tests {
    use super::eval::*;
    use super::*;

    fn pred(s: &[f64], multi: bool) -> ActionPrediction {
        ActionPrediction {
            scores: s.to_vec(),
            multi_label: multi,
        }
    }

    #[test]
    fn unknown_head_is_rejected() {
        assert!("v2x".parse::<HeadKind>().is_err());
        assert_eq!("v2s".parse::<HeadKind>().unwrap(), HeadKind::VideoToLanguage);
    }

    #[test]
    fn zero_heads_are_uniform() {
        for (multi, expect) in [(false, 0.25), (true, 0.5)] {
            let mut store = ParamStore::new(0, 0.0);
            let heads = Heads::new(&mut store, 3, 4, multi).unwrap();
            let mut g = Graph::new();
            let z = g.constant(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap());
            let p = classify(&mut g, &store, &heads, HeadKind::Video, z).unwrap();
            assert_eq!(g.value(p).data(), &[expect; 4]);
        }
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let l = cross_entropy(&pred(&[0.5], true), &[1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&pred(&[0.5], true), &[2.0]).is_err());
        assert!(cross_entropy(&pred(&[1.0, 0.0], false), &[1.0, 0.0]).unwrap() <= 1e-6);
    }

    #[test]
    fn contrastive_hand_cases() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert_eq!(sim(&[e1.clone()], &[e1.clone()], 10.0, None).unwrap(), 0.0);
        let l = sim(&[e1.clone(), e2.clone()], &[e1.clone(), e2.clone()], 1.0, None).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        let l = sim(&[e1.clone(), e1.clone()], &[e1.clone(), e1.clone()], 37.0, None).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(sim(&[vec![0.0, 0.0]], &[e1], 1.0, None).is_err());
    }

    #[test]
    fn same_group_pairs_leave_the_denominator() {
        let e1 = vec![1.0, 0.0];
        let l = sim(&[e1.clone(), e1.clone()], &[e1.clone(), e1.clone()], 5.0, Some(&[3, 3])).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn tss_hand_cases() {
        assert_eq!(tss(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(tss(&[0.0], &[1.0]).unwrap(), 2.0);
        assert_eq!(tss(&[1.0; 6], &[1.0; 6]).unwrap(), 1.0);
        assert!(tss(&[1.0; 6], &[1.0; 5]).is_err());
    }

    #[test]
    fn kl_hand_cases() {
        let l = xm(&pred(&[1.0, 0.0], false), &pred(&[0.5, 0.5], false)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(xm(&pred(&[0.2, 0.8], false), &pred(&[0.2, 0.8], false)).unwrap(), 0.0);
        assert_eq!(xm(&pred(&[0.3, 0.9], true), &pred(&[0.3, 0.9], true)).unwrap(), 0.0);
        assert!(xm(&pred(&[0.3], true), &pred(&[0.3, 0.9], true)).is_err());
    }

    #[test]
    fn total_weights() {
        let b = loss_total(0.5, 0.5, 1.0, 1.0, 1.0, LossWeights::default()).unwrap();
        assert!((b.total - 2.2).abs() < 1e-12);
        assert_eq!(loss_total(0.0, 0.0, 0.0, 0.0, 0.0, LossWeights::default()).unwrap().total, 0.0);
        let neg = LossWeights {
            delta: -0.1,
            ..LossWeights::default()
        };
        assert!(loss_total(1.0, 1.0, 1.0, 1.0, 1.0, neg).is_err());
    }
}
