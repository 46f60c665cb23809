//! Pre-norm transformer block with key masking.

use super::graph::{Graph, NodeId};
use super::params::{Init, ParamId, ParamStore};
use crate::error::{invalid, shape_err, Result};

pub const LN_EPS: f64 = 1e-9;

/// Weights of a dense layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(&format!("{name}.w"), &[fan_in, fan_out])?,
            b: Some(store.add(&format!("{name}.b"), &[fan_out], Init::Zeros)?),
        })
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(&format!("{name}.w"), &[fan_in, fan_out])?,
            b: None,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let h = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(h, b)
            }
            None => Ok(h),
        }
    }
}

/// LayerNorm gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let scaled = g.mul_row(n, gain)?;
        let bias = g.param(store, self.bias);
        g.add_row(scaled, bias)
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub n_heads: usize,
}

impl BlockParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, mlp_ratio: usize) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(invalid(format!("model dim {dim} not divisible by {n_heads} heads")));
        }
        Ok(Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), dim)?,
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            // a key bias only shifts every score of a query equally
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim)?,
            n_heads,
        })
    }
}

/// Output of one block plus its per-head attention weights `[P×P]`.
pub struct BlockOutput {
    pub out: NodeId,
    pub attention: Vec<NodeId>,
}

/// Which keys a query may attend to.
#[derive(Clone, Copy, Debug)]
pub enum KeyMask<'a> {
    /// Hard boolean mask.
    Mask(&'a [bool]),
    /// Differentiable non-negative key weights `[P]`; a zero weight gives an
    /// attention weight of exactly zero while still receiving gradient.
    Weights(NodeId),
}

/// `Y' = MSA(LN(Y)) + Y`, `Y = MLP(LN(Y')) + Y'`.
///
/// `attend_mask[p]` marks positions that may be attended to as keys; the
/// attention weight on every other key is exactly zero.
pub fn attention_block(
    g: &mut Graph,
    store: &ParamStore,
    tokens: NodeId,
    attend_mask: &[bool],
    p: &BlockParams,
) -> Result<BlockOutput> {
    attention_block_keys(g, store, tokens, KeyMask::Mask(attend_mask), p)
}

pub fn attention_block_keys(
    g: &mut Graph,
    store: &ParamStore,
    tokens: NodeId,
    keys: KeyMask<'_>,
    p: &BlockParams,
) -> Result<BlockOutput> {
    let (n, d) = (g.value(tokens).rows(), g.value(tokens).cols());
    let mask: Option<Vec<bool>> = match keys {
        KeyMask::Mask(m) => {
            if n == 0 || m.len() != n {
                return Err(shape_err(format!("attention mask has {} entries for {n} tokens", m.len())));
            }
            if !m.iter().any(|&v| v) {
                return Err(invalid("attention needs at least one retained position"));
            }
            Some((0..n).flat_map(|_| m.iter().copied()).collect())
        }
        KeyMask::Weights(w) => {
            if n == 0 || g.value(w).len() != n {
                return Err(shape_err(format!("attention weights have {} entries for {n} tokens", g.value(w).len())));
            }
            None
        }
    };
    let dh = d / p.n_heads;
    let h = p.ln1.forward(g, store, tokens)?;
    let q = p.q.forward(g, store, h)?;
    let k = p.k.forward(g, store, h)?;
    let v = p.v.forward(g, store, h)?;
    let mut heads = Vec::with_capacity(p.n_heads);
    let mut attention = Vec::with_capacity(p.n_heads);
    for head in 0..p.n_heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let scores = g.matmul_tb(qh, kh)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let a = match (&mask, keys) {
            (_, KeyMask::Weights(w)) => g.weighted_softmax(scores, w)?,
            (m, _) => g.softmax(scores, m.clone())?,
        };
        heads.push(g.matmul(a, vh)?);
        attention.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let attn_out = p.o.forward(g, store, cat)?;
    let y1 = g.add(attn_out, tokens)?;
    let h2 = p.ln2.forward(g, store, y1)?;
    let f = p.fc1.forward(g, store, h2)?;
    let f = g.gelu(f);
    let f = p.fc2.forward(g, store, f)?;
    let out = g.add(f, y1)?;
    Ok(BlockOutput { out, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn setup(p: usize, d: usize) -> (ParamStore, BlockParams, Tensor) {
        let mut store = ParamStore::new(5, 0.3);
        let bp = BlockParams::new(&mut store, "blk", d, 2, 2).unwrap();
        let x: Vec<f64> = (0..p * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        (store, bp, Tensor::matrix(p, d, x).unwrap())
    }

    #[test]
    fn singleton_attends_to_itself() {
        let (store, bp, x) = setup(1, 4);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let out = attention_block(&mut g, &store, xn, &[true], &bp).unwrap();
        for a in out.attention {
            assert_eq!(g.value(a).data(), &[1.0]);
        }
        assert_eq!(g.value(out.out).shape(), &[1, 4]);
    }

    #[test]
    fn masked_keys_get_zero_weight_and_rows_sum_to_one() {
        let (store, bp, x) = setup(5, 4);
        let mask = [true, false, true, true, false];
        let mut g = Graph::new();
        let xn = g.constant(x);
        let out = attention_block(&mut g, &store, xn, &mask, &bp).unwrap();
        assert_eq!(g.value(out.out).shape(), &[5, 4]);
        for a in out.attention {
            let a = g.value(a);
            for r in 0..5 {
                let row = a.row(r);
                assert_eq!(row[1], 0.0);
                assert_eq!(row[4], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_masked_is_rejected() {
        let (store, bp, x) = setup(3, 4);
        let mut g = Graph::new();
        let xn = g.constant(x);
        assert!(attention_block(&mut g, &store, xn, &[false; 3], &bp).is_err());
    }

    #[test]
    fn masked_token_content_does_not_reach_retained_rows() {
        let (store, bp, x) = setup(4, 4);
        let mask = [true, true, false, true];
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let xn = g.constant(x);
            let out = attention_block(&mut g, &store, xn, &mask, &bp).unwrap();
            g.value(out.out).clone()
        };
        let base = run(x.clone());
        let mut y = x.into_data();
        for v in &mut y[8..12] {
            *v += 3.5;
        }
        let pert = run(Tensor::matrix(4, 4, y).unwrap());
        for r in [0, 1, 3] {
            assert_eq!(base.row(r), pert.row(r));
        }
    }
}
