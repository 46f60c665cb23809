//! Dynamic-token transformer: class token, positional embeddings, temporal
//! and spatial token selection, masked encoding to a video vector `z`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::gumbel::{sample_gumbel, splitmix};
use crate::numerics::{
    attention_block_keys, gumbel_softmax_node, KeyMask, BlockParams, Graph, Init, Linear, NodeId, NoiseKey, Norm, ParamId,
    ParamStore, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtConfig {
    pub t_frames: usize,
    pub k_slots: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Width of the compressed token / class token fed to the selector.
    pub selector_dim: usize,
    pub selector_hidden: usize,
    /// Initial keep-logit bias of both selectors.
    pub keep_bias: f64,
    pub temporal_select: bool,
    pub spatial_select: bool,
    /// Exclude dropped tokens as attention keys (otherwise they are only
    /// zeroed).
    pub attention_mask: bool,
}

impl Default for DtConfig {
    fn default() -> Self {
        Self {
            t_frames: 6,
            k_slots: 4,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 2,
            selector_dim: 16,
            selector_hidden: 16,
            keep_bias: 2.0,
            temporal_select: true,
            spatial_select: true,
            attention_mask: true,
        }
    }
}

impl DtConfig {
    pub fn tokens(&self) -> usize {
        self.t_frames * self.k_slots
    }
}

/// `σ([x·W₁, x_class·W₂])` → `(drop, keep)` logits.
#[derive(Clone, Debug)]
pub struct SelectorParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub hidden: Linear,
    pub out: Linear,
}

impl SelectorParams {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, dim: usize, hidden: usize, keep_bias: f64) -> Result<Self> {
        let out = Linear::new(store, &format!("{name}.out"), hidden, 2)?;
        store.get_mut(out.b.expect("selector output has a bias")).data_mut()[1] = keep_bias;
        Ok(Self {
            w1: store.add_weight(&format!("{name}.w1"), &[d_model, dim])?,
            w2: store.add_weight(&format!("{name}.w2"), &[d_model, dim])?,
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * dim, hidden)?,
            out,
        })
    }

    /// `[n×2]` logits for `tokens [n×D]` given `class_token [1×D]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, tokens: NodeId, class_token: NodeId) -> Result<NodeId> {
        let n = g.value(tokens).rows();
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        let xt = g.matmul(tokens, w1)?;
        let xc = g.matmul(class_token, w2)?;
        let xc = g.gather_rows(xc, &vec![0; n])?;
        let h = g.concat_cols(&[xt, xc])?;
        let h = self.hidden.forward(g, store, h)?;
        let h = g.gelu(h);
        self.out.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct DtFormerParams {
    pub config: DtConfig,
    pub class_token: ParamId,
    pub pos: ParamId,
    pub temporal: SelectorParams,
    pub spatial: SelectorParams,
    pub blocks: Vec<BlockParams>,
    pub norm: Norm,
}

impl DtFormerParams {
    pub fn new(store: &mut ParamStore, name: &str, config: &DtConfig) -> Result<Self> {
        let c = config;
        if c.t_frames == 0 || c.k_slots == 0 || c.d_model == 0 {
            return Err(invalid("T, K and D must be positive"));
        }
        let sel = |store: &mut ParamStore, n: &str| {
            SelectorParams::new(store, &format!("{name}.{n}"), c.d_model, c.selector_dim, c.selector_hidden, c.keep_bias)
        };
        let temporal = sel(store, "sel_t")?;
        let spatial = sel(store, "sel_s")?;
        let blocks = (0..c.n_layers)
            .map(|l| BlockParams::new(store, &format!("{name}.block{l}"), c.d_model, c.n_heads, c.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: c.clone(),
            class_token: store.add_weight(&format!("{name}.cls"), &[1, c.d_model])?,
            pos: store.add(&format!("{name}.pos"), &[c.tokens(), c.d_model], Init::Zeros)?,
            temporal,
            spatial,
            blocks,
            norm: Norm::new(store, &format!("{name}.norm"), c.d_model)?,
        })
    }
}

/// How the selectors turn logits into keep decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Hard Gumbel-Softmax with straight-through gradients.
    Hard { seed: u64, step: u64 },
    /// Soft relaxation with the same noise as `Hard` (gradient checking).
    Soft { seed: u64, step: u64 },
    /// Noise-free argmax: keep iff the keep logit exceeds the drop logit.
    Greedy,
}

/// Noise-site identifier of one selector call.
pub fn site_id(base: u64, path: u64) -> u64 {
    splitmix(base.wrapping_mul(0x100) ^ path)
}

fn select(
    g: &mut Graph,
    logits: NodeId,
    sampling: Sampling,
    temperature: f64,
    site: u64,
) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    let n: usize = shape.iter().product();
    let (noise, hard) = match sampling {
        Sampling::Hard { seed, step } => (sample_gumbel(&mut NoiseKey::new(seed, site, step).rng(), n), true),
        Sampling::Soft { seed, step } => (sample_gumbel(&mut NoiseKey::new(seed, site, step).rng(), n), false),
        Sampling::Greedy => (vec![0.0; n], true),
    };
    let onehot = gumbel_softmax_node(g, logits, &Tensor::new(&shape, noise)?, temperature, hard)?;
    g.slice_cols(onehot, 1, 1)
}

/// Keep decisions for `tokens [n×D]` (column `[n×1]`, entries in {0,1} for
/// hard sampling).
pub fn token_select(
    g: &mut Graph,
    store: &ParamStore,
    selector: &SelectorParams,
    tokens: NodeId,
    class_token: NodeId,
    sampling: Sampling,
    temperature: f64,
    site: u64,
) -> Result<NodeId> {
    let logits = selector.logits(g, store, tokens, class_token)?;
    select(g, logits, sampling, temperature, site)
}

/// Binary selection over the `T×K` grid, all stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub t_frames: usize,
    pub k_slots: usize,
    pub temporal: Vec<f64>,
    pub spatial: Vec<f64>,
    pub combined: Vec<f64>,
    pub num_retained: f64,
}

impl SelectionMask {
    /// `U = Ù ⊙ Ú ⊙ valid`.
    pub fn compose(t_frames: usize, k_slots: usize, temporal: Vec<f64>, spatial: Vec<f64>, valid: &[bool]) -> Result<Self> {
        let n = t_frames * k_slots;
        if temporal.len() != n || spatial.len() != n || valid.len() != n {
            return Err(shape_err(format!("selection factors must have {n} entries")));
        }
        let combined: Vec<f64> = (0..n)
            .map(|i| if valid[i] { temporal[i] * spatial[i] } else { 0.0 })
            .collect();
        let num_retained = combined.iter().sum();
        Ok(Self {
            t_frames,
            k_slots,
            temporal,
            spatial,
            combined,
            num_retained,
        })
    }

    /// Frame-level mask broadcast over slots.
    pub fn from_frames(frames: &[f64], spatial: Vec<f64>, valid: &[bool], k_slots: usize) -> Result<Self> {
        let temporal = frames.iter().flat_map(|&f| std::iter::repeat(f).take(k_slots)).collect();
        Self::compose(frames.len(), k_slots, temporal, spatial, valid)
    }

    pub fn retained(&self) -> Vec<(usize, usize)> {
        (0..self.combined.len())
            .filter(|&i| self.combined[i] > 0.5)
            .map(|i| (i / self.k_slots, i % self.k_slots))
            .collect()
    }
}

/// Graph nodes of one encoded video.
#[derive(Clone, Debug)]
pub struct EncodedVideo {
    /// `[1×D]` final-layer class state after LayerNorm.
    pub z: NodeId,
    /// `[TK×1]` combined selection (straight-through differentiable).
    pub u: NodeId,
    pub u_temporal: NodeId,
    pub u_spatial: NodeId,
    /// `[(1+TK)×D]` final-layer states.
    pub tokens: NodeId,
    pub mask: SelectionMask,
}

/// `[x_class; emb + pos]`.
pub fn embed_tokens(g: &mut Graph, store: &ParamStore, p: &DtFormerParams, embeddings: NodeId) -> Result<NodeId> {
    let x0 = add_positions(g, store, p, embeddings)?;
    let cls = g.param(store, p.class_token);
    g.concat_rows(&[cls, x0])
}

fn add_positions(g: &mut Graph, store: &ParamStore, p: &DtFormerParams, embeddings: NodeId) -> Result<NodeId> {
    let c = &p.config;
    let v = g.value(embeddings);
    if v.rows() != c.tokens() || v.cols() != c.d_model {
        return Err(invalid(format!(
            "embeddings are {}×{}, expected {}×{}",
            v.rows(),
            v.cols(),
            c.tokens(),
            c.d_model
        )));
    }
    let pos = g.param(store, p.pos);
    g.add(embeddings, pos)
}

/// Runs both selectors on the embedded sequence. Returns `(Ù, Ú, U)` as
/// `[TK×1]` nodes plus the mask values.
pub fn spatiotemporal_mask(
    g: &mut Graph,
    store: &ParamStore,
    p: &DtFormerParams,
    embedded: NodeId,
    valid: &[bool],
    sampling: Sampling,
    temperature: f64,
    site_base: u64,
) -> Result<(NodeId, NodeId, NodeId, SelectionMask)> {
    let c = &p.config;
    let (t, k, n) = (c.t_frames, c.k_slots, c.tokens());
    if valid.len() != n {
        return Err(shape_err(format!("valid mask has {} entries, expected {n}", valid.len())));
    }
    let valid_rows: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if valid_rows.is_empty() {
        return Err(invalid("no valid tokens to select from"));
    }
    let cls = g.gather_rows(embedded, &[0])?;
    let body: Vec<usize> = (1..=n).collect();
    let x0 = g.gather_rows(embedded, &body)?;

    let u_t = if c.temporal_select {
        let mut pool = vec![0.0; t * n];
        for f in 0..t {
            let cnt = (0..k).filter(|&s| valid[f * k + s]).count();
            for s in 0..k {
                if valid[f * k + s] {
                    pool[f * n + f * k + s] = 1.0 / cnt as f64;
                }
            }
        }
        let pool = g.constant(Tensor::matrix(t, n, pool)?);
        let frames = g.matmul(pool, x0)?;
        let keep = token_select(g, store, &p.temporal, frames, cls, sampling, temperature, site_id(site_base, 1))?;
        let mut expand = vec![0.0; n * t];
        for i in 0..n {
            expand[i * t + i / k] = 1.0;
        }
        let expand = g.constant(Tensor::matrix(n, t, expand)?);
        g.matmul(expand, keep)?
    } else {
        g.constant(Tensor::full(&[n, 1], 1.0))
    };

    let valid_col = Tensor::matrix(n, 1, valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
    let u_s = if c.spatial_select {
        let rows = g.gather_rows(x0, &valid_rows)?;
        let keep = token_select(g, store, &p.spatial, rows, cls, sampling, temperature, site_id(site_base, 2))?;
        g.scatter_rows(keep, &valid_rows, n)?
    } else {
        g.constant(valid_col.clone())
    };

    let both = g.mul(u_t, u_s)?;
    let valid_node = g.constant(valid_col);
    let u = g.mul(both, valid_node)?;
    let mask = SelectionMask::compose(
        t,
        k,
        g.value(u_t).data().to_vec(),
        g.value(u_s).data().to_vec(),
        valid,
    )?;
    Ok((u_t, u_s, u, mask))
}

/// Masks the sequence by `U`, runs the blocks, and normalizes the class
/// state.
pub fn encode_sequence(
    g: &mut Graph,
    store: &ParamStore,
    p: &DtFormerParams,
    embedded: NodeId,
    u: NodeId,
) -> Result<(NodeId, NodeId)> {
    let n = p.config.tokens();
    if g.value(u).len() != n || g.value(embedded).rows() != n + 1 {
        return Err(shape_err("selection and sequence lengths disagree"));
    }
    let one = g.constant(Tensor::full(&[1, 1], 1.0));
    let u_full = g.concat_rows(&[one, u])?;
    let u_vec = g.reshape(u_full, &[n + 1])?;
    // With attention masking, dropped rows are never read by any other
    // position, so their contents cannot reach z; they keep their features
    // and U acts only through the key weights.
    let mut y = if p.config.attention_mask {
        embedded
    } else {
        g.mul_rows(embedded, u_vec)?
    };
    let all = vec![true; n + 1];
    let keys = if p.config.attention_mask {
        KeyMask::Weights(u_vec)
    } else {
        KeyMask::Mask(&all)
    };
    for block in &p.blocks {
        y = attention_block_keys(g, store, y, keys, block)?.out;
    }
    let cls = g.gather_rows(y, &[0])?;
    let z = p.norm.forward(g, store, cls)?;
    Ok((z, y))
}

/// Full DT-Former pass over `embeddings [TK×D]`.
pub fn dtformer_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &DtFormerParams,
    embeddings: NodeId,
    valid: &[bool],
    sampling: Sampling,
    temperature: f64,
    site_base: u64,
) -> Result<EncodedVideo> {
    let embedded = embed_tokens(g, store, p, embeddings)?;
    let (u_temporal, u_spatial, u, mask) =
        spatiotemporal_mask(g, store, p, embedded, valid, sampling, temperature, site_base)?;
    let (z, tokens) = encode_sequence(g, store, p, embedded, u)?;
    Ok(EncodedVideo {
        z,
        u,
        u_temporal,
        u_spatial,
        tokens,
        mask,
    })
}
