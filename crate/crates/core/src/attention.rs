//! Memory-extended multi-head attention with a trainable relative bias over
//! memory columns, mask construction, scaled positional encoding and the
//! post-norm transformer layer built from them.
//!
//! Column order is fixed everywhere: cached memory first, then the current
//! segment. Attention logits for a segment of length `L` with `M` memory
//! positions are therefore an `L x (M + L)` matrix per head.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive attention bias with `{0, -inf}` entries, shape `[L, M + L]`
/// (or `[L, K]` for cross-attention over `K` keys).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBias {
    rows: usize,
    mem: usize,
    cur: usize,
    values: Vec<f64>,
}

impl MaskBias {
    /// Nothing masked.
    pub fn open(len: usize, mem: usize) -> Self {
        MaskBias {
            rows: len,
            mem,
            cur: len,
            values: vec![0.0; len * (mem + len)],
        }
    }

    /// Unmasked `[rows, keys]` bias for cross-attention (no memory columns).
    pub fn cross(rows: usize, keys: usize) -> Self {
        MaskBias {
            rows,
            mem: 0,
            cur: keys,
            values: vec![0.0; rows * keys],
        }
    }

    /// Row `t` may see columns `0..=mem + t`.
    pub fn causal(len: usize, mem: usize) -> Self {
        let mut m = Self::open(len, mem);
        let cols = mem + len;
        for t in 0..len {
            for c in mem + t + 1..cols {
                m.values[t * cols + c] = f64::NEG_INFINITY;
            }
        }
        m
    }

    /// Current-segment columns at or beyond `valid_len` are masked in every row.
    pub fn padding(valid_len: usize, len: usize, mem: usize) -> Self {
        let mut m = Self::open(len, mem);
        let cols = mem + len;
        for t in 0..len {
            for c in mem + valid_len.min(len)..cols {
                m.values[t * cols + c] = f64::NEG_INFINITY;
            }
        }
        m
    }

    /// Elementwise sum of two masks of the same geometry.
    pub fn combine(&self, other: &MaskBias) -> Result<MaskBias> {
        if self.rows != other.rows || self.mem != other.mem || self.cur != other.cur {
            return Err(Error::shape(
                "MaskBias::combine",
                &[self.rows, self.mem + self.rows],
                &[other.rows, other.mem + other.rows],
            ));
        }
        Ok(MaskBias {
            rows: self.rows,
            mem: self.mem,
            cur: self.cur,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn mem(&self) -> usize {
        self.mem
    }

    pub fn cols(&self) -> usize {
        self.mem + self.cur
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != f64::NEG_INFINITY
    }

    /// The non-memory block `[L, cur]`.
    fn current_block(&self) -> Tensor {
        let cols = self.cols();
        let mut data = Vec::with_capacity(self.rows * self.cur);
        for t in 0..self.rows {
            data.extend_from_slice(&self.values[t * cols + self.mem..(t + 1) * cols]);
        }
        Tensor::new(&[self.rows, self.cur], data).expect("block shape")
    }
}

/// Projections of one multi-head attention block; weights are `[d_out, d_in]`
/// and applied as `x W^T`.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub n_heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Relative bias over memory columns, `[n_heads, L_max, M_max]`.
    pub rel_bias: Option<ParamId>,
}

impl MultiHeadParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rel_bias: Option<(usize, usize)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let mut w = |name: &str| store.add(format!("{prefix}.{name}"), xavier(rng, d_model, d_model));
        let (w_q, w_k, w_v, w_o) = (w("w_q")?, w("w_k")?, w("w_v")?, w("w_o")?);
        let rel_bias = match rel_bias {
            Some((l_max, m_max)) => Some(store.add(
                format!("{prefix}.rel_bias"),
                Tensor::zeros(&[n_heads, l_max, m_max]),
            )?),
            None => None,
        };
        Ok(MultiHeadParams {
            n_heads,
            w_q,
            w_k,
            w_v,
            w_o,
            rel_bias,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x W^T + b` with `W: [d_out, d_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.add(format!("{prefix}.weight"), xavier(rng, d_out, d_in))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add_row(y, b)
    }
}

/// Position-wise feed-forward: `relu(x W1^T + b1) W2^T + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn register(store: &mut ParamStore, prefix: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::register(store, &format!("{prefix}.inner"), d_model, d_ff, rng)?,
            outer: Linear::register(store, &format!("{prefix}.outer"), d_ff, d_model, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.inner.apply(g, x)?;
        let h = g.relu(h);
        self.outer.apply(g, h)
    }
}

/// Parameters of one post-norm self-attention transformer layer.
#[derive(Clone, Debug)]
pub struct AttentionLayerParams {
    pub attn: MultiHeadParams,
    pub norm_attn: LayerNormParams,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNormParams,
}

impl AttentionLayerParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rel_bias: Option<(usize, usize)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(AttentionLayerParams {
            attn: MultiHeadParams::register(store, &format!("{prefix}.attn"), d_model, n_heads, rel_bias, rng)?,
            norm_attn: LayerNormParams::register(store, &format!("{prefix}.norm_attn"), d_model)?,
            ffn: FeedForward::register(store, &format!("{prefix}.ffn"), d_model, 4 * d_model, rng)?,
            norm_ffn: LayerNormParams::register(store, &format!("{prefix}.norm_ffn"), d_model)?,
        })
    }
}

/// Sinusoid table with a trainable scale.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    table: Tensor,
    pub alpha: ParamId,
}

impl PositionalEncoding {
    pub fn register(store: &mut ParamStore, name: &str, l_max: usize, d_model: usize) -> Result<Self> {
        Ok(PositionalEncoding {
            table: sinusoid_table(l_max, d_model),
            alpha: store.add(name, Tensor::scalar(1.0))?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn max_len(&self) -> usize {
        self.table.shape()[0]
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoid_table(l_max: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; l_max * d_model];
    for p in 0..l_max {
        for j in 0..d_model {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d_model as f64);
            data[p * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[l_max, d_model], data).expect("table shape")
}

/// `alpha * sinusoid[0..len]`; positions restart at zero for every segment.
pub fn scaled_positional_encoding(g: &mut Graph, len: usize, pe: &PositionalEncoding) -> Result<Var> {
    let (l_max, d) = pe.table.dims2()?;
    if len > l_max {
        return Err(Error::Config(format!(
            "segment length {len} exceeds positional table size {l_max}"
        )));
    }
    let rows = Tensor::new(&[len, d], pe.table.data()[..len * d].to_vec())?;
    let rows = g.constant(rows);
    let alpha = g.param(pe.alpha);
    g.scale_by(rows, alpha)
}

/// `[mem ; cur]` along time.
pub fn extend_context(g: &mut Graph, mem: Var, cur: Var) -> Result<Var> {
    let (_, dm) = g.value(mem).dims2()?;
    let (_, dc) = g.value(cur).dims2()?;
    if dm != dc {
        return Err(Error::shape("extend_context", g.shape(mem), g.shape(cur)));
    }
    g.concat_rows(&[mem, cur])
}

/// Queries from the current segment; keys and values from the extended context.
pub fn project_qkv(g: &mut Graph, cur: Var, extended: Var, p: &MultiHeadParams) -> Result<(Var, Var, Var)> {
    #[cfg(debug_assertions)]
    {
        let (l, d) = g.value(cur).dims2()?;
        let ext = g.value(extended);
        let (n, _) = ext.dims2()?;
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if n < l || !same(&ext.data()[(n - l) * d..], g.value(cur).data()) {
            return Err(Error::Contract(
                "extended context must end with the current segment".into(),
            ));
        }
    }
    let (w_q, w_k, w_v) = (g.param(p.w_q), g.param(p.w_k), g.param(p.w_v));
    let q = g.matmul_nt(cur, w_q)?;
    let k = g.matmul_nt(extended, w_k)?;
    let v = g.matmul_nt(extended, w_v)?;
    Ok((q, k, v))
}

pub struct AttentionOutput {
    /// Output-projected attention, `[L, d_model]`.
    pub out: Var,
    /// Per-head attention probabilities, each `[L, M + L]`.
    pub weights: Vec<Var>,
    /// Entries of one head's logits matrix.
    pub logits_entries: usize,
}

/// `softmax(Q K^T / sqrt(d_head) + [B_rel ; B_cur]) V`, per head, then the
/// output projection. `rel_bias` is the full `[H, L_max, M_max]` parameter; its
/// top-left `[L, M]` block is used.
pub fn relative_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    rel_bias: Option<Var>,
    mask: &MaskBias,
    p: &MultiHeadParams,
) -> Result<AttentionOutput> {
    let (l, d) = g.value(q).dims2()?;
    let (n_keys, dk) = g.value(k).dims2()?;
    if dk != d || g.shape(v) != g.shape(k) || mask.rows() != l || mask.cols() != n_keys {
        return Err(Error::shape("relative_attention", &[l, mask.cols()], &[l, n_keys]));
    }
    let mem = mask.mem();
    let h_count = p.n_heads;
    let dh = d / h_count;
    let scale = 1.0 / (dh as f64).sqrt();
    let cur_mask = g.constant(mask.current_block());
    let mut heads = Vec::with_capacity(h_count);
    let mut weights = Vec::with_capacity(h_count);
    for h in 0..h_count {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let bias = match (rel_bias, mem) {
            (Some(rb), m) if m > 0 => {
                let block = g.block(rb, h, 0, l, 0, m)?;
                g.concat_cols(&[block, cur_mask])?
            }
            (_, 0) => cur_mask,
            _ => {
                let zeros = g.constant(Tensor::zeros(&[l, mem]));
                g.concat_cols(&[zeros, cur_mask])?
            }
        };
        let logits = g.add(logits, bias)?;
        let probs = g.softmax_lastdim(logits)?;
        heads.push(g.matmul(probs, vh)?);
        weights.push(probs);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let w_o = g.param(p.w_o);
    let out = g.matmul_nt(cat, w_o)?;
    Ok(AttentionOutput {
        out,
        weights,
        logits_entries: l * n_keys,
    })
}

pub struct LayerOutput {
    pub out: Var,
    pub attn: AttentionOutput,
}

/// Memory-extended self-attention, residual + norm, feed-forward, residual + norm.
pub fn transformer_layer(
    g: &mut Graph,
    cur: Var,
    mem: Var,
    p: &AttentionLayerParams,
    mask: &MaskBias,
) -> Result<LayerOutput> {
    let extended = extend_context(g, mem, cur)?;
    let (q, k, v) = project_qkv(g, cur, extended, &p.attn)?;
    let rel = p.attn.rel_bias.map(|id| g.param(id));
    let attn = relative_attention(g, q, k, v, rel, mask, &p.attn)?;
    let res = g.add(cur, attn.out)?;
    let a = p.norm_attn.apply(g, res)?;
    let f = p.ffn.apply(g, a)?;
    let res = g.add(a, f)?;
    let out = p.norm_ffn.apply(g, res)?;
    Ok(LayerOutput { out, attn })
}
