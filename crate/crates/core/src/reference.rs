//! Plain-loop reference of a standard (memory-free) transformer TTS forward
//! pass, written independently of the autodiff graph. Used as an oracle: with
//! empty memories and a single chunk per utterance, the segment-recurrent
//! model must reproduce it.

use crate::attention::{AttentionLayerParams, LayerNormParams, Linear, MultiHeadParams, LN_EPS};
use crate::error::{Error, Result};
use crate::model::STransformer;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().expect("2-D tensor");
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            let d = (x - b.get2(i, j)).abs();
            worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
        }
    }
    worst
}

fn weight(store: &ParamStore, id: ParamId) -> Mat {
    to_mat(store.get(id))
}

/// `x W^T + b`
pub fn linear(store: &ParamStore, p: &Linear, x: &Mat) -> Mat {
    let w = weight(store, p.weight);
    let b = store.get(p.bias).data();
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b)
                .map(|(wr, bias)| bias + wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>())
                .collect()
        })
        .collect()
}

fn project(store: &ParamStore, id: ParamId, x: &Mat) -> Mat {
    let w = weight(store, id);
    x.iter()
        .map(|row| w.iter().map(|wr| wr.iter().zip(row).map(|(a, c)| a * c).sum()).collect())
        .collect()
}

fn relu(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(store: &ParamStore, p: &LayerNormParams, x: &Mat) -> Mat {
    let gain = store.get(p.gain).data();
    let bias = store.get(p.bias).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .zip(gain.iter().zip(bias))
                .map(|(v, (gg, bb))| (v - mean) * inv * gg + bb)
                .collect()
        })
        .collect()
}

/// Multi-head attention of `queries` over `keys`; `allowed(i, j)` masks
/// query `i` from key `j`. `bias(h, i, j)` is added to the scaled logits.
/// Returns the output-projected result and per-head probabilities.
pub fn attention(
    store: &ParamStore,
    p: &MultiHeadParams,
    queries: &Mat,
    keys: &Mat,
    allowed: impl Fn(usize, usize) -> bool,
    bias: impl Fn(usize, usize, usize) -> f64,
) -> (Mat, Vec<Mat>) {
    let q = project(store, p.w_q, queries);
    let k = project(store, p.w_k, keys);
    let v = project(store, p.w_v, keys);
    let d = q.first().map_or(0, Vec::len);
    let dh = d / p.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![vec![0.0; d]; q.len()];
    let mut probs_all = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut probs = vec![vec![0.0; k.len()]; q.len()];
        for i in 0..q.len() {
            let mut logits = vec![f64::NEG_INFINITY; k.len()];
            for j in 0..k.len() {
                if allowed(i, j) {
                    let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                    logits[j] = dot * scale + bias(h, i, j);
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() }).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..k.len() {
                probs[i][j] = exps[j] / total;
            }
            for c in cols.clone() {
                concat[i][c] = (0..k.len()).map(|j| probs[i][j] * v[j][c]).sum();
            }
        }
        probs_all.push(probs);
    }
    (project(store, p.w_o, &concat), probs_all)
}

/// One post-norm self-attention layer over `x` with keys `[memory ; x]`.
pub fn self_attention_layer(
    store: &ParamStore,
    p: &AttentionLayerParams,
    memory: &Mat,
    x: &Mat,
    causal: bool,
) -> Mat {
    let mut keys = memory.clone();
    keys.extend(x.iter().cloned());
    let m = memory.len();
    let rel = p.attn.rel_bias.map(|id| store.get(id).clone());
    let (a, _) = attention(
        store,
        &p.attn,
        x,
        &keys,
        |i, j| !causal || j <= m + i,
        |h, i, j| match &rel {
            Some(t) if j < m => {
                let s = t.shape();
                t.data()[(h * s[1] + i) * s[2] + j]
            }
            _ => 0.0,
        },
    );
    let y = layer_norm(store, &p.norm_attn, &add(x, &a));
    let f = linear(store, &p.ffn.outer, &relu(linear(store, &p.ffn.inner, &y)));
    layer_norm(store, &p.norm_ffn, &add(&y, &f))
}

fn pe_rows(alpha: f64, len: usize, d: usize) -> Mat {
    (0..len)
        .map(|p| {
            (0..d)
                .map(|j| {
                    let i2 = (j - j % 2) as f64;
                    let angle = p as f64 / 10000f64.powf(i2 / d as f64);
                    alpha * if j % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}

pub struct ReferenceOutput {
    pub enc_out: Mat,
    pub rate_pred: f64,
    pub mel: Mat,
    pub stop_utt: Vec<f64>,
    pub stop_chunk: Vec<f64>,
    pub cross_attn: Vec<Vec<Mat>>,
}

/// Standard transformer TTS forward over a whole utterance: no memory,
/// no relative bias, causal decoder over `decoder_inputs` (already shifted).
pub fn reference_forward(
    model: &STransformer,
    store: &ParamStore,
    phoneme_ids: &[usize],
    sentence_type: usize,
    rate: f64,
    decoder_inputs: &Tensor,
) -> Result<ReferenceOutput> {
    let c = &model.config;
    let d = c.d_model;
    let table = store.get(model.embedding);
    let emb: Mat = phoneme_ids
        .iter()
        .map(|&i| {
            if i >= table.shape()[0] {
                Err(Error::Index {
                    what: "reference embedding",
                    index: i,
                    len: table.shape()[0],
                })
            } else {
                Ok(table.row(i).to_vec())
            }
        })
        .collect::<Result<_>>()?;
    let x = linear(store, &model.enc_prenet.1, &relu(linear(store, &model.enc_prenet.0, &emb)));
    let mut one_hot = vec![0.0; c.n_sentence_types];
    one_hot[sentence_type] = 1.0;
    let s = relu(linear(store, &model.sentence_prenet.0, &vec![one_hot]));
    let s = relu(linear(store, &model.sentence_prenet.1, &s));
    let x: Mat = x.iter().map(|r| r.iter().zip(&s[0]).map(|(a, b)| a + b).collect()).collect();
    let alpha = store.get(model.enc_pe.alpha).data()[0];
    let mut x = add(&x, &pe_rows(alpha, x.len(), d));
    for p in &model.enc_layers {
        x = self_attention_layer(store, p, &Vec::new(), &x, false);
    }
    let per_pos = linear(store, &model.rate_head, &x);
    let rate_pred = per_pos.iter().map(|r| r[0]).sum::<f64>() / per_pos.len() as f64;
    let inj = linear(store, &model.rate_inject, &vec![vec![rate]]);
    let enc_out: Mat = x.iter().map(|r| r.iter().zip(&inj[0]).map(|(a, b)| a + b).collect()).collect();

    let y = to_mat(decoder_inputs);
    let h = relu(linear(store, &model.dec_prenet.0, &y));
    let h = relu(linear(store, &model.dec_prenet.1, &h));
    let h = linear(store, &model.dec_proj, &h);
    let alpha = store.get(model.dec_pe.alpha).data()[0];
    let mut h = add(&h, &pe_rows(alpha, h.len(), d));
    let mut cross_attn = Vec::new();
    for p in &model.dec_layers {
        let (a, _) = attention(store, &p.self_attn, &h, &h, |i, j| j <= i, |_, _, _| 0.0);
        let h1 = layer_norm(store, &p.norm_self, &add(&h, &a));
        let (ca, probs) = attention(store, &p.cross_attn, &h1, &enc_out, |_, _| true, |_, _, _| 0.0);
        let h2 = layer_norm(store, &p.norm_cross, &add(&h1, &ca));
        let f = linear(store, &p.ffn.outer, &relu(linear(store, &p.ffn.inner, &h2)));
        h = layer_norm(store, &p.norm_ffn, &add(&h2, &f));
        cross_attn.push(probs);
    }
    let mel = linear(store, &model.mel_out, &h);
    let stop_utt = linear(store, &model.stop_utt, &h).into_iter().map(|r| r[0]).collect();
    let stop_chunk = linear(store, &model.stop_chunk, &h).into_iter().map(|r| r[0]).collect();
    Ok(ReferenceOutput {
        enc_out,
        rate_pred,
        mel,
        stop_utt,
        stop_chunk,
        cross_attn,
    })
}
