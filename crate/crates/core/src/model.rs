//! The segment-recurrent encoder-decoder acoustic model.
//!
//! Each chunk is encoded with the encoder memory as extra context, then
//! decoded frame by frame with causal self-attention over decoder memory plus
//! the current frames, and cross-attention over the current chunk's encoder
//! output only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    extend_context, project_qkv, relative_attention, scaled_positional_encoding, transformer_layer,
    AttentionLayerParams, FeedForward, LayerNormParams, Linear, MaskBias, MultiHeadParams,
    PositionalEncoding,
};
use crate::autodiff::{Graph, Var};
use crate::chunker::Segment;
use crate::config::{ModelConfig, StopRule};
use crate::error::{Error, Result};
use crate::memory::CachedMemory;
use crate::params::{normal, ParamStore};
use crate::symbols::Vocabulary;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: MultiHeadParams,
    pub norm_self: LayerNormParams,
    pub cross_attn: MultiHeadParams,
    pub norm_cross: LayerNormParams,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNormParams,
}

/// Parameter layout of the model. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct STransformer {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub embedding: crate::params::ParamId,
    pub enc_prenet: (Linear, Linear),
    pub sentence_prenet: (Linear, Linear),
    pub enc_pe: PositionalEncoding,
    pub enc_layers: Vec<AttentionLayerParams>,
    pub rate_head: Linear,
    pub rate_inject: Linear,
    pub dec_prenet: (Linear, Linear),
    pub dec_proj: Linear,
    pub dec_pe: PositionalEncoding,
    pub dec_layers: Vec<DecoderLayerParams>,
    pub mel_out: Linear,
    pub stop_utt: Linear,
    pub stop_chunk: Linear,
}

/// Encoder and decoder memories of one utterance stream.
#[derive(Clone, Debug)]
pub struct StreamCaches {
    pub enc: CachedMemory,
    pub dec: CachedMemory,
}

impl StreamCaches {
    pub fn new(cfg: &ModelConfig) -> Self {
        StreamCaches {
            enc: CachedMemory::new(cfg.n_layers_enc, cfg.enc_mem_capacity, cfg.d_model),
            dec: CachedMemory::new(cfg.n_layers_dec, cfg.dec_mem_capacity, cfg.d_model),
        }
    }

    pub fn reset(&mut self) {
        self.enc.reset();
        self.dec.reset();
    }
}

pub struct EncoderPass {
    /// Encoder output after rate injection, `[l, d]`.
    pub out: Var,
    /// Encoder output before rate injection; the rate predictor reads this.
    pub pre_injection: Var,
    /// Predicted chunk speaking rate, one element.
    pub rate_pred: Var,
    /// The rate that was injected.
    pub rate_used: f64,
    /// Input to each encoder layer (what the encoder memory caches).
    pub layer_inputs: Vec<Var>,
    pub max_logits_entries: usize,
}

pub struct DecoderPass {
    /// `[l', n_mels]`
    pub mel: Var,
    /// `[l', 1]`
    pub stop_utt_logits: Var,
    /// `[l', 1]`
    pub stop_chunk_logits: Var,
    /// Cross-attention probabilities per layer, per head, each `[l', l]`.
    pub cross_attn: Vec<Vec<Var>>,
    /// Input to each decoder layer (what the decoder memory caches).
    pub layer_inputs: Vec<Var>,
    pub max_logits_entries: usize,
}

/// Scalar loss components of one segment.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mel: f64,
    pub stop: f64,
    pub chunk_stop: f64,
    pub rate: f64,
    pub guide: f64,
}

pub struct SegmentForward {
    pub enc: EncoderPass,
    pub dec: DecoderPass,
    pub loss: Var,
    pub values: LossValues,
}

/// Combined stop logit from the chunk and utterance heads.
pub fn stop_logit(rule: StopRule, chunk_logit: f64, utt_logit: f64, utt_end: bool) -> f64 {
    let end = if utt_end { 1.0 } else { 0.0 };
    match rule {
        StopRule::Selector => chunk_logit * (1.0 - end) + utt_logit * end,
        StopRule::Literal => chunk_logit * (1.0 - end) + utt_logit * (1.0 - end),
    }
}

/// Ground-truth mel shifted right by one frame. Frame 0 is `context` (the
/// previous chunk's last frame) or zeros at the start of an utterance.
pub fn decoder_input(mel: &Tensor, context: Option<&[f64]>) -> Result<Tensor> {
    let (frames, n_mels) = mel.dims2()?;
    let mut data = Vec::with_capacity(frames * n_mels);
    match context {
        Some(c) if c.len() != n_mels => return Err(Error::shape("decoder_input", &[c.len()], &[n_mels])),
        Some(c) => data.extend_from_slice(c),
        None => data.resize(n_mels, 0.0),
    }
    if frames > 0 {
        data.extend_from_slice(&mel.data()[..(frames - 1) * n_mels]);
    } else {
        data.clear();
    }
    Tensor::new(&[frames, n_mels], data)
}

/// Diagonal attention prior: `1 - exp(-(n/l - t/l')^2 / (2 sigma^2))`.
pub fn guide_matrix(frames: usize, symbols: usize, sigma: f64) -> Tensor {
    let mut data = Vec::with_capacity(frames * symbols);
    for t in 0..frames {
        let tt = (t as f64 + 0.5) / frames as f64;
        for n in 0..symbols {
            let nn = (n as f64 + 0.5) / symbols as f64;
            data.push(1.0 - (-(nn - tt).powi(2) / (2.0 * sigma * sigma)).exp());
        }
    }
    Tensor::new(&[frames, symbols], data).expect("guide shape")
}

impl STransformer {
    /// Registers all parameters in `store`.
    pub fn build(config: ModelConfig, vocab: Vocabulary, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let d = c.d_model;
        let embedding = store.add("enc.embedding", normal(&mut rng, &[vocab.len(), d], 0.5))?;
        let enc_prenet = (
            Linear::register(store, "enc.prenet.0", d, d, &mut rng)?,
            Linear::register(store, "enc.prenet.1", d, d, &mut rng)?,
        );
        let sentence_prenet = (
            Linear::register(store, "sentence.prenet.0", c.n_sentence_types, d, &mut rng)?,
            Linear::register(store, "sentence.prenet.1", d, d, &mut rng)?,
        );
        let enc_pe = PositionalEncoding::register(store, "enc.pe_alpha", c.l_max, d)?;
        let enc_rel = (c.enc_mem_capacity > 0).then_some((c.l_max, c.enc_mem_capacity));
        let enc_layers = (0..c.n_layers_enc)
            .map(|i| AttentionLayerParams::register(store, &format!("enc.layer{i}"), d, c.n_heads_self, enc_rel, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let rate_head = Linear::register(store, "rate.head", d, 1, &mut rng)?;
        let rate_inject = Linear::register(store, "rate.inject", 1, d, &mut rng)?;
        let h = c.prenet_hidden;
        let dec_prenet = (
            Linear::register(store, "dec.prenet.0", c.n_mels, h, &mut rng)?,
            Linear::register(store, "dec.prenet.1", h, h, &mut rng)?,
        );
        let dec_proj = Linear::register(store, "dec.prenet.proj", h, d, &mut rng)?;
        let dec_pe = PositionalEncoding::register(store, "dec.pe_alpha", c.l_max, d)?;
        let dec_rel = (c.dec_mem_capacity > 0).then_some((c.l_max, c.dec_mem_capacity));
        let dec_layers = (0..c.n_layers_dec)
            .map(|i| {
                let p = format!("dec.layer{i}");
                Ok(DecoderLayerParams {
                    self_attn: MultiHeadParams::register(store, &format!("{p}.self_attn"), d, c.n_heads_self, dec_rel, &mut rng)?,
                    norm_self: LayerNormParams::register(store, &format!("{p}.norm_self"), d)?,
                    cross_attn: MultiHeadParams::register(store, &format!("{p}.cross_attn"), d, c.n_heads_encdec, None, &mut rng)?,
                    norm_cross: LayerNormParams::register(store, &format!("{p}.norm_cross"), d)?,
                    ffn: FeedForward::register(store, &format!("{p}.ffn"), d, 4 * d, &mut rng)?,
                    norm_ffn: LayerNormParams::register(store, &format!("{p}.norm_ffn"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mel_out = Linear::register(store, "dec.mel_out", d, c.n_mels, &mut rng)?;
        let stop_utt = Linear::register(store, "dec.stop_utt", d, 1, &mut rng)?;
        let stop_chunk = Linear::register(store, "dec.stop_chunk", d, 1, &mut rng)?;
        Ok(STransformer {
            config,
            vocab,
            embedding,
            enc_prenet,
            sentence_prenet,
            enc_pe,
            enc_layers,
            rate_head,
            rate_inject,
            dec_prenet,
            dec_proj,
            dec_pe,
            dec_layers,
            mel_out,
            stop_utt,
            stop_chunk,
        })
    }

    /// Fresh model and randomly initialised parameters.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::build(config, vocab, &mut store, seed)?;
        Ok((model, store))
    }

    /// Lays out a model over previously saved parameters. Every expected
    /// parameter must be present with the right shape, and nothing else.
    pub fn bind(config: ModelConfig, vocab: Vocabulary, loaded: &ParamStore) -> Result<(Self, ParamStore)> {
        let (model, mut store) = Self::init(config, vocab, 0)?;
        if loaded.len() != store.len() {
            return Err(Error::Structure(format!(
                "checkpoint has {} parameters, model expects {}",
                loaded.len(),
                store.len()
            )));
        }
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let id = loaded
                .id(&name)
                .ok_or_else(|| Error::Structure(format!("checkpoint lacks parameter `{name}`")))?;
            store.set(&name, loaded.get(id).clone())?;
        }
        Ok((model, store))
    }

    pub fn new_caches(&self) -> StreamCaches {
        StreamCaches::new(&self.config)
    }

    /// Encoder over one chunk, reading (not updating) the encoder memory.
    /// With `rate = None` the predicted rate is injected.
    pub fn encoder_pass(
        &self,
        g: &mut Graph,
        phoneme_ids: &[usize],
        sentence_type: usize,
        rate: Option<f64>,
        mem: &CachedMemory,
    ) -> Result<EncoderPass> {
        let c = &self.config;
        let l = phoneme_ids.len();
        if l == 0 || l > c.l_max {
            return Err(Error::Contract(format!(
                "chunk of {l} phonemes is outside 1..={}",
                c.l_max
            )));
        }
        if sentence_type >= c.n_sentence_types {
            return Err(Error::Index {
                what: "sentence type",
                index: sentence_type,
                len: c.n_sentence_types,
            });
        }
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, phoneme_ids)?;
        let x = self.enc_prenet.0.apply(g, emb)?;
        let x = g.relu(x);
        let x = self.enc_prenet.1.apply(g, x)?;

        let mut one_hot = Tensor::zeros(&[1, c.n_sentence_types]);
        one_hot.data_mut()[sentence_type] = 1.0;
        let s = g.constant(one_hot);
        let s = self.sentence_prenet.0.apply(g, s)?;
        let s = g.relu(s);
        let s = self.sentence_prenet.1.apply(g, s)?;
        let s = g.relu(s);
        let x = g.add_row(x, s)?;

        let pe = scaled_positional_encoding(g, l, &self.enc_pe)?;
        let mut x = g.add(x, pe)?;

        let mut layer_inputs = Vec::with_capacity(self.enc_layers.len());
        let mut max_logits_entries = 0;
        for (i, p) in self.enc_layers.iter().enumerate() {
            layer_inputs.push(x);
            let m = mem.view(g, i)?;
            let mask = MaskBias::open(l, g.shape(m)[0]);
            let out = transformer_layer(g, x, m, p, &mask)?;
            max_logits_entries = max_logits_entries.max(out.attn.logits_entries);
            x = out.out;
        }
        let pre_injection = x;
        let per_pos = self.rate_head.apply(g, pre_injection)?;
        let rate_pred = g.mean(per_pos);
        let rate_used = rate.unwrap_or_else(|| g.value(rate_pred).data()[0]);
        let r = g.constant(Tensor::new(&[1, 1], vec![rate_used])?);
        let inj = self.rate_inject.apply(g, r)?;
        let out = g.add_row(pre_injection, inj)?;
        Ok(EncoderPass {
            out,
            pre_injection,
            rate_pred,
            rate_used,
            layer_inputs,
            max_logits_entries,
        })
    }

    /// Encoder pass followed by pushing its layer inputs into the memory.
    pub fn encode_segment(
        &self,
        g: &mut Graph,
        phoneme_ids: &[usize],
        sentence_type: usize,
        rate: Option<f64>,
        mem: &mut CachedMemory,
    ) -> Result<EncoderPass> {
        let pass = self.encoder_pass(g, phoneme_ids, sentence_type, rate, mem)?;
        mem.push(g, &pass.layer_inputs)?;
        Ok(pass)
    }

    /// Decoder over already-shifted inputs `[l', n_mels]`, reading (not
    /// updating) the decoder memory. `dropout_seed = None` disables dropout.
    pub fn decoder_pass(
        &self,
        g: &mut Graph,
        inputs: &Tensor,
        enc_out: Var,
        mem: &CachedMemory,
        dropout_seed: Option<u64>,
    ) -> Result<DecoderPass> {
        let c = &self.config;
        let (frames, n_mels) = inputs.dims2()?;
        if n_mels != c.n_mels {
            return Err(Error::shape("decoder_pass", inputs.shape(), &[frames, c.n_mels]));
        }
        if frames == 0 || frames > c.l_max {
            return Err(Error::Contract(format!(
                "segment of {frames} frames is outside 1..={}",
                c.l_max
            )));
        }
        let n_keys = g.shape(enc_out)[0];
        if n_keys == 0 {
            return Err(Error::Contract("empty encoder output".into()));
        }
        let x = g.constant(inputs.clone());
        let h = self.dec_prenet.0.apply(g, x)?;
        let h = g.relu(h);
        let h = match dropout_seed {
            Some(s) => g.dropout(h, c.dropout, s),
            None => h,
        };
        let h = self.dec_prenet.1.apply(g, h)?;
        let h = g.relu(h);
        let h = match dropout_seed {
            Some(s) => g.dropout(h, c.dropout, s.wrapping_add(1)),
            None => h,
        };
        let h = self.dec_proj.apply(g, h)?;
        let pe = scaled_positional_encoding(g, frames, &self.dec_pe)?;
        let mut h = g.add(h, pe)?;

        let cross_mask = MaskBias::cross(frames, n_keys);
        let mut layer_inputs = Vec::with_capacity(self.dec_layers.len());
        let mut cross_attn = Vec::with_capacity(self.dec_layers.len());
        let mut max_logits_entries = 0;
        for (i, p) in self.dec_layers.iter().enumerate() {
            layer_inputs.push(h);
            let m = mem.view(g, i)?;
            let mask = MaskBias::causal(frames, g.shape(m)[0]);
            let ext = extend_context(g, m, h)?;
            let (q, k, v) = project_qkv(g, h, ext, &p.self_attn)?;
            let rel = p.self_attn.rel_bias.map(|id| g.param(id));
            let a = relative_attention(g, q, k, v, rel, &mask, &p.self_attn)?;
            let r = g.add(h, a.out)?;
            let h1 = p.norm_self.apply(g, r)?;

            let (w_q, w_k, w_v) = (g.param(p.cross_attn.w_q), g.param(p.cross_attn.w_k), g.param(p.cross_attn.w_v));
            let q = g.matmul_nt(h1, w_q)?;
            let k = g.matmul_nt(enc_out, w_k)?;
            let v = g.matmul_nt(enc_out, w_v)?;
            let ca = relative_attention(g, q, k, v, None, &cross_mask, &p.cross_attn)?;
            let r = g.add(h1, ca.out)?;
            let h2 = p.norm_cross.apply(g, r)?;

            let f = p.ffn.apply(g, h2)?;
            let r = g.add(h2, f)?;
            h = p.norm_ffn.apply(g, r)?;
            max_logits_entries = max_logits_entries.max(a.logits_entries).max(ca.logits_entries);
            cross_attn.push(ca.weights);
        }
        let mel = self.mel_out.apply(g, h)?;
        let stop_utt_logits = self.stop_utt.apply(g, h)?;
        let stop_chunk_logits = self.stop_chunk.apply(g, h)?;
        Ok(DecoderPass {
            mel,
            stop_utt_logits,
            stop_chunk_logits,
            cross_attn,
            layer_inputs,
            max_logits_entries,
        })
    }

    /// Teacher-forced decoder pass over a chunk's ground truth, then pushing
    /// its layer inputs into the decoder memory.
    pub fn decode_segment_teacher_forced(
        &self,
        g: &mut Graph,
        mel: &Tensor,
        context: Option<&[f64]>,
        enc_out: Var,
        mem: &mut CachedMemory,
        dropout_seed: Option<u64>,
    ) -> Result<DecoderPass> {
        let inputs = decoder_input(mel, context)?;
        let pass = self.decoder_pass(g, &inputs, enc_out, mem, dropout_seed)?;
        mem.push(g, &pass.layer_inputs)?;
        Ok(pass)
    }

    /// Weighted training loss of one chunk and its components.
    pub fn segment_loss(
        &self,
        g: &mut Graph,
        enc: &EncoderPass,
        dec: &DecoderPass,
        seg: &Segment,
    ) -> Result<(Var, LossValues)> {
        let c = &self.config;
        let frames = seg.n_frames();
        let target = g.constant(seg.mel.clone());
        let diff = g.sub(dec.mel, target)?;
        let l1 = g.abs(diff);
        let l1 = g.mean(l1);
        let l2 = g.square(diff);
        let l2 = g.mean(l2);
        let mel = g.add(l1, l2)?;

        let mut chunk_targets = vec![0.0; frames];
        chunk_targets[frames - 1] = 1.0;
        let mut utt_targets = vec![0.0; frames];
        if seg.is_last {
            utt_targets[frames - 1] = 1.0;
        }
        let stop = g.bce_with_logits(dec.stop_utt_logits, &utt_targets, c.stop_pos_weight)?;
        let chunk_stop = g.bce_with_logits(dec.stop_chunk_logits, &chunk_targets, c.stop_pos_weight)?;

        let truth = g.constant(Tensor::scalar(seg.speaking_rate()?));
        let err = g.sub(enc.rate_pred, truth)?;
        let rate = g.square(err);

        let mut terms = vec![
            (mel, c.mel_loss_weight),
            (stop, c.stop_loss_weight),
            (chunk_stop, c.chunk_stop_loss_weight),
            (rate, c.rate_loss_weight),
        ];
        let mut guide_value = 0.0;
        if c.guide_loss_weight > 0.0 {
            let heads: Vec<Var> = dec.cross_attn.iter().flatten().copied().collect();
            let gm = g.constant(guide_matrix(frames, seg.n_symbols(), c.guide_sigma));
            let n_heads = heads.len() as f64;
            let mut acc: Option<Var> = None;
            for w in heads {
                let p = g.mul(w, gm)?;
                let m = g.mean(p);
                acc = Some(match acc {
                    None => m,
                    Some(a) => g.add(a, m)?,
                });
            }
            let guide = g.scale(acc.expect("decoder has layers"), 1.0 / n_heads);
            guide_value = g.value(guide).data()[0];
            terms.push((guide, c.guide_loss_weight));
        }
        let mut total = None;
        for (v, w) in terms {
            let t = g.scale(v, w);
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
        let total = total.expect("at least one term");
        let val = |v: Var| g.value(v).data()[0];
        let values = LossValues {
            total: val(total),
            mel: val(mel),
            stop: val(stop),
            chunk_stop: val(chunk_stop),
            rate: val(rate),
            guide: guide_value,
        };
        Ok((total, values))
    }

    /// Full teacher-forced step on one chunk: resets the caches on the first
    /// chunk of an utterance, encodes with the ground-truth rate, decodes,
    /// updates both memories and builds the loss.
    pub fn forward_segment(
        &self,
        g: &mut Graph,
        seg: &Segment,
        caches: &mut StreamCaches,
        dropout_seed: Option<u64>,
    ) -> Result<SegmentForward> {
        if seg.is_first {
            caches.reset();
        }
        let rate = seg.speaking_rate()?;
        let enc = self.encode_segment(g, &seg.phoneme_ids, seg.sentence_type, Some(rate), &mut caches.enc)?;
        let dec = self.decode_segment_teacher_forced(
            g,
            &seg.mel,
            seg.context_frame.as_deref(),
            enc.out,
            &mut caches.dec,
            dropout_seed,
        )?;
        let (loss, values) = self.segment_loss(g, &enc, &dec, seg)?;
        Ok(SegmentForward {
            enc,
            dec,
            loss,
            values,
        })
    }

    /// Combined stop logit for each decoder frame.
    pub fn stop_logits(&self, g: &Graph, dec: &DecoderPass, utt_end: bool) -> Vec<f64> {
        let chunk = g.value(dec.stop_chunk_logits).data();
        let utt = g.value(dec.stop_utt_logits).data();
        chunk
            .iter()
            .zip(utt)
            .map(|(&c, &u)| stop_logit(self.config.stop_rule, c, u, utt_end))
            .collect()
    }
}
