//! Chunk-by-chunk autoregressive synthesis.

use std::ops::Range;

use crate::autodiff::{sigmoid, Graph};
use crate::chunker::plan_segments;
use crate::error::Result;
use crate::model::STransformer;
use crate::params::ParamStore;
use crate::symbols::classify;
use crate::tensor::Tensor;
use crate::toy_corpus::SegmentAlignment;

#[derive(Clone, Debug)]
pub struct SynthSegment {
    pub symbols: Range<usize>,
    pub frames: Range<usize>,
    pub utt_end: bool,
    pub predicted_rate: f64,
    /// Cross-attention of the final decoder pass, per layer and head, `[frames, symbols]`.
    pub cross_attn: Vec<Vec<Tensor>>,
    /// Decoding stopped because the frame cap was reached, not the stop head.
    pub hit_frame_cap: bool,
    /// Largest per-head attention logits matrix seen while decoding this chunk.
    pub peak_logits_entries: usize,
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    /// `[T, n_mels]`
    pub mel: Tensor,
    pub segments: Vec<SynthSegment>,
}

impl SynthSegment {
    /// The cross-attention head whose rows are most peaked (mean row maximum).
    /// Heads specialise during training; the sharpest one carries the alignment.
    pub fn focused_head(&self) -> Option<&Tensor> {
        let focus = |t: &Tensor| {
            let rows = t.shape()[0].max(1);
            (0..t.shape()[0]).map(|i| t.row(i).iter().cloned().fold(0.0, f64::max)).sum::<f64>() / rows as f64
        };
        self.cross_attn
            .iter()
            .flatten()
            .max_by(|a, b| focus(a).total_cmp(&focus(b)))
    }

    pub fn alignment(&self) -> Option<SegmentAlignment> {
        self.focused_head().map(|w| SegmentAlignment {
            symbol_offset: self.symbols.start,
            weights: w.clone(),
        })
    }
}

impl SynthesisOutput {
    pub fn cap_warnings(&self) -> usize {
        self.segments.iter().filter(|s| s.hit_frame_cap).count()
    }

    /// Focused-head alignment of every chunk, in order.
    pub fn alignments(&self) -> Vec<SegmentAlignment> {
        self.segments.iter().filter_map(SynthSegment::alignment).collect()
    }
}

/// Synthesizes one utterance. Memories start empty and are carried across
/// chunks; each chunk decodes until the combined stop probability exceeds
/// the threshold or the frame cap is reached, and its last frame seeds the
/// next chunk.
pub fn synthesize(
    model: &STransformer,
    store: &ParamStore,
    symbols: &[String],
    sentence_type: usize,
) -> Result<SynthesisOutput> {
    let c = &model.config;
    let ids = model.vocab.encode(symbols)?;
    let classes: Vec<_> = symbols.iter().map(|s| classify(s)).collect();
    let plan = plan_segments(&classes, c.chunk_size, c.search_window)?;
    let mut caches = model.new_caches();
    let mut mel_rows: Vec<f64> = Vec::new();
    let mut prev_frame = vec![0.0; c.n_mels];
    let mut segments = Vec::with_capacity(plan.len());
    let n_chunks = plan.len();

    for (k, (range, _)) in plan.into_iter().enumerate() {
        let utt_end = k + 1 == n_chunks;
        let (enc_value, predicted_rate, enc_entries) = {
            let mut g = Graph::new(store);
            let enc = model.encode_segment(&mut g, &ids[range.clone()], sentence_type, None, &mut caches.enc)?;
            (g.value(enc.out).clone(), enc.rate_used, enc.max_logits_entries)
        };
        let mut peak = enc_entries;
        let mut inputs = prev_frame.clone();
        let mut emitted: Vec<f64> = Vec::new();
        let (cross_attn, layer_inputs, hit_frame_cap) = loop {
            let frames = inputs.len() / c.n_mels;
            let input = Tensor::new(&[frames, c.n_mels], inputs.clone())?;
            let mut g = Graph::new(store);
            let enc_out = g.constant(enc_value.clone());
            let dec = model.decoder_pass(&mut g, &input, enc_out, &caches.dec, None)?;
            peak = peak.max(dec.max_logits_entries);
            let mel = g.value(dec.mel);
            let last = mel.row(frames - 1).to_vec();
            let stop = model.stop_logits(&g, &dec, utt_end)[frames - 1];
            emitted.extend_from_slice(&last);
            let done = sigmoid(stop) > c.stop_threshold;
            let hit_frame_cap = !done && frames >= c.max_frames_per_segment;
            if done || hit_frame_cap {
                let attn = dec
                    .cross_attn
                    .iter()
                    .map(|heads| heads.iter().map(|&w| g.value(w).clone()).collect())
                    .collect::<Vec<Vec<Tensor>>>();
                let states: Vec<Tensor> = dec.layer_inputs.iter().map(|&v| g.value(v).clone()).collect();
                break (attn, states, hit_frame_cap);
            }
            inputs.extend_from_slice(&last);
        };
        caches.dec.push_values(&layer_inputs)?;
        let n_frames = emitted.len() / c.n_mels;
        let start = mel_rows.len() / c.n_mels;
        prev_frame = emitted[(n_frames - 1) * c.n_mels..].to_vec();
        mel_rows.extend_from_slice(&emitted);
        segments.push(SynthSegment {
            symbols: range,
            frames: start..start + n_frames,
            utt_end,
            predicted_rate,
            cross_attn,
            hit_frame_cap,
            peak_logits_entries: peak,
        });
    }
    let total = mel_rows.len() / c.n_mels;
    Ok(SynthesisOutput {
        mel: Tensor::new(&[total, c.n_mels], mel_rows)?,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::symbols::Vocabulary;

    fn tiny() -> (STransformer, ParamStore) {
        let cfg = ModelConfig {
            d_model: 16,
            n_mels: 4,
            prenet_hidden: 8,
            chunk_size: 4,
            search_window: 1,
            enc_mem_capacity: 4,
            l_max: 12,
            max_frames_per_segment: 6,
            ..ModelConfig::desk()
        };
        let vocab = Vocabulary::new(vec!["a".into(), "b".into(), "_".into()]).unwrap();
        STransformer::init(cfg, vocab, 3).unwrap()
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let (m, s) = tiny();
        let out = synthesize(&m, &s, &[], 0).unwrap();
        assert_eq!(out.mel.shape(), &[0, 4]);
        assert!(out.segments.is_empty());
    }

    #[test]
    fn untrained_model_is_deterministic_and_bounded() {
        let (m, s) = tiny();
        let syms: Vec<String> = "a b _ a b a _ b a".split(' ').map(String::from).collect();
        let a = synthesize(&m, &s, &syms, 1).unwrap();
        let b = synthesize(&m, &s, &syms, 1).unwrap();
        assert_eq!(a.mel, b.mel);
        assert_eq!(a.segments.last().unwrap().symbols.end, syms.len());
        for seg in &a.segments {
            assert!(seg.frames.len() <= 6);
            assert_eq!(seg.cross_attn[0][0].shape(), &[seg.frames.len(), seg.symbols.len()]);
        }
    }
}
