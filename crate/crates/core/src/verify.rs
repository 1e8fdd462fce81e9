//! Property suites behind `stransformer verify`: gradient checks, oracle
//! equivalences, memory semantics, causality and chunking invariants.
//!
//! Each probe returns its measured quantity so callers can apply their own
//! thresholds; [`run_suite`] applies the standard ones and reports pass/fail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    extend_context, project_qkv, relative_attention, transformer_layer, AttentionLayerParams, MaskBias,
};
use crate::autodiff::{Graph, Var};
use crate::chunker::{plan_segments, segment_utterance, AlignedUtterance, BoundaryKind, Segment};
use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::memory::CachedMemory;
use crate::model::{decoder_input, STransformer, StreamCaches};
use crate::params::{normal, ParamId, ParamStore};
use crate::reference::{self, max_abs_diff, to_mat};
use crate::symbols::SymbolClass;
use crate::tensor::Tensor;
use crate::toy_corpus::{ToyCorpus, ToySpec};

pub const SUITES: &[&str] = &["grad", "oracle", "memory", "causal", "chunker"];

#[derive(Clone, Debug)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Keep graph links through the memory instead of detaching (mutation test).
    pub break_sg: bool,
    pub seed: u64,
}

/// Desk-scale model plus a few toy utterances chunked with its settings.
pub struct Fixture {
    pub model: STransformer,
    pub store: ParamStore,
    pub utterances: Vec<AlignedUtterance>,
    pub segments: Vec<Vec<Segment>>,
}

impl Fixture {
    pub fn new(config: ModelConfig, n_utts: usize, seed: u64) -> Result<Self> {
        let spec = ToySpec {
            n_mels: config.n_mels,
            n_sentence_types: config.n_sentence_types,
            min_symbols: 12,
            max_symbols: 20,
            seed: seed ^ 0x5EED,
            ..ToySpec::default()
        };
        let toy = ToyCorpus::new(spec)?;
        let utterances = toy.generate(n_utts)?;
        let (model, mut store) = STransformer::init(config, toy.vocabulary(), seed)?;
        // Nonzero relative biases so their paths are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
        let rel: Vec<ParamId> = store.iter().filter(|(_, n, _)| n.ends_with("rel_bias")).map(|(id, _, _)| id).collect();
        for id in rel {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = normal(&mut rng, &shape, 0.3);
        }
        let segments = utterances
            .iter()
            .map(|u| segment_utterance(u, &model.vocab, model.config.chunk_size, model.config.search_window))
            .collect::<Result<Vec<_>>>()?;
        Ok(Fixture {
            model,
            store,
            utterances,
            segments,
        })
    }

    /// First utterance with at least `n` chunks.
    pub fn multi_segment(&self, n: usize) -> Result<&[Segment]> {
        self.segments
            .iter()
            .find(|s| s.len() >= n)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("fixture has no utterance with {n} chunks")))
    }
}

/// Runs `segs` through the model to fill the caches (no gradients kept).
pub fn warm_caches(model: &STransformer, store: &ParamStore, segs: &[Segment], caches: &mut StreamCaches) -> Result<()> {
    for seg in segs {
        let mut g = Graph::new(store);
        model.forward_segment(&mut g, seg, caches, None)?;
    }
    Ok(())
}

/// Round-robin coordinates over all parameters; relative-bias coordinates
/// are drawn from the block a `rows x mem` chunk actually reads.
pub fn segment_coords(store: &ParamStore, n: usize, seed: u64, rows: usize, mem: (usize, usize)) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<(ParamId, String, Vec<usize>)> = store
        .iter()
        .map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec()))
        .collect();
    let start = rng.gen_range(0..pool.len());
    (0..n)
        .map(|k| {
            let (id, name, shape) = &pool[(start + k) % pool.len()];
            let index = if name.ends_with("rel_bias") {
                let m = if name.starts_with("enc") { mem.0 } else { mem.1 };
                let r = if name.starts_with("enc") { rows.min(shape[1]) } else { shape[1].min(rows) };
                let (h, i, j) = (rng.gen_range(0..shape[0]), rng.gen_range(0..r.max(1)), rng.gen_range(0..m.clamp(1, shape[2])));
                (h * shape[1] + i) * shape[2] + j
            } else {
                rng.gen_range(0..shape.iter().product::<usize>())
            };
            (*id, index)
        })
        .collect()
}

/// Finite-difference check of the full teacher-forced loss of `segs[last]`,
/// with the memories filled by the preceding chunks.
pub fn segment_grad_check(
    model: &STransformer,
    store: &ParamStore,
    segs: &[Segment],
    n_coords: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (target, before) = segs.split_last().ok_or_else(|| Error::Config("no chunks".into()))?;
    let mut caches = model.new_caches();
    warm_caches(model, store, before, &mut caches)?;
    let rows = target.n_symbols().min(target.n_frames());
    let coords = segment_coords(store, n_coords, seed, rows, (caches.enc.len(), caches.dec.len()));
    let f = |g: &mut Graph| -> Result<Var> {
        let mut c = caches.clone();
        Ok(model.forward_segment(g, target, &mut c, None)?.loss)
    };
    grad_check(store, f, eps, &coords)
}

/// Runs `segs[0]` and `segs[1]` in one graph and back-propagates only the
/// second chunk's loss. Returns the total gradient magnitude that reaches
/// non-parameter nodes created while processing the first chunk.
pub fn stop_gradient_leak(model: &STransformer, store: &ParamStore, segs: &[Segment], break_sg: bool) -> Result<f64> {
    if segs.len() < 2 || segs[1].is_first {
        return Err(Error::Config("need two consecutive chunks of one utterance".into()));
    }
    let mut caches = model.new_caches();
    if break_sg {
        caches.enc = caches.enc.without_detach();
        caches.dec = caches.dec.without_detach();
    }
    let mut g = Graph::new(store);
    model.forward_segment(&mut g, &segs[0], &mut caches, None)?;
    let boundary = g.len();
    let second = model.forward_segment(&mut g, &segs[1], &mut caches, None)?;
    let grads = g.backward(second.loss)?;
    let mut total = 0.0;
    for v in g.vars().take(boundary) {
        if g.is_param(v) {
            continue;
        }
        if let Some(gr) = grads.wrt(v) {
            total += gr.iter().map(|x| x.abs()).sum::<f64>();
        }
    }
    Ok(total)
}

/// Memory-free single-chunk model forward against the plain-loop reference.
/// Returns the largest absolute difference over encoder output, rate, mel
/// and both stop logits.
pub fn reduction_oracle(utt: &AlignedUtterance, config: ModelConfig, seed: u64) -> Result<f64> {
    let config = ModelConfig {
        enc_mem_capacity: 0,
        dec_mem_capacity: 0,
        chunk_size: utt.symbols.len() + 2,
        search_window: 1,
        l_max: config.l_max.max(utt.n_frames()).max(utt.symbols.len() + 3),
        max_frames_per_segment: config.max_frames_per_segment.max(utt.n_frames()),
        ..config
    };
    let vocab = crate::symbols::Vocabulary::from_sequences([utt.symbols.as_slice()])?;
    let (model, store) = STransformer::init(config, vocab, seed)?;
    let segs = segment_utterance(utt, &model.vocab, model.config.chunk_size, model.config.search_window)?;
    if segs.len() != 1 {
        return Err(Error::Contract("reduction needs a single chunk".into()));
    }
    let seg = &segs[0];
    let mut caches = model.new_caches();
    let mut g = Graph::new(&store);
    let fwd = model.forward_segment(&mut g, seg, &mut caches, None)?;
    let rate = seg.speaking_rate()?;
    let inputs = decoder_input(&seg.mel, None)?;
    let r = reference::reference_forward(&model, &store, &seg.phoneme_ids, seg.sentence_type, rate, &inputs)?;
    let mut worst = max_abs_diff(&r.enc_out, g.value(fwd.enc.out));
    worst = worst.max(max_abs_diff(&r.mel, g.value(fwd.dec.mel)));
    worst = worst.max((r.rate_pred - g.value(fwd.enc.rate_pred).data()[0]).abs());
    let col = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    worst = worst.max(max_abs_diff(&col(&r.stop_utt), g.value(fwd.dec.stop_utt_logits)));
    worst = worst.max(max_abs_diff(&col(&r.stop_chunk), g.value(fwd.dec.stop_chunk_logits)));
    for (layer, heads) in r.cross_attn.iter().zip(&fwd.dec.cross_attn) {
        for (p, &w) in layer.iter().zip(heads) {
            worst = worst.max(max_abs_diff(p, g.value(w)));
        }
    }
    Ok(worst)
}

/// With no memory and no relative bias, the memory-extended layer and a
/// plain self-attention layer built from the same graph ops agree bitwise.
pub fn reduction_bitwise(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (l, d, heads) = (5, 8, 2);
    let p = AttentionLayerParams::register(&mut store, "layer", d, heads, None, &mut rng)?;
    let x = normal(&mut rng, &[l, d], 1.0);
    let mut g = Graph::new(&store);
    let cur = g.constant(x);
    let mem = CachedMemory::new(1, 0, d);
    let m = mem.view(&mut g, 0)?;
    let ext = extend_context(&mut g, m, cur)?;
    let (q, k, v) = project_qkv(&mut g, cur, ext, &p.attn)?;
    let seg = relative_attention(&mut g, q, k, v, None, &MaskBias::open(l, 0), &p.attn)?;
    let (q2, k2, v2) = project_qkv(&mut g, cur, cur, &p.attn)?;
    let plain = relative_attention(&mut g, q2, k2, v2, None, &MaskBias::open(l, 0), &p.attn)?;
    Ok(g.value(seg.out) == g.value(plain.out))
}

/// One random concatenation case: a single layer (zero relative bias, no
/// positional encoding) over a chunk with `mem` cached positions, against
/// the reference layer run over the full concatenated sequence. Returns the
/// max abs difference on the chunk's rows.
pub fn concatenation_case(rng: &mut impl Rng, l: usize, mem: usize, d: usize, heads: usize) -> Result<f64> {
    let mut store = ParamStore::new();
    let p = AttentionLayerParams::register(&mut store, "layer", d, heads, Some((l.max(1), mem.max(1))), rng)?;
    let prev_len = mem + rng.gen_range(0..3);
    let prev = normal(rng, &[prev_len, d], 1.0);
    let cur = normal(rng, &[l, d], 1.0);
    let mut cache = CachedMemory::new(1, mem, d);
    if prev_len > 0 {
        cache.push_values(&[prev.clone()])?;
    }
    let mut g = Graph::new(&store);
    let m = cache.view(&mut g, 0)?;
    let x = g.constant(cur.clone());
    let mask = MaskBias::open(l, g.shape(m)[0]);
    let out = transformer_layer(&mut g, x, m, &p, &mask)?;

    let mut full = to_mat(&prev)[prev_len - mem..].to_vec();
    full.extend(to_mat(&cur));
    let reference = reference::self_attention_layer(&store, &p, &Vec::new(), &full, false);
    Ok(max_abs_diff(&reference[mem..].to_vec(), g.value(out.out)))
}

/// FIFO fuzz against a list-suffix model. Returns the number of mismatches.
pub fn memory_fuzz(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..cases {
        let layers = rng.gen_range(1..4);
        let cap = rng.gen_range(0..7);
        let d = rng.gen_range(1..4);
        let mut cache = CachedMemory::new(layers, cap, d);
        let mut model: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
        let mut ok = true;
        for _ in 0..rng.gen_range(1..12) {
            if rng.gen_bool(0.2) {
                cache.reset();
                model.iter_mut().for_each(Vec::clear);
            } else {
                let len = rng.gen_range(0..6);
                let states: Vec<Tensor> = (0..layers).map(|_| normal(&mut rng, &[len, d], 1.0)).collect();
                if rng.gen_bool(0.5) {
                    cache.push_values(&states)?;
                } else {
                    let mut g = Graph::standalone();
                    let vars: Vec<Var> = states.iter().map(|s| g.variable(s.clone())).collect();
                    cache.push(&mut g, &vars)?;
                }
                for (buf, s) in model.iter_mut().zip(&states) {
                    buf.extend(to_mat(s));
                    let drop = buf.len().saturating_sub(cap);
                    buf.drain(..drop);
                }
            }
            for (i, buf) in model.iter().enumerate() {
                let v = cache.view_value(i)?;
                ok &= v.shape() == [buf.len(), d] && to_mat(v) == *buf;
            }
            ok &= (0..layers).all(|i| cache.view_value(i).map(|t| t.shape()[0]).ok() == Some(cache.len()));
        }
        if !ok {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Second utterance's outputs with and without the first processed before it.
pub fn reset_independence(model: &STransformer, store: &ParamStore, u1: &[Segment], u2: &[Segment]) -> Result<bool> {
    let run = |prefix: &[Segment]| -> Result<Vec<Tensor>> {
        let mut caches = model.new_caches();
        warm_caches(model, store, prefix, &mut caches)?;
        let mut out = Vec::new();
        for seg in u2 {
            let mut g = Graph::new(store);
            let f = model.forward_segment(&mut g, seg, &mut caches, None)?;
            out.push(g.value(f.dec.mel).clone());
        }
        Ok(out)
    };
    Ok(run(&[])? == run(u1)?)
}

/// Perturbs decoder input frame `t'` and checks that every output row before
/// `t'` is bitwise unchanged. Returns the number of violating probes.
pub fn causality_probes(model: &STransformer, store: &ParamStore, segs: &[Segment], probes: usize, seed: u64) -> Result<usize> {
    let (target, before) = segs.split_last().ok_or_else(|| Error::Config("no chunks".into()))?;
    if target.n_frames() < 2 {
        return Err(Error::Config("need a chunk with at least two frames".into()));
    }
    let mut caches = model.new_caches();
    warm_caches(model, store, before, &mut caches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_in = decoder_input(&target.mel, target.context_frame.as_deref())?;
    let run = |inputs: &Tensor| -> Result<(Tensor, Tensor, Tensor, Vec<Tensor>)> {
        let mut g = Graph::new(store);
        let mut c = caches.clone();
        let enc = model.encode_segment(&mut g, &target.phoneme_ids, target.sentence_type, Some(target.speaking_rate()?), &mut c.enc)?;
        let dec = model.decoder_pass(&mut g, inputs, enc.out, &c.dec, None)?;
        let attn = dec.cross_attn.iter().flatten().map(|&w| g.value(w).clone()).collect();
        Ok((
            g.value(dec.mel).clone(),
            g.value(dec.stop_utt_logits).clone(),
            g.value(dec.stop_chunk_logits).clone(),
            attn,
        ))
    };
    let base = run(&base_in)?;
    let frames = target.n_frames();
    let mut violations = 0;
    for _ in 0..probes {
        let tp = rng.gen_range(1..frames);
        let mut x = base_in.clone();
        let n_mels = x.shape()[1];
        for c in 0..n_mels {
            x.data_mut()[tp * n_mels + c] += rng.gen_range(-2.0..2.0);
        }
        let out = run(&x)?;
        let rows_equal = |a: &Tensor, b: &Tensor| {
            let w = a.shape()[1];
            a.data()[..tp * w] == b.data()[..tp * w]
        };
        let ok = rows_equal(&base.0, &out.0)
            && rows_equal(&base.1, &out.1)
            && rows_equal(&base.2, &out.2)
            && base.3.iter().zip(&out.3).all(|(a, b)| rows_equal(a, b));
        if !ok {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Encoder-only receptive field: the largest `k` such that changing the
/// phonemes of the chunk `k` steps back changes the current chunk's output.
pub fn encoder_horizon(n_layers: usize, mem: usize, seg_len: usize, n_segments: usize, seed: u64) -> Result<usize> {
    let config = ModelConfig {
        n_layers_enc: n_layers,
        n_layers_dec: 1,
        d_model: 16,
        n_heads_self: 2,
        n_heads_encdec: 1,
        n_mels: 4,
        prenet_hidden: 8,
        chunk_size: seg_len + 1,
        search_window: 1,
        enc_mem_capacity: mem,
        l_max: (seg_len + 2).max(8),
        max_frames_per_segment: 8,
        ..ModelConfig::desk()
    };
    let vocab = crate::symbols::Vocabulary::new((0..6).map(|i| format!("s{i}")).collect())?;
    let (model, store) = STransformer::init(config, vocab, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x40);
    let base: Vec<Vec<usize>> = (0..n_segments).map(|_| (0..seg_len).map(|_| rng.gen_range(0..6)).collect()).collect();
    let last_output = |segs: &[Vec<usize>]| -> Result<Tensor> {
        let mut cache = CachedMemory::new(n_layers, mem, model.config.d_model);
        let mut out = Tensor::zeros(&[0]);
        for ids in segs {
            let mut g = Graph::new(&store);
            let pass = model.encode_segment(&mut g, ids, 0, Some(0.2), &mut cache)?;
            out = g.value(pass.pre_injection).clone();
        }
        Ok(out)
    };
    let reference = last_output(&base)?;
    let mut horizon = 0;
    for k in 1..n_segments {
        let mut perturbed = base.clone();
        let idx = n_segments - 1 - k;
        for id in &mut perturbed[idx] {
            *id = (*id + 1 + rng.gen_range(0..5)) % 6;
        }
        if last_output(&perturbed)? != reference {
            horizon = k;
        }
    }
    Ok(horizon)
}

/// Decoder memory probe on a one-layer decoder: perturbing one of the last
/// `dec_mem` frames of the previous chunk changes the current output, while
/// perturbing the frame just before them does not. Returns (inside, outside)
/// changed flags.
pub fn decoder_memory_probe(dec_mem: usize, seed: u64) -> Result<(bool, bool)> {
    let config = ModelConfig {
        n_layers_enc: 1,
        n_layers_dec: 1,
        d_model: 16,
        n_heads_self: 2,
        n_heads_encdec: 1,
        n_mels: 4,
        prenet_hidden: 8,
        chunk_size: 4,
        search_window: 1,
        enc_mem_capacity: 0,
        dec_mem_capacity: dec_mem,
        l_max: 16,
        max_frames_per_segment: 16,
        ..ModelConfig::desk()
    };
    let vocab = crate::symbols::Vocabulary::new(vec!["a".into(), "b".into()])?;
    let (model, store) = STransformer::init(config, vocab, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prev = normal(&mut rng, &[10, 4], 1.0);
    let cur = normal(&mut rng, &[6, 4], 1.0);
    let run = |prev: &Tensor| -> Result<Tensor> {
        let mut caches = model.new_caches();
        let mut g = Graph::new(&store);
        let e1 = model.encode_segment(&mut g, &[0, 1, 0], 0, Some(0.3), &mut caches.enc)?;
        model.decoder_pass(&mut g, prev, e1.out, &caches.dec, None)?;
        let d1 = model.decoder_pass(&mut g, prev, e1.out, &caches.dec, None)?;
        caches.dec.push(&mut g, &d1.layer_inputs)?;
        let e2 = model.encode_segment(&mut g, &[1, 0], 0, Some(0.3), &mut caches.enc)?;
        let d2 = model.decoder_pass(&mut g, &cur, e2.out, &caches.dec, None)?;
        Ok(g.value(d2.mel).clone())
    };
    let base = run(&prev)?;
    let bump = |row: usize| {
        let mut p = prev.clone();
        p.data_mut()[row * 4] += 1.0;
        p
    };
    let inside = run(&bump(10 - dec_mem))? != base;
    let outside = dec_mem < 10 && run(&bump(10 - dec_mem - 1))? != base;
    Ok((inside, outside))
}

/// Independent re-check of one chunking: exact partition of symbols and
/// frames, length bound, punctuation preference. Returns a description of
/// the first violation.
pub fn check_chunking(u: &AlignedUtterance, segs: &[Segment], chunk: usize, window: usize) -> Option<String> {
    let classes = u.classes();
    let mut cursor = 0;
    let mut frame = 0;
    let n_mels = u.mel.shape()[1];
    for (k, s) in segs.iter().enumerate() {
        if s.symbols.start != cursor || s.frames.start != frame {
            return Some(format!("chunk {k} does not start where the previous ended"));
        }
        let l = s.n_symbols();
        if l == 0 || l > chunk + window {
            return Some(format!("chunk {k} has {l} symbols"));
        }
        if s.mel.data() != &u.mel.data()[s.frames.start * n_mels..s.frames.end * n_mels] {
            return Some(format!("chunk {k} mel does not match its frame range"));
        }
        let frames: u32 = u.durations[s.symbols.clone()].iter().sum();
        if frames as usize != s.n_frames() {
            return Some(format!("chunk {k} frame count disagrees with durations"));
        }
        if !s.is_last {
            let nominal = cursor + chunk - 1;
            let lo = nominal.saturating_sub(window);
            let hi = (nominal + window).min(classes.len() - 1);
            let punct_in_window = (lo..=hi).any(|p| classes[p] == SymbolClass::Punctuation);
            if punct_in_window && s.boundary != BoundaryKind::Punctuation {
                return Some(format!("chunk {k} ignores punctuation in its window"));
            }
        }
        cursor = s.symbols.end;
        frame = s.frames.end;
    }
    if cursor != u.symbols.len() || frame != u.n_frames() {
        return Some("chunks do not cover the utterance".into());
    }
    if segs.first().is_some_and(|s| !s.is_first) || segs.last().is_some_and(|s| !s.is_last) {
        return Some("first/last flags wrong".into());
    }
    None
}

/// Random utterance for chunker fuzzing; every symbol gets at least one frame.
pub fn random_utterance(rng: &mut impl Rng, id: usize) -> AlignedUtterance {
    let n = rng.gen_range(1..120);
    let symbols: Vec<String> = (0..n)
        .map(|_| {
            let r: f64 = rng.gen();
            if r < 0.06 {
                ",".to_string()
            } else if r < 0.25 {
                "_".to_string()
            } else {
                format!("p{}", rng.gen_range(0..5))
            }
        })
        .collect();
    let durations: Vec<u32> = (0..n).map(|_| rng.gen_range(1..5)).collect();
    let total: u32 = durations.iter().sum();
    let mel = Tensor::new(&[total as usize, 2], (0..total * 2).map(f64::from).collect()).expect("mel shape");
    AlignedUtterance {
        utt_id: format!("r{id}"),
        symbols,
        durations,
        mel,
        sentence_type: 0,
    }
}

/// Chunks `cases` random utterances with random geometry; returns the
/// violations found.
pub fn chunker_fuzz(cases: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = crate::symbols::Vocabulary::new(
        ["_", ","].iter().map(|s| s.to_string()).chain((0..5).map(|i| format!("p{i}"))).collect(),
    )?;
    let mut bad = Vec::new();
    for i in 0..cases {
        let u = random_utterance(&mut rng, i);
        let window = rng.gen_range(1..8);
        let chunk = rng.gen_range(window + 1..window + 30);
        let segs = segment_utterance(&u, &vocab, chunk, window)?;
        if let Some(v) = check_chunking(&u, &segs, chunk, window) {
            bad.push(format!("{}: {v}", u.utt_id));
        }
        let again = segment_utterance(&u, &vocab, chunk, window)?;
        if again != segs {
            bad.push(format!("{}: chunking is not deterministic", u.utt_id));
        }
        if plan_segments(&u.classes(), chunk, window)?.len() != segs.len() {
            bad.push(format!("{}: unexpected merge", u.utt_id));
        }
    }
    Ok(bad)
}

fn check(suite: &'static str, name: &str, passed: bool, detail: String) -> Check {
    Check {
        suite,
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Runs one suite by name, or every suite for `"all"`.
pub fn run_suite(name: &str, opts: VerifyOptions) -> Result<Vec<Check>> {
    if name == "all" {
        let mut out = Vec::new();
        for s in SUITES {
            out.extend(run_suite(s, opts)?);
        }
        return Ok(out);
    }
    let seed = opts.seed;
    let mut out = Vec::new();
    match name {
        "grad" => {
            out.extend(primitive_grad_checks(seed)?);
            let fx = Fixture::new(ModelConfig::desk(), 6, seed)?;
            let segs = fx.multi_segment(2)?;
            let r = segment_grad_check(&fx.model, &fx.store, &segs[..2], 64, 1e-4, seed)?;
            out.push(check("grad", "segment loss, 64 coords", r.max_rel_err < 1e-4, format!("max rel err {:.3e}", r.max_rel_err)));
        }
        "oracle" => {
            out.push(check("oracle", "M=0 reduction is bitwise", reduction_bitwise(seed)?, String::new()));
            let fx = Fixture::new(ModelConfig::desk(), 1, seed)?;
            let diff = reduction_oracle(&fx.utterances[0], ModelConfig::desk(), seed)?;
            out.push(check("oracle", "whole-utterance reference", diff < 1e-9, format!("max abs diff {diff:.3e}")));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let heads = rng.gen_range(1..4);
                let d = heads * rng.gen_range(1..5);
                let (l, mem) = (rng.gen_range(1..7), rng.gen_range(0..7));
                worst = worst.max(concatenation_case(&mut rng, l, mem, d, heads)?);
            }
            out.push(check("oracle", "concatenation, 100 cases", worst < 1e-9, format!("max abs diff {worst:.3e}")));
        }
        "memory" => {
            let failures = memory_fuzz(1000, seed)?;
            out.push(check("memory", "FIFO fuzz, 1000 cases", failures == 0, format!("{failures} mismatches")));
            let fx = Fixture::new(ModelConfig::desk(), 6, seed)?;
            let segs = fx.multi_segment(2)?;
            let leak = stop_gradient_leak(&fx.model, &fx.store, &segs[..2], opts.break_sg)?;
            out.push(check("memory", "stop-gradient isolation", leak == 0.0, format!("leaked gradient mass {leak:.3e}")));
            let same = reset_independence(&fx.model, &fx.store, &fx.segments[0], &fx.segments[1])?;
            out.push(check("memory", "reset independence", same, String::new()));
        }
        "causal" => {
            let fx = Fixture::new(ModelConfig::desk(), 6, seed)?;
            let segs = fx.multi_segment(2)?;
            let v = causality_probes(&fx.model, &fx.store, &segs[..2], 100, seed)?;
            out.push(check("causal", "future-frame probes, 100", v == 0, format!("{v} violations")));
            let (horizons, ok) = horizon_grid(seed)?;
            out.push(check("causal", "receptive field grows with layers and memory", ok, horizons));
            let (inside, outside) = decoder_memory_probe(4, seed)?;
            out.push(check(
                "causal",
                "decoder memory reaches exactly 4 frames back",
                inside && !outside,
                format!("inside changed: {inside}, outside changed: {outside}"),
            ));
        }
        "chunker" => {
            let bad = chunker_fuzz(1000, seed)?;
            out.push(check("chunker", "partition, bound, preference (1000 utts)", bad.is_empty(), bad.first().cloned().unwrap_or_default()));
        }
        other => return Err(Error::Config(format!("unknown suite `{other}`"))),
    }
    Ok(out)
}

/// Horizon for `n_layers` in 1..=3 and memory in {0, L, 2L}; checks
/// monotonicity and zero horizon without memory.
pub fn horizon_grid(seed: u64) -> Result<(String, bool)> {
    let l = 3;
    let mut grid = [[0usize; 3]; 3];
    for (i, n) in (1..=3).enumerate() {
        for (j, mem) in [0, l, 2 * l].into_iter().enumerate() {
            grid[i][j] = encoder_horizon(n, mem, l, 9, seed)?;
        }
    }
    let mut ok = grid[0][0] == 0;
    for i in 0..3 {
        for j in 0..3 {
            if i > 0 {
                ok &= grid[i][j] >= grid[i - 1][j];
            }
            if j > 0 {
                ok &= grid[i][j] >= grid[i][j - 1];
            }
        }
    }
    let text = format!("horizons [layers][mem 0,L,2L] = {grid:?}");
    Ok((text, ok))
}

/// Finite-difference checks of the primitive ops on small random shapes.
pub fn primitive_grad_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", normal(&mut rng, &[4, 5], 1.0))?;
    let b = store.add("b", normal(&mut rng, &[5, 3], 1.0))?;
    let gain = store.add("gain", normal(&mut rng, &[5], 1.0))?;
    let bias = store.add("bias", normal(&mut rng, &[5], 1.0))?;
    let w = store.add("w", normal(&mut rng, &[4, 3], 1.0))?;
    type Case = (&'static str, Box<dyn Fn(&mut Graph) -> Result<Var>>);
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(move |g: &mut Graph| {
            let (x, y, w) = (g.param(a), g.param(b), g.param(w));
            let p = g.matmul(x, y)?;
            let p = g.mul(p, w)?;
            Ok(g.sum(p))
        })),
        ("softmax", Box::new(move |g: &mut Graph| {
            let x = g.param(a);
            let s = g.softmax_lastdim(x)?;
            let (pb, pw) = (g.param(b), g.param(w));
            let t = g.matmul(s, pb)?;
            let t = g.mul(t, pw)?;
            Ok(g.sum(t))
        })),
        ("layer_norm", Box::new(move |g: &mut Graph| {
            let x = g.param(a);
            let (gn, bs) = (g.param(gain), g.param(bias));
            let y = g.layer_norm(x, gn, bs, 1e-5)?;
            let (pb, pw) = (g.param(b), g.param(w));
            let t = g.matmul(y, pb)?;
            let t = g.mul(t, pw)?;
            Ok(g.sum(t))
        })),
        ("bce", Box::new(move |g: &mut Graph| {
            let x = g.param(w);
            let targets: Vec<f64> = (0..12).map(|i| f64::from(i % 3 == 0)).collect();
            g.bce_with_logits(x, &targets, 3.0)
        })),
        ("relu/square/mean", Box::new(move |g: &mut Graph| {
            let x = g.param(a);
            let r = g.relu(x);
            let s = g.square(r);
            Ok(g.mean(s))
        })),
    ];
    let mut out = Vec::new();
    for (name, f) in cases {
        let coords: Vec<(ParamId, usize)> = store
            .iter()
            .flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i)))
            .collect();
        let r = grad_check(&store, |g| f(g), 1e-6, &coords)?;
        out.push(check("grad", name, r.max_rel_err < 1e-5, format!("max rel err {:.3e}", r.max_rel_err)));
    }
    Ok(out)
}

/// A corpus-sized sanity run used by the CLI to report configuration-level
/// problems early (not a suite).
pub fn config_smoke(run: &RunConfig) -> Result<()> {
    run.validate()
}
