//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Criteria 1-8 are property checks on fresh models; 9-12 share one
//! desk-scale training run on the toy corpus.

use std::collections::VecDeque;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stransformer::attention::{transformer_layer, AttentionLayerParams, MaskBias, LN_EPS};
use stransformer::chunker::{segment_utterance, AlignedUtterance, Segment};
use stransformer::config::StopRule;
use stransformer::params::normal;
use stransformer::synth::synthesize;
use stransformer::toy_corpus::{eval_alignment, forced_durations, ToyCorpus, MONOTONIC_TOLERANCE};
use stransformer::train::Trainer;
use stransformer::verify::{
    causality_probes, horizon_grid, reduction_oracle, segment_grad_check, stop_gradient_leak, Fixture,
};
use stransformer::{CachedMemory, Graph, ModelConfig, ParamStore, RunConfig, STransformer, Tensor};

type Outcome = (bool, String);

const SEED: u64 = 11;
const HELD_OUT: usize = 20;

fn report(results: &mut Vec<bool>, id: usize, name: &str, outcome: stransformer::Result<Outcome>) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} AC{id:<2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    results.push(ok);
}

fn gradient_fidelity() -> stransformer::Result<Outcome> {
    let start = Instant::now();
    let fx = Fixture::new(ModelConfig::desk(), 6, SEED)?;
    let segs = fx.multi_segment(2)?;
    let r = segment_grad_check(&fx.model, &fx.store, &segs[..2], 64, 1e-4, SEED)?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        r.max_rel_err < 1e-4 && r.checked == 64 && secs < 60.0,
        format!("max rel err {:.2e} over {} coords in {secs:.1} s", r.max_rel_err, r.checked),
    ))
}

fn stop_gradient_isolation() -> stransformer::Result<Outcome> {
    let fx = Fixture::new(ModelConfig::desk(), 6, SEED)?;
    let segs = fx.multi_segment(2)?;
    let leak = stop_gradient_leak(&fx.model, &fx.store, &segs[..2], false)?;
    // The probe must be able to see a leak when the detach is removed.
    let control = stop_gradient_leak(&fx.model, &fx.store, &segs[..2], true)?;
    Ok((
        leak == 0.0 && control > 0.0,
        format!("gradient reaching previous chunk {leak:e} (without detach: {control:.3e})"),
    ))
}

fn reduction() -> stransformer::Result<Outcome> {
    let toy = ToyCorpus::new(RunConfig::default().toy_spec())?;
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        worst = worst.max(reduction_oracle(&toy.utterance(i)?, ModelConfig::desk(), SEED + i as u64)?);
    }
    Ok((worst < 1e-9, format!("max abs diff {worst:.2e} over 3 utterances")))
}

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// `x W^T (+ b)`
fn affine(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let w = rows(w);
    x.iter()
        .map(|r| {
            w.iter()
                .enumerate()
                .map(|(o, wr)| wr.iter().zip(r).map(|(a, c)| a * c).sum::<f64>() + b.map_or(0.0, |b| b.data()[o]))
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, gain: &Tensor, bias: &Tensor) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + LN_EPS).sqrt() * gain.data()[i] + bias.data()[i])
                .collect()
        })
        .collect()
}

/// Plain full-sequence post-norm layer over `seq`; returns all rows.
fn full_sequence_layer(store: &ParamStore, p: &AttentionLayerParams, seq: &Mat) -> Mat {
    let a = &p.attn;
    let (q, k, v) = (
        affine(seq, store.get(a.w_q), None),
        affine(seq, store.get(a.w_k), None),
        affine(seq, store.get(a.w_v), None),
    );
    let d = seq[0].len();
    let dh = d / a.n_heads;
    let mut ctx = vec![vec![0.0; d]; seq.len()];
    for h in 0..a.n_heads {
        for i in 0..seq.len() {
            let logits: Vec<f64> = (0..seq.len())
                .map(|j| (h * dh..(h + 1) * dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in h * dh..(h + 1) * dh {
                ctx[i][c] = (0..seq.len()).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let att = affine(&ctx, store.get(a.w_o), None);
    let res: Mat = seq.iter().zip(&att).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
    let y = norm(&res, store.get(p.norm_attn.gain), store.get(p.norm_attn.bias));
    let hidden: Mat = affine(&y, store.get(p.ffn.inner.weight), Some(store.get(p.ffn.inner.bias)))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let f = affine(&hidden, store.get(p.ffn.outer.weight), Some(store.get(p.ffn.outer.bias)));
    let res: Mat = y.iter().zip(&f).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
    norm(&res, store.get(p.norm_ffn.gain), store.get(p.norm_ffn.bias))
}

fn concatenation() -> stransformer::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let heads = rng.gen_range(1..=4);
        let d = heads * rng.gen_range(1..=4);
        let (l, m) = (rng.gen_range(1..=8), rng.gen_range(0..=8));
        let mut store = ParamStore::new();
        let p = AttentionLayerParams::register(&mut store, "x", d, heads, Some((8, 8)), &mut rng)?;
        // Random norms and biases; the relative bias stays at its zero init.
        for id in [p.norm_attn.gain, p.norm_attn.bias, p.norm_ffn.gain, p.norm_ffn.bias, p.ffn.inner.bias, p.ffn.outer.bias] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = normal(&mut rng, &shape, 0.5);
        }
        assert!(store.get(p.attn.rel_bias.unwrap()).data().iter().all(|&b| b == 0.0));

        // Older states beyond the capacity must be evicted, not attended.
        let extra = rng.gen_range(0..3);
        let history = normal(&mut rng, &[m + extra, d], 1.0);
        let cur = normal(&mut rng, &[l, d], 1.0);
        let mut mem = CachedMemory::new(1, m, d);
        mem.push_values(&[history.clone()])?;
        let mut g = Graph::new(&store);
        let mv = mem.view(&mut g, 0)?;
        let x = g.constant(cur.clone());
        let out = transformer_layer(&mut g, x, mv, &p, &MaskBias::open(l, m))?;

        let hist = rows(&history);
        let mut seq: Mat = hist[hist.len() - m..].to_vec();
        seq.extend(rows(&cur));
        let full = full_sequence_layer(&store, &p, &seq);
        let got = g.value(out.out);
        for (i, r) in full[m..].iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                worst = worst.max((v - got.data()[i * d + j]).abs());
            }
        }
    }
    Ok((worst < 1e-9, format!("max abs diff {worst:.2e} over 100 random (L, M, d)")))
}

fn memory_fifo() -> stransformer::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (layers, cap, d) = (rng.gen_range(1..=3), rng.gen_range(0..=6), rng.gen_range(1..=3));
        let mut mem = CachedMemory::new(layers, cap, d);
        let mut model: Vec<VecDeque<Vec<f64>>> = vec![VecDeque::new(); layers];
        let mut ok = true;
        for _ in 0..rng.gen_range(1..=12) {
            if rng.gen_bool(0.2) {
                mem.reset();
                model.iter_mut().for_each(VecDeque::clear);
            } else {
                let n = rng.gen_range(0..=5);
                let states: Vec<Tensor> = (0..layers).map(|_| normal(&mut rng, &[n, d], 1.0)).collect();
                mem.push_values(&states)?;
                for (q, s) in model.iter_mut().zip(&states) {
                    for r in rows(s) {
                        q.push_back(r);
                        if q.len() > cap {
                            q.pop_front();
                        }
                    }
                }
            }
            for (i, q) in model.iter().enumerate() {
                let v = mem.view_value(i)?;
                let expect: Vec<f64> = q.iter().flatten().copied().collect();
                ok &= v.shape()[0] == q.len() && v.data() == expect.as_slice();
            }
        }
        mismatches += usize::from(!ok);
    }
    Ok((mismatches == 0, format!("{mismatches} mismatching cases of 1000")))
}

fn causality() -> stransformer::Result<Outcome> {
    let fx = Fixture::new(ModelConfig::desk(), 6, SEED)?;
    let segs = fx.multi_segment(2)?;
    let v = causality_probes(&fx.model, &fx.store, &segs[..2], 100, SEED)?;
    Ok((v == 0, format!("{v} of 100 probes changed an earlier output")))
}

fn receptive_field() -> stransformer::Result<Outcome> {
    let (text, ok) = horizon_grid(SEED)?;
    Ok((ok, text))
}

/// Independent re-statement of the chunking rules over random utterances.
fn chunker() -> stransformer::Result<Outcome> {
    const PUNCT: [&str; 3] = [",", ".", "?"];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let phones: Vec<String> = (0..6).map(|i| format!("p{i}")).collect();
    let mut vocab_syms: Vec<String> = phones.clone();
    vocab_syms.extend(["_", ",", ".", "?"].map(String::from));
    let vocab = stransformer::symbols::Vocabulary::new(vocab_syms)?;
    let mut violations = Vec::new();
    for case in 0..1000 {
        let n = rng.gen_range(1..=150);
        let symbols: Vec<String> = (0..n)
            .map(|_| match rng.gen_range(0..100) {
                0..=4 => PUNCT[rng.gen_range(0..3)].to_string(),
                5..=19 => "_".to_string(),
                _ => phones[rng.gen_range(0..phones.len())].clone(),
            })
            .collect();
        let durations: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=6)).collect();
        let frames: u32 = durations.iter().sum();
        let mel = normal(&mut rng, &[frames as usize, 3], 1.0);
        let window = rng.gen_range(1..=10);
        let chunk = window + rng.gen_range(1..=40);
        let u = AlignedUtterance {
            utt_id: format!("c{case}"),
            symbols: symbols.clone(),
            durations: durations.clone(),
            mel: mel.clone(),
            sentence_type: 0,
        };
        let segs: Vec<Segment> = segment_utterance(&u, &vocab, chunk, window)?;
        let mut syms_cat = Vec::new();
        let mut mel_cat = Vec::new();
        let mut cursor = 0;
        for (k, s) in segs.iter().enumerate() {
            let l = s.phoneme_ids.len();
            if l == 0 || l > chunk + window {
                violations.push(format!("c{case} chunk {k}: length {l}"));
            }
            syms_cat.extend(s.phoneme_ids.iter().map(|&id| vocab.symbols()[id].clone()));
            mel_cat.extend_from_slice(s.mel.data());
            let frames_expected: u32 = durations[cursor..cursor + l].iter().sum();
            if s.mel.shape()[0] != frames_expected as usize {
                violations.push(format!("c{case} chunk {k}: mel split off the duration grid"));
            }
            let last = k + 1 == segs.len();
            if !last {
                let nominal = cursor + chunk - 1;
                let (lo, hi) = (nominal - window, (nominal + window).min(n - 1));
                let window_has_punct = (lo..=hi).any(|p| PUNCT.contains(&symbols[p].as_str()));
                let end = cursor + l - 1;
                if window_has_punct && !PUNCT.contains(&symbols[end].as_str()) {
                    violations.push(format!("c{case} chunk {k}: punctuation in window not chosen"));
                }
            }
            if s.is_first != (k == 0) || s.is_last != last {
                violations.push(format!("c{case} chunk {k}: first/last flags"));
            }
            cursor += l;
        }
        if syms_cat != symbols || mel_cat != mel.data() {
            violations.push(format!("c{case}: chunks do not reproduce the utterance"));
        }
    }
    let detail = match violations.first() {
        None => "0 violations over 1000 utterances".to_string(),
        Some(v) => format!("{} violations, first: {v}", violations.len()),
    };
    Ok((violations.is_empty(), detail))
}

/// Teacher-forced mean squared mel error over whole utterances, memories
/// carried across chunks.
fn teacher_forced_mse(model: &STransformer, store: &ParamStore, utts: &[Vec<Segment>]) -> stransformer::Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for segs in utts {
        let mut caches = model.new_caches();
        for seg in segs {
            let mut g = Graph::new(store);
            let f = model.forward_segment(&mut g, seg, &mut caches, None)?;
            for (p, t) in g.value(f.dec.mel).data().iter().zip(seg.mel.data()) {
                sum += (p - t) * (p - t);
            }
            count += seg.mel.numel();
        }
    }
    Ok(sum / count as f64)
}

struct Trained {
    run: RunConfig,
    toy: ToyCorpus,
    model: STransformer,
    store: ParamStore,
    held_out: Vec<AlignedUtterance>,
    longest_train: usize,
    initial_mse: f64,
    train_secs: f64,
}

fn train() -> stransformer::Result<Trained> {
    let run = RunConfig::default();
    let toy = ToyCorpus::new(run.toy_spec())?;
    let corpus = toy.generate(run.toy.n_utts)?;
    let held_out = (run.toy.n_utts..run.toy.n_utts + HELD_OUT)
        .map(|i| toy.utterance(i))
        .collect::<stransformer::Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(run.clone(), &corpus)?;
    let eval = held_out
        .iter()
        .map(|u| segment_utterance(u, &trainer.model().vocab, run.model.chunk_size, run.model.search_window))
        .collect::<stransformer::Result<Vec<_>>>()?;
    let initial_mse = teacher_forced_mse(trainer.model(), trainer.store(), &eval)?;
    let start = Instant::now();
    while trainer.step_count() < run.train.steps {
        trainer.step()?;
    }
    let train_secs = start.elapsed().as_secs_f64();
    println!(
        "     trained {} steps on {} utterances (vocab {}) in {train_secs:.0} s",
        run.train.steps, run.toy.n_utts, run.toy.vocab_size
    );
    Ok(Trained {
        longest_train: corpus.iter().map(|u| u.symbols.len()).max().unwrap_or(0),
        model: trainer.model().clone(),
        store: trainer.store().clone(),
        run,
        toy,
        held_out,
        initial_mse,
        train_secs,
    })
}

fn toy_end_to_end(t: &Trained) -> stransformer::Result<Outcome> {
    let eval = t
        .held_out
        .iter()
        .map(|u| segment_utterance(u, &t.model.vocab, t.run.model.chunk_size, t.run.model.search_window))
        .collect::<stransformer::Result<Vec<_>>>()?;
    let mse = teacher_forced_mse(&t.model, &t.store, &eval)?;
    let (mut within, mut attn_within, mut symbols) = (0usize, 0.0, 0usize);
    let (mut mono_ok, mut mono_steps) = (0usize, 0usize);
    for u in &t.held_out {
        let out = synthesize(&t.model, &t.store, &u.symbols, u.sentence_type)?;
        if let Ok(d) = forced_durations(&t.toy, &u.symbols, &out.mel) {
            within += d
                .iter()
                .zip(&u.durations)
                .filter(|(&e, &g)| (f64::from(e) - f64::from(g)).abs() <= 0.2 * f64::from(g) + 1e-12)
                .count();
        }
        symbols += u.symbols.len();
        let rep = eval_alignment(&out.alignments(), &u.durations)?;
        attn_within += rep.fraction_within(0.2) * u.symbols.len() as f64;
        mono_steps += rep.centroids.len().saturating_sub(1);
        mono_ok += rep.centroids.windows(2).filter(|w| w[1] >= w[0] - MONOTONIC_TOLERANCE).count();
    }
    let ratio = mse / t.initial_mse;
    let dur = within as f64 / symbols as f64;
    let mono = mono_ok as f64 / mono_steps.max(1) as f64;
    Ok((
        ratio < 0.1 && dur >= 0.9 && mono >= 0.95 && t.train_secs <= 1800.0,
        format!(
            "mel L2 {:.4} -> {mse:.4} ({:.1}% of initial); durations within 20% {:.1}% \
             (attention readout {:.1}%); monotonicity {mono:.3}; training {:.0} s",
            t.initial_mse,
            100.0 * ratio,
            100.0 * dur,
            100.0 * attn_within / symbols as f64,
            t.train_secs
        ),
    ))
}

fn long_form(t: &Trained) -> stransformer::Result<Outcome> {
    let target = 4 * t.longest_train;
    let mut symbols: Vec<String> = Vec::new();
    for u in t.held_out.iter().cycle() {
        if symbols.len() >= target {
            break;
        }
        symbols.extend(u.symbols.iter().cloned());
    }
    let out = synthesize(&t.model, &t.store, &symbols, 0)?;
    let c = &t.run.model;
    let bound = c.l_max * (c.l_max + c.enc_mem_capacity.max(c.dec_mem_capacity));
    let peak = out.segments.iter().map(|s| s.peak_logits_entries).max().unwrap_or(0);
    let caps = out.cap_warnings();
    Ok((
        caps == 0 && peak <= bound && !out.segments.is_empty(),
        format!(
            "{} symbols ({:.2}x longest training utterance), {} chunks, {} frames, {caps} cap warnings, \
             peak logits {peak} <= {bound}",
            symbols.len(),
            symbols.len() as f64 / t.longest_train as f64,
            out.segments.len(),
            out.mel.shape()[0]
        ),
    ))
}

fn stop_heads(t: &Trained) -> stransformer::Result<Outcome> {
    let (mut ok, mut total) = (0usize, 0usize);
    for u in &t.held_out {
        let out = synthesize(&t.model, &t.store, &u.symbols, u.sentence_type)?;
        for s in &out.segments {
            let truth: u32 = u.durations[s.symbols.clone()].iter().sum();
            ok += usize::from((s.frames.len() as i64 - i64::from(truth)).abs() <= 2);
            total += 1;
        }
    }
    // Literal rule: every logit of every utterance-final chunk is zero.
    let mut literal = t.model.clone();
    literal.config.stop_rule = StopRule::Literal;
    let mut literal_zero = true;
    let mut selector_final = Vec::new();
    for u in &t.held_out {
        let segs = segment_utterance(u, &literal.vocab, t.run.model.chunk_size, t.run.model.search_window)?;
        let mut caches = literal.new_caches();
        for seg in &segs {
            let mut g = Graph::new(&t.store);
            let f = literal.forward_segment(&mut g, seg, &mut caches, None)?;
            if seg.is_last {
                literal_zero &= literal.stop_logits(&g, &f.dec, true).iter().all(|&x| x == 0.0);
                selector_final.push(*t.model.stop_logits(&g, &f.dec, true).last().unwrap_or(&0.0));
            }
        }
    }
    let frac = ok as f64 / total as f64;
    let min_sel = selector_final.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((
        frac >= 0.9 && literal_zero,
        format!(
            "selector: {ok}/{total} chunks stop within 2 frames ({:.1}%); literal rule final-chunk logits all zero: \
             {literal_zero} (selector last-frame logit min {min_sel:.2})",
            100.0 * frac
        ),
    ))
}

fn speaking_rate(t: &Trained) -> stransformer::Result<Outcome> {
    let (mut worst, mut within, mut total) = (0.0f64, 0usize, 0usize);
    for u in &t.held_out {
        let segs = segment_utterance(u, &t.model.vocab, t.run.model.chunk_size, t.run.model.search_window)?;
        let mut mem = t.model.new_caches().enc;
        for seg in &segs {
            let mut g = Graph::new(&t.store);
            let pass = t.model.encode_segment(&mut g, &seg.phoneme_ids, seg.sentence_type, None, &mut mem)?;
            let truth = seg.speaking_rate()?;
            let rel = (g.value(pass.rate_pred).data()[0] - truth).abs() / truth;
            worst = worst.max(rel);
            within += usize::from(rel <= 0.1);
            total += 1;
        }
    }
    Ok((
        within == total,
        format!("{within}/{total} held-out chunks within 10%, worst relative error {:.2}%", 100.0 * worst),
    ))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results = Vec::new();
    report(&mut results, 1, "gradient fidelity", gradient_fidelity());
    report(&mut results, 2, "stop-gradient isolation", stop_gradient_isolation());
    report(&mut results, 3, "reduction oracle", reduction());
    report(&mut results, 4, "concatenation oracle", concatenation());
    report(&mut results, 5, "memory FIFO and reset", memory_fifo());
    report(&mut results, 6, "causality", causality());
    report(&mut results, 7, "receptive-field growth", receptive_field());
    report(&mut results, 8, "chunker properties", chunker());
    match train() {
        Ok(t) => {
            report(&mut results, 9, "toy end-to-end", toy_end_to_end(&t));
            report(&mut results, 10, "long-form stability", long_form(&t));
            report(&mut results, 11, "stop heads", stop_heads(&t));
            report(&mut results, 12, "speaking-rate head", speaking_rate(&t));
        }
        Err(e) => {
            let msg = format!("training failed: {e}");
            for (id, name) in [(9, "toy end-to-end"), (10, "long-form stability"), (11, "stop heads"), (12, "speaking-rate head")] {
                report(&mut results, id, name, Err(stransformer::Error::Contract(msg.clone())));
            }
        }
    }
    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("{} of {} criteria passed ({:.0} s)", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
