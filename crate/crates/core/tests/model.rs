use stransformer::chunker::{segment_utterance, Segment};
use stransformer::synth::synthesize;
use stransformer::toy_corpus::{ToyCorpus, ToySpec};
use stransformer::train::Trainer;
use stransformer::{Graph, ModelConfig, ParamStore, RunConfig, STransformer, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads_self: 2,
        n_heads_encdec: 2,
        prenet_hidden: 16,
        n_mels: 8,
        chunk_size: 6,
        search_window: 2,
        enc_mem_capacity: 8,
        l_max: 64,
        max_frames_per_segment: 40,
        dropout: 0.0,
        ..ModelConfig::desk()
    }
}

fn toy(n_mels: usize) -> ToyCorpus {
    ToyCorpus::new(ToySpec {
        n_mels,
        min_symbols: 10,
        max_symbols: 18,
        ..ToySpec::default()
    })
    .unwrap()
}

fn fixture() -> (STransformer, ParamStore, Vec<Vec<Segment>>) {
    let cfg = small_config();
    let toy = toy(cfg.n_mels);
    let (model, store) = STransformer::init(cfg, toy.vocabulary(), 5).unwrap();
    let utts = toy
        .generate(4)
        .unwrap()
        .iter()
        .map(|u| segment_utterance(u, &model.vocab, model.config.chunk_size, model.config.search_window).unwrap())
        .collect();
    (model, store, utts)
}

#[test]
fn cross_attention_rows_are_distributions_over_the_chunk() {
    let (model, store, utts) = fixture();
    let mut caches = model.new_caches();
    for seg in &utts[0] {
        let mut g = Graph::new(&store);
        let f = model.forward_segment(&mut g, seg, &mut caches, None).unwrap();
        assert_eq!(f.dec.cross_attn.len(), model.config.n_layers_dec);
        for w in f.dec.cross_attn.iter().flatten() {
            let w = g.value(*w);
            assert_eq!(w.shape(), [seg.n_frames(), seg.n_symbols()]);
            for r in 0..w.shape()[0] {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rate_prediction_is_mean_of_per_position_head() {
    let (model, store, utts) = fixture();
    let seg = &utts[0][0];
    let mut g = Graph::new(&store);
    let pass = model.encoder_pass(&mut g, &seg.phoneme_ids, 0, None, &model.new_caches().enc).unwrap();
    let x = g.value(pass.pre_injection).clone();
    let w = store.get(model.rate_head.weight).data().to_vec();
    let b = store.get(model.rate_head.bias).data()[0];
    let rows = x.shape()[0];
    let mean = (0..rows).map(|r| b + x.row(r).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()).sum::<f64>() / rows as f64;
    assert!((g.value(pass.rate_pred).data()[0] - mean).abs() < 1e-12);
    // With no rate given, the prediction is what gets injected.
    assert_eq!(pass.rate_used, g.value(pass.rate_pred).data()[0]);
}

#[test]
fn previous_chunk_reaches_encoder_only_through_memory() {
    for (mem, expect_change) in [(0, false), (8, true)] {
        let cfg = ModelConfig {
            enc_mem_capacity: mem,
            ..small_config()
        };
        let toy = toy(cfg.n_mels);
        let (model, store) = STransformer::init(cfg, toy.vocabulary(), 9).unwrap();
        let ids = |v: &[&str]| model.vocab.encode(v).unwrap();
        let run = |first: &[usize]| {
            let mut cache = model.new_caches().enc;
            let mut g = Graph::new(&store);
            model.encode_segment(&mut g, first, 0, Some(0.2), &mut cache).unwrap();
            let second = model.encode_segment(&mut g, &ids(&["p1", "p2", "."]), 0, Some(0.2), &mut cache).unwrap();
            g.value(second.out).clone()
        };
        let a = run(&ids(&["p0", "p3", "_", "p4"]));
        let b = run(&ids(&["p5", "p3", "_", "p6"]));
        assert_eq!(a != b, expect_change, "mem {mem}");
    }
}

#[test]
fn every_utterance_has_one_final_chunk_and_positive_stop_losses() {
    let (model, store, utts) = fixture();
    for segs in &utts {
        let mut utt_positive = 0;
        let mut caches = model.new_caches();
        for seg in segs {
            let mut g = Graph::new(&store);
            let f = model.forward_segment(&mut g, seg, &mut caches, None).unwrap();
            assert!(f.values.chunk_stop > 0.0 && f.values.stop > 0.0);
            utt_positive += usize::from(seg.is_last);
        }
        assert_eq!(utt_positive, 1);
    }
}

#[test]
fn loss_examples() {
    let (model, store, utts) = fixture();
    let seg = &utts[0][0];
    let frames = seg.n_frames();
    let mut g = Graph::new(&store);
    let mut caches = model.new_caches();
    let enc = model.encode_segment(&mut g, &seg.phoneme_ids, 0, Some(seg.speaking_rate().unwrap()), &mut caches.enc).unwrap();
    let mut dec = model
        .decode_segment_teacher_forced(&mut g, &seg.mel, None, enc.out, &mut caches.dec, None)
        .unwrap();

    // All-zero prediction against an all-ones target.
    let mut unit = seg.clone();
    unit.mel = Tensor::full(&[frames, model.config.n_mels], 1.0);
    dec.mel = g.constant(Tensor::zeros(&[frames, model.config.n_mels]));
    let (_, v) = model.segment_loss(&mut g, &enc, &dec, &unit).unwrap();
    assert!((v.mel - 2.0).abs() < 1e-12, "L1 + L2 = 1 + 1, got {}", v.mel);

    // Perfect mel and saturated, correct stop logits.
    dec.mel = g.constant(seg.mel.clone());
    let logits = |last_positive: bool| {
        let mut t = vec![-60.0; frames];
        if last_positive {
            t[frames - 1] = 60.0;
        }
        Tensor::new(&[frames, 1], t).unwrap()
    };
    dec.stop_chunk_logits = g.constant(logits(true));
    dec.stop_utt_logits = g.constant(logits(seg.is_last));
    let (_, v) = model.segment_loss(&mut g, &enc, &dec, seg).unwrap();
    assert!(v.mel < 1e-12 && v.stop < 1e-6 && v.chunk_stop < 1e-6);
}

#[test]
fn short_training_reduces_loss_and_resume_is_exact() {
    let mut run = RunConfig::default();
    run.model = small_config();
    run.train.batch_size = 2;
    run.train.steps = 30;
    run.optim.warmup_steps = 5;
    let toy = toy(run.model.n_mels);
    let corpus = toy.generate(8).unwrap();

    let mut full = Trainer::new(run.clone(), &corpus).unwrap();
    let mut first = None;
    let mut losses = Vec::new();
    while full.step_count() < 30 {
        let s = full.step().unwrap();
        first.get_or_insert(s.loss.total);
        losses.push(s.loss.total);
        if s.step == 12 {
            let ck = full.checkpoint(true);
            let bytes = ck.to_bytes();
            let ck = stransformer::checkpoint::Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
            let mut resumed = Trainer::resume(ck, &corpus).unwrap();
            for _ in 0..5 {
                let x = resumed.step().unwrap();
                let y = full.step().unwrap();
                assert_eq!(x, y);
                losses.push(y.loss.total);
            }
            assert_eq!(resumed.store(), full.store());
        }
    }
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < first.unwrap(), "{tail} vs {}", first.unwrap());
}

#[test]
fn synthesis_is_deterministic_and_chunked_like_training() {
    let (model, store, _) = fixture();
    let toy = toy(model.config.n_mels);
    let u = toy.utterance(3).unwrap();
    let a = synthesize(&model, &store, &u.symbols, 1).unwrap();
    let b = synthesize(&model, &store, &u.symbols, 1).unwrap();
    assert_eq!(a.mel, b.mel);
    let segs = segment_utterance(&u, &model.vocab, model.config.chunk_size, model.config.search_window).unwrap();
    let spans: Vec<_> = a.segments.iter().map(|s| s.symbols.clone()).collect();
    let expected: Vec<_> = segs.iter().map(|s| s.symbols.clone()).collect();
    assert_eq!(spans, expected);
    assert!(a.segments.iter().all(|s| !s.frames.is_empty() && s.frames.len() <= model.config.max_frames_per_segment));
    assert_eq!(a.segments.last().map(|s| s.utt_end), Some(true));
}
