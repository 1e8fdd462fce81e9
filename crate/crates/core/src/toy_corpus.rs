//! Synthetic aligned corpus with a learnable symbol-to-mel mapping.
//!
//! Every symbol has a fixed duration and a fixed spectral template. An
//! utterance renders each symbol as `duration` copies of its template plus
//! uniform noise, so ground-truth alignments are known exactly. The sentence
//! type tilts the spectrum of the final frames.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chunker::AlignedUtterance;
use crate::error::{Error, Result};
use crate::symbols::{Vocabulary, WORD_BOUNDARY};
use crate::tensor::Tensor;

pub const PAUSE: &str = ",";
pub const TERMINAL: &str = ".";
/// Final frames of each utterance carrying the sentence-type tilt.
pub const TILT_FRAMES: usize = 3;
const TILT_AMPLITUDE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    /// Number of phone symbols; the word boundary, pause and terminal symbols come on top.
    pub vocab_size: usize,
    pub n_utts: usize,
    /// Utterance length in symbols, terminal included.
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub min_duration: u32,
    pub max_duration: u32,
    /// Half-width of the uniform per-channel noise.
    pub noise: f64,
    pub word_rate: f64,
    pub punct_rate: f64,
    /// Per-token duration jitter in frames (0 keeps durations fixed per symbol).
    pub jitter: u32,
    pub n_mels: usize,
    pub n_sentence_types: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            vocab_size: 8,
            n_utts: 200,
            min_symbols: 6,
            max_symbols: 24,
            min_duration: 3,
            max_duration: 8,
            noise: 0.02,
            word_rate: 0.2,
            punct_rate: 0.06,
            jitter: 0,
            n_mels: 16,
            n_sentence_types: 3,
            seed: 7,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("toy corpus: {m}")));
        if self.vocab_size == 0 || self.n_mels == 0 || self.n_sentence_types == 0 {
            return fail("vocab_size, n_mels and n_sentence_types must be positive");
        }
        if self.min_symbols < 2 || self.max_symbols < self.min_symbols {
            return fail("need 2 <= min_symbols <= max_symbols");
        }
        if self.min_duration == 0 || self.max_duration < self.min_duration {
            return fail("need 1 <= min_duration <= max_duration");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be finite and nonnegative");
        }
        for rate in [self.word_rate, self.punct_rate] {
            if !(0.0..=1.0).contains(&rate) {
                return fail("injection rates must be in [0, 1]");
            }
        }
        Ok(())
    }
}

/// The symbol inventory with its drawn durations and templates.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    spec: ToySpec,
    symbols: Vec<String>,
    durations: Vec<u32>,
    templates: Vec<Vec<f64>>,
}

impl ToyCorpus {
    pub fn new(spec: ToySpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut symbols: Vec<String> = (0..spec.vocab_size).map(|i| format!("p{i}")).collect();
        symbols.extend([WORD_BOUNDARY, PAUSE, TERMINAL].map(String::from));
        let durations = symbols
            .iter()
            .map(|_| rng.gen_range(spec.min_duration..=spec.max_duration))
            .collect();
        let templates = draw_templates(&mut rng, symbols.len(), spec.n_mels, spec.noise)?;
        Ok(ToyCorpus {
            spec,
            symbols,
            durations,
            templates,
        })
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.symbols.clone()).expect("toy symbols are valid")
    }

    fn index(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownSymbol {
                symbol: symbol.to_string(),
            })
    }

    pub fn duration(&self, symbol: &str) -> Result<u32> {
        Ok(self.durations[self.index(symbol)?])
    }

    pub fn template(&self, symbol: &str) -> Result<&[f64]> {
        Ok(&self.templates[self.index(symbol)?])
    }

    /// A random symbol sequence of `len` symbols ending in the terminal.
    pub fn symbol_sequence(&self, rng: &mut impl Rng, len: usize) -> Vec<String> {
        let phones = &self.symbols[..self.spec.vocab_size];
        let mut out: Vec<String> = Vec::with_capacity(len);
        for i in 0..len.saturating_sub(1) {
            let prev_is_phone = out.last().is_some_and(|s| s.starts_with('p'));
            let sym = if i > 0 && prev_is_phone && rng.gen_bool(self.spec.punct_rate) {
                PAUSE.to_string()
            } else if i > 0 && prev_is_phone && rng.gen_bool(self.spec.word_rate) {
                WORD_BOUNDARY.to_string()
            } else {
                let last = out.last().cloned();
                let choices: Vec<&String> = phones.iter().filter(|p| Some(*p) != last.as_ref()).collect();
                let pick = choices.choose(rng).copied().unwrap_or(&phones[0]);
                pick.clone()
            };
            out.push(sym);
        }
        if len > 0 {
            out.push(TERMINAL.to_string());
        }
        out
    }

    /// Renders symbols into an aligned utterance; `rng` drives jitter and noise.
    pub fn render(
        &self,
        utt_id: &str,
        symbols: &[String],
        sentence_type: usize,
        rng: &mut impl Rng,
    ) -> Result<AlignedUtterance> {
        if sentence_type >= self.spec.n_sentence_types {
            return Err(Error::Config(format!(
                "sentence type {sentence_type} out of range (n = {})",
                self.spec.n_sentence_types
            )));
        }
        let n_mels = self.spec.n_mels;
        let mut durations = Vec::with_capacity(symbols.len());
        let mut data = Vec::new();
        for s in symbols {
            let idx = self.index(s)?;
            let mut d = i64::from(self.durations[idx]);
            if self.spec.jitter > 0 {
                let j = i64::from(self.spec.jitter);
                d = (d + rng.gen_range(-j..=j)).max(1);
            }
            durations.push(d as u32);
            for _ in 0..d {
                for &v in &self.templates[idx] {
                    let n = if self.spec.noise > 0.0 {
                        rng.gen_range(-self.spec.noise..=self.spec.noise)
                    } else {
                        0.0
                    };
                    data.push(v + n);
                }
            }
        }
        let n_frames = data.len() / n_mels;
        let tilt = sentence_tilt(sentence_type, self.spec.n_sentence_types, n_mels);
        for f in n_frames.saturating_sub(TILT_FRAMES)..n_frames {
            for (c, t) in tilt.iter().enumerate() {
                data[f * n_mels + c] += t;
            }
        }
        let mel = Tensor::new(&[n_frames, n_mels], data)?;
        Ok(AlignedUtterance {
            utt_id: utt_id.to_string(),
            symbols: symbols.to_vec(),
            durations,
            mel,
            sentence_type,
        })
    }

    /// Utterance `index`, drawn from its own seed so generation order does not matter.
    pub fn utterance(&self, index: usize) -> Result<AlignedUtterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)));
        let len = rng.gen_range(self.spec.min_symbols..=self.spec.max_symbols);
        let symbols = self.symbol_sequence(&mut rng, len);
        let stype = rng.gen_range(0..self.spec.n_sentence_types);
        self.render(&format!("toy{index:05}"), &symbols, stype, &mut rng)
    }

    pub fn generate(&self, n_utts: usize) -> Result<Vec<AlignedUtterance>> {
        (0..n_utts).map(|i| self.utterance(i)).collect()
    }
}

/// Per-channel offset added to the last frames, a linear ramp whose slope
/// depends on the sentence type.
pub fn sentence_tilt(sentence_type: usize, n_types: usize, n_mels: usize) -> Vec<f64> {
    let centre = (n_types as f64 - 1.0) / 2.0;
    let slope = TILT_AMPLITUDE * (sentence_type as f64 - centre);
    (0..n_mels)
        .map(|c| {
            let x = if n_mels > 1 { 2.0 * c as f64 / (n_mels - 1) as f64 - 1.0 } else { 0.0 };
            slope * x
        })
        .collect()
}

fn draw_templates(rng: &mut impl Rng, count: usize, n_mels: usize, noise: f64) -> Result<Vec<Vec<f64>>> {
    // Templates must stay well apart relative to the noise and in absolute terms.
    let min_dist = (10.0 * noise).max(0.5 * (n_mels as f64).sqrt());
    for _ in 0..1000 {
        let t: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..n_mels).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        if min_pairwise_distance(&t) > min_dist {
            return Ok(t);
        }
    }
    Err(Error::Config(format!(
        "could not draw {count} templates of width {n_mels} at least {min_dist:.3} apart"
    )))
}

pub fn min_pairwise_distance(templates: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            let d: f64 = templates[i]
                .iter()
                .zip(&templates[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Acoustic forced alignment of `mel` to `symbols`: the monotonic path, at
/// least one frame per symbol, minimising squared distance to the symbol
/// templates. Returns frames per symbol.
pub fn forced_durations(corpus: &ToyCorpus, symbols: &[String], mel: &Tensor) -> Result<Vec<u32>> {
    let (frames, n_mels) = mel.dims2()?;
    let n = symbols.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if frames < n {
        return Err(Error::Contract(format!("{frames} frames cannot cover {n} symbols")));
    }
    if n_mels != corpus.spec.n_mels {
        return Err(Error::shape("forced_durations", &[frames, n_mels], &[frames, corpus.spec.n_mels]));
    }
    let templates = symbols.iter().map(|s| corpus.template(s)).collect::<Result<Vec<_>>>()?;
    let dist = |t: usize, j: usize| -> f64 { mel.row(t).iter().zip(templates[j]).map(|(a, b)| (a - b) * (a - b)).sum() };
    // cost[t][j]: best path ending at frame t on symbol j; `advanced` records
    // whether symbol j started at frame t.
    let mut cost = vec![vec![f64::INFINITY; n]; frames];
    let mut advanced = vec![vec![false; n]; frames];
    cost[0][0] = dist(0, 0);
    for t in 1..frames {
        for j in 0..n.min(t + 1) {
            let stay = cost[t - 1][j];
            let step = if j > 0 { cost[t - 1][j - 1] } else { f64::INFINITY };
            let (best, adv) = if step < stay { (step, true) } else { (stay, false) };
            cost[t][j] = best + dist(t, j);
            advanced[t][j] = adv;
        }
    }
    let mut durations = vec![0u32; n];
    let mut j = n - 1;
    for t in (0..frames).rev() {
        durations[j] += 1;
        if t > 0 && advanced[t][j] {
            j -= 1;
        }
    }
    Ok(durations)
}

/// Cross-attention of one segment, `[frames, symbols]`, with the position
/// of its first symbol in the utterance.
#[derive(Clone, Debug)]
pub struct SegmentAlignment {
    pub symbol_offset: usize,
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
pub struct AlignmentReport {
    /// Attention centroid per decoder frame, in utterance symbol positions.
    pub centroids: Vec<f64>,
    /// Fraction of consecutive frames whose centroid does not move back by
    /// more than half a position.
    pub monotonicity: f64,
    /// Frames attributed to each symbol (nearest position to the centroid).
    pub durations: Vec<u32>,
    /// `|emitted - truth| / truth` per symbol.
    pub duration_errors: Vec<f64>,
}

impl AlignmentReport {
    /// Fraction of symbols whose relative duration error is at most `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.duration_errors.is_empty() {
            return 1.0;
        }
        let ok = self.duration_errors.iter().filter(|&&e| e <= tol + 1e-12).count();
        ok as f64 / self.duration_errors.len() as f64
    }
}

pub const MONOTONIC_TOLERANCE: f64 = 0.5;

pub fn eval_alignment(segments: &[SegmentAlignment], truth: &[u32]) -> Result<AlignmentReport> {
    let mut centroids = Vec::new();
    let mut durations = vec![0u32; truth.len()];
    for seg in segments {
        let (frames, syms) = seg.weights.dims2()?;
        if seg.symbol_offset + syms > truth.len() {
            return Err(Error::Index {
                what: "alignment symbols",
                index: seg.symbol_offset + syms,
                len: truth.len(),
            });
        }
        for f in 0..frames {
            let row = seg.weights.row(f);
            let mass: f64 = row.iter().sum();
            let local = if mass > 0.0 {
                row.iter().enumerate().map(|(j, w)| j as f64 * w).sum::<f64>() / mass
            } else {
                0.0
            };
            let slot = (local.round() as usize).min(syms.saturating_sub(1));
            durations[seg.symbol_offset + slot] += 1;
            centroids.push(seg.symbol_offset as f64 + local);
        }
    }
    let steps = centroids.len().saturating_sub(1);
    let monotonicity = if steps == 0 {
        1.0
    } else {
        let ok = centroids
            .windows(2)
            .filter(|w| w[1] >= w[0] - MONOTONIC_TOLERANCE)
            .count();
        ok as f64 / steps as f64
    };
    let duration_errors = durations
        .iter()
        .zip(truth)
        .map(|(&e, &t)| {
            if t == 0 {
                f64::from(e)
            } else {
                (f64::from(e) - f64::from(t)).abs() / f64::from(t)
            }
        })
        .collect();
    Ok(AlignmentReport {
        centroids,
        monotonicity,
        durations,
        duration_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ToySpec {
        ToySpec::default()
    }

    #[test]
    fn forced_alignment_recovers_rendered_durations() {
        let corpus = ToyCorpus::new(ToySpec { jitter: 2, ..spec() }).unwrap();
        for i in 0..20 {
            let u = corpus.utterance(i).unwrap();
            assert_eq!(forced_durations(&corpus, &u.symbols, &u.mel).unwrap(), u.durations, "{}", u.utt_id);
        }
        let u = corpus.utterance(0).unwrap();
        let short = Tensor::zeros(&[2, corpus.spec().n_mels]);
        assert!(forced_durations(&corpus, &u.symbols, &short).is_err());
    }

    #[test]
    fn noiseless_single_symbol() {
        let corpus = ToyCorpus::new(ToySpec { noise: 0.0, ..spec() }).unwrap();
        let d = corpus.duration("p3").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Single-frame tilt region overlaps; use the middle sentence type, whose tilt is zero.
        let u = corpus.render("x", &["p3".to_string()], 1, &mut rng).unwrap();
        assert_eq!(u.n_frames(), d as usize);
        let t = corpus.template("p3").unwrap();
        for f in 0..u.n_frames() {
            assert_eq!(u.mel.row(f), t);
        }
    }

    #[test]
    fn durations_sum_to_frames_and_templates_apart() {
        let corpus = ToyCorpus::new(spec()).unwrap();
        for u in corpus.generate(30).unwrap() {
            u.validate().unwrap();
            assert_eq!(u.symbols.last().map(String::as_str), Some(TERMINAL));
        }
        assert!(min_pairwise_distance(&corpus.templates) > 10.0 * corpus.spec.noise);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = ToyCorpus::new(spec()).unwrap().generate(5).unwrap();
        let b = ToyCorpus::new(spec()).unwrap().generate(5).unwrap();
        assert_eq!(a, b);
        let c = ToyCorpus::new(ToySpec { seed: 8, ..spec() }).unwrap().generate(5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn staircase_is_monotonic_with_exact_durations() {
        // Two segments: symbols 0..2 then 2..3, durations [2, 1, 3].
        let s1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s2 = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let segs = [
            SegmentAlignment { symbol_offset: 0, weights: s1 },
            SegmentAlignment { symbol_offset: 2, weights: s2 },
        ];
        let r = eval_alignment(&segs, &[2, 1, 3]).unwrap();
        assert_eq!(r.monotonicity, 1.0);
        assert_eq!(r.durations, vec![2, 1, 3]);
        assert_eq!(r.fraction_within(0.0), 1.0);
    }

    #[test]
    fn uniform_attention_is_monotonic_but_misaligned() {
        let w = Tensor::full(&[6, 3], 1.0 / 3.0);
        let r = eval_alignment(&[SegmentAlignment { symbol_offset: 0, weights: w }], &[2, 2, 2]).unwrap();
        assert_eq!(r.monotonicity, 1.0);
        assert!(r.centroids.iter().all(|&c| (c - 1.0).abs() < 1e-12));
        assert_eq!(r.durations, vec![0, 6, 0]);
        assert!(r.fraction_within(0.2) < 0.5);
    }
}
