//! Run configuration: a UTF-8 `key = value` text file with `#` comments.
//!
//! Every key has a default; unknown keys and malformed values are errors.
//! [`RunConfig::to_text`] writes every key in a fixed order, and parsing that
//! text gives back an identical config.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optim::LrSchedule;
use crate::toy_corpus::ToySpec;

/// How the two stop heads are combined into one stop logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    /// Chunk head on non-final segments, utterance head on the final one.
    Selector,
    /// Both heads multiplied by `(1 - utt_end)`, as literally printed. The
    /// logit is identically zero on utterance-final segments.
    Literal,
}

impl FromStr for StopRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "selector" => Ok(StopRule::Selector),
            "literal" => Ok(StopRule::Literal),
            _ => Err(format!("expected `selector` or `literal`, got `{s}`")),
        }
    }
}

impl fmt::Display for StopRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopRule::Selector => "selector",
            StopRule::Literal => "literal",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub n_heads_self: usize,
    pub n_heads_encdec: usize,
    pub n_mels: usize,
    /// Nominal chunk length in phonemes.
    pub chunk_size: usize,
    pub search_window: usize,
    /// Encoder memory, in phoneme positions.
    pub enc_mem_capacity: usize,
    /// Decoder memory, in mel frames.
    pub dec_mem_capacity: usize,
    /// Longest segment (phonemes or frames) the positional table and the
    /// relative bias cover.
    pub l_max: usize,
    pub prenet_hidden: usize,
    /// Decoder pre-net dropout, active during training only.
    pub dropout: f64,
    pub reduction_factor: usize,
    pub n_sentence_types: usize,
    pub stop_pos_weight: f64,
    pub mel_loss_weight: f64,
    pub stop_loss_weight: f64,
    pub chunk_stop_loss_weight: f64,
    pub rate_loss_weight: f64,
    /// Weight of the diagonal attention prior on cross-attention; 0 disables it.
    pub guide_loss_weight: f64,
    pub guide_sigma: f64,
    pub stop_rule: StopRule,
    pub stop_threshold: f64,
    pub max_frames_per_segment: usize,
}

impl ModelConfig {
    /// Full-size settings (6/6 layers, d 512, chunk 60).
    pub fn full_size() -> Self {
        ModelConfig {
            n_layers_enc: 6,
            n_layers_dec: 6,
            d_model: 512,
            n_heads_self: 8,
            n_heads_encdec: 4,
            n_mels: 80,
            chunk_size: 60,
            search_window: 20,
            enc_mem_capacity: 120,
            dec_mem_capacity: 4,
            l_max: 1200,
            prenet_hidden: 256,
            max_frames_per_segment: 1200,
            ..Self::desk()
        }
    }

    /// CPU-sized settings used by the tests and the toy corpus.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_model: 64,
            n_heads_self: 4,
            n_heads_encdec: 2,
            n_mels: 16,
            chunk_size: 8,
            search_window: 3,
            enc_mem_capacity: 16,
            dec_mem_capacity: 4,
            l_max: 160,
            prenet_hidden: 64,
            dropout: 0.3,
            reduction_factor: 1,
            n_sentence_types: 3,
            stop_pos_weight: 5.0,
            mel_loss_weight: 1.0,
            stop_loss_weight: 1.0,
            chunk_stop_loss_weight: 1.0,
            rate_loss_weight: 50.0,
            guide_loss_weight: 1.0,
            guide_sigma: 0.2,
            stop_rule: StopRule::Selector,
            stop_threshold: 0.5,
            max_frames_per_segment: 160,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_mels == 0 || self.prenet_hidden == 0 {
            return fail("d_model, n_mels and prenet_hidden must be positive".into());
        }
        for (name, heads) in [("n_heads_self", self.n_heads_self), ("n_heads_encdec", self.n_heads_encdec)] {
            if heads == 0 || self.d_model % heads != 0 {
                return fail(format!("{name}={heads} must divide d_model={}", self.d_model));
            }
        }
        if self.n_layers_enc == 0 || self.n_layers_dec == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if !(self.search_window > 0 && self.chunk_size > self.search_window) {
            return fail(format!(
                "need chunk_size > search_window > 0, got {} and {}",
                self.chunk_size, self.search_window
            ));
        }
        if self.l_max < self.chunk_size + self.search_window {
            return fail(format!(
                "l_max={} is shorter than the longest chunk ({})",
                self.l_max,
                self.chunk_size + self.search_window
            ));
        }
        if self.max_frames_per_segment == 0 || self.l_max < self.max_frames_per_segment {
            return fail(format!(
                "max_frames_per_segment={} must be in 1..=l_max ({})",
                self.max_frames_per_segment, self.l_max
            ));
        }
        if self.reduction_factor != 1 {
            return fail(format!(
                "reduction_factor={} is not supported; only 1 frame per step",
                self.reduction_factor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout={} must be in [0, 1)", self.dropout));
        }
        if self.n_sentence_types == 0 {
            return fail("n_sentence_types must be positive".into());
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return fail(format!("stop_threshold={} must be in (0, 1)", self.stop_threshold));
        }
        if self.guide_sigma <= 0.0 {
            return fail("guide_sigma must be positive".into());
        }
        let weights = [
            self.stop_pos_weight,
            self.mel_loss_weight,
            self.stop_loss_weight,
            self.chunk_stop_loss_weight,
            self.rate_loss_weight,
            self.guide_loss_weight,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail("loss weights must be finite and nonnegative".into());
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub lr_decay: f64,
    pub decay_interval: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl OptimConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup_steps: self.warmup_steps,
            decay: self.lr_decay,
            decay_interval: self.decay_interval,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            warmup_steps: 100,
            lr_decay: 0.5,
            decay_interval: 4000,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// Reshuffle utterance order each epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 8,
            steps: 16000,
            checkpoint_every: 200,
            shuffle: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub toy: ToySpec,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, u32, bool, StopRule);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }

    // Debug formatting is the shortest text that parses back to the same bits.
    fn format_value(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every recognised key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value).map_err(|e| {
                            Error::Config(format!("bad value `{value}` for `{key}`: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.format_value()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "n_layers_enc" => model.n_layers_enc;
    "n_layers_dec" => model.n_layers_dec;
    "d_model" => model.d_model;
    "n_heads_self" => model.n_heads_self;
    "n_heads_encdec" => model.n_heads_encdec;
    "n_mels" => model.n_mels;
    "chunk_size" => model.chunk_size;
    "search_window" => model.search_window;
    "enc_mem_capacity" => model.enc_mem_capacity;
    "dec_mem_capacity" => model.dec_mem_capacity;
    "l_max" => model.l_max;
    "prenet_hidden" => model.prenet_hidden;
    "dropout" => model.dropout;
    "reduction_factor" => model.reduction_factor;
    "n_sentence_types" => model.n_sentence_types;
    "stop_pos_weight" => model.stop_pos_weight;
    "mel_loss_weight" => model.mel_loss_weight;
    "stop_loss_weight" => model.stop_loss_weight;
    "chunk_stop_loss_weight" => model.chunk_stop_loss_weight;
    "rate_loss_weight" => model.rate_loss_weight;
    "guide_loss_weight" => model.guide_loss_weight;
    "guide_sigma" => model.guide_sigma;
    "stop_rule" => model.stop_rule;
    "stop_threshold" => model.stop_threshold;
    "max_frames_per_segment" => model.max_frames_per_segment;
    "lr" => optim.lr;
    "warmup_steps" => optim.warmup_steps;
    "lr_decay" => optim.lr_decay;
    "decay_interval" => optim.decay_interval;
    "grad_clip" => optim.grad_clip;
    "seed" => train.seed;
    "batch_size" => train.batch_size;
    "steps" => train.steps;
    "checkpoint_every" => train.checkpoint_every;
    "shuffle" => train.shuffle;
    "toy_vocab_size" => toy.vocab_size;
    "toy_n_utts" => toy.n_utts;
    "toy_min_symbols" => toy.min_symbols;
    "toy_max_symbols" => toy.max_symbols;
    "toy_min_duration" => toy.min_duration;
    "toy_max_duration" => toy.max_duration;
    "toy_noise" => toy.noise;
    "toy_word_rate" => toy.word_rate;
    "toy_punct_rate" => toy.punct_rate;
    "toy_jitter" => toy.jitter;
    "toy_seed" => toy.seed;
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.toy_spec().validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr_decay > 0.0 && self.optim.lr_decay <= 1.0) {
            return Err(Error::Config("need lr > 0 and lr_decay in (0, 1]".into()));
        }
        if self.optim.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be nonnegative".into()));
        }
        Ok(())
    }

    /// Canonical text: every key once, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Toy corpus settings with mel width and sentence types taken from the model.
    pub fn toy_spec(&self) -> ToySpec {
        ToySpec {
            n_mels: self.model.n_mels,
            n_sentence_types: self.model.n_sentence_types,
            ..self.toy.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.model.stop_rule = StopRule::Literal;
        cfg.optim.lr = 3.0e-4;
        cfg.toy.noise = 0.015;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = RunConfig::parse("# desk run\n  d_model = 32   # smaller\n\nstop_rule=literal\n").unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.stop_rule, StopRule::Literal);
    }

    #[test]
    fn unknown_key_and_bad_value_fail() {
        let err = RunConfig::parse("d_modle = 3").unwrap_err();
        assert!(err.to_string().contains("d_modle"), "{err}");
        assert!(RunConfig::parse("lr = fast").is_err());
        assert!(RunConfig::parse("lr = inf").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::full_size().validate().is_ok());
        let bad = ModelConfig {
            reduction_factor: 2,
            ..ModelConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            n_heads_self: 5,
            ..ModelConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            l_max: 10,
            ..ModelConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn full_size_preset_values() {
        let p = ModelConfig::full_size();
        assert_eq!((p.n_layers_enc, p.n_layers_dec, p.d_model), (6, 6, 512));
        assert_eq!((p.n_heads_self, p.n_heads_encdec, p.n_mels), (8, 4, 80));
        assert_eq!((p.chunk_size, p.search_window), (60, 20));
        assert_eq!((p.enc_mem_capacity, p.dec_mem_capacity), (120, 4));
    }
}
