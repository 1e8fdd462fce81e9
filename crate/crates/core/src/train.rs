//! Stateful training over utterance-ordered chunk batches.
//!
//! Each lane of a batch carries one utterance stream with its own encoder and
//! decoder memory. Lanes are run one after another on separate graphs; their
//! gradients are averaged, clipped and applied with one Adam step.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, TrainState};
use crate::chunker::{segment_utterance, AlignedUtterance, BatchIterator, Segment};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{LossValues, STransformer, StreamCaches};
use crate::optim::{AdamState, ParamGrads};
use crate::params::ParamStore;
use crate::symbols::Vocabulary;

/// CSV header of the training log.
pub const LOG_HEADER: &str = "step,mel,stop,chunk_stop,rate,lr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based index of the update just applied.
    pub step: u64,
    /// Loss components averaged over the active lanes.
    pub loss: LossValues,
    pub lr: f64,
    pub grad_norm: f64,
    pub active_lanes: usize,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.loss.mel, self.loss.stop, self.loss.chunk_stop, self.loss.rate, self.lr
        )
    }
}

/// Chunks every utterance with the model's chunking settings.
pub fn segment_corpus(
    corpus: &[AlignedUtterance],
    vocab: &Vocabulary,
    run: &RunConfig,
) -> Result<Vec<Vec<Segment>>> {
    corpus
        .iter()
        .map(|u| segment_utterance(u, vocab, run.model.chunk_size, run.model.search_window))
        .collect()
}

pub struct Trainer {
    run: RunConfig,
    model: STransformer,
    store: ParamStore,
    adam: AdamState,
    utterances: Vec<Vec<Segment>>,
    lanes: Vec<StreamCaches>,
    epoch: u64,
    position: usize,
    batches: Vec<Vec<Option<Segment>>>,
}

impl Trainer {
    /// Fresh model initialised from `run.train.seed`; the vocabulary is the
    /// sorted symbol set of the corpus.
    pub fn new(run: RunConfig, corpus: &[AlignedUtterance]) -> Result<Self> {
        run.validate()?;
        let vocab = Vocabulary::from_sequences(corpus.iter().map(|u| u.symbols.as_slice()))?;
        let (model, store) = STransformer::init(run.model.clone(), vocab, run.train.seed)?;
        Self::assemble(run, model, store, corpus)
    }

    /// Training with explicit initial parameters.
    pub fn with_params(run: RunConfig, model: STransformer, store: ParamStore, corpus: &[AlignedUtterance]) -> Result<Self> {
        Self::assemble(run, model, store, corpus)
    }

    /// Continues a run exactly where the checkpoint left off.
    pub fn resume(ckpt: Checkpoint, corpus: &[AlignedUtterance]) -> Result<Self> {
        let state = ckpt
            .train
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no training state".into()))?;
        let (model, store) = STransformer::bind(ckpt.config.model.clone(), ckpt.vocab.clone(), &ckpt.params)?;
        let mut t = Self::assemble(ckpt.config, model, store, corpus)?;
        t.adam.restore(state.step, state.adam_m, state.adam_v)?;
        if state.lanes.len() != t.lanes.len() {
            return Err(Error::Structure(format!(
                "checkpoint has {} lanes, batch_size is {}",
                state.lanes.len(),
                t.lanes.len()
            )));
        }
        for (caches, (enc, dec)) in t.lanes.iter_mut().zip(state.lanes) {
            caches.reset();
            if enc.first().is_some_and(|x| x.shape()[0] > 0) {
                caches.enc.push_values(&enc)?;
            }
            if dec.first().is_some_and(|x| x.shape()[0] > 0) {
                caches.dec.push_values(&dec)?;
            }
        }
        t.epoch = state.epoch;
        t.batches = t.epoch_batches(t.epoch)?;
        t.position = state.position as usize;
        Ok(t)
    }

    fn assemble(run: RunConfig, model: STransformer, store: ParamStore, corpus: &[AlignedUtterance]) -> Result<Self> {
        let utterances = segment_corpus(corpus, &model.vocab, &run)?;
        if utterances.iter().all(Vec::is_empty) {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let max_frames = utterances.iter().flatten().map(Segment::n_frames).max().unwrap_or(0);
        if max_frames > run.model.l_max {
            return Err(Error::Config(format!(
                "corpus has a chunk of {max_frames} frames but l_max is {}",
                run.model.l_max
            )));
        }
        let adam = AdamState::new(&store, run.optim.schedule());
        let lanes = (0..run.train.batch_size).map(|_| model.new_caches()).collect();
        let mut t = Trainer {
            run,
            model,
            store,
            adam,
            utterances,
            lanes,
            epoch: 0,
            position: 0,
            batches: Vec::new(),
        };
        t.batches = t.epoch_batches(0)?;
        Ok(t)
    }

    fn epoch_batches(&self, epoch: u64) -> Result<Vec<Vec<Option<Segment>>>> {
        let mut order: Vec<usize> = (0..self.utterances.len()).collect();
        if self.run.train.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.run.train.seed ^ epoch.wrapping_mul(0xA24B_AED4_963E_E407));
            order.shuffle(&mut rng);
        }
        let ordered: Vec<Vec<Segment>> = order.iter().map(|&i| self.utterances[i].clone()).collect();
        let batches = BatchIterator::new(&ordered, self.run.train.batch_size)?
            .map(|b| b.lanes.into_iter().map(|s| s.cloned()).collect())
            .collect();
        Ok(batches)
    }

    pub fn model(&self) -> &STransformer {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    /// Changes where [`Trainer::run`] stops, e.g. to extend a resumed run.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.run.train.steps = steps;
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step()
    }

    pub fn utterances(&self) -> &[Vec<Segment>] {
        &self.utterances
    }

    fn dropout_seed(&self, step: u64, lane: usize) -> Option<u64> {
        (self.run.model.dropout > 0.0).then(|| {
            let mut h = self.run.train.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            h ^= step.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            h ^= (lane as u64 + 1).wrapping_mul(0x94D0_49BB_1331_11EB);
            h
        })
    }

    /// One optimizer update on the next batch.
    pub fn step(&mut self) -> Result<StepLog> {
        if self.position >= self.batches.len() {
            self.epoch += 1;
            self.batches = self.epoch_batches(self.epoch)?;
            self.position = 0;
        }
        let step = self.adam.step();
        let seeds: Vec<Option<u64>> = (0..self.lanes.len()).map(|l| self.dropout_seed(step, l)).collect();
        let batch = &self.batches[self.position];
        let active = batch.iter().flatten().count().max(1);
        let mut grads = ParamGrads::new(self.store.len());
        let mut sums = LossValues::default();
        for (lane, slot) in batch.iter().enumerate() {
            let Some(seg) = slot else { continue };
            let mut g = Graph::new(&self.store);
            let fwd = self.model.forward_segment(&mut g, seg, &mut self.lanes[lane], seeds[lane])?;
            if !fwd.values.total.is_finite() {
                return Err(Error::NonFiniteLoss { step: step + 1 });
            }
            let gr = g.backward(fwd.loss)?;
            grads.add_from(&gr, 1.0 / active as f64);
            let v = fwd.values;
            sums.total += v.total;
            sums.mel += v.mel;
            sums.stop += v.stop;
            sums.chunk_stop += v.chunk_stop;
            sums.rate += v.rate;
            sums.guide += v.guide;
        }
        let grad_norm = grads.clip_global_norm(self.run.optim.grad_clip);
        let lr = self.adam.update(&mut self.store, &grads)?;
        if let Some((_, name, _)) = self.store.iter().find(|(_, _, t)| t.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence { param: name.to_string() });
        }
        self.position += 1;
        let n = active as f64;
        let loss = LossValues {
            total: sums.total / n,
            mel: sums.mel / n,
            stop: sums.stop / n,
            chunk_stop: sums.chunk_stop / n,
            rate: sums.rate / n,
            guide: sums.guide / n,
        };
        Ok(StepLog {
            step: self.adam.step(),
            loss,
            lr,
            grad_norm,
            active_lanes: batch.iter().flatten().count(),
        })
    }

    pub fn checkpoint(&self, with_state: bool) -> Checkpoint {
        let train = with_state.then(|| {
            let ids: Vec<_> = self.store.ids().collect();
            TrainState {
                step: self.adam.step(),
                epoch: self.epoch,
                position: self.position as u64,
                adam_m: ids.iter().map(|&id| self.adam.moments(id).0.to_vec()).collect(),
                adam_v: ids.iter().map(|&id| self.adam.moments(id).1.to_vec()).collect(),
                lanes: self
                    .lanes
                    .iter()
                    .map(|c| {
                        let layers = |m: &crate::memory::CachedMemory| {
                            (0..m.n_layers())
                                .map(|i| m.view_value(i).expect("layer in range").clone())
                                .collect()
                        };
                        (layers(&c.enc), layers(&c.dec))
                    })
                    .collect(),
            }
        });
        Checkpoint {
            config: self.run.clone(),
            vocab: self.model.vocab.clone(),
            params: self.store.clone(),
            train,
        }
    }

    /// Runs until `run.train.steps` updates have been applied, writing one CSV
    /// row per step to `log` and calling `on_checkpoint` every
    /// `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        log: &mut dyn Write,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Option<StepLog>> {
        let mut last = None;
        let every = self.run.train.checkpoint_every;
        while self.adam.step() < self.run.train.steps {
            let s = self.step()?;
            writeln!(log, "{}", s.csv_row()).map_err(|e| Error::io("training log", e))?;
            if every > 0 && s.step % every == 0 {
                on_checkpoint(self)?;
            }
            last = Some(s);
        }
        if last.is_some_and(|s| every == 0 || s.step % every != 0) {
            on_checkpoint(self)?;
        }
        Ok(last)
    }
}
