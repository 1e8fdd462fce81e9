//! Fixtures shared by the benchmarks.

use stransformer::chunker::{segment_utterance, Segment};
use stransformer::toy_corpus::ToyCorpus;
use stransformer::{ParamStore, RunConfig, STransformer};

pub struct BenchModel {
    pub run: RunConfig,
    pub model: STransformer,
    pub store: ParamStore,
    pub utterances: Vec<Vec<Segment>>,
    pub symbols: Vec<Vec<String>>,
}

/// Desk-scale model at random init with a few toy utterances chunked.
pub fn desk_model(n_utts: usize) -> BenchModel {
    let run = RunConfig::default();
    let toy = ToyCorpus::new(run.toy_spec()).expect("valid toy spec");
    let corpus = toy.generate(n_utts).expect("toy corpus");
    let (model, store) = STransformer::init(run.model.clone(), toy.vocabulary(), 1).expect("model init");
    let utterances = corpus
        .iter()
        .map(|u| segment_utterance(u, &model.vocab, run.model.chunk_size, run.model.search_window).expect("chunking"))
        .collect();
    BenchModel {
        symbols: corpus.into_iter().map(|u| u.symbols).collect(),
        run,
        model,
        store,
        utterances,
    }
}
