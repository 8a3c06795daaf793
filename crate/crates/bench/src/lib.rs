//! Fixtures shared by the benchmarks: a small corpus and untrained models at
//! the default size. Timings do not depend on the weights.

use cfsum_core::data::{generate_corpus, CorpusSpec, Dataset};
use cfsum_core::dda::PredictorHead;
use cfsum_core::train::{encode_all, EncodedExample};
use cfsum_core::{Model, ModelConfig, Vocabulary};

pub struct Fixture {
    pub data: Dataset,
    pub vocab: Vocabulary,
    pub encoded: Vec<EncodedExample>,
    pub base: Model<f32>,
    pub cf: Model<f32>,
    pub head: PredictorHead,
}

pub fn fixture() -> Fixture {
    let data = generate_corpus(&CorpusSpec { n_train: 64, n_test: 16, ..CorpusSpec::default() }).unwrap();
    let vocab = data.inventory.vocabulary();
    let encoded = encode_all(&vocab, &data.train);
    let base = Model::<f32>::new(ModelConfig { vocab_size: vocab.size(), ..ModelConfig::default() }).unwrap();
    let cf = Model::<f32>::new(ModelConfig { vocab_size: vocab.size(), seed: 1, ..ModelConfig::default() }).unwrap();
    let head = PredictorHead::zeros(base.config().d_model);
    Fixture { data, vocab, encoded, base, cf, head }
}
