//! Teacher-forced cross-entropy training of the base summarizer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticExample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{self, Adam, AdamConfig};
use crate::vocab::{TokenId, Vocabulary};

/// A document/summary pair as `[BOS] … [EOS]` id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub id: String,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl EncodedExample {
    pub fn new(vocab: &Vocabulary, ex: &SyntheticExample) -> Self {
        Self { id: ex.id.clone(), source: vocab.encode_wrapped(&ex.document), target: vocab.encode_wrapped(&ex.summary) }
    }
}

pub fn encode_all(vocab: &Vocabulary, examples: &[SyntheticExample]) -> Vec<EncodedExample> {
    examples.iter().map(|e| EncodedExample::new(vocab, e)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 8, seed: 0, optimizer: AdamConfig::default() }
    }
}

/// Example indices for `step`: consecutive slices of a per-epoch shuffle.
/// Depends only on `(seed, step)`, so a resumed run sees the same batches.
pub fn batch_at(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    assert!(n > 0, "empty training set");
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch_size as u64 {
        let flat = step * batch_size as u64 + k;
        let epoch = flat / n as u64;
        let pos = (flat % n as u64) as usize;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseLogRecord {
    pub step: u64,
    /// Batch mean of per-example summed token cross-entropy.
    pub loss: f64,
}

/// Runs optimizer steps `adam.steps_taken() .. config.steps`.
pub fn train_base(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    data: &[EncodedExample],
    config: &TrainConfig,
    mut on_step: impl FnMut(&BaseLogRecord),
) -> Result<()> {
    let pad = Vocabulary::SPECIALS.pad;
    while adam.steps_taken() < config.steps {
        let step = adam.steps_taken();
        let batch = batch_at(config.seed, step, config.batch_size, data.len());
        let mut total = 0.0f64;
        let mut acc = Default::default();
        for &i in &batch {
            let ex = &data[i];
            let (loss, grads) = model.loss_gradients(|m, g| m.xent_graph(g, &ex.source, &ex.target, pad))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss {loss} at step {} on example {}", step + 1, ex.id)));
            }
            total += loss as f64;
            optim::accumulate(&mut acc, grads);
        }
        optim::scale(&mut acc, 1.0 / batch.len() as f32);
        adam.step(model.params_mut(), &acc)?;
        on_step(&BaseLogRecord { step: step + 1, loss: total / batch.len() as f64 });
    }
    Ok(())
}

/// Fraction of target tokens (after BOS) the model ranks first under teacher forcing.
pub fn next_token_accuracy(model: &Model<f32>, data: &[EncodedExample]) -> Result<f64> {
    let sp = Vocabulary::SPECIALS;
    let (mut hits, mut total) = (0usize, 0usize);
    for ex in data {
        let steps = model.forward_teacher_forced(&ex.source, &ex.target, sp.bos, sp.eos, sp.pad, None)?;
        for (out, &gold) in steps.iter().zip(&ex.target[1..]) {
            let best = argmax(out.distribution.iter().copied());
            hits += usize::from(best == gold as usize);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_at(3, s, 2, n)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_at(3, 7, 4, n), batch_at(3, 7, 4, n));
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(Vec::<f64>::new()), 0);
    }
}
