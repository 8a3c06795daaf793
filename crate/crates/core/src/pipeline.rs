//! Glue between the stages: ICT training pairs and DDA feature sets built
//! from a dataset.

use std::collections::{HashMap, HashSet};

use ndarray::{concatenate, Array2, Axis};

use crate::data::SyntheticExample;
use crate::dda::{self, DdaConfig, DdaLogRecord, LabeledSummary, PredictorHead};
use crate::error::{Error, Result};
use crate::ict::{self, Annotations, IctConfig, IctExample};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::train::EncodedExample;
use crate::vocab::Vocabulary;

/// Entity spans shifted into source coordinates (the source starts with BOS).
pub fn source_spans(ex: &SyntheticExample) -> Vec<[usize; 2]> {
    ex.entity_spans.iter().map(|&[a, b]| [a + 1, b + 1]).collect()
}

/// One prepared ICT pair per encoded example, partitions taken from `base`.
pub fn ict_dataset<T: Scalar>(
    base: &Model<T>,
    vocab: &Vocabulary,
    examples: &[SyntheticExample],
    encoded: &[EncodedExample],
    config: &IctConfig,
) -> Result<Vec<IctExample<T>>> {
    if examples.len() != encoded.len() {
        return Err(Error::Shape(format!("{} examples but {} encodings", examples.len(), encoded.len())));
    }
    let delimiters: Vec<_> = vocab.id(".").into_iter().collect();
    examples
        .iter()
        .zip(encoded)
        .map(|(ex, enc)| {
            let spans = source_spans(ex);
            let a = Annotations { entity_spans: &spans, delimiters: &delimiters };
            ict::prepare_example(base, enc, config, Some(a))
        })
        .collect()
}

/// Stacked predictor features and labels for `labeled`, whose documents are
/// looked up in `documents` by id.
pub fn dda_features<T: Scalar>(
    base: &Model<T>,
    vocab: &Vocabulary,
    documents: &[SyntheticExample],
    labeled: &[LabeledSummary],
    rho: f64,
) -> Result<(Array2<f64>, Vec<u8>)> {
    let by_id: HashMap<&str, &SyntheticExample> = documents.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut blocks = Vec::with_capacity(labeled.len());
    let mut labels = Vec::new();
    for l in labeled {
        let doc = by_id
            .get(l.doc_id.as_str())
            .ok_or_else(|| Error::Config(format!("labeled summary refers to unknown document {}", l.doc_id)))?;
        let (z, y) = dda::summary_features(base, vocab, &doc.document, l, rho)?;
        blocks.push(z);
        labels.extend(y);
    }
    if blocks.is_empty() {
        return Ok((Array2::zeros((0, 4 * base.config().d_model)), labels));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let z = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((z, labels))
}

/// Splits labeled summaries by document: the last `holdout` share of
/// documents (in order of first appearance) is held out.
pub fn holdout_split(labeled: &[LabeledSummary], holdout: f64) -> (Vec<LabeledSummary>, Vec<LabeledSummary>) {
    let mut seen = HashSet::new();
    let docs: Vec<&str> = labeled.iter().map(|l| l.doc_id.as_str()).filter(|d| seen.insert(*d)).collect();
    let n_held = (((docs.len() as f64) * holdout.clamp(0.0, 1.0)).ceil() as usize).min(docs.len());
    let held: HashSet<&str> = docs[docs.len() - n_held..].iter().copied().collect();
    labeled.iter().cloned().partition(|l| !held.contains(l.doc_id.as_str()))
}

#[derive(Clone, Debug)]
pub struct DdaOutcome {
    pub head: PredictorHead,
    pub labeled: Vec<LabeledSummary>,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

/// Builds the corrupted set from `documents`, extracts features with the
/// frozen `base`, trains the head, and scores the held-out summaries.
pub fn train_dda<T: Scalar>(
    base: &Model<T>,
    vocab: &Vocabulary,
    documents: &[SyntheticExample],
    numbers: &[String],
    config: &DdaConfig,
    on_step: impl FnMut(&DdaLogRecord),
) -> Result<DdaOutcome> {
    let labeled = dda::build_labeled_set(documents, numbers, config.seed);
    let (fit, held) = holdout_split(&labeled, config.holdout);
    let (x, y) = dda_features(base, vocab, documents, &fit, config.proportion)?;
    let (hx, hy) = dda_features(base, vocab, documents, &held, config.proportion)?;
    let head = dda::train_predictor(&x, &y, config, on_step)?;
    Ok(DdaOutcome {
        train_accuracy: dda::token_accuracy(&head, &x, &y)?,
        holdout_accuracy: dda::token_accuracy(&head, &hx, &hy)?,
        train_rows: y.len(),
        holdout_rows: hy.len(),
        head,
        labeled,
    })
}
