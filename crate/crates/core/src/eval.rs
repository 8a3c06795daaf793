//! Scoring decoded summaries against the synthetic references, the
//! forced-attention probe, and the ablation layout.

use serde::{Deserialize, Serialize};

use crate::attention;
use crate::data::{fact_precision, rouge_l, Grammar, SyntheticExample};
use crate::decode::{DebiasConfig, Debiaser, Summarizer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::train::argmax;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub id: String,
    pub rouge_l: f64,
    pub fact_precision: f64,
    pub vacuous: bool,
    pub n_triples: usize,
    pub output: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub rouge_l: f64,
    pub fact_precision: f64,
    /// Outputs with no extractable triple, scored 1 by convention.
    pub vacuous: usize,
    /// Examples that could not be decoded under the requested setting.
    pub skipped: usize,
    pub n: usize,
    #[serde(default)]
    pub fingerprint: String,
    pub rows: Vec<ExampleRow>,
}

/// ROUGE-L F1 with an empty candidate scored 0.
fn rouge_or_zero(output: &[String], reference: &[String]) -> Result<f64> {
    if output.is_empty() {
        return Ok(0.0);
    }
    Ok(rouge_l(output, reference)?.f1)
}

pub fn score_row(ex: &SyntheticExample, output: Vec<String>, grammar: &Grammar) -> Result<ExampleRow> {
    let triples = grammar.extract(&output).triples;
    let p = fact_precision(&triples, &ex.gold_set());
    Ok(ExampleRow {
        id: ex.id.clone(),
        rouge_l: rouge_or_zero(&output, &ex.summary)?,
        fact_precision: p.value,
        vacuous: p.vacuous,
        n_triples: triples.len(),
        output,
    })
}

/// Aggregates rows; `skipped` examples are excluded from the means.
pub fn report(name: &str, rows: Vec<ExampleRow>, skipped: usize) -> EvalReport {
    let n = rows.len();
    let mean = |f: fn(&ExampleRow) -> f64| if n == 0 { 0.0 } else { rows.iter().map(f).sum::<f64>() / n as f64 };
    EvalReport {
        name: name.to_string(),
        rouge_l: mean(|r| r.rouge_l),
        fact_precision: mean(|r| r.fact_precision),
        vacuous: rows.iter().filter(|r| r.vacuous).count(),
        skipped,
        n,
        fingerprint: String::new(),
        rows,
    }
}

/// Scores given outputs (one per example, in order).
pub fn score_outputs(
    name: &str,
    examples: &[SyntheticExample],
    outputs: &[Vec<String>],
    grammar: &Grammar,
) -> Result<EvalReport> {
    if examples.len() != outputs.len() {
        return Err(Error::Metric(format!("{} outputs for {} examples", outputs.len(), examples.len())));
    }
    let rows = examples
        .iter()
        .zip(outputs)
        .map(|(ex, out)| score_row(ex, out.clone(), grammar))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(name, rows, 0))
}

pub fn evaluate_decoder<M: Summarizer>(
    name: &str,
    debiaser: &Debiaser<'_, M>,
    vocab: &Vocabulary,
    examples: &[SyntheticExample],
    grammar: &Grammar,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let ids = debiaser.decode(&vocab.encode_wrapped(&ex.document))?;
        rows.push(score_row(ex, vocab.decode(&ids), grammar)?);
    }
    Ok(report(name, rows, 0))
}

/// Greedy decoding where every step may only attend to the source positions
/// left after removing the top `q` share by cross-attention, so a larger `q`
/// leaves a less relevant context. `q = 0` is ordinary greedy decoding.
pub fn decode_attending_irrelevant<T: Scalar>(
    model: &Model<T>,
    source: &[TokenId],
    q: f64,
    max_steps: usize,
) -> Result<Vec<TokenId>> {
    let sp = Vocabulary::SPECIALS;
    let enc = model.encode(source, sp.pad)?;
    let mut prefix = vec![sp.bos];
    for _ in 0..max_steps {
        let full = model.decode_step(&enc, &prefix, sp.bos, None)?;
        let dist = if q == 0.0 {
            full.distribution
        } else {
            let attn: Vec<f64> = full.cross_attention.iter().map(|x| x.to_f64_lossy()).collect();
            let p = attention::partition_source(&attn, source, sp, q)?;
            let (_, mask_r) = attention::partition_to_masks(&p, source.len());
            model.decode_step(&enc, &prefix, sp.bos, Some(&mask_r))?.distribution
        };
        let next = argmax(dist.iter().copied()) as TokenId;
        prefix.push(next);
        if next == sp.eos {
            break;
        }
    }
    Ok(prefix.split_off(1))
}

/// One report per forced-irrelevant proportion.
pub fn bias_probe<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    examples: &[SyntheticExample],
    grammar: &Grammar,
    proportions: &[f64],
    max_steps: usize,
) -> Result<Vec<(f64, EvalReport)>> {
    let mut out = Vec::with_capacity(proportions.len());
    for &q in proportions {
        if !(0.0..1.0).contains(&q) {
            return Err(Error::Config(format!("irrelevant proportion {q} outside [0, 1)")));
        }
        let mut rows = Vec::new();
        let mut skipped = 0;
        for ex in examples {
            match decode_attending_irrelevant(model, &vocab.encode_wrapped(&ex.document), q, max_steps) {
                Ok(ids) => rows.push(score_row(ex, vocab.decode(&ids), grammar)?),
                Err(Error::Partition(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        out.push((q, report(&format!("q={q}"), rows, skipped)));
    }
    Ok(out)
}

/// A row of the module ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub name: &'static str,
    pub ecm: bool,
    pub ict: bool,
    pub dda: bool,
}

pub const ABLATIONS: [Ablation; 5] = [
    Ablation { name: "full", ecm: true, ict: true, dda: true },
    Ablation { name: "w/o DDA", ecm: true, ict: true, dda: false },
    Ablation { name: "w/o ECM", ecm: false, ict: true, dda: true },
    Ablation { name: "w/o ICT", ecm: true, ict: false, dda: true },
    Ablation { name: "w/o all", ecm: false, ict: false, dda: false },
];

impl Ablation {
    /// `base` with the disabled modules switched off.
    pub fn apply(&self, base: &DebiasConfig) -> DebiasConfig {
        DebiasConfig {
            alpha: if self.ecm { base.alpha } else { 0.0 },
            beta: if self.ict { base.beta } else { 0.0 },
            use_dda: base.use_dda && self.dda,
            ..base.clone()
        }
    }
}

/// Tab-separated comparison table, one line per report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut s = String::from("name\trouge_l\tfact_precision\tvacuous\tskipped\tn\tfingerprint\n");
    for r in reports {
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\n",
            r.name, r.rouge_l, r.fact_precision, r.vacuous, r.skipped, r.n, r.fingerprint
        ));
    }
    s
}
