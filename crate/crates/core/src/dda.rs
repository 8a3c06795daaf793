//! Per-step consistency predictor: corrupted training summaries with token
//! labels, a linear two-class head over paired hidden states, and the
//! smoothing that turns its inconsistency score into a debiasing gate.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::data::{SyntheticExample, lcs_len};
use crate::error::{Error, Result};
use crate::model::{load_archive, save_archive, Model, ModelConfig, Stage};
use crate::scalar::Scalar;
use crate::train::batch_at;
use crate::vocab::{TokenId, Vocabulary};

pub const CONSISTENT: u8 = 0;
pub const INCONSISTENT: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Gold,
    Corrupted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSummary {
    pub doc_id: String,
    pub tokens: Vec<String>,
    /// 0 = consistent, 1 = inconsistent, one per token.
    pub labels: Vec<u8>,
    pub origin: Origin,
}

impl LabeledSummary {
    pub fn gold(ex: &SyntheticExample) -> Self {
        Self {
            doc_id: ex.id.clone(),
            tokens: ex.summary.clone(),
            labels: vec![CONSISTENT; ex.summary.len()],
            origin: Origin::Gold,
        }
    }
}

/// Marks tokens of `corrupted` outside one longest common subsequence with
/// `gold` as inconsistent. Among optimal alignments the one matching the
/// latest possible positions of `corrupted` is used.
pub fn label_tokens<T: PartialEq>(corrupted: &[T], gold: &[T]) -> Vec<u8> {
    let (n, m) = (corrupted.len(), gold.len());
    // suffix table: dp[i][j] = LCS of corrupted[i..], gold[j..]
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if corrupted[i] == gold[j] { dp[i + 1][j + 1] + 1 } else { dp[i + 1][j].max(dp[i][j + 1]) };
        }
    }
    let mut labels = vec![INCONSISTENT; n];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if corrupted[i] == gold[j] && dp[i][j] == dp[i + 1][j + 1] + 1 {
            labels[i] = CONSISTENT;
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(labels.iter().filter(|&&l| l == CONSISTENT).count(), lcs_len(corrupted, gold));
    labels
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Swap {
    /// Replace a gold object with a distractor object of the same relation.
    Object,
    /// Replace a gold subject with a distractor subject.
    Subject,
    /// Replace a gold number with another number from the document.
    Number,
}

/// Swaps one or two entity slots of the gold summary for conflicting entities
/// from the same document. `None` when nothing can be swapped.
pub fn corrupt_summary(
    ex: &SyntheticExample,
    numbers: &[String],
    rng: &mut impl Rng,
) -> Option<LabeledSummary> {
    if ex.distractor_facts.is_empty() {
        return None;
    }
    // (token position, replacement candidates)
    let mut slots: Vec<(usize, Vec<String>)> = Vec::new();
    let mut pos = 0;
    for fact in &ex.gold_facts {
        // summary sentences are "S R O ."
        let (s_pos, o_pos) = (pos, pos + 2);
        pos += 4;
        for kind in [Swap::Object, Swap::Subject, Swap::Number] {
            let candidates: Vec<String> = match kind {
                Swap::Object => ex
                    .distractor_facts
                    .iter()
                    .filter(|d| d.relation == fact.relation && d.object != fact.object)
                    .map(|d| d.object.clone())
                    .collect(),
                Swap::Subject => ex
                    .distractor_facts
                    .iter()
                    .filter(|d| d.subject != fact.subject)
                    .map(|d| d.subject.clone())
                    .collect(),
                Swap::Number => {
                    if !numbers.contains(&fact.object) {
                        continue;
                    }
                    ex.document
                        .iter()
                        .filter(|w| numbers.contains(w) && **w != fact.object)
                        .cloned()
                        .collect()
                }
            };
            let mut candidates = candidates;
            candidates.sort();
            candidates.dedup();
            if candidates.is_empty() {
                continue;
            }
            let at = if kind == Swap::Subject { s_pos } else { o_pos };
            match slots.iter_mut().find(|(p, _)| *p == at) {
                Some((_, c)) => {
                    c.extend(candidates);
                    c.sort();
                    c.dedup();
                }
                None => slots.push((at, candidates)),
            }
        }
    }
    if slots.is_empty() {
        return None;
    }
    slots.sort_by_key(|(p, _)| *p);
    let n = rng.gen_range(1..=2usize).min(slots.len());
    let chosen: Vec<&(usize, Vec<String>)> = slots.choose_multiple(rng, n).collect();
    let mut tokens = ex.summary.clone();
    for (at, candidates) in chosen {
        tokens[*at] = candidates[rng.gen_range(0..candidates.len())].clone();
    }
    debug_assert_ne!(tokens, ex.summary);
    let labels = label_tokens(&tokens, &ex.summary);
    Some(LabeledSummary { doc_id: ex.id.clone(), tokens, labels, origin: Origin::Corrupted })
}

/// Gold and corrupted summaries for every example. Deterministic in `seed`.
pub fn build_labeled_set(examples: &[SyntheticExample], numbers: &[String], seed: u64) -> Vec<LabeledSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * examples.len());
    for ex in examples {
        out.push(LabeledSummary::gold(ex));
        if let Some(c) = corrupt_summary(ex, numbers, &mut rng) {
            out.push(c);
        }
    }
    out
}

/// `[h; h'; h ⊙ h'; h − h']`
pub fn predictor_features(h: ArrayView1<f64>, h_prime: ArrayView1<f64>) -> Result<Array1<f64>> {
    if h.len() != h_prime.len() {
        return Err(Error::Shape(format!("hidden states of length {} and {}", h.len(), h_prime.len())));
    }
    let d = h.len();
    let mut z = Array1::zeros(4 * d);
    for i in 0..d {
        z[i] = h[i];
        z[d + i] = h_prime[i];
        z[2 * d + i] = h[i] * h_prime[i];
        z[3 * d + i] = h[i] - h_prime[i];
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    pub s_c: f64,
    pub s_ic: f64,
    pub s_tilde: f64,
}

/// `1 − (2s − 1)²` below one half, 1 from there on.
pub fn smooth(s_ic: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s_ic) {
        return Err(Error::Domain(s_ic));
    }
    Ok(if s_ic <= 0.5 { 1.0 - (2.0 * s_ic - 1.0).powi(2) } else { 1.0 })
}

/// Linear two-class head; row 0 scores "consistent", row 1 "inconsistent".
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorHead {
    /// `2 × 4d`
    pub w: Array2<f64>,
    pub b: [f64; 2],
}

impl PredictorHead {
    pub fn zeros(d_model: usize) -> Self {
        Self { w: Array2::zeros((2, 4 * d_model)), b: [0.0; 2] }
    }

    pub fn d_model(&self) -> usize {
        self.w.ncols() / 4
    }

    fn logits(&self, z: ArrayView1<f64>) -> [f64; 2] {
        [self.w.row(0).dot(&z) + self.b[0], self.w.row(1).dot(&z) + self.b[1]]
    }

    pub fn predict(&self, z: ArrayView1<f64>) -> Result<ConsistencyScore> {
        if z.len() != self.w.ncols() {
            return Err(Error::Shape(format!("feature length {} for a head expecting {}", z.len(), self.w.ncols())));
        }
        let [a, b] = self.logits(z);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s_c = ea / (ea + eb);
        let s_ic = eb / (ea + eb);
        Ok(ConsistencyScore { s_c, s_ic, s_tilde: smooth(s_ic.clamp(0.0, 1.0))? })
    }

    /// Smoothed inconsistency gate for a pair of hidden states.
    pub fn gate(&self, h: ArrayView1<f64>, h_prime: ArrayView1<f64>) -> Result<ConsistencyScore> {
        self.predict(predictor_features(h, h_prime)?.view())
    }

    pub fn save(&self, dir: &Path, config: &ModelConfig, meta: serde_json::Value) -> Result<()> {
        let tensors = vec![
            ("head.weight".to_string(), "head".to_string(), self.w.mapv(|x| x as f32)),
            (
                "head.bias".to_string(),
                "head".to_string(),
                Array2::from_shape_vec((1, 2), vec![self.b[0] as f32, self.b[1] as f32]).unwrap(),
            ),
        ];
        save_archive(dir, Stage::Dda, config, &tensors, meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelConfig)> {
        let archive = load_archive(dir)?;
        archive.require_stage(Stage::Dda)?;
        let find = |name: &str| {
            archive
                .manifest
                .tensors
                .iter()
                .position(|t| t.name == name)
                .map(|i| &archive.arrays[i])
                .ok_or_else(|| Error::Checkpoint(format!("predictor checkpoint lacks {name}")))
        };
        let w = find("head.weight")?;
        let b = find("head.bias")?;
        let d = archive.manifest.config.d_model;
        if w.dim() != (2, 4 * d) || b.dim() != (1, 2) {
            return Err(Error::Checkpoint(format!("predictor shapes {:?}, {:?} do not fit d_model {d}", w.dim(), b.dim())));
        }
        let head = Self { w: w.mapv(f64::from), b: [f64::from(b[[0, 0]]), f64::from(b[[0, 1]])] };
        Ok((head, archive.manifest.config.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdaConfig {
    /// Masking proportion for the counterfactual pass.
    pub proportion: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of labeled documents held out for accuracy.
    pub holdout: f64,
    /// Training documents the labeled set is built from.
    pub n_documents: usize,
}

impl Default for DdaConfig {
    fn default() -> Self {
        Self { proportion: 0.5, learning_rate: 1e-4, steps: 5000, batch_size: 8, seed: 0, holdout: 0.1, n_documents: 600 }
    }
}

/// Per-step hidden states of the base model on the full source and on the
/// step's masked source, for a teacher-forced summary. Step 0 is the BOS row.
pub struct TeacherPass {
    pub hidden: Array2<f64>,
    pub hidden_masked: Array2<f64>,
    /// Number of positions masked at each step.
    pub masked_counts: Vec<usize>,
}

pub fn dda_teacher_pass<T: Scalar>(
    base: &Model<T>,
    source: &[TokenId],
    summary: &[TokenId],
    rho: f64,
) -> Result<TeacherPass> {
    let sp = Vocabulary::SPECIALS;
    let mut target = Vec::with_capacity(summary.len() + 2);
    target.push(sp.bos);
    target.extend_from_slice(summary);
    target.push(sp.eos);
    let full = base.forward_teacher_forced(source, &target, sp.bos, sp.eos, sp.pad, None)?;
    let d = base.config().d_model;
    let rows = full.len();
    let mut hidden = Array2::zeros((rows, d));
    let mut hidden_masked = Array2::zeros((rows, d));
    let mut masked_counts = Vec::with_capacity(rows);
    for (t, step) in full.iter().enumerate() {
        hidden.row_mut(t).assign(&step.hidden.mapv(|x| x.to_f64_lossy()));
        let attn: Vec<f64> = step.cross_attention.iter().map(|x| x.to_f64_lossy()).collect();
        let p = attention::partition_source(&attn, source, sp, rho)?;
        let masked = attention::mask_document(source, &p.important, sp)?;
        masked_counts.push(masked.masked_positions.len());
        let enc = base.encode(&masked.tokens, sp.pad)?;
        let out = base.decode_step(&enc, &target[..=t], sp.bos, None)?;
        hidden_masked.row_mut(t).assign(&out.hidden.mapv(|x| x.to_f64_lossy()));
    }
    Ok(TeacherPass { hidden, hidden_masked, masked_counts })
}

/// Feature rows and labels for one labeled summary. Row `t` is the decoder
/// state that predicts summary token `t`; the final row predicts EOS and is
/// labeled consistent.
pub fn summary_features<T: Scalar>(
    base: &Model<T>,
    vocab: &Vocabulary,
    document: &[String],
    labeled: &LabeledSummary,
    rho: f64,
) -> Result<(Array2<f64>, Vec<u8>)> {
    let source = vocab.encode_wrapped(document);
    let summary = vocab.encode(&labeled.tokens);
    let pass = dda_teacher_pass(base, &source, &summary, rho)?;
    let rows = pass.hidden.nrows();
    let d = base.config().d_model;
    let mut z = Array2::zeros((rows, 4 * d));
    for t in 0..rows {
        z.row_mut(t).assign(&predictor_features(pass.hidden.row(t), pass.hidden_masked.row(t))?);
    }
    let mut labels = Vec::with_capacity(rows);
    labels.extend_from_slice(&labeled.labels);
    labels.push(CONSISTENT);
    Ok((z, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdaLogRecord {
    pub step: u64,
    pub loss: f64,
}

/// Inverse-frequency weights for classes 0 and 1.
pub fn class_weights(labels: &[u8]) -> [f64; 2] {
    let n = labels.len() as f64;
    let ic = labels.iter().filter(|&&l| l == INCONSISTENT).count() as f64;
    let c = n - ic;
    let w = |k: f64| if k > 0.0 { n / (2.0 * k) } else { 0.0 };
    [w(c), w(ic)]
}

/// Trains the head by Adam on class-weighted cross-entropy over token rows.
pub fn train_predictor(
    features: &Array2<f64>,
    labels: &[u8],
    config: &DdaConfig,
    mut on_step: impl FnMut(&DdaLogRecord),
) -> Result<PredictorHead> {
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", features.nrows(), labels.len())));
    }
    let d4 = features.ncols();
    let mut head = PredictorHead { w: Array2::zeros((2, d4)), b: [0.0; 2] };
    if config.steps == 0 || labels.is_empty() {
        return Ok(head);
    }
    let weights = class_weights(labels);
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, config.learning_rate);
    let mut mw = Array2::<f64>::zeros((2, d4));
    let mut vw = Array2::<f64>::zeros((2, d4));
    let mut mb = [0.0f64; 2];
    let mut vb = [0.0f64; 2];
    for step in 0..config.steps {
        let batch = batch_at(config.seed, step, config.batch_size, labels.len());
        let mut gw = Array2::<f64>::zeros((2, d4));
        let mut gb = [0.0f64; 2];
        let mut loss = 0.0;
        for &i in &batch {
            let z = features.row(i);
            let y = labels[i] as usize;
            let s = head.predict(z)?;
            let p = [s.s_c, s.s_ic];
            let wgt = weights[y];
            loss -= wgt * p[y].max(1e-300).ln();
            for k in 0..2 {
                let g = wgt * (p[k] - if k == y { 1.0 } else { 0.0 });
                gw.row_mut(k).scaled_add(g, &z);
                gb[k] += g;
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("predictor loss {loss} at step {}", step + 1)));
        }
        gw /= n;
        let t = (step + 1) as i32;
        let lr_t = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        ndarray::Zip::from(&mut head.w).and(&mut mw).and(&mut vw).and(&gw).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr_t * *m / (v.sqrt() + eps);
        });
        for k in 0..2 {
            let g = gb[k] / n;
            mb[k] = b1 * mb[k] + (1.0 - b1) * g;
            vb[k] = b2 * vb[k] + (1.0 - b2) * g * g;
            head.b[k] -= lr_t * mb[k] / (vb[k].sqrt() + eps);
        }
        on_step(&DdaLogRecord { step: step + 1, loss });
    }
    Ok(head)
}

/// Fraction of rows whose more likely class matches the label.
pub fn token_accuracy(head: &PredictorHead, features: &Array2<f64>, labels: &[u8]) -> Result<f64> {
    let mut hits = 0usize;
    for (z, &y) in features.rows().into_iter().zip(labels) {
        let s = head.predict(z)?;
        let guess = if s.s_ic > s.s_c { INCONSISTENT } else { CONSISTENT };
        hits += usize::from(guess == y);
    }
    Ok(if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 })
}
