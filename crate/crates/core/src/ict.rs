//! Training the counterfactual decoder: a copy of the base model whose
//! decoder learns to avoid gold tokens when attending to the important part
//! of the source, to produce them from the irrelevant part, and to keep the
//! two predictive distributions apart.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attention::{self, StaticStrategy};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{CrossMask, Group, Model};
use crate::optim::{self, Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::train::{batch_at, EncodedExample};
use crate::vocab::{TokenId, Vocabulary};

/// Where the important/irrelevant split comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionStrategy {
    /// Per decoding step, from the base model's cross-attention.
    #[default]
    Dynamic,
    Token,
    Sentence,
    Document,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IctConfig {
    pub gamma: f64,
    pub lambda_kl: f64,
    /// Fraction of content positions treated as important.
    pub proportion: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Floor applied to probabilities inside logarithms.
    pub prob_floor: f64,
    pub strategy: PartitionStrategy,
}

impl Default for IctConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_kl: 0.01,
            proportion: 0.5,
            learning_rate: 5e-4,
            steps: 5000,
            batch_size: 8,
            seed: 0,
            prob_floor: 1e-9,
            strategy: PartitionStrategy::Dynamic,
        }
    }
}

impl IctConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.lambda_kl >= 0.0) {
            return Err(Error::Config("gamma and lambda_kl must be non-negative".into()));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1e-3) {
            return Err(Error::Config(format!("prob_floor {} outside (0, 1e-3)", self.prob_floor)));
        }
        if !(self.proportion > 0.0 && self.proportion < 1.0) {
            return Err(Error::Config(format!("proportion {} outside (0, 1)", self.proportion)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_unl: f64,
    pub l_xent: f64,
    pub l_kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IctLogRecord {
    pub step: u64,
    pub l_unl: f64,
    pub l_xent: f64,
    pub l_kl: f64,
    pub total: f64,
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// `−Σ log(1 − p)` over per-step gold probabilities.
pub fn unlikelihood_loss(probs: &[f64], eps: f64) -> f64 {
    -probs.iter().map(|&p| (1.0 - clamp(p, eps)).ln()).sum::<f64>()
}

/// `−Σ log p` over per-step gold probabilities.
pub fn xent_loss(probs: &[f64], eps: f64) -> f64 {
    -probs.iter().map(|&p| clamp(p, eps).ln()).sum::<f64>()
}

/// `−Σ_t KL(u_t ‖ r_t)` with one distribution per row.
pub fn kl_loss(dist_u: ArrayView2<f64>, dist_r: ArrayView2<f64>, eps: f64) -> f64 {
    let mut kl = 0.0;
    for (u, r) in dist_u.rows().into_iter().zip(dist_r.rows()) {
        for (&p, &q) in u.iter().zip(r) {
            if p > 0.0 {
                kl += p * (p.ln() - q.clamp(eps, 1.0).ln());
            }
        }
    }
    -kl
}

/// Static annotations needed by the non-dynamic strategies.
#[derive(Clone, Copy, Debug)]
pub struct Annotations<'a> {
    /// Entity spans in source coordinates.
    pub entity_spans: &'a [[usize; 2]],
    pub delimiters: &'a [TokenId],
}

/// One training pair with the frozen encoder output and the per-step attend masks.
#[derive(Clone, Debug)]
pub struct IctExample<T> {
    pub id: String,
    pub target: Vec<TokenId>,
    pub memory: Arc<Array2<T>>,
    pub source_mask: Vec<bool>,
    /// One mask per decoder row (`target.len() − 1` rows).
    pub masks_u: Vec<Vec<bool>>,
    pub masks_r: Vec<Vec<bool>>,
}

/// Computes the partitions from the frozen `base` model once per example.
pub fn prepare_example<T: Scalar>(
    base: &Model<T>,
    ex: &EncodedExample,
    config: &IctConfig,
    annotations: Option<Annotations<'_>>,
) -> Result<IctExample<T>> {
    let sp = Vocabulary::SPECIALS;
    let enc = base.encode(&ex.source, sp.pad)?;
    let rows = ex.target.len().saturating_sub(1);
    let (masks_u, masks_r) = match config.strategy {
        PartitionStrategy::Dynamic => {
            let steps = base.forward_teacher_forced(&ex.source, &ex.target, sp.bos, sp.eos, sp.pad, None)?;
            let mut us = Vec::with_capacity(rows);
            let mut rs = Vec::with_capacity(rows);
            for s in &steps {
                let attn: Vec<f64> = s.cross_attention.iter().map(|x| x.to_f64_lossy()).collect();
                let p = attention::partition_source(&attn, &ex.source, sp, config.proportion)?;
                let (u, r) = attention::partition_to_masks(&p, ex.source.len());
                us.push(u);
                rs.push(r);
            }
            (us, rs)
        }
        strategy => {
            let a = annotations
                .ok_or_else(|| Error::Config("static partition strategies need entity annotations".into()))?;
            let kind = match strategy {
                PartitionStrategy::Token => StaticStrategy::Token,
                PartitionStrategy::Sentence => StaticStrategy::Sentence,
                _ => StaticStrategy::Document,
            };
            let p = attention::static_partition(&ex.source, kind, a.entity_spans, a.delimiters, sp)?;
            let (u, r) = attention::partition_to_masks(&p.partition, ex.source.len());
            (vec![u; rows], vec![r; rows])
        }
    };
    Ok(IctExample { id: ex.id.clone(), target: ex.target.clone(), memory: enc.memory, source_mask: enc.source_mask, masks_u, masks_r })
}

/// Tape handles of the ICT objective for one example.
#[derive(Clone, Copy, Debug)]
pub struct IctVars {
    pub total: Var,
    pub l_unl: Var,
    pub l_xent: Var,
    pub l_kl: Var,
    /// `T × V` distributions under the important and irrelevant masks.
    pub probs_u: Var,
    pub probs_r: Var,
}

pub fn ict_graph<T: Scalar>(
    cf: &Model<T>,
    g: &mut Graph<T>,
    ex: &IctExample<T>,
    config: &IctConfig,
) -> Result<IctVars> {
    let input = &ex.target[..ex.target.len() - 1];
    let gold: Vec<usize> = ex.target[1..].iter().map(|&t| t as usize).collect();
    let eps = T::from_f64_lossy(config.prob_floor);
    let hi = T::one() - eps;
    let memory = g.constant_shared(Arc::clone(&ex.memory));

    let vu = cf.decode_graph(g, memory, &ex.source_mask, input, CrossMask::PerRow(&ex.masks_u))?;
    let vr = cf.decode_graph(g, memory, &ex.source_mask, input, CrossMask::PerRow(&ex.masks_r))?;
    let probs_u = g.softmax(vu.logits);
    let probs_r = g.softmax(vr.logits);

    let pu = g.pick_cols(probs_u, &gold);
    let not_pu = g.affine(pu, -T::one(), T::one());
    let log_not_pu = g.clamp_ln(not_pu, eps, hi);
    let s = g.sum(log_not_pu);
    let l_unl = g.scale(s, -T::one());

    let pr = g.pick_cols(probs_r, &gold);
    let log_pr = g.clamp_ln(pr, eps, hi);
    let s = g.sum(log_pr);
    let l_xent = g.scale(s, -T::one());

    let log_u = g.log_softmax(vu.logits);
    let log_r = g.clamp_ln(probs_r, eps, T::one());
    let diff = g.sub(log_u, log_r);
    let terms = g.mul(probs_u, diff);
    let kl = g.sum(terms);
    let l_kl = g.scale(kl, -T::one());

    let a = g.scale(l_xent, T::from_f64_lossy(config.gamma));
    let b = g.scale(l_kl, T::from_f64_lossy(config.lambda_kl));
    let total = g.add(l_unl, a);
    let total = g.add(total, b);
    Ok(IctVars { total, l_unl, l_xent, l_kl, probs_u, probs_r })
}

fn breakdown<T: Scalar>(g: &Graph<T>, v: &IctVars) -> LossBreakdown {
    LossBreakdown {
        l_unl: g.scalar(v.l_unl).to_f64_lossy(),
        l_xent: g.scalar(v.l_xent).to_f64_lossy(),
        l_kl: g.scalar(v.l_kl).to_f64_lossy(),
        total: g.scalar(v.total).to_f64_lossy(),
    }
}

pub fn ict_step_losses<T: Scalar>(cf: &Model<T>, ex: &IctExample<T>, config: &IctConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let v = ict_graph(cf, &mut g, ex, config)?;
    Ok(breakdown(&g, &v))
}

/// Component means over `examples`.
pub fn mean_losses<T: Scalar>(cf: &Model<T>, examples: &[IctExample<T>], config: &IctConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for ex in examples {
        let b = ict_step_losses(cf, ex, config)?;
        acc.l_unl += b.l_unl;
        acc.l_xent += b.l_xent;
        acc.l_kl += b.l_kl;
        acc.total += b.total;
    }
    let n = examples.len().max(1) as f64;
    Ok(LossBreakdown { l_unl: acc.l_unl / n, l_xent: acc.l_xent / n, l_kl: acc.l_kl / n, total: acc.total / n })
}

/// Copies `base`, freezes embeddings and encoder, and trains the decoder.
pub fn train_ict(
    base: &Model<f32>,
    data: &[IctExample<f32>],
    config: &IctConfig,
    mut on_step: impl FnMut(&IctLogRecord),
) -> Result<Model<f32>> {
    config.validate()?;
    let mut cf = base.clone();
    cf.set_trainable(Group::Embeddings, false);
    cf.set_trainable(Group::Encoder, false);
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
    for step in 0..config.steps {
        let batch = batch_at(config.seed, step, config.batch_size, data.len());
        let mut acc = Default::default();
        let mut sum = LossBreakdown::default();
        for &i in &batch {
            let ex = &data[i];
            let mut g = Graph::new();
            let v = ict_graph(&cf, &mut g, ex, config)?;
            let b = breakdown(&g, &v);
            if !b.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "ICT loss {b:?} at step {} on example {} (batch {:?})",
                    step + 1,
                    ex.id,
                    batch.iter().map(|&j| data[j].id.as_str()).collect::<Vec<_>>()
                )));
            }
            optim::accumulate(&mut acc, g.backward(v.total));
            sum.l_unl += b.l_unl;
            sum.l_xent += b.l_xent;
            sum.l_kl += b.l_kl;
            sum.total += b.total;
        }
        let n = batch.len() as f64;
        optim::scale(&mut acc, 1.0 / n as f32);
        adam.step(cf.params_mut(), &acc)?;
        on_step(&IctLogRecord {
            step: step + 1,
            l_unl: sum.l_unl / n,
            l_xent: sum.l_xent / n,
            l_kl: sum.l_kl / n,
            total: sum.total / n,
        });
    }
    Ok(cf)
}
