//! Debiased decoding. Each step combines three next-token distributions:
//! the base model on the source, the base model on the source with its
//! most-attended positions masked, and the counterfactual model on the
//! source. The last two are subtracted from the first, scaled by `alpha`,
//! `beta` and the predictor gate.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::dda::PredictorHead;
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, Model};
use crate::scalar::Scalar;
use crate::vocab::{SpecialTokens, TokenId, Vocabulary};

/// What a decoding step needs from a model.
#[derive(Clone, Debug, PartialEq)]
pub struct StepView {
    pub distribution: Array1<f64>,
    pub hidden: Array1<f64>,
    /// One score per source position.
    pub attention: Array1<f64>,
}

/// A sequence-to-sequence model seen one step at a time.
pub trait Summarizer {
    type Memory;

    fn specials(&self) -> SpecialTokens;

    fn encode(&self, source: &[TokenId]) -> Result<Self::Memory>;

    /// Next-token view after `prefix` (which starts with BOS).
    fn step(&self, memory: &Self::Memory, prefix: &[TokenId]) -> Result<StepView>;
}

impl<T: Scalar> Summarizer for Model<T> {
    type Memory = EncoderOutput<T>;

    fn specials(&self) -> SpecialTokens {
        Vocabulary::SPECIALS
    }

    fn encode(&self, source: &[TokenId]) -> Result<Self::Memory> {
        Model::encode(self, source, Vocabulary::SPECIALS.pad)
    }

    fn step(&self, memory: &Self::Memory, prefix: &[TokenId]) -> Result<StepView> {
        let out = self.decode_step(memory, prefix, Vocabulary::SPECIALS.bos, None)?;
        let f = |a: Array1<T>| a.mapv(|x| x.to_f64_lossy());
        Ok(StepView { distribution: f(out.distribution), hidden: f(out.hidden), attention: f(out.cross_attention) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Masking proportion for the masked pass.
    pub rho: f64,
    pub beam_size: usize,
    /// Gate the subtraction with the predictor; otherwise the gate is 1.
    pub use_dda: bool,
    pub score_floor: f64,
    pub max_steps: usize,
    /// Beam search: each hypothesis masks the source by its own attention.
    /// When false, all hypotheses share the mask of the leading hypothesis.
    pub per_hypothesis_mask: bool,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Profile::Abstractive.config()
    }
}

/// Preset coefficient sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// alpha 0.05, beta 0.01, beam 20
    Extractive,
    /// alpha 0.15, beta 0.15, beam 12
    Abstractive,
}

impl Profile {
    pub fn config(self) -> DebiasConfig {
        let (alpha, beta, beam_size, rho) = match self {
            Profile::Extractive => (0.05, 0.01, 20, 0.5),
            Profile::Abstractive => (0.15, 0.15, 12, 0.1),
        };
        DebiasConfig {
            alpha,
            beta,
            rho,
            beam_size,
            use_dda: true,
            score_floor: 1e-12,
            max_steps: 30,
            per_hypothesis_mask: true,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "extractive" => Some(Profile::Extractive),
            "abstractive" => Some(Profile::Abstractive),
            _ => None,
        }
    }
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.beam_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("beam_size and max_steps must be positive".into()));
        }
        if !(self.score_floor > 0.0) {
            return Err(Error::Config("score_floor must be positive".into()));
        }
        Ok(())
    }
}

/// `p_full − α·p_masked`
pub fn ecm_score(p_full: ArrayView1<f64>, p_masked: ArrayView1<f64>, alpha: f64) -> Array1<f64> {
    &p_full - &(&p_masked * alpha)
}

/// `p_full − β·p_cf`
pub fn ict_score(p_full: ArrayView1<f64>, p_cf: ArrayView1<f64>, beta: f64) -> Array1<f64> {
    &p_full - &(&p_cf * beta)
}

/// `p_full − s̃·(α·p_masked + β·p_cf)`; missing branches contribute nothing.
pub fn combined_score(
    p_full: ArrayView1<f64>,
    p_masked: Option<ArrayView1<f64>>,
    p_cf: Option<ArrayView1<f64>>,
    s_tilde: f64,
    alpha: f64,
    beta: f64,
) -> Array1<f64> {
    let mut out = p_full.to_owned();
    if let Some(m) = p_masked {
        out.zip_mut_with(&m, |o, &x| *o -= s_tilde * (alpha * x));
    }
    if let Some(c) = p_cf {
        out.zip_mut_with(&c, |o, &x| *o -= s_tilde * (beta * x));
    }
    out
}

/// Everything computed at one step for one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct StepScores {
    pub p_full: Array1<f64>,
    /// `None` when the masked pass was skipped or the source could not be partitioned.
    pub p_masked: Option<Array1<f64>>,
    pub p_cf: Option<Array1<f64>>,
    pub s_tilde: f64,
    pub debiased: Array1<f64>,
    pub masked_positions: Vec<usize>,
    /// The source had too few content tokens to partition; `alpha` acted as 0.
    pub degenerate: bool,
}

/// One trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub chosen: TokenId,
    pub s_tilde: f64,
    pub masked_positions: Vec<usize>,
    pub top5_full: Vec<(TokenId, f64)>,
    pub top5_debiased: Vec<(TokenId, f64)>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub chosen: TokenId,
    pub scores: StepScores,
}

impl TraceStep {
    pub fn record(&self) -> TraceRecord {
        TraceRecord {
            t: self.t,
            chosen: self.chosen,
            s_tilde: self.scores.s_tilde,
            masked_positions: self.scores.masked_positions.clone(),
            top5_full: top_k(self.scores.p_full.view(), 5),
            top5_debiased: top_k(self.scores.debiased.view(), 5),
            degenerate: self.scores.degenerate,
        }
    }
}

/// Largest `k` entries, ties to the lower index.
pub fn top_k(v: ArrayView1<f64>, k: usize) -> Vec<(TokenId, f64)> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx.into_iter().take(k).map(|i| (i as TokenId, v[i])).collect()
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// The base model, optional counterfactual model and optional predictor.
pub struct Debiaser<'a, M: Summarizer> {
    pub base: &'a M,
    pub cf: Option<&'a M>,
    pub head: Option<&'a PredictorHead>,
    pub config: DebiasConfig,
}

struct Memories<M> {
    source: Vec<TokenId>,
    base: M,
    cf: Option<M>,
}

impl<'a, M: Summarizer> Debiaser<'a, M> {
    pub fn new(base: &'a M, cf: Option<&'a M>, head: Option<&'a PredictorHead>, config: DebiasConfig) -> Result<Self> {
        config.validate()?;
        if config.use_dda && head.is_none() {
            return Err(Error::Config("predictor gating requested without a predictor head".into()));
        }
        Ok(Self { base, cf, head, config })
    }

    /// Plain decoding of the base model: no masked pass, no counterfactual, no gate.
    pub fn plain(base: &'a M, mut config: DebiasConfig) -> Result<Self> {
        config.alpha = 0.0;
        config.beta = 0.0;
        config.use_dda = false;
        Self::new(base, None, None, config)
    }

    fn memories(&self, source: &[TokenId]) -> Result<Memories<M::Memory>> {
        Ok(Memories {
            source: source.to_vec(),
            base: self.base.encode(source)?,
            cf: match self.cf {
                Some(cf) if self.config.beta > 0.0 => Some(cf.encode(source)?),
                _ => None,
            },
        })
    }

    fn wants_masked_pass(&self) -> bool {
        self.config.alpha > 0.0 || (self.config.use_dda && (self.config.beta > 0.0 && self.cf.is_some()))
    }

    fn scores(&self, mem: &Memories<M::Memory>, prefix: &[TokenId]) -> Result<StepScores> {
        self.scores_masked_by(mem, prefix, prefix)
    }

    /// Step scores for `prefix`, with the masked source chosen by the
    /// attention the base model pays while extending `mask_prefix`.
    fn scores_masked_by(
        &self,
        mem: &Memories<M::Memory>,
        prefix: &[TokenId],
        mask_prefix: &[TokenId],
    ) -> Result<StepScores> {
        let cfg = &self.config;
        let sp = self.base.specials();
        let full = self.base.step(&mem.base, prefix)?;
        let mut p_masked = None;
        let mut hidden_masked = None;
        let mut masked_positions = Vec::new();
        let mut degenerate = false;
        if self.wants_masked_pass() {
            let attn = if mask_prefix == prefix {
                full.attention.to_vec()
            } else {
                self.base.step(&mem.base, mask_prefix)?.attention.to_vec()
            };
            match attention::partition_source(&attn, &mem.source, sp, cfg.rho) {
                Ok(p) => {
                    let masked = attention::mask_document(&mem.source, &p.important, sp)?;
                    masked_positions = masked.masked_positions;
                    let m = self.base.encode(&masked.tokens)?;
                    let view = self.base.step(&m, prefix)?;
                    p_masked = Some(view.distribution);
                    hidden_masked = Some(view.hidden);
                }
                Err(Error::Partition(_)) => degenerate = true,
                Err(e) => return Err(e),
            }
        }
        let p_cf = match (&mem.cf, self.cf) {
            (Some(m), Some(cf)) => Some(cf.step(m, prefix)?.distribution),
            _ => None,
        };
        let s_tilde = match (cfg.use_dda, self.head) {
            (true, Some(head)) => {
                let hp = hidden_masked.as_ref().unwrap_or(&full.hidden);
                head.gate(full.hidden.view(), hp.view())?.s_tilde
            }
            _ => 1.0,
        };
        let alpha = if p_masked.is_some() { cfg.alpha } else { 0.0 };
        let debiased = combined_score(
            full.distribution.view(),
            p_masked.as_ref().filter(|_| alpha > 0.0).map(|a| a.view()),
            p_cf.as_ref().map(|a| a.view()),
            s_tilde,
            alpha,
            cfg.beta,
        );
        Ok(StepScores { p_full: full.distribution, p_masked, p_cf, s_tilde, debiased, masked_positions, degenerate })
    }

    /// Greedy decoding with the full per-step record. The returned tokens
    /// exclude BOS and end with EOS unless `max_steps` was reached.
    pub fn trace(&self, source: &[TokenId]) -> Result<(Vec<TokenId>, Vec<TraceStep>)> {
        let sp = self.base.specials();
        let mem = self.memories(source)?;
        let mut prefix = vec![sp.bos];
        let mut steps = Vec::new();
        for t in 0..self.config.max_steps {
            let scores = self.scores(&mem, &prefix)?;
            let chosen = argmax(scores.debiased.view()) as TokenId;
            prefix.push(chosen);
            steps.push(TraceStep { t, chosen, scores });
            if chosen == sp.eos {
                break;
            }
        }
        Ok((prefix.split_off(1), steps))
    }

    pub fn greedy(&self, source: &[TokenId]) -> Result<Vec<TokenId>> {
        Ok(self.trace(source)?.0)
    }

    /// Beam search over accumulated `ln(max(score, floor))`, without length
    /// normalization. See [`DebiasConfig::per_hypothesis_mask`].
    pub fn beam(&self, source: &[TokenId]) -> Result<Vec<TokenId>> {
        let sp = self.base.specials();
        let b = self.config.beam_size;
        let floor = self.config.score_floor;
        let mem = self.memories(source)?;
        let mut alive: Vec<(Vec<TokenId>, f64)> = vec![(vec![sp.bos], 0.0)];
        let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for _ in 0..self.config.max_steps {
            // (total, raw step score, hypothesis, token)
            let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
            let leader = alive[0].0.clone();
            for (h, (prefix, acc)) in alive.iter().enumerate() {
                let mask_prefix = if self.config.per_hypothesis_mask { prefix } else { &leader };
                let s = self.scores_masked_by(&mem, prefix, mask_prefix)?.debiased;
                for (v, &x) in s.iter().enumerate() {
                    candidates.push((acc + x.max(floor).ln(), x, h, v));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(b.1.total_cmp(&a.1))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut next = Vec::with_capacity(b);
            let mut taken = 0;
            for (total, _, h, v) in candidates {
                if taken == b {
                    break;
                }
                let mut seq = alive[h].0.clone();
                seq.push(v as TokenId);
                if v as TokenId == sp.eos {
                    finished.push((seq, total));
                } else {
                    next.push((seq, total));
                }
                taken += 1;
            }
            alive = next;
            if finished.len() >= b || alive.is_empty() {
                break;
            }
        }
        finished.extend(alive);
        let best = finished
            .into_iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.1.total_cmp(&b.1).then(j.cmp(i)))
            .map(|(_, h)| h.0)
            .ok_or_else(|| Error::Config("beam search produced no hypothesis".into()))?;
        Ok(best[1..].to_vec())
    }

    /// Greedy when `beam_size` is 1, beam search otherwise.
    pub fn decode(&self, source: &[TokenId]) -> Result<Vec<TokenId>> {
        if self.config.beam_size == 1 {
            self.greedy(source)
        } else {
            self.beam(source)
        }
    }
}
