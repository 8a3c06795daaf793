//! Splitting a source into important and irrelevant positions, either from
//! decoder cross-attention or from static entity annotations, and masking
//! the important ones out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{SpecialTokens, TokenId};

/// Disjoint cover of the non-pad source positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPartition {
    /// Sorted.
    pub important: Vec<usize>,
    /// Sorted.
    pub irrelevant: Vec<usize>,
    pub proportion: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedDocument {
    pub tokens: Vec<TokenId>,
    /// Positions now holding the mask id, sorted.
    pub masked_positions: Vec<usize>,
    /// Requested positions left alone because they hold BOS, EOS or PAD.
    pub skipped: Vec<usize>,
}

/// `clamp(ceil(ρ·n), 1, n−1)`
pub fn important_count(n: usize, rho: f64) -> usize {
    let k = (rho * n as f64).ceil() as usize;
    k.clamp(1, n.saturating_sub(1).max(1))
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("proportion must lie strictly between 0 and 1, got {rho}")))
    }
}

/// Top positions by score among `eligible` ones, sorted by index.
pub fn select_important_where(attn: &[f64], eligible: &[bool], rho: f64) -> Result<Vec<usize>> {
    check_rho(rho)?;
    if attn.len() != eligible.len() {
        return Err(Error::Shape(format!("{} scores for {} positions", attn.len(), eligible.len())));
    }
    let mut candidates: Vec<usize> = (0..attn.len()).filter(|&j| eligible[j]).collect();
    if candidates.len() < 2 {
        return Err(Error::Partition(format!("{} selectable positions, need at least 2", candidates.len())));
    }
    let k = important_count(candidates.len(), rho);
    // stable sort keeps lower indices first among equal scores
    candidates.sort_by(|&a, &b| attn[b].total_cmp(&attn[a]));
    candidates.truncate(k);
    candidates.sort_unstable();
    Ok(candidates)
}

/// [`select_important_where`] with every position eligible.
pub fn select_important(attn: &[f64], rho: f64) -> Result<Vec<usize>> {
    select_important_where(attn, &vec![true; attn.len()], rho)
}

/// Partition where every position is both selectable and part of the cover.
pub fn partition(attn: &[f64], rho: f64) -> Result<AttentionPartition> {
    let important = select_important(attn, rho)?;
    let irrelevant = (0..attn.len()).filter(|j| important.binary_search(j).is_err()).collect();
    Ok(AttentionPartition { important, irrelevant, proportion: rho })
}

/// Partition of an encoded source. Only content tokens can be important;
/// BOS and EOS always land in the irrelevant set and PAD in neither.
pub fn partition_source(
    attn: &[f64],
    source: &[TokenId],
    specials: SpecialTokens,
    rho: f64,
) -> Result<AttentionPartition> {
    if attn.len() != source.len() {
        return Err(Error::Shape(format!("{} scores for a source of length {}", attn.len(), source.len())));
    }
    let eligible: Vec<bool> = source.iter().map(|&t| !specials.is_structural(t)).collect();
    let important = select_important_where(attn, &eligible, rho)?;
    let irrelevant = (0..source.len())
        .filter(|&j| source[j] != specials.pad && important.binary_search(&j).is_err())
        .collect();
    Ok(AttentionPartition { important, irrelevant, proportion: rho })
}

/// Attend masks for the important and irrelevant branches. An empty
/// irrelevant set (document-level static partition) attends to the whole
/// important set instead.
pub fn partition_to_masks(p: &AttentionPartition, source_len: usize) -> (Vec<bool>, Vec<bool>) {
    let to_mask = |positions: &[usize]| {
        let mut m = vec![false; source_len];
        for &j in positions {
            m[j] = true;
        }
        m
    };
    let mask_u = to_mask(&p.important);
    let mask_r = if p.irrelevant.is_empty() { mask_u.clone() } else { to_mask(&p.irrelevant) };
    (mask_u, mask_r)
}

/// Replaces `positions` by the mask id, leaving BOS, EOS and PAD untouched.
pub fn mask_document(source: &[TokenId], positions: &[usize], specials: SpecialTokens) -> Result<MaskedDocument> {
    let mut tokens = source.to_vec();
    let mut masked = Vec::new();
    let mut skipped = Vec::new();
    for &j in positions {
        let Some(t) = tokens.get_mut(j) else {
            return Err(Error::Index { index: j, len: source.len() });
        };
        if specials.is_structural(source[j]) {
            skipped.push(j);
        } else {
            *t = specials.mask;
            masked.push(j);
        }
    }
    masked.sort_unstable();
    masked.dedup();
    skipped.sort_unstable();
    skipped.dedup();
    Ok(MaskedDocument { tokens, masked_positions: masked, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StaticStrategy {
    Token,
    Sentence,
    Document,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticPartition {
    pub partition: AttentionPartition,
    /// No entity was annotated, so the document strategy was used.
    pub fell_back: bool,
}

/// Partition from annotations rather than attention. `entity_spans` are
/// half-open ranges in source coordinates; sentences end at any token in
/// `delimiters`.
pub fn static_partition(
    source: &[TokenId],
    strategy: StaticStrategy,
    entity_spans: &[[usize; 2]],
    delimiters: &[TokenId],
    specials: SpecialTokens,
) -> Result<StaticPartition> {
    let content: Vec<bool> = source.iter().map(|&t| !specials.is_structural(t)).collect();
    let mut entity = vec![false; source.len()];
    for &[s, e] in entity_spans {
        if s >= e || e > source.len() {
            return Err(Error::Index { index: e, len: source.len() });
        }
        for j in s..e {
            entity[j] = content[j];
        }
    }
    let fell_back = strategy != StaticStrategy::Document && !entity.iter().any(|&x| x);
    let strategy = if fell_back { StaticStrategy::Document } else { strategy };
    let important_mask: Vec<bool> = match strategy {
        StaticStrategy::Document => source.iter().map(|&t| t != specials.pad).collect(),
        StaticStrategy::Token => entity,
        StaticStrategy::Sentence => {
            let mut out = vec![false; source.len()];
            let mut start = 0;
            for j in 0..=source.len() {
                let boundary = j == source.len() || delimiters.contains(&source[j]);
                if boundary {
                    let end = (j + 1).min(source.len());
                    if (start..end).any(|k| entity[k]) {
                        for k in start..end {
                            out[k] = content[k];
                        }
                    }
                    start = end;
                }
            }
            out
        }
    };
    let important: Vec<usize> = (0..source.len()).filter(|&j| important_mask[j]).collect();
    let irrelevant: Vec<usize> = (0..source.len())
        .filter(|&j| source[j] != specials.pad && !important_mask[j] && strategy != StaticStrategy::Document)
        .collect();
    let n = source.iter().filter(|&&t| t != specials.pad).count().max(1);
    let proportion = important.len() as f64 / n as f64;
    Ok(StaticPartition { partition: AttentionPartition { important, irrelevant, proportion }, fell_back })
}
