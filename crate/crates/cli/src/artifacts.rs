//! Reading and writing the files commands exchange.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfsum_core::data::{self, CorpusSpec, Grammar, Inventory, SyntheticExample};
use cfsum_core::dda::PredictorHead;
use cfsum_core::model::{load_archive, Stage};
use cfsum_core::{Model, Vocabulary};
use serde::{Deserialize, Serialize};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CARD_FILE: &str = "data_card.json";
pub const MODEL_DIR: &str = "model";
pub const OPTIMIZER_DIR: &str = "optimizer";
pub const HEAD_DIR: &str = "head";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataCard {
    pub n_train: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub inventory: Inventory,
    pub spec: CorpusSpec,
}

/// A generated corpus directory.
pub struct DataDir {
    pub card: DataCard,
    pub vocab: Vocabulary,
    pub grammar: Grammar,
    pub train: Vec<SyntheticExample>,
    pub test: Vec<SyntheticExample>,
}

impl DataDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let card: DataCard = read_json(&dir.join(CARD_FILE))?;
        let vocab = card.inventory.vocabulary();
        let grammar = Grammar::from_inventory(&card.inventory);
        let train = data::read_jsonl(&dir.join(TRAIN_FILE))?;
        let test = data::read_jsonl(&dir.join(TEST_FILE))?;
        Ok(Self { card, vocab, grammar, train, test })
    }

    /// The test split, cut to `limit` documents.
    pub fn test_limited(&self, limit: Option<usize>) -> &[SyntheticExample] {
        &self.test[..limit.unwrap_or(usize::MAX).min(self.test.len())]
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Accepts either a checkpoint directory or a run directory holding one under `sub`.
pub fn resolve(path: &Path, sub: &str) -> PathBuf {
    let nested = path.join(sub);
    if nested.join(cfsum_core::model::MANIFEST_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Loads a model checkpoint written at `stage`, built for `vocab`.
pub fn load_model(path: &Path, stage: Stage, vocab: &Vocabulary) -> Result<Model<f32>> {
    let dir = resolve(path, MODEL_DIR);
    let archive = load_archive(&dir)?;
    archive.require_stage(stage)?;
    let model = Model::from_archive(&archive)?;
    if model.config().vocab_size != vocab.size() {
        bail!(
            "{} was trained for a vocabulary of {} tokens, the data has {}",
            dir.display(),
            model.config().vocab_size,
            vocab.size()
        );
    }
    Ok(model)
}

/// Loads a predictor head and checks it fits `base`.
pub fn load_head(path: &Path, base: &Model<f32>) -> Result<PredictorHead> {
    let dir = resolve(path, HEAD_DIR);
    let (head, config) = PredictorHead::load(&dir)?;
    if config.vocab_size != base.config().vocab_size || config.d_model != base.config().d_model {
        bail!("predictor at {} was trained for a different base model", dir.display());
    }
    Ok(head)
}

/// One decoded summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    pub tokens: Vec<String>,
}
