use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cfsum_core::data::CorpusSpec;
use cfsum_core::dda::DdaConfig;
use cfsum_core::decode::DebiasConfig;
use cfsum_core::ict::IctConfig;
use cfsum_core::train::TrainConfig;
use cfsum_core::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const SEED_ENV: &str = "COFACT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_proportions: Vec<f64>,
    /// Debiasing ratios of the sweep, applied to α and β together unless `sweep_betas` is set.
    pub sweep: Vec<f64>,
    /// When present the sweep runs the full α × β grid.
    pub sweep_betas: Option<Vec<f64>>,
    /// Evaluate only the first `limit` documents.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_proportions: vec![0.0, 0.25, 0.5, 0.75, 0.9],
            sweep: vec![0.0, 0.05, 0.15, 0.4, 0.8],
            sweep_betas: None,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every section's seed when set.
    pub seed: Option<u64>,
    pub data: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ict: IctConfig,
    pub dda: DdaConfig,
    pub debias: DebiasConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data: CorpusSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ict: IctConfig::default(),
            dda: DdaConfig::default(),
            debias: DebiasConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies the seed override and
    /// validates the sections.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| UsageError(format!("{SEED_ENV}={v:?} is not an integer")))?;
            log::info!("seed {seed} taken from {SEED_ENV}");
            cfg.seed = Some(seed);
        }
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.model.seed = s;
            self.train.seed = s;
            self.ict.seed = s;
            self.dda.seed = s;
        }
    }

    fn validate(&self) -> Result<()> {
        let check = |r: cfsum_core::Result<()>| r.map_err(|e| UsageError(e.to_string()));
        check(self.ict.validate())?;
        check(self.debias.validate())?;
        for &q in &self.eval.probe_proportions {
            if !(0.0..1.0).contains(&q) {
                return Err(UsageError(format!("probe proportion {q} outside [0, 1)")).into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(&self.to_json())
    }
}

pub fn fingerprint_of(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    fingerprint: String,
    config: &'a RunConfig,
}

/// Writes `run.json` (command, fingerprint, resolved config) into `out`.
pub fn write_run_record(out: &Path, command: &str, cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let fingerprint = cfg.fingerprint();
    let rec = RunRecord { command, fingerprint: fingerprint.clone(), config: cfg };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(fingerprint)
}
