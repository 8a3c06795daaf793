//! gen-data and the three training commands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cfsum_core::data::{self, generate_corpus};
use cfsum_core::ict::IctLogRecord;
use cfsum_core::model::{load_archive, save_archive, Group, Stage};
use cfsum_core::optim::Adam;
use cfsum_core::train::{self, encode_all, BaseLogRecord};
use cfsum_core::{pipeline, Model};
use serde_json::json;

use crate::artifacts::{self, DataCard, DataDir, CARD_FILE, HEAD_DIR, MODEL_DIR, OPTIMIZER_DIR, TEST_FILE, TRAIN_FILE};
use crate::config::{write_run_record, RunConfig};
use crate::StageArgs;

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_corpus(&cfg.data)?;
    write_run_record(out, "gen-data", cfg)?;
    data::write_jsonl(&out.join(TRAIN_FILE), &ds.train)?;
    data::write_jsonl(&out.join(TEST_FILE), &ds.test)?;
    let card = DataCard {
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        vocab_size: ds.inventory.vocabulary().size(),
        inventory: ds.inventory,
        spec: cfg.data.clone(),
    };
    artifacts::write_json(&out.join(CARD_FILE), &card)?;
    log::info!("wrote {} train and {} test examples to {}", card.n_train, card.n_test, out.display());
    Ok(())
}

fn checksums(model: &Model<f32>) -> serde_json::Value {
    json!({
        "embeddings": model.params().checksum(Some(Group::Embeddings)),
        "encoder": model.params().checksum(Some(Group::Encoder)),
        "decoder": model.params().checksum(Some(Group::Decoder)),
    })
}

pub fn train_base(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    let data = DataDir::load(data_dir)?;
    let model_cfg = cfsum_core::ModelConfig { vocab_size: data.vocab.size(), ..cfg.model.clone() };
    let log_path = out.join("train_log.jsonl");
    let (mut model, mut adam, mut log) = if resume {
        let model = artifacts::load_model(&out.join(MODEL_DIR), Stage::Base, &data.vocab)?;
        if *model.config() != model_cfg {
            bail!("--resume: the checkpoint in {} was built with a different [model] section", out.display());
        }
        let opt = load_archive(&out.join(OPTIMIZER_DIR))?;
        let step = opt.manifest.meta["step"].as_u64().context("optimizer checkpoint lacks its step count")?;
        let tensors: Vec<_> =
            opt.manifest.tensors.iter().map(|t| t.name.clone()).zip(opt.arrays.iter().cloned()).collect();
        let adam = Adam::import(cfg.train.optimizer.clone(), model.params(), step, &tensors)?;
        let mut log: Vec<BaseLogRecord> = if log_path.exists() { data::read_jsonl(&log_path)? } else { Vec::new() };
        log.retain(|r| r.step <= step);
        log::info!("resuming at step {step}");
        (model, adam, log)
    } else {
        (Model::<f32>::new(model_cfg)?, Adam::new(cfg.train.optimizer.clone()), Vec::new())
    };
    if adam.steps_taken() > cfg.train.steps {
        bail!("checkpoint is at step {}, past the configured {} steps", adam.steps_taken(), cfg.train.steps);
    }
    write_run_record(out, "train-base", cfg)?;
    let encoded = encode_all(&data.vocab, &data.train);
    if encoded.is_empty() && cfg.train.steps > 0 {
        bail!("the training split is empty");
    }
    let every = (cfg.train.steps / 20).max(1);
    train::train_base(&mut model, &mut adam, &encoded, &cfg.train, |r| {
        if r.step % every == 0 {
            log::info!("step {} loss {:.4}", r.step, r.loss);
        }
        log.push(r.clone());
    })?;
    let accuracy = train::next_token_accuracy(&model, &encode_all(&data.vocab, &data.test))?;
    let meta = json!({ "steps": adam.steps_taken(), "fingerprint": cfg.fingerprint() });
    model.save_checkpoint(&out.join(MODEL_DIR), Stage::Base, meta)?;
    let (step, moments) = adam.export(model.params());
    save_archive(&out.join(OPTIMIZER_DIR), Stage::Base, model.config(), &moments, json!({ "step": step }))?;
    data::write_jsonl(&log_path, &log)?;
    let report = json!({
        "steps": step,
        "final_loss": log.last().map(|r| r.loss),
        "heldout_next_token_accuracy": accuracy,
        "checksum": model.params().checksum(None),
    });
    artifacts::write_json(&out.join("report.json"), &report)?;
    log::info!("held-out next-token accuracy {accuracy:.4}");
    Ok(())
}

pub fn train_ict(cfg: &RunConfig, args: &StageArgs) -> Result<()> {
    let data = DataDir::load(&args.data)?;
    let base = artifacts::load_model(&args.base, Stage::Base, &data.vocab)?;
    if data.train.is_empty() {
        bail!("the training split is empty");
    }
    write_run_record(&args.out, "train-ict", cfg)?;
    let encoded = encode_all(&data.vocab, &data.train);
    let prepared = pipeline::ict_dataset(&base, &data.vocab, &data.train, &encoded, &cfg.ict)?;
    let mut log: Vec<IctLogRecord> = Vec::new();
    let every = (cfg.ict.steps / 20).max(1);
    let cf = cfsum_core::ict::train_ict(&base, &prepared, &cfg.ict, |r| {
        if r.step % every == 0 {
            log::info!("step {} unl {:.4} xent {:.4} kl {:.4}", r.step, r.l_unl, r.l_xent, r.l_kl);
        }
        log.push(*r);
    })?;
    let (before, after) = (checksums(&base), checksums(&cf));
    let frozen_ok = before["embeddings"] == after["embeddings"] && before["encoder"] == after["encoder"];
    if !frozen_ok {
        bail!("frozen parameter groups changed during counterfactual training");
    }
    cf.save_checkpoint(&args.out.join(MODEL_DIR), Stage::Ict, json!({ "fingerprint": cfg.fingerprint() }))?;
    data::write_jsonl(&args.out.join("ict_log.jsonl"), &log)?;
    let report = json!({
        "steps": cfg.ict.steps,
        "final": log.last(),
        "base_checksums": before,
        "cf_checksums": after,
        "frozen_groups_unchanged": frozen_ok,
    });
    artifacts::write_json(&args.out.join("report.json"), &report)?;
    Ok(())
}

pub fn train_dda(cfg: &RunConfig, args: &StageArgs) -> Result<()> {
    let data = DataDir::load(&args.data)?;
    let base = artifacts::load_model(&args.base, Stage::Base, &data.vocab)?;
    write_run_record(&args.out, "train-dda", cfg)?;
    let before = base.params().checksum(None);
    let documents = &data.train[..cfg.dda.n_documents.min(data.train.len())];
    let mut log = Vec::new();
    let outcome =
        pipeline::train_dda(&base, &data.vocab, documents, &data.card.inventory.numbers, &cfg.dda, |r| log.push(r.clone()))?;
    let after = base.params().checksum(None);
    if before != after {
        bail!("the base model changed during predictor training");
    }
    outcome.head.save(&args.out.join(HEAD_DIR), base.config(), json!({ "fingerprint": cfg.fingerprint() }))?;
    data::write_jsonl(&args.out.join("labeled.jsonl"), &outcome.labeled)?;
    data::write_jsonl(&args.out.join("dda_log.jsonl"), &log)?;
    let report = json!({
        "steps": cfg.dda.steps,
        "train_rows": outcome.train_rows,
        "holdout_rows": outcome.holdout_rows,
        "train_accuracy": outcome.train_accuracy,
        "holdout_accuracy": outcome.holdout_accuracy,
        "base_checksum": before,
        "base_unchanged": before == after,
    });
    artifacts::write_json(&args.out.join("report.json"), &report)?;
    log::info!("predictor accuracy train {:.4} held-out {:.4}", outcome.train_accuracy, outcome.holdout_accuracy);
    Ok(())
}
