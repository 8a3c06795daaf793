//! decode, evaluate, probe-bias, sweep and ablate.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cfsum_core::data::{self, SyntheticExample};
use cfsum_core::decode::{DebiasConfig, Debiaser, Profile, TraceRecord};
use cfsum_core::eval::{self, EvalReport, ABLATIONS};
use cfsum_core::model::Stage;
use cfsum_core::Model;
use serde::Serialize;

use crate::artifacts::{self, DataDir, SummaryRecord};
use crate::config::{fingerprint_of, write_run_record, RunConfig};
use crate::{DecodeArgs, ModelsArgs, UsageError};

#[derive(Serialize)]
struct TraceLine<'a> {
    id: &'a str,
    steps: Vec<TraceRecord>,
}

fn resolve_debias(cfg: &RunConfig, a: &DecodeArgs) -> Result<DebiasConfig> {
    let mut d = match &a.profile {
        Some(p) => Profile::parse(p)
            .ok_or_else(|| UsageError(format!("unknown profile {p:?}; expected extractive or abstractive")))?
            .config(),
        None => cfg.debias.clone(),
    };
    if let Some(x) = a.alpha {
        d.alpha = x;
    }
    if let Some(x) = a.beta {
        d.beta = x;
    }
    if let Some(x) = a.rho {
        d.rho = x;
    }
    if let Some(x) = a.beam {
        d.beam_size = x;
    }
    if a.no_ecm {
        d.alpha = 0.0;
    }
    if a.no_ict {
        d.beta = 0.0;
    }
    if a.no_dda {
        d.use_dda = false;
    }
    d.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(d)
}

pub fn decode(mut cfg: RunConfig, a: &DecodeArgs) -> Result<()> {
    cfg.debias = resolve_debias(&cfg, a)?;
    let d = &cfg.debias;
    if a.trace && d.beam_size != 1 {
        return Err(UsageError("--trace needs greedy decoding (--beam 1)".into()).into());
    }
    let data = DataDir::load(&a.data)?;
    let base = artifacts::load_model(&a.base, Stage::Base, &data.vocab)?;
    let cf = match (&a.cf, d.beta > 0.0) {
        (Some(p), true) => Some(artifacts::load_model(p, Stage::Ict, &data.vocab)?),
        (None, true) => return Err(UsageError("beta > 0 needs --cf (or pass --no-ict)".into()).into()),
        _ => None,
    };
    let head = match (&a.head, d.use_dda) {
        (Some(p), true) => Some(artifacts::load_head(p, &base)?),
        (None, true) => return Err(UsageError("predictor gating needs --head (or pass --no-dda)".into()).into()),
        _ => None,
    };
    let docs: Vec<SyntheticExample> = match &a.input {
        Some(p) => data::read_jsonl(p)?,
        None => data.test_limited(cfg.eval.limit).to_vec(),
    };
    write_run_record(&a.out, "decode", &cfg)?;
    let dz = Debiaser::new(&base, cf.as_ref(), head.as_ref(), cfg.debias.clone())?;
    let eos = data.vocab.specials().eos;
    let mut summaries = Vec::with_capacity(docs.len());
    let mut traces = Vec::new();
    for ex in &docs {
        let source = data.vocab.encode_wrapped(&ex.document);
        let mut ids = if a.trace {
            let (ids, steps) = dz.trace(&source)?;
            traces.push(TraceLine { id: &ex.id, steps: steps.iter().map(|s| s.record()).collect() });
            ids
        } else {
            dz.decode(&source)?
        };
        if ids.last() == Some(&eos) {
            ids.pop();
        }
        summaries.push(SummaryRecord { id: ex.id.clone(), tokens: data.vocab.decode(&ids) });
    }
    data::write_jsonl(&a.out.join("summaries.jsonl"), &summaries)?;
    if a.trace {
        data::write_jsonl(&a.out.join("traces.jsonl"), &traces)?;
    }
    log::info!("decoded {} documents into {}", summaries.len(), a.out.display());
    Ok(())
}

fn write_reports(out: &Path, reports: &[EvalReport]) -> Result<()> {
    artifacts::write_json(&out.join("reports.json"), &reports)?;
    fs::write(out.join("table.tsv"), eval::comparison_table(reports))?;
    for r in reports {
        log::info!("{}: rouge_l {:.4} fact_precision {:.4} vacuous {}", r.name, r.rouge_l, r.fact_precision, r.vacuous);
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, data_dir: &Path, specs: &[String], with_gold: bool, out: &Path) -> Result<()> {
    if specs.is_empty() && !with_gold {
        return Err(UsageError("nothing to evaluate: pass --summaries NAME=FILE or --with-gold".into()).into());
    }
    let data = DataDir::load(data_dir)?;
    let by_id: HashMap<&str, &SyntheticExample> =
        data.test.iter().chain(&data.train).map(|e| (e.id.as_str(), e)).collect();
    let mut reports = Vec::new();
    for spec in specs {
        let (name, path) =
            spec.split_once('=').ok_or_else(|| UsageError(format!("--summaries expects NAME=FILE, got {spec:?}")))?;
        let path = Path::new(path);
        let records: Vec<SummaryRecord> = data::read_jsonl(path)?;
        let mut examples = Vec::with_capacity(records.len());
        for r in &records {
            let ex = by_id.get(r.id.as_str()).ok_or_else(|| UsageError(format!("{}: unknown id {}", path.display(), r.id)))?;
            examples.push((*ex).clone());
        }
        let outputs: Vec<Vec<String>> = records.into_iter().map(|r| r.tokens).collect();
        let mut report = eval::score_outputs(name, &examples, &outputs, &data.grammar)?;
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        report.fingerprint = fingerprint_of(&String::from_utf8_lossy(&bytes));
        reports.push(report);
    }
    if with_gold {
        let test = data.test_limited(cfg.eval.limit);
        let outputs: Vec<Vec<String>> = test.iter().map(|e| e.summary.clone()).collect();
        reports.push(eval::score_outputs("gold", test, &outputs, &data.grammar)?);
    }
    write_run_record(out, "evaluate", cfg)?;
    write_reports(out, &reports)
}

pub fn probe_bias(cfg: &RunConfig, base_path: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let data = DataDir::load(data_dir)?;
    let base = artifacts::load_model(base_path, Stage::Base, &data.vocab)?;
    let test = data.test_limited(cfg.eval.limit);
    write_run_record(out, "probe-bias", cfg)?;
    let results =
        eval::bias_probe(&base, &data.vocab, test, &data.grammar, &cfg.eval.probe_proportions, cfg.debias.max_steps)?;
    let mut table = String::from("proportion\trouge_l\tfact_precision\tvacuous\tskipped\tn\n");
    for (q, r) in &results {
        writeln!(table, "{q}\t{}\t{}\t{}\t{}\t{}", r.rouge_l, r.fact_precision, r.vacuous, r.skipped, r.n)?;
        log::info!("proportion {q}: fact_precision {:.4} rouge_l {:.4}", r.fact_precision, r.rouge_l);
    }
    let reports: Vec<&EvalReport> = results.iter().map(|(_, r)| r).collect();
    artifacts::write_json(&out.join("probe.json"), &reports)?;
    fs::write(out.join("probe.tsv"), table)?;
    Ok(())
}

struct Models {
    data: DataDir,
    base: Model<f32>,
    cf: Model<f32>,
    head: cfsum_core::dda::PredictorHead,
}

impl Models {
    fn load(a: &ModelsArgs) -> Result<Self> {
        let data = DataDir::load(&a.data)?;
        let base = artifacts::load_model(&a.base, Stage::Base, &data.vocab)?;
        let cf = artifacts::load_model(&a.cf, Stage::Ict, &data.vocab)?;
        let head = artifacts::load_head(&a.head, &base)?;
        Ok(Self { data, base, cf, head })
    }

    fn evaluate(&self, name: &str, config: DebiasConfig, test: &[SyntheticExample]) -> Result<EvalReport> {
        let cf = (config.beta > 0.0).then_some(&self.cf);
        let head = config.use_dda.then_some(&self.head);
        let dz = Debiaser::new(&self.base, cf, head, config)?;
        Ok(eval::evaluate_decoder(name, &dz, &self.data.vocab, test, &self.data.grammar)?)
    }
}

/// `(alpha, beta)` points of the configured grid.
pub fn sweep_grid(cfg: &RunConfig) -> Vec<(f64, f64)> {
    match &cfg.eval.sweep_betas {
        Some(betas) => cfg.eval.sweep.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b))).collect(),
        None => cfg.eval.sweep.iter().map(|&x| (x, x)).collect(),
    }
}

pub fn sweep(cfg: &RunConfig, a: &ModelsArgs) -> Result<()> {
    let grid = sweep_grid(cfg);
    if grid.is_empty() {
        return Err(UsageError("the sweep grid is empty".into()).into());
    }
    for &(x, y) in &grid {
        DebiasConfig { alpha: x, beta: y, ..cfg.debias.clone() }.validate().map_err(|e| UsageError(e.to_string()))?;
    }
    let m = Models::load(a)?;
    let test = m.data.test_limited(cfg.eval.limit);
    write_run_record(&a.out, "sweep", cfg)?;
    let mut table = String::from("alpha\tbeta\trouge_l\tfact_precision\tvacuous\tn\tfingerprint\n");
    let mut reports = Vec::with_capacity(grid.len());
    for (alpha, beta) in grid {
        let mut point = cfg.clone();
        point.debias.alpha = alpha;
        point.debias.beta = beta;
        let mut r = m.evaluate(&format!("alpha={alpha} beta={beta}"), point.debias.clone(), test)?;
        r.fingerprint = point.fingerprint();
        writeln!(table, "{alpha}\t{beta}\t{}\t{}\t{}\t{}\t{}", r.rouge_l, r.fact_precision, r.vacuous, r.n, r.fingerprint)?;
        log::info!("alpha {alpha} beta {beta}: rouge_l {:.4} fact_precision {:.4}", r.rouge_l, r.fact_precision);
        reports.push(r);
    }
    artifacts::write_json(&a.out.join("sweep.json"), &reports)?;
    fs::write(a.out.join("sweep.tsv"), table)?;
    Ok(())
}

pub fn ablate(cfg: &RunConfig, a: &ModelsArgs) -> Result<()> {
    let m = Models::load(a)?;
    let test = m.data.test_limited(cfg.eval.limit);
    write_run_record(&a.out, "ablate", cfg)?;
    let mut reports = Vec::with_capacity(ABLATIONS.len());
    for ab in ABLATIONS {
        let mut point = cfg.clone();
        point.debias = ab.apply(&cfg.debias);
        let mut r = m.evaluate(ab.name, point.debias.clone(), test)?;
        r.fingerprint = point.fingerprint();
        reports.push(r);
    }
    write_reports(&a.out, &reports)
}
