//! Acceptance checks, one test per criterion. Every test prints a single
//! `criterion N: PASS|FAIL` line to stderr before asserting, so the summary
//! shows up even when the harness captures output.
//!
//! Criteria 3 and 6 to 10 share one trained pipeline per seed (20k training
//! documents, 300 test documents). Training all five seeds takes a while;
//! setting `CFSUM_ACCEPTANCE_CACHE` to a directory keeps the trained models
//! between runs.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use cfsum_core::attention::{important_count, mask_document, partition, partition_source};
use cfsum_core::data::{generate_corpus, read_jsonl, rouge_l, write_jsonl, CorpusSpec, Dataset, FactTriple, Grammar};
use cfsum_core::dda::{predictor_features, smooth, DdaConfig, PredictorHead};
use cfsum_core::decode::{DebiasConfig, Debiaser, Profile, StepView, Summarizer};
use cfsum_core::eval::{bias_probe, evaluate_decoder, EvalReport, ABLATIONS};
use cfsum_core::graph::{Graph, Var};
use cfsum_core::ict::{self, ict_graph, kl_loss, prepare_example, unlikelihood_loss, xent_loss, IctConfig};
use cfsum_core::model::{Group, Stage};
use cfsum_core::optim::Adam;
use cfsum_core::pipeline::{self, DdaOutcome};
use cfsum_core::train::{self, encode_all, EncodedExample, TrainConfig};
use cfsum_core::{Error, Model, ModelConfig, SpecialTokens, TokenId, Vocabulary};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: &str, started: Instant) {
    let word = if pass { "PASS" } else { "FAIL" };
    let secs = started.elapsed().as_secs_f64();
    let _ = writeln!(std::io::stderr(), "criterion {n}: {word} {detail} [{secs:.1}s]");
    assert!(pass, "criterion {n}: {detail}");
}

fn note(line: &str) {
    let _ = writeln!(std::io::stderr(), "  {line}");
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- criterion 1

fn run_prop<S: Strategy>(
    failures: &mut Vec<String>,
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) {
    let mut runner = TestRunner::new(PtConfig { cases: 256, failure_persistence: None, ..PtConfig::default() });
    if let Err(e) = runner.run(&strategy, test) {
        failures.push(format!("{name}: {e}"));
    }
}

fn distribution_rows(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.01f64..1.0, rows * cols).prop_map(move |v| {
        let mut m = Array2::from_shape_vec((rows, cols), v).unwrap();
        for mut r in m.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        m
    })
}

#[test]
fn criterion_01_invariants() {
    let started = Instant::now();
    let sp = Vocabulary::SPECIALS;
    let mut failures = Vec::new();

    run_prop(
        &mut failures,
        "partition cover",
        (prop::collection::vec(0.0f64..1.0, 2..40), 0.01f64..0.99),
        |(attn, rho)| {
            let n = attn.len();
            let p = partition(&attn, rho).unwrap();
            let mut all: Vec<usize> = p.important.iter().chain(&p.irrelevant).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let k = ((rho * n as f64).ceil() as usize).clamp(1, n - 1);
            prop_assert_eq!(p.important.len(), k);
            prop_assert_eq!(important_count(n, rho), k);
            let lo = p.important.iter().map(|&j| attn[j]).fold(f64::INFINITY, f64::min);
            let hi = p.irrelevant.iter().map(|&j| attn[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo >= hi);
            Ok(())
        },
    );

    let token = prop_oneof![Just(sp.pad), 5u32..20];
    run_prop(
        &mut failures,
        "source partition",
        (prop::collection::vec(token, 2..30), 0.01f64..0.99, any::<u64>()),
        |(body, rho, seed)| {
            let mut source = vec![sp.bos];
            source.extend(&body);
            source.push(sp.eos);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let attn: Vec<f64> = source.iter().map(|_| rng.gen::<f64>()).collect();
            let content: Vec<usize> = (0..source.len()).filter(|&j| !sp.is_structural(source[j])).collect();
            match partition_source(&attn, &source, sp, rho) {
                Err(Error::Partition(_)) => prop_assert!(content.len() < 2),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                Ok(p) => {
                    let m = content.len();
                    prop_assert_eq!(p.important.len(), ((rho * m as f64).ceil() as usize).clamp(1, m - 1));
                    prop_assert!(p.important.iter().all(|j| content.contains(j)));
                    prop_assert!(p.irrelevant.contains(&0) && p.irrelevant.contains(&(source.len() - 1)));
                    let mut all: Vec<usize> = p.important.iter().chain(&p.irrelevant).copied().collect();
                    all.sort_unstable();
                    let non_pad: Vec<usize> = (0..source.len()).filter(|&j| source[j] != sp.pad).collect();
                    prop_assert_eq!(all, non_pad);
                    let masked = mask_document(&source, &p.important, sp).unwrap();
                    prop_assert_eq!(&masked.masked_positions, &p.important);
                    for (j, (&a, &b)) in source.iter().zip(&masked.tokens).enumerate() {
                        prop_assert_eq!(b, if p.important.contains(&j) { sp.mask } else { a });
                    }
                }
            }
            Ok(())
        },
    );

    run_prop(&mut failures, "loss signs", prop::collection::vec(0.0f64..=1.0, 1..20), |probs| {
        prop_assert!(unlikelihood_loss(&probs, 1e-9) >= 0.0);
        prop_assert!(xent_loss(&probs, 1e-9) >= 0.0);
        Ok(())
    });

    run_prop(&mut failures, "kl sign", (1usize..6, 2usize..8).prop_flat_map(|(r, c)| (distribution_rows(r, c), distribution_rows(r, c))), |(u, r)| {
        let kl = kl_loss(u.view(), r.view(), 1e-12);
        prop_assert!(kl <= 1e-15, "kl {}", kl);
        prop_assert!(kl_loss(u.view(), u.view(), 1e-12).abs() <= 1e-12);
        let gap = (&u - &r).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if gap > 1e-3 {
            prop_assert!(kl < 0.0, "kl {} for a gap of {}", kl, gap);
        }
        Ok(())
    });

    // the same signs on the model-level objective
    let vocab = Vocabulary::with_words(["a", "b", "c", "d", "e", "."]).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ff: 8,
        max_source_len: 16,
        max_target_len: 10,
        vocab_size: vocab.size(),
        seed: 3,
        ..ModelConfig::default()
    };
    let base = Model::<f64>::new(cfg).unwrap();
    run_prop(
        &mut failures,
        "objective signs",
        (prop::collection::vec(5u32..11, 2..10), prop::collection::vec(5u32..11, 1..6), 0.1f64..0.9),
        |(doc, summary, proportion)| {
            let mut source = vec![sp.bos];
            source.extend(&doc);
            source.push(sp.eos);
            let mut target = vec![sp.bos];
            target.extend(&summary);
            target.push(sp.eos);
            let ic = IctConfig { proportion, ..IctConfig::default() };
            let ex = prepare_example(&base, &EncodedExample { id: "p".into(), source, target }, &ic, None).unwrap();
            let l = ict::ict_step_losses(&base, &ex, &ic).unwrap();
            prop_assert!(l.l_unl >= 0.0 && l.l_xent >= 0.0 && l.l_kl <= 0.0, "{:?}", l);
            Ok(())
        },
    );

    let smoothing = [(0.0, 0.0), (0.25, 0.75), (0.5, 1.0), (0.8, 1.0)];
    for (s, want) in smoothing {
        let got = smooth(s).unwrap();
        if got != want {
            failures.push(format!("smooth({s}) = {got}, expected {want}"));
        }
    }
    run_prop(&mut failures, "smooth range", (0.0f64..=1.0, 0.0f64..=1.0), |(a, b)| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (smooth(lo).unwrap(), smooth(hi).unwrap());
        prop_assert!((0.0..=1.0).contains(&x) && x <= y);
        Ok(())
    });
    if !matches!(smooth(1.5), Err(Error::Domain(_))) || !matches!(smooth(-0.1), Err(Error::Domain(_))) {
        failures.push("smooth accepted a score outside [0, 1]".into());
    }

    run_prop(
        &mut failures,
        "predictor normalization",
        (prop::collection::vec(-5.0f64..5.0, 26), prop::collection::vec(-3.0f64..3.0, 12)),
        |(params, z)| {
            let head = PredictorHead { w: Array2::from_shape_vec((2, 12), params[..24].to_vec()).unwrap(), b: [params[24], params[25]] };
            let s = head.predict(Array1::from(z).view()).unwrap();
            prop_assert!((s.s_c + s.s_ic - 1.0).abs() <= 1e-12);
            prop_assert!(s.s_c >= 0.0 && s.s_ic >= 0.0);
            Ok(())
        },
    );

    let z = predictor_features(array![1.0, 2.0].view(), array![3.0, -1.0].view()).unwrap();
    if z != array![1.0, 2.0, 3.0, -1.0, 3.0, -2.0, -2.0, 3.0] {
        failures.push(format!("feature map gave {z}"));
    }

    for f in &failures {
        note(f);
    }
    let pass = failures.is_empty() && started.elapsed().as_secs() < 60;
    verdict(1, pass, &format!("{} invariant failures (budget 60s)", failures.len()), started);
}

// ---------------------------------------------------------------- criterion 2

struct GradCheck {
    relative_checked: usize,
    worst_relative: f64,
    absolute_checked: usize,
    worst_absolute: f64,
}

/// Central differences over random trainable coordinates until `want`
/// coordinates with a gradient of at least `1e-4` have been compared.
fn grad_check<F>(model: &mut Model<f64>, loss: F, want: usize, seed: u64) -> GradCheck
where
    F: Fn(&Model<f64>, &mut Graph<f64>) -> cfsum_core::Result<Var>,
{
    let h = 1e-5;
    let (_, grads) = model.loss_gradients(&loss).unwrap();
    let mut coords: Vec<(usize, usize, usize)> = grads
        .iter()
        .flat_map(|(&p, g)| (0..g.nrows()).flat_map(move |r| (0..g.ncols()).map(move |c| (p, r, c))))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = GradCheck { relative_checked: 0, worst_relative: 0.0, absolute_checked: 0, worst_absolute: 0.0 };
    let value = |m: &Model<f64>| m.loss_gradients(&loss).unwrap().0;
    for (p, r, c) in coords {
        if out.relative_checked >= want {
            break;
        }
        let original = model.params().get(p).value[[r, c]];
        model.params_mut().value_mut(p)[[r, c]] = original + h;
        let up = value(model);
        model.params_mut().value_mut(p)[[r, c]] = original - h;
        let down = value(model);
        model.params_mut().value_mut(p)[[r, c]] = original;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[&p][[r, c]];
        let scale = numeric.abs().max(analytic.abs());
        if scale >= 1e-4 {
            out.relative_checked += 1;
            out.worst_relative = out.worst_relative.max((numeric - analytic).abs() / scale);
        } else {
            out.absolute_checked += 1;
            out.worst_absolute = out.worst_absolute.max((numeric - analytic).abs());
        }
    }
    out
}

#[test]
fn criterion_02_gradients() {
    let started = Instant::now();
    let sp = Vocabulary::SPECIALS;
    let vocab = Vocabulary::with_words(["a", "b", "c", "d", "e", "f", "g", "."]).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ff: 8,
        max_source_len: 12,
        max_target_len: 8,
        vocab_size: vocab.size(),
        seed: 7,
        ..ModelConfig::default()
    };
    let mut base = Model::<f64>::new(cfg).unwrap();
    let n_params = base.params().count();
    let source = vec![sp.bos, 5, 6, 7, 8, 9, 12, sp.eos];
    let target = vec![sp.bos, 6, 8, 11, sp.eos];

    let mut results = Vec::new();
    let (s, t) = (source.clone(), target.clone());
    results.push(("base xent", grad_check(&mut base, move |m, g| m.xent_graph(g, &s, &t, sp.pad), 120, 1)));

    let ic = IctConfig::default();
    let ex = prepare_example(&base, &EncodedExample { id: "g".into(), source, target }, &ic, None).unwrap();
    let mut cf = base.clone();
    cf.set_trainable(Group::Embeddings, false);
    cf.set_trainable(Group::Encoder, false);
    type Pick = fn(&ict::IctVars) -> Var;
    let parts: [(&str, Pick); 3] = [("L_unl", |v| v.l_unl), ("L_xent", |v| v.l_xent), ("L_kl", |v| v.l_kl)];
    for (i, (name, pick)) in parts.into_iter().enumerate() {
        let (ex, ic) = (&ex, &ic);
        let check = grad_check(&mut cf, move |m, g| Ok(pick(&ict_graph(m, g, ex, ic)?)), 120, 2 + i as u64);
        results.push((name, check));
    }

    let mut pass = n_params <= 5000;
    for (name, r) in &results {
        note(&format!(
            "{name}: {} coordinates by relative error (worst {:.2e}), {} tiny ones by absolute error (worst {:.2e})",
            r.relative_checked, r.worst_relative, r.absolute_checked, r.worst_absolute
        ));
        pass &= r.relative_checked >= 100 && r.worst_relative <= 1e-4 && r.worst_absolute <= 1e-8;
    }
    pass &= started.elapsed().as_secs() < 120;
    verdict(2, pass, &format!("{n_params} parameters, 4 losses, relative error <= 1e-4 (budget 120s)"), started);
}

// ---------------------------------------------------------------- pipeline

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SWEEP: [f64; 5] = [0.0, 0.05, 0.15, 0.4, 0.8];

/// The debiasing setting the directional criteria use: the abstractive
/// coefficients with greedy decoding and half of the content masked.
fn full_config() -> DebiasConfig {
    DebiasConfig { rho: 0.5, beam_size: 1, ..Profile::Abstractive.config() }
}

struct Pipeline {
    seed: u64,
    data: Dataset,
    vocab: Vocabulary,
    grammar: Grammar,
    base: Model<f32>,
    cf: Model<f32>,
    dda: DdaOutcome,
    base_unchanged_by_dda: bool,
    frozen_unchanged_by_ict: bool,
    train_seconds: f64,
}

fn corpus_spec(seed: u64) -> CorpusSpec {
    CorpusSpec { n_train: 20_000, n_test: 300, seed, ..CorpusSpec::default() }
}

fn cached(dir: Option<&Path>, name: &str, train: impl FnOnce() -> Model<f32>, stage: Stage) -> Model<f32> {
    let Some(dir) = dir else { return train() };
    let path = dir.join(name);
    if let Ok((m, _)) = Model::<f32>::load_checkpoint(&path) {
        return m;
    }
    let m = train();
    m.save_checkpoint(&path, stage, serde_json::Value::Null).unwrap();
    m
}

fn build_pipeline(seed: u64) -> Pipeline {
    let started = Instant::now();
    let spec = corpus_spec(seed);
    let data = generate_corpus(&spec).unwrap();
    let vocab = data.inventory.vocabulary();
    let grammar = Grammar::from_inventory(&data.inventory);
    let encoded = encode_all(&vocab, &data.train);
    let cache: Option<PathBuf> = std::env::var_os("CFSUM_ACCEPTANCE_CACHE")
        .map(|d| PathBuf::from(d).join(format!("seed{seed}-train{}", spec.n_train)));

    let base = cached(
        cache.as_deref(),
        "base",
        || {
            let mut m = Model::<f32>::new(ModelConfig { vocab_size: vocab.size(), seed, ..ModelConfig::default() }).unwrap();
            let tc = TrainConfig { seed, ..TrainConfig::default() };
            let mut adam = Adam::new(tc.optimizer.clone());
            train::train_base(&mut m, &mut adam, &encoded, &tc, |_| {}).unwrap();
            m
        },
        Stage::Base,
    );
    let cf = cached(
        cache.as_deref(),
        "cf",
        || {
            let ic = IctConfig { seed, ..IctConfig::default() };
            let prepared = pipeline::ict_dataset(&base, &vocab, &data.train, &encoded, &ic).unwrap();
            ict::train_ict(&base, &prepared, &ic, |_| {}).unwrap()
        },
        Stage::Ict,
    );
    let frozen_unchanged_by_ict = [Group::Embeddings, Group::Encoder]
        .into_iter()
        .all(|g| base.params().checksum(Some(g)) == cf.params().checksum(Some(g)));

    let dc = DdaConfig { seed, ..DdaConfig::default() };
    let before = base.params().checksum(None);
    let docs = &data.train[..dc.n_documents];
    let dda = pipeline::train_dda(&base, &vocab, docs, &data.inventory.numbers, &dc, |_| {}).unwrap();
    let base_unchanged_by_dda = base.params().checksum(None) == before;
    let train_seconds = started.elapsed().as_secs_f64();
    note(&format!("seed {seed}: pipeline ready in {train_seconds:.0}s"));
    Pipeline { seed, data, vocab, grammar, base, cf, dda, base_unchanged_by_dda, frozen_unchanged_by_ict, train_seconds }
}

fn pipeline(seed: u64) -> &'static Pipeline {
    static CELLS: [OnceLock<Pipeline>; 5] = [const { OnceLock::new() }; 5];
    CELLS[seed as usize].get_or_init(|| build_pipeline(seed))
}

struct Evals {
    base: EvalReport,
    ablations: Vec<EvalReport>,
    sweep: Vec<EvalReport>,
    seconds: f64,
}

impl Evals {
    fn ablation(&self, name: &str) -> &EvalReport {
        self.ablations.iter().find(|r| r.name == name).unwrap()
    }
}

impl Pipeline {
    fn run(&self, name: &str, config: DebiasConfig) -> EvalReport {
        let cf = (config.beta > 0.0).then_some(&self.cf);
        let head = config.use_dda.then_some(&self.dda.head);
        let dz = Debiaser::new(&self.base, cf, head, config).unwrap();
        evaluate_decoder(name, &dz, &self.vocab, &self.data.test, &self.grammar).unwrap()
    }
}

fn evals(seed: u64) -> &'static Evals {
    static CELLS: [OnceLock<Evals>; 5] = [const { OnceLock::new() }; 5];
    CELLS[seed as usize].get_or_init(|| {
        let p = pipeline(seed);
        let started = Instant::now();
        let full = full_config();
        let dz = Debiaser::plain(&p.base, full.clone()).unwrap();
        let base = evaluate_decoder("base", &dz, &p.vocab, &p.data.test, &p.grammar).unwrap();
        let ablations = ABLATIONS.iter().map(|a| p.run(a.name, a.apply(&full))).collect();
        let sweep = SWEEP
            .iter()
            .map(|&x| p.run(&format!("alpha=beta={x}"), DebiasConfig { alpha: x, beta: x, ..full.clone() }))
            .collect();
        Evals { base, ablations, sweep, seconds: started.elapsed().as_secs_f64() }
    })
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_reduction() {
    let p = pipeline(0);
    let started = Instant::now();
    let docs: Vec<Vec<TokenId>> = p.data.test[..50].iter().map(|e| p.vocab.encode_wrapped(&e.document)).collect();
    let gate_off = PredictorHead { w: Array2::zeros(p.dda.head.w.dim()), b: [1000.0, -1000.0] };
    let mut mismatches = Vec::new();
    for (mode, beam) in [("greedy", 1), ("beam 1", 1), ("beam 4", 4)] {
        let cfg = DebiasConfig { beam_size: beam, ..full_config() };
        let plain = Debiaser::plain(&p.base, cfg.clone()).unwrap();
        let zero = Debiaser::new(&p.base, Some(&p.cf), Some(&p.dda.head), DebiasConfig { alpha: 0.0, beta: 0.0, ..cfg.clone() })
            .unwrap();
        let gated = Debiaser::new(&p.base, Some(&p.cf), Some(&gate_off), cfg.clone()).unwrap();
        let run = |d: &Debiaser<'_, Model<f32>>, src: &[TokenId]| {
            if mode == "greedy" {
                d.greedy(src).unwrap()
            } else {
                d.beam(src).unwrap()
            }
        };
        for (i, src) in docs.iter().enumerate() {
            let want = run(&plain, src);
            if run(&zero, src) != want {
                mismatches.push(format!("{mode} alpha=beta=0, document {i}"));
            }
            if run(&gated, src) != want {
                mismatches.push(format!("{mode} gate 0, document {i}"));
            }
        }
    }
    for m in mismatches.iter().take(10) {
        note(m);
    }
    let pass = mismatches.is_empty() && started.elapsed().as_secs() < 120;
    verdict(3, pass, &format!("{} mismatches over 50 documents x 3 decoders x 2 reductions (budget 120s)", mismatches.len()), started);
}

// ---------------------------------------------------------------- criterion 4

const MOCK_SPECIALS: SpecialTokens = SpecialTokens { pad: 0, bos: 1, eos: 2, mask: 5, unk: 6 };
const A: TokenId = 3;
const B: TokenId = 4;
const MOCK_SOURCE: [TokenId; 5] = [1, A, B, A, 2];
const FULL: [[f64; 5]; 3] = [[0.0, 0.0, 0.1, 0.5, 0.4], [0.0, 0.0, 0.3, 0.3, 0.4], [0.0, 0.0, 0.6, 0.2, 0.2]];
const ATTENTION: [[f64; 5]; 3] = [[0.1, 0.5, 0.1, 0.3, 0.0], [0.0, 0.1, 0.6, 0.2, 0.1], [0.2; 5]];
const CF: [[f64; 5]; 3] = [[0.0, 0.0, 0.1, 0.6, 0.3], [0.0, 0.0, 0.2, 0.1, 0.7], [0.0, 0.0, 0.9, 0.05, 0.05]];

/// `(masked source, step, distribution, masked hidden state)`
fn masked_table() -> Vec<([TokenId; 5], usize, [f64; 5], f64)> {
    vec![
        ([1, 5, B, 5, 2], 0, [0.0, 0.0, 0.1, 0.8, 0.1], 3f64.ln()),
        ([1, A, 5, 5, 2], 1, [0.0, 0.0, 0.2, 0.2, 0.6], 0.0),
        ([1, 5, 5, A, 2], 2, [0.0, 0.0, 0.9, 0.05, 0.05], 50.0),
    ]
}

/// Output tables keyed by step and by the (possibly masked) source.
struct Mock {
    counterfactual: bool,
}

impl Summarizer for Mock {
    type Memory = Vec<TokenId>;

    fn specials(&self) -> SpecialTokens {
        MOCK_SPECIALS
    }

    fn encode(&self, source: &[TokenId]) -> cfsum_core::Result<Self::Memory> {
        Ok(source.to_vec())
    }

    fn step(&self, memory: &Self::Memory, prefix: &[TokenId]) -> cfsum_core::Result<StepView> {
        let t = prefix.len() - 1;
        let view = |d: [f64; 5], h: f64, a: [f64; 5]| StepView {
            distribution: Array1::from(d.to_vec()),
            hidden: array![h],
            attention: Array1::from(a.to_vec()),
        };
        if t >= 3 {
            return Err(Error::Config(format!("mock has no step {t}")));
        }
        if memory[..] == MOCK_SOURCE {
            return Ok(if self.counterfactual { view(CF[t], 0.0, [0.2; 5]) } else { view(FULL[t], 0.0, ATTENTION[t]) });
        }
        masked_table()
            .into_iter()
            .find(|(src, step, _, _)| src[..] == memory[..] && *step == t && !self.counterfactual)
            .map(|(_, _, d, h)| view(d, h, [0.2; 5]))
            .ok_or_else(|| Error::Config(format!("mock has no table for {memory:?} at step {t}")))
    }
}

#[test]
fn criterion_04_algorithm_oracle() {
    let started = Instant::now();
    let (base, cf) = (Mock { counterfactual: false }, Mock { counterfactual: true });
    // s_ic = sigmoid(h - h'), so S~ follows the masked hidden state
    let mut head = PredictorHead::zeros(1);
    head.w[[1, 3]] = 1.0;
    let cfg = DebiasConfig { alpha: 0.5, beta: 0.5, rho: 0.5, beam_size: 1, use_dda: true, ..DebiasConfig::default() };
    let dz = Debiaser::new(&base, Some(&cf), Some(&head), cfg).unwrap();
    let (tokens, steps) = dz.trace(&MOCK_SOURCE).unwrap();

    // hand simulation, score = p_full - S~ (0.5 p_masked + 0.5 p_cf)
    let want_tokens = vec![B, A, 2];
    let want_masked = [vec![1, 3], vec![2, 3], vec![1, 2]];
    let tiny = 4.0 * (-50f64).exp();
    let want_gate = [0.75, 1.0, tiny];
    let want_scores = [
        [0.0, 0.0, 0.025, -0.025, 0.25],
        [0.0, 0.0, 0.1, 0.15, -0.25],
        [0.0, 0.0, 0.6 - 0.9 * tiny, 0.2 - 0.05 * tiny, 0.2 - 0.05 * tiny],
    ];
    let mut problems = Vec::new();
    if tokens != want_tokens {
        problems.push(format!("tokens {tokens:?}, expected {want_tokens:?}"));
    }
    if steps.len() != 3 {
        problems.push(format!("{} steps, expected 3", steps.len()));
    }
    for (t, s) in steps.iter().enumerate().take(3) {
        if s.scores.masked_positions != want_masked[t] {
            problems.push(format!("step {t}: masked {:?}", s.scores.masked_positions));
        }
        if (s.scores.s_tilde - want_gate[t]).abs() > 1e-12 {
            problems.push(format!("step {t}: S~ {}", s.scores.s_tilde));
        }
        let off = s.scores.debiased.iter().zip(want_scores[t]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if off > 1e-12 {
            problems.push(format!("step {t}: scores {}", s.scores.debiased));
        }
    }
    // the last step would pick A if the gate were ignored
    let plain = Debiaser::new(&base, Some(&cf), None, DebiasConfig { use_dda: false, max_steps: 3, ..dz.config.clone() }).unwrap();
    let ungated = plain.trace(&MOCK_SOURCE).unwrap().0;
    if ungated.get(2) != Some(&A) {
        problems.push(format!("without the gate the trace is {ungated:?}"));
    }
    for p in &problems {
        note(p);
    }
    verdict(4, problems.is_empty(), "mock trace matches the hand simulation step for step", started);
}

// ---------------------------------------------------------------- criterion 5

/// Longest common subsequence by trying every subsequence of the shorter side.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subsequence = |s: &[u8]| {
        let mut it = long.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << short.len())
        .filter_map(|bits| {
            let s: Vec<u8> = (0..short.len()).filter(|i| bits >> i & 1 == 1).map(|i| short[i]).collect();
            is_subsequence(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

#[test]
fn criterion_05_metric_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rouge_mismatch = 0;
    for _ in 0..100 {
        let seq = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            let n = rng.gen_range(1..=12);
            (0..n).map(|_| rng.gen_range(0..4)).collect()
        };
        let (c, r) = (seq(&mut rng), seq(&mut rng));
        let lcs = brute_lcs(&c, &r) as f64;
        let (p, rec) = (lcs / c.len() as f64, lcs / r.len() as f64);
        let f1 = if lcs == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
        let got = rouge_l(&c, &r).unwrap();
        if got.f1 != f1 || got.precision != p || got.recall != rec {
            rouge_mismatch += 1;
        }
    }

    let ds = generate_corpus(&CorpusSpec { n_train: 150, n_test: 50, seed: 5, ..CorpusSpec::default() }).unwrap();
    let grammar = Grammar::from_inventory(&ds.inventory);
    let mut round_trip_mismatch = 0;
    for ex in ds.train.iter().chain(&ds.test) {
        let stated: BTreeSet<FactTriple> = ex.gold_facts.iter().chain(&ex.distractor_facts).cloned().collect();
        let doc = grammar.extract(&ex.document);
        let summary = grammar.extract(&ex.summary);
        if doc.triples != stated || summary.triples != ex.gold_set() {
            round_trip_mismatch += 1;
        }
    }
    let pass = rouge_mismatch == 0 && round_trip_mismatch == 0;
    verdict(
        5,
        pass,
        &format!("{rouge_mismatch}/100 ROUGE-L pairs off the brute-force LCS, {round_trip_mismatch}/200 round trips off"),
        started,
    );
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_irrelevancy_probe() {
    let proportions = [0.0, 0.5, 0.9];
    let trained: Vec<&Pipeline> = SEEDS[..3].iter().map(|&s| pipeline(s)).collect();
    let started = Instant::now();
    let mut by_q = vec![Vec::new(); proportions.len()];
    for p in &trained {
        let results = bias_probe(&p.base, &p.vocab, &p.data.test, &p.grammar, &proportions, full_config().max_steps).unwrap();
        for (k, (q, r)) in results.iter().enumerate() {
            let parsed: Vec<f64> = r.rows.iter().filter(|x| !x.vacuous).map(|x| x.fact_precision).collect();
            note(&format!(
                "seed {} q={q}: fact_precision {:.4}, vacuous {}/{}, over non-vacuous outputs {:.4}",
                p.seed,
                r.fact_precision,
                r.vacuous,
                r.n,
                if parsed.is_empty() { f64::NAN } else { mean(parsed.iter().copied()) }
            ));
            by_q[k].push(r.fact_precision);
        }
    }
    let means: Vec<f64> = by_q.into_iter().map(mean).collect();
    let decreasing = means.windows(2).all(|w| w[0] > w[1]);
    let drop = means[0] - means[2];
    let pass = decreasing && drop >= 0.05 && started.elapsed().as_secs() < 600;
    verdict(
        6,
        pass,
        &format!("mean fact_precision at q=0/0.5/0.9 = {:.4}/{:.4}/{:.4}, drop {drop:.4} (needs strictly decreasing, drop >= 0.05)", means[0], means[1], means[2]),
        started,
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_directional_gain() {
    let started = Instant::now();
    let mut wins = 0;
    let mut drops = Vec::new();
    let mut seconds = 0.0;
    for seed in SEEDS {
        let (p, e) = (pipeline(seed), evals(seed));
        let full = e.ablation("full");
        let gain = full.fact_precision - e.base.fact_precision;
        wins += usize::from(gain > 0.0);
        drops.push(e.base.rouge_l - full.rouge_l);
        seconds += p.train_seconds + e.seconds;
        note(&format!(
            "seed {seed}: fact_precision base {:.4} full {:.4} ({gain:+.4}), rouge_l base {:.4} full {:.4}",
            e.base.fact_precision, full.fact_precision, e.base.rouge_l, full.rouge_l
        ));
    }
    let drop = mean(drops);
    let pass = wins >= 4 && drop <= 0.05 && seconds < 1800.0;
    verdict(
        7,
        pass,
        &format!("full beats base in {wins}/5 seeds, mean rouge_l drop {drop:.4}, train+eval {seconds:.0}s (budget 1800s)"),
        started,
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_08_ablation() {
    let started = Instant::now();
    let mut lower = 0;
    for seed in SEEDS {
        let e = evals(seed);
        let (full, without) = (e.ablation("full"), e.ablation("w/o ICT"));
        lower += usize::from(without.fact_precision < full.fact_precision);
        let row: Vec<String> = e.ablations.iter().map(|r| format!("{} {:.4}", r.name, r.fact_precision)).collect();
        note(&format!("seed {seed}: {}", row.join(", ")));
    }
    verdict(8, lower >= 3, &format!("removing ICT lowers fact_precision in {lower}/5 seeds (needs 3)"), started);
}

// ---------------------------------------------------------------- criterion 9

fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(rx.iter().copied()), mean(ry.iter().copied()));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

#[test]
fn criterion_09_sweep() {
    let started = Instant::now();
    let mut interior = 0;
    let mut rouge = vec![Vec::new(); SWEEP.len()];
    for seed in SEEDS {
        let e = evals(seed);
        let fp: Vec<f64> = e.sweep.iter().map(|r| r.fact_precision).collect();
        for (k, r) in e.sweep.iter().enumerate() {
            rouge[k].push(r.rouge_l);
        }
        let inner = fp[1..SWEEP.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hit = inner > fp[0].max(fp[SWEEP.len() - 1]);
        interior += usize::from(hit);
        let cells: Vec<String> =
            e.sweep.iter().map(|r| format!("{:.4}/{:.4}/{}", r.fact_precision, r.rouge_l, r.vacuous)).collect();
        note(&format!("seed {seed} fact_precision/rouge_l/vacuous over {SWEEP:?}: {}", cells.join(" ")));
    }
    let means: Vec<f64> = rouge.into_iter().map(mean).collect();
    let rho = spearman(&SWEEP, &means);
    let pass = rho <= 0.0 && interior >= 3;
    verdict(
        9,
        pass,
        &format!("Spearman(ratio, mean rouge_l) = {rho:.3}, interior fact_precision maximum in {interior}/5 seeds (needs <= 0 and 3)"),
        started,
    );
}

// ---------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_predictor() {
    let started = Instant::now();
    let mut ok = true;
    let mut accuracies = Vec::new();
    for seed in SEEDS {
        let p = pipeline(seed);
        note(&format!(
            "seed {seed}: held-out token accuracy {:.4} on {} rows (train {:.4}), base unchanged {}, frozen groups unchanged by ICT {}",
            p.dda.holdout_accuracy, p.dda.holdout_rows, p.dda.train_accuracy, p.base_unchanged_by_dda, p.frozen_unchanged_by_ict
        ));
        ok &= p.dda.holdout_accuracy >= 0.85 && p.base_unchanged_by_dda && p.frozen_unchanged_by_ict;
        accuracies.push(p.dda.holdout_accuracy);
    }
    let worst = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(10, ok, &format!("worst held-out accuracy {worst:.4} (needs >= 0.85), checksums invariant"), started);
}

// ---------------------------------------------------------------- criterion 11

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(root).unwrap().to_path_buf())
        .collect();
    out.sort();
    out
}

/// Every stage at toy size, writing the artifacts the commands write.
fn run_stages(out: &Path) {
    let spec = CorpusSpec { n_train: 60, n_test: 12, seed: 9, ..CorpusSpec::default() };
    let data = generate_corpus(&spec).unwrap();
    write_jsonl(&out.join("data/train.jsonl"), &data.train).unwrap();
    write_jsonl(&out.join("data/test.jsonl"), &data.test).unwrap();
    let train = read_jsonl(&out.join("data/train.jsonl")).unwrap();
    let vocab = data.inventory.vocabulary();
    let grammar = Grammar::from_inventory(&data.inventory);
    let encoded = encode_all(&vocab, &train);

    let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, vocab_size: vocab.size(), seed: 9, ..ModelConfig::default() };
    let mut base = Model::<f32>::new(cfg).unwrap();
    let tc = TrainConfig { steps: 30, seed: 9, ..TrainConfig::default() };
    let mut adam = Adam::new(tc.optimizer.clone());
    let mut log = Vec::new();
    train::train_base(&mut base, &mut adam, &encoded, &tc, |r| log.push(r.clone())).unwrap();
    base.save_checkpoint(&out.join("base"), Stage::Base, serde_json::Value::Null).unwrap();
    write_jsonl(&out.join("base_log.jsonl"), &log).unwrap();

    let ic = IctConfig { steps: 20, seed: 9, ..IctConfig::default() };
    let prepared = pipeline::ict_dataset(&base, &vocab, &train, &encoded, &ic).unwrap();
    let mut log = Vec::new();
    let cf = ict::train_ict(&base, &prepared, &ic, |r| log.push(*r)).unwrap();
    cf.save_checkpoint(&out.join("cf"), Stage::Ict, serde_json::Value::Null).unwrap();
    write_jsonl(&out.join("ict_log.jsonl"), &log).unwrap();

    let dc = DdaConfig { steps: 50, n_documents: 30, seed: 9, ..DdaConfig::default() };
    let dda = pipeline::train_dda(&base, &vocab, &train[..30], &data.inventory.numbers, &dc, |_| {}).unwrap();
    dda.head.save(&out.join("head"), base.config(), serde_json::Value::Null).unwrap();
    write_jsonl(&out.join("labeled.jsonl"), &dda.labeled).unwrap();

    let cfg = DebiasConfig { beam_size: 3, ..full_config() };
    let dz = Debiaser::new(&base, Some(&cf), Some(&dda.head), cfg).unwrap();
    let report = evaluate_decoder("full", &dz, &vocab, &data.test, &grammar).unwrap();
    let probe = bias_probe(&base, &vocab, &data.test, &grammar, &[0.0, 0.5], 20).unwrap();
    std::fs::write(out.join("report.json"), serde_json::to_string(&(report, probe)).unwrap()).unwrap();
}

#[test]
fn criterion_11_determinism() {
    let started = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_stages(a.path());
    run_stages(b.path());
    let files = files_under(a.path());
    let mut differing = Vec::new();
    if files != files_under(b.path()) {
        differing.push("file lists".to_string());
    }
    for f in &files {
        if std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    for d in &differing {
        note(&format!("differs: {d}"));
    }
    verdict(
        11,
        differing.is_empty(),
        &format!("{} library artifacts identical across two runs (command-level files are compared in the cli tests)", files.len()),
        started,
    );
}
