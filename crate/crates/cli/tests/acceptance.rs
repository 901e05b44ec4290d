//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed. Exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use pathwise_core::eval::{evaluate, predictions_to_jsonl, PredictedTurn, PredictionRecord, SliceCounts};
use pathwise_core::hashing::sha256_hex;
use pathwise_core::reward::{score_turns, ScoredTurn};
use pathwise_core::sim::{
    estimate_gradient_fd, expected_metrics, label_weights, pretrain_sft, score_function_gradient, sweep_lambda,
    sweep_medians, train_rl, ExpectedMetrics, PolicyLayout, PolicyTable, RewardComponent, SftConfig, SweepRow,
    TrainConfig,
};
use pathwise_core::synth::{
    from_jsonl, paper_default_counts, synthesize_conversation, synthesize_dataset, AnnotationRecord, ClassLabel,
    Conversation, ScenarioKind, ScenarioMix, Split, SynthOptions, TemplateBank,
};
use pathwise_core::{Category, Lexicon, ReasoningGraph, RewardConfig, Step};
use pathwise_service::{router, AppState, Registry, ServiceConfig};

const BIN: &str = env!("CARGO_BIN_EXE_pathwise");

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: f64, what: &str) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_secs, || {
        format!("{what} took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn main() {
    let criteria: Vec<(&str, fn(&mut Shared) -> Outcome)> = vec![
        ("classifier golden suite", classifier_golden),
        ("template round-trip", template_round_trip),
        ("path brute force", path_brute_force),
        ("reward decomposition and maximality", reward_decomposition),
        ("metrics invariants", metrics_invariants),
        ("dataset reproduction", dataset_reproduction),
        ("scenario contracts", scenario_contracts),
        ("gradient oracle", gradient_oracle),
        ("lambda sweep direction", lambda_sweep),
        ("SFT then RL direction", sft_to_rl),
        ("KL monotonicity in beta", kl_monotone),
        ("ablation arithmetic and directions", ablation),
        ("service equivalence", service_equivalence),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = f(&mut shared);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<38} {secs:>7.2}s  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<38} {secs:>7.2}s  {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

/// Simulator results reused across criteria.
#[derive(Default)]
struct Shared {
    sim: Option<SimRun>,
}

struct SimRun {
    graph: ReasoningGraph,
    train: Vec<Conversation>,
    held_out: Vec<Conversation>,
    sft: PolicyTable,
    sft_metrics: ExpectedMetrics,
    rows: Vec<SweepRow>,
    sweep_time: Duration,
}

const LAMBDAS: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 8.0];
const SEEDS: [u64; 3] = [0, 1, 2];

impl Shared {
    /// Reference class mix scaled down tenfold, standard ordering, default
    /// configs. The sweep is timed from dataset synthesis on.
    fn sim(&mut self) -> Result<&SimRun, String> {
        if self.sim.is_none() {
            let start = Instant::now();
            let graph = ReasoningGraph::bma_default();
            let opts = SynthOptions {
                counts: paper_default_counts().into_iter().map(|(k, v)| (k, v / 10)).collect(),
                ..Default::default()
            };
            let ds = synthesize_dataset(&graph, &TemplateBank::bma_default(), &opts).map_err(|e| e.to_string())?;
            let (train, held_out): (Vec<_>, Vec<_>) = ds.conversations.into_iter().partition(|c| c.split == Split::Train);
            let sft = pretrain_sft(&PolicyLayout::full(), &train, &SftConfig::default()).map_err(|e| e.to_string())?;
            let rows = sweep_lambda(&graph, &sft, &train, &held_out, &LAMBDAS, &SEEDS, &TrainConfig::default())
                .map_err(|e| e.to_string())?;
            let sweep_time = start.elapsed();
            let weights = label_weights(&sft.layout, &held_out).map_err(|e| e.to_string())?;
            let cfg = TrainConfig::default();
            let sft_metrics = expected_metrics(&graph, &sft, None, &weights, cfg.noise_rate, &cfg.reward)
                .map_err(|e| e.to_string())?;
            self.sim = Some(SimRun { graph, train, held_out, sft, sft_metrics, rows, sweep_time });
        }
        Ok(self.sim.as_ref().unwrap())
    }
}

impl SimRun {
    fn row(&self, lambda: f64, seed: u64) -> &SweepRow {
        self.rows.iter().find(|r| r.lambda == lambda && r.seed == seed).expect("grid point")
    }

    /// Trains one policy per seed under `cfg` and returns held-out metrics.
    fn runs(&self, cfg: &TrainConfig) -> Result<Vec<ExpectedMetrics>, String> {
        let weights = label_weights(&self.sft.layout, &self.held_out).map_err(|e| e.to_string())?;
        SEEDS
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { seed, ..cfg.clone() };
                let (p, _) =
                    train_rl(&self.graph, &self.sft, &self.train, &self.held_out, &cfg).map_err(|e| e.to_string())?;
                expected_metrics(&self.graph, &p, Some(&self.sft), &weights, cfg.noise_rate, &RewardConfig::default())
                    .map_err(|e| e.to_string())
            })
            .collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn classifier_golden(_: &mut Shared) -> Outcome {
    let text = std::fs::read_to_string(core_fixture("classifier_golden.tsv")).map_err(|e| e.to_string())?;
    let lex = Lexicon::bma_default();
    let mut cases = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let mut cols = line.splitn(3, '\t');
        let step: Step = cols.next().unwrap_or("").parse().map_err(|e| format!("{e}"))?;
        let cat: Category = cols.next().unwrap_or("").parse().map_err(|e| format!("{e}"))?;
        cases.push((step, cat, cols.next().unwrap_or("").to_string()));
    }
    let start = Instant::now();
    let wrong: Vec<String> = cases
        .iter()
        .filter_map(|(s, want, t)| {
            let got = lex.classify(*s, t).category;
            (got != *want).then(|| format!("{s} {t:?}: {got} != {want}"))
        })
        .collect();
    let elapsed = start.elapsed();
    let covered: BTreeSet<(Step, Category)> = cases.iter().map(|(s, c, _)| (*s, *c)).collect();
    let pairs: usize = Step::ALL.iter().map(|s| s.categories().len()).sum();
    check(cases.len() >= 60, || format!("only {} fixtures", cases.len()))?;
    check(covered.len() == pairs, || format!("{} of {pairs} (step, category) pairs covered", covered.len()))?;
    check(wrong.is_empty(), || format!("{} disagreements: {wrong:?}", wrong.len()))?;
    within(elapsed, 1.0, "classification")?;
    Ok(format!("{} fixtures, {pairs} pairs, 100% agreement in {:.1} ms", cases.len(), elapsed.as_secs_f64() * 1e3))
}

fn template_round_trip(_: &mut Shared) -> Outcome {
    let bank = TemplateBank::bma_default();
    let lex = Lexicon::bma_default();
    let mut n = 0;
    let mut wrong = Vec::new();
    for (step, cat, template) in bank.answer_templates() {
        let texts = std::iter::once(template.to_string()).chain(bank.paraphrases_of(template).iter().cloned());
        for t in texts {
            n += 1;
            let got = lex.classify(step, &t).category;
            if got != cat {
                wrong.push(format!("({step}, {cat}) {t:?} -> {got}"));
            }
        }
    }
    check(n > 0, || "no templates".into())?;
    check(wrong.is_empty(), || format!("{} of {n} misclassified: {wrong:?}", wrong.len()))?;
    Ok(format!("{n} templates and paraphrases classify to their category"))
}

fn path_brute_force(_: &mut Shared) -> Outcome {
    let g = ReasoningGraph::bma_default();
    let start = Instant::now();
    let mut tuples = vec![Vec::new()];
    for step in Step::ALL {
        tuples = tuples
            .into_iter()
            .flat_map(|prefix: Vec<Category>| {
                step.categories().iter().map(move |c| {
                    let mut t = prefix.clone();
                    t.push(*c);
                    t
                })
            })
            .collect();
    }
    let mut accepted = BTreeSet::new();
    for t in &tuples {
        if g.is_valid_path(t).map_err(|e| e.to_string())? {
            accepted.insert(t.clone());
        }
    }
    let elapsed = start.elapsed();
    use Category::*;
    let expected: BTreeSet<Vec<Category>> = [
        [HighQuality, Adequate, Normal, NormalProlif, Healthy],
        [HighQuality, Adequate, Abnormal, BlastProlif, Aml],
        [HighQuality, Adequate, Abnormal, PlasmaProlif, Mm],
        [HighQuality, Blood, Inadequate, Inadequate, Inconclusive],
        [HighQuality, Clot, Inadequate, Inadequate, Inconclusive],
        [LowQuality, Adequate, Inadequate, Inadequate, Inconclusive],
        [LowQuality, Blood, Inadequate, Inadequate, Inconclusive],
        [LowQuality, Clot, Inadequate, Inadequate, Inconclusive],
    ]
    .into_iter()
    .map(|p| p.to_vec())
    .collect();
    check(tuples.len() == 1200, || format!("{} tuples enumerated", tuples.len()))?;
    check(accepted == expected, || format!("accepted {accepted:?}"))?;
    within(elapsed, 1.0, "enumeration")?;
    Ok(format!("1200 tuples, exactly the 8 concrete paths accepted in {:.1} ms", elapsed.as_secs_f64() * 1e3))
}

/// Keeps each target with probability `keep`, otherwise substitutes an
/// answer of a random category (off-topic text for `NoMatch`).
fn random_turns(conv: &Conversation, bank: &TemplateBank, keep: f64, rng: &mut ChaCha8Rng) -> Vec<ScoredTurn> {
    conv.turns
        .iter()
        .map(|t| {
            let prediction = if rng.random_bool(keep) {
                t.target.clone()
            } else {
                let cats = t.step.categories();
                let pool = bank.answers(t.step, cats[rng.random_range(0..cats.len())], conv.split);
                pool[rng.random_range(0..pool.len())].clone()
            };
            ScoredTurn { step: t.step, prediction, target: t.target.clone(), target_length_tokens: None }
        })
        .collect()
}

fn random_conversation(g: &ReasoningGraph, bank: &TemplateBank, rng: &mut ChaCha8Rng, i: usize) -> Conversation {
    let ann = AnnotationRecord {
        image_id: format!("r-{i:05}"),
        class_label: ClassLabel::ALL[rng.random_range(0..5)],
        split: if rng.random_bool(0.5) { Split::Train } else { Split::Eval },
    };
    let scenario = ScenarioKind::ALL[rng.random_range(0..ScenarioKind::ALL.len())];
    synthesize_conversation(g, bank, &ann, scenario, rng.random()).expect("shipped configs synthesize")
}

fn reward_decomposition(_: &mut Shared) -> Outcome {
    let g = ReasoningGraph::bma_default();
    let lex = Lexicon::bma_default();
    let bank = TemplateBank::bma_default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let conv = random_conversation(&g, &bank, &mut rng, i);
        let cfg = RewardConfig {
            lambda: rng.random_range(0.0..8.0),
            length_tolerance: rng.random_range(0.0..1.0),
            length_weight: rng.random_range(0.0..2.0),
            nomatch_weight: rng.random_range(0.0..2.0),
            ..Default::default()
        };
        let keep = rng.random_range(0.0..1.0);
        let b = score_turns(&g, &lex, &random_turns(&conv, &bank, keep, &mut rng), &cfg)
            .map_err(|e| e.to_string())?
            .breakdown;
        let sum = b.correctness + b.consistency + b.length_penalty + b.nomatch_penalty;
        worst = worst.max((b.total - sum).abs());
    }
    check(worst <= 1e-12, || format!("component sum off by {worst:e}"))?;

    let cfg = RewardConfig::default();
    let mut violations = 0;
    for i in 0..500 {
        let conv = random_conversation(&g, &bank, &mut rng, i);
        let mut turns = random_turns(&conv, &bank, 1.0, &mut rng);
        let best = score_turns(&g, &lex, &turns, &cfg).map_err(|e| e.to_string())?.breakdown.total;
        check(best == cfg.max_total(), || format!("all-correct total {best}"))?;
        let k = rng.random_range(0..turns.len());
        turns[k] = random_turns(&conv, &bank, 0.0, &mut rng).swap_remove(k);
        let worse = score_turns(&g, &lex, &turns, &cfg).map_err(|e| e.to_string())?.breakdown.total;
        violations += usize::from(worse > best);
    }
    check(violations == 0, || format!("{violations} corruptions raised the total"))?;
    Ok(format!("1000 conversations, max |total - sum| = {worst:e}; 500 corruptions, 0 violations"))
}

fn write_fixture(dir: &Path) -> Result<(PathBuf, PathBuf), String> {
    let g = ReasoningGraph::bma_default();
    let bank = TemplateBank::bma_default();
    let opts = SynthOptions {
        counts: ClassLabel::ALL.iter().map(|l| (*l, 12)).collect(),
        scenario_mix: ScenarioMix::uniform(&ScenarioKind::ALL),
        seed: 31,
        ..Default::default()
    };
    let ds = synthesize_dataset(&g, &bank, &opts).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let preds: Vec<PredictionRecord> = ds
        .conversations
        .iter()
        .map(|c| PredictionRecord {
            image_id: c.image_id.clone(),
            scenario: c.scenario,
            model_name: "fixture".into(),
            turns: random_turns(c, &bank, 0.6, &mut rng)
                .into_iter()
                .map(|t| PredictedTurn { step: t.step, prediction: t.prediction })
                .collect(),
        })
        .collect();
    let ds_path = dir.join("dataset.jsonl");
    let pred_path = dir.join("predictions.jsonl");
    std::fs::write(&ds_path, pathwise_core::synth::to_jsonl(&ds.conversations)).map_err(|e| e.to_string())?;
    std::fs::write(&pred_path, predictions_to_jsonl(&preds)).map_err(|e| e.to_string())?;
    Ok((ds_path, pred_path))
}

fn cli_breakdowns(ds: &Path, preds: &Path, out: &Path, flag: Option<&str>) -> Result<Vec<Value>, String> {
    let mut cmd = Command::new(BIN);
    cmd.args(["score", "--dataset"]).arg(ds).arg("--predictions").arg(preds).arg("--out").arg(out);
    cmd.env("RUST_LOG", "off");
    if let Some(f) = flag {
        cmd.arg(f);
    }
    let o = cmd.output().map_err(|e| e.to_string())?;
    check(o.status.success(), || String::from_utf8_lossy(&o.stderr).to_string())?;
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    Ok(v["records"].as_array().cloned().unwrap_or_default().into_iter().map(|r| r["breakdown"].clone()).collect())
}

fn ablation(shared: &mut Shared) -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let (ds, preds) = write_fixture(tmp.path())?;
    let out = tmp.path().join("scores.json");
    let full = cli_breakdowns(&ds, &preds, &out, None)?;
    check(!full.is_empty(), || "no records".into())?;
    let mut nonzero = Vec::new();
    for (flag, component) in
        [("--no-rc", "correctness"), ("--no-rs", "consistency"), ("--no-rm", "nomatch_penalty"), ("--no-rl", "length_penalty")]
    {
        let ablated = cli_breakdowns(&ds, &preds, &out, Some(flag))?;
        check(ablated.len() == full.len(), || format!("{flag}: record count changed"))?;
        let mut moved = 0;
        for (f, a) in full.iter().zip(&ablated) {
            let value = f[component].as_f64().unwrap_or(f64::NAN);
            let delta = f["total"].as_f64().unwrap_or(f64::NAN) - a["total"].as_f64().unwrap_or(f64::NAN);
            check((delta - value).abs() <= 1e-12, || format!("{flag}: total moved by {delta}, component {value}"))?;
            moved += usize::from(value != 0.0);
        }
        nonzero.push(format!("{flag} {moved}/{}", full.len()));
    }

    let sim = shared.sim()?;
    let full_runs: Vec<ExpectedMetrics> = SEEDS.iter().map(|s| sim.row(0.5, *s).metrics).collect();
    let mut no_rs = TrainConfig::default();
    no_rs.reward.enable_consistency = false;
    let mut no_rc = TrainConfig::default();
    no_rc.reward.enable_correctness = false;
    let no_rs = sim.runs(&no_rs)?;
    let no_rc = sim.runs(&no_rc)?;
    let med = |runs: &[ExpectedMetrics], f: fn(&ExpectedMetrics) -> f64| median(runs.iter().map(f).collect());
    let (h_full, h_no_rs) = (med(&full_runs, |m| m.h_cc), med(&no_rs, |m| m.h_cc));
    let (a_full, a_no_rc) = (med(&full_runs, |m| m.a_q), med(&no_rc, |m| m.a_q));
    check(h_no_rs > h_full, || format!("median h_cc without consistency {h_no_rs:.4} <= full {h_full:.4}"))?;
    check(a_no_rc < a_full, || format!("median a_q without correctness {a_no_rc:.4} >= full {a_full:.4}"))?;
    Ok(format!(
        "exact per-record deltas ({}); sim median h_cc {h_full:.4} -> {h_no_rs:.4} without consistency, a_q {a_full:.4} -> {a_no_rc:.4} without correctness",
        nonzero.join(", ")
    ))
}

fn metrics_invariants(_: &mut Shared) -> Outcome {
    let g = ReasoningGraph::bma_default();
    let lex = Lexicon::bma_default();
    let bank = TemplateBank::bma_default();
    let opts = SynthOptions {
        counts: ClassLabel::ALL.iter().map(|l| (*l, 10)).collect(),
        scenario_mix: ScenarioMix::uniform(&ScenarioKind::ALL),
        seed: 5,
        ..Default::default()
    };
    let data = synthesize_dataset(&g, &bank, &opts).map_err(|e| e.to_string())?.conversations;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for set in 0..100 {
        let keep = rng.random_range(0.0..1.0);
        let preds: Vec<PredictionRecord> = data
            .iter()
            .map(|c| PredictionRecord {
                image_id: c.image_id.clone(),
                scenario: c.scenario,
                model_name: format!("random-{set}"),
                turns: random_turns(c, &bank, keep, &mut rng)
                    .into_iter()
                    .map(|t| PredictedTurn { step: t.step, prediction: t.prediction })
                    .collect(),
            })
            .collect();
        let r = evaluate(&g, &lex, &data, &preds).map_err(|e| e.to_string())?;
        for s in std::iter::once(&r.overall).chain(r.per_scenario.values()) {
            check(s.a_c <= s.a_q && s.a_c <= s.a_d, || format!("set {set}: ordering violated {s:?}"))?;
        }
        let mut merged = SliceCounts::default();
        r.per_scenario.values().for_each(|s| merged.merge(&s.counts));
        check(merged == r.overall.counts, || format!("set {set}: slice merge differs"))?;
        check(merged.report() == r.overall, || format!("set {set}: merged ratios differ"))?;
    }
    let own: Vec<PredictionRecord> = data.iter().map(|c| PredictionRecord::from_targets(c, "self")).collect();
    let r = evaluate(&g, &lex, &data, &own).map_err(|e| e.to_string())?;
    for s in std::iter::once(&r.overall).chain(r.per_scenario.values()) {
        check((s.a_q, s.a_c, s.a_d, s.h_cc) == (1.0, 1.0, 1.0, 0.0), || format!("self-predictions gave {s:?}"))?;
    }
    Ok("100 random sets: a_c <= a_q, a_c <= a_d, slices merge exactly; self-predictions perfect".into())
}

fn dataset_reproduction(_: &mut Shared) -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let run = |dir: &str| -> Result<(Vec<u8>, Value), String> {
        let out = tmp.path().join(dir);
        let o = Command::new(BIN)
            .args(["synth", "--counts", "paper-default", "--out"])
            .arg(&out)
            .env("RUST_LOG", "off")
            .output()
            .map_err(|e| e.to_string())?;
        check(o.status.success(), || String::from_utf8_lossy(&o.stderr).to_string())?;
        let bytes = std::fs::read(out.join("dataset.jsonl")).map_err(|e| e.to_string())?;
        let manifest = std::fs::read_to_string(out.join("manifest.json")).map_err(|e| e.to_string())?;
        Ok((bytes, serde_json::from_str(&manifest).map_err(|e| e.to_string())?))
    };
    let (a, manifest) = run("a")?;
    let (b, _) = run("b")?;
    let convs = from_jsonl(std::str::from_utf8(&a).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check(convs.len() == 16340, || format!("{} records", convs.len()))?;
    let count = |l: ClassLabel| convs.iter().filter(|c| c.class_label == l).count();
    let counts = [
        ClassLabel::BloodContamination,
        ClassLabel::ParticleContamination,
        ClassLabel::Aml,
        ClassLabel::Mm,
        ClassLabel::Healthy,
    ]
    .map(count);
    check(counts == [10083, 3510, 1531, 932, 284], || format!("class counts {counts:?}"))?;
    let (ha, hb) = (sha256_hex(&a), sha256_hex(&b));
    check(ha == hb, || "file hashes differ between identical runs".into())?;
    check(manifest["total"] == 16340, || "manifest total".into())?;

    let bank = TemplateBank::bma_default();
    let shared = bank.shared_texts();
    check(shared.is_empty(), || format!("texts in both splits: {shared:?}"))?;
    let pool = |split: Split| -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        for step in Step::ALL {
            s.extend(bank.questions(step, split));
            for c in step.categories() {
                s.extend(bank.answers(step, *c, split));
            }
        }
        s
    };
    let overlap = pool(Split::Train).intersection(&pool(Split::Eval)).count();
    check(overlap == 0, || format!("{overlap} question/answer texts shared by train and eval"))?;
    Ok(format!("16340 records, counts {counts:?}, hash {} stable, pools disjoint", &ha[..12]))
}

fn scenario_contracts(_: &mut Shared) -> Outcome {
    let g = ReasoningGraph::bma_default();
    let bank = TemplateBank::bma_default();
    let mut checked = 0;
    for label in ClassLabel::ALL {
        for split in Split::ALL {
            let ann = AnnotationRecord { image_id: "s-00000".into(), class_label: label, split };
            let diag_questions = bank.questions(Step::Diagnosis, split);
            for seed in 0..40u64 {
                for scenario in ScenarioKind::ALL {
                    let c = synthesize_conversation(&g, &bank, &ann, scenario, seed).map_err(|e| e.to_string())?;
                    checked += 1;
                    let ctx = || format!("{label} {scenario:?} seed {seed}");
                    check(c.turns.len() == 5, || format!("{}: {} turns", ctx(), c.turns.len()))?;
                    if scenario == ScenarioKind::DiagnosisFirst {
                        check(c.turns[0].step == Step::Diagnosis, || format!("{}: first turn {}", ctx(), c.turns[0].step))?;
                    }
                    if scenario == ScenarioKind::Improvised {
                        for t in &c.turns {
                            check(Step::ALL.contains(&t.step), ctx)?;
                            check(bank.questions(t.step, split).contains(&t.prompt), || {
                                format!("{}: prompt {:?} is not a {} question", ctx(), t.prompt, t.step)
                            })?;
                        }
                    }
                    if !scenario.hypothesis_is_wrong() {
                        continue;
                    }
                    let target = c.target_category(Step::Diagnosis);
                    let hyp = c.hypothesis.ok_or_else(|| format!("{}: no hypothesis", ctx()))?;
                    check(hyp != target && hyp != Category::NoMatch, || format!("{}: hypothesis {hyp}", ctx()))?;
                    let prompt = &c.turns.iter().find(|t| t.step == Step::Diagnosis).ok_or_else(ctx)?.prompt;
                    let inner = match scenario {
                        ScenarioKind::ConfirmWrong => prompt
                            .strip_prefix("After examining the image, the clinician suggests that ")
                            .and_then(|r| r.strip_suffix(". Do you concur with this opinion?"))
                            .filter(|s| bank.statements(hyp, split).iter().any(|x| x == s)),
                        _ => prompt
                            .strip_prefix("A previous clinician interpreted the image and believed ")
                            .and_then(|r| r.split_once(". With this in mind, how would you proceed with the diagnosis? "))
                            .filter(|(rationale, q)| {
                                bank.rationales(hyp, split).iter().any(|x| x == rationale)
                                    && diag_questions.iter().any(|x| x == q)
                            })
                            .map(|(r, _)| r),
                    };
                    check(inner.is_some(), || format!("{}: prompt shape {prompt:?}", ctx()))?;
                }
            }
        }
    }
    Ok(format!("{checked} conversations across all scenarios, labels and splits"))
}

fn gradient_oracle(_: &mut Shared) -> Outcome {
    const SAMPLES: usize = 400_000;
    let start = Instant::now();
    let g = ReasoningGraph::bma_default();
    let mut policy = PolicyTable::uniform(PolicyLayout::tiny()).map_err(|e| e.to_string())?;
    for (i, l) in policy.logits.iter_mut().enumerate() {
        *l = 1.5 * (1.7 * i as f64 + 0.3).sin();
    }
    let weights = vec![1.0 / 3.0; 3];
    let cfg = RewardConfig::default();
    let mut notes = Vec::new();
    for comp in [RewardComponent::Total, RewardComponent::Correctness, RewardComponent::Consistency, RewardComponent::NoMatch] {
        let fd = estimate_gradient_fd(&g, &policy, &weights, 0.3, &cfg, comp, 1e-5).map_err(|e| e.to_string())?;
        let sf = score_function_gradient(&g, &policy, &weights, 0.3, &cfg, comp, SAMPLES, 11).map_err(|e| e.to_string())?;
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut worst = 0.0f64;
        let mut significant = 0;
        for (a, b) in fd.iter().zip(&sf) {
            if a.abs() >= 0.1 * scale {
                significant += 1;
                worst = worst.max((a - b).abs() / a.abs());
            }
        }
        check(significant > 0, || format!("{comp:?}: gradient vanishes"))?;
        check(worst <= 0.05, || format!("{comp:?}: worst relative error {worst:.4}"))?;
        notes.push(format!("{comp:?} {significant} coords worst {:.2}%", worst * 100.0));
    }
    within(start.elapsed(), 120.0, "gradient oracle")?;
    Ok(format!("{} logits, {SAMPLES} samples, coords >= 10% of max: {}", policy.logits.len(), notes.join("; ")))
}

fn lambda_sweep(shared: &mut Shared) -> Outcome {
    let sim = shared.sim()?;
    let med = sweep_medians(&sim.rows);
    let at = |l: f64| med.iter().find(|(x, _)| *x == l).map(|(_, m)| *m).expect("grid point");
    let (h0, h1) = (at(0.0).h_cc, at(1.0).h_cc);
    let (a_half, a8) = (at(0.5).a_q, at(8.0).a_q);
    let curve: Vec<String> = med.iter().map(|(l, m)| format!("{l}:{:.3}/{:.3}", m.a_q, m.h_cc)).collect();
    check(h1 <= 0.7 * h0, || format!("median h_cc {h1:.4} at lambda 1 vs {h0:.4} at 0"))?;
    check(a8 < a_half, || format!("median a_q {a8:.4} at lambda 8 vs {a_half:.4} at 0.5"))?;
    within(sim.sweep_time, 300.0, "sweep")?;
    Ok(format!(
        "{} runs in {:.1}s; h_cc {h0:.4} -> {h1:.4} ({:.0}% lower); a_q(8) {a8:.4} < a_q(0.5) {a_half:.4}; lambda:a_q/h_cc {}",
        sim.rows.len(),
        sim.sweep_time.as_secs_f64(),
        (1.0 - h1 / h0) * 100.0,
        curve.join(" ")
    ))
}

fn sft_to_rl(shared: &mut Shared) -> Outcome {
    let sim = shared.sim()?;
    let lambda = TrainConfig::default().reward.lambda;
    let sft = sim.sft_metrics.reward;
    let rl: Vec<f64> = SEEDS.iter().map(|s| sim.row(lambda, *s).metrics.reward).collect();
    let wins = rl.iter().filter(|r| **r >= sft).count();
    check(wins == SEEDS.len(), || format!("RL reward {rl:?} vs SFT {sft:.4}"))?;
    within(sim.sweep_time, 300.0, "sweep")?;
    let shown: Vec<String> = rl.iter().map(|r| format!("{r:.4}")).collect();
    Ok(format!("held-out reward SFT {sft:.4} vs RL [{}], 3/3 seeds", shown.join(", ")))
}

fn kl_monotone(shared: &mut Shared) -> Outcome {
    let sim = shared.sim()?;
    let default_beta = TrainConfig::default().beta;
    check(default_beta == 0.1, || format!("default beta {default_beta}"))?;
    let mut kls = Vec::new();
    for beta in [0.0, 0.1, 1.0, 10.0] {
        let kl = if beta == default_beta {
            median(SEEDS.iter().map(|s| sim.row(0.5, *s).metrics.kl).collect())
        } else {
            median(sim.runs(&TrainConfig { beta, ..Default::default() })?.iter().map(|m| m.kl).collect())
        };
        kls.push((beta, kl));
    }
    let ok = kls.windows(2).all(|w| w[1].1 <= w[0].1);
    let shown: Vec<String> = kls.iter().map(|(b, k)| format!("{b}:{k:.4}")).collect();
    check(ok, || format!("median KL by beta {}", shown.join(" ")))?;
    Ok(format!("median KL non-increasing, beta:kl {}", shown.join(" ")))
}

fn service_equivalence(_: &mut Shared) -> Outcome {
    let g = ReasoningGraph::bma_default();
    let lex = Lexicon::bma_default();
    let bank = TemplateBank::bma_default();
    let cfg = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(512);
    let items: Vec<(String, Vec<ScoredTurn>)> = (0..512)
        .map(|i| {
            let conv = random_conversation(&g, &bank, &mut rng, i);
            let keep = rng.random_range(0.0..1.0);
            (format!("conv-{i}"), random_turns(&conv, &bank, keep, &mut rng))
        })
        .collect();
    let mut convs: Vec<Value> = items.iter().map(|(id, t)| json!({"id": id, "turns": t})).collect();
    convs.insert(200, json!({"id": "malformed", "turns": []}));
    let body = json!({"conversations": convs}).to_string();

    let app = router(AppState::new(Registry::bma_default(), ServiceConfig::default()));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let (status, bytes) = runtime.block_on(async {
        let req = Request::post("/v1/score").header("content-type", "application/json").body(Body::from(body)).unwrap();
        let resp = app.oneshot(req).await.unwrap();
        (resp.status(), resp.into_body().collect().await.unwrap().to_bytes())
    });
    check(status == StatusCode::OK, || format!("status {status}"))?;
    let resp: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    let results = resp["results"].as_array().ok_or("no results")?;
    check(results.len() == 513, || format!("{} results", results.len()))?;
    let bad = &results[200];
    check(bad["id"] == "malformed" && bad["status"] == 422 && bad["error"].is_string(), || format!("{bad}"))?;
    let ok_results: Vec<&Value> = results.iter().filter(|r| r["id"] != "malformed").collect();
    for ((id, turns), r) in items.iter().zip(ok_results) {
        check(r["id"] == *id && r["status"] == 200, || format!("order or status broken at {id}"))?;
        let local = score_turns(&g, &lex, turns, &cfg).map_err(|e| e.to_string())?.breakdown;
        let local = serde_json::to_value(&local).map_err(|e| e.to_string())?;
        for key in ["total", "correctness", "consistency", "length_penalty", "nomatch_penalty"] {
            check(r["breakdown"][key].to_string() == local[key].to_string(), || {
                format!("{id}.{key}: service {} vs library {}", r["breakdown"][key], local[key])
            })?;
        }
    }
    Ok("512 breakdowns identical to library (total and components), order kept, malformed item 422".into())
}
