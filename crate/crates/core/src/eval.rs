//! Accuracy and hallucination metrics over prediction files.
//!
//! * `a_q`: correct turns / turns
//! * `a_c`: conversations with every turn correct / conversations
//! * `a_d`: conversations whose Diagnosis answers are all correct / conversations
//! * `h_cc`: conversations whose canonical predicted path is not valid / conversations
//!
//! Reports keep the integer counts behind every ratio so slices can be
//! re-aggregated without rounding.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Lexicon;
use crate::graph::{Category, ReasoningGraph, Step};
use crate::reward::{canonical_path, reward_from_categories, token_length, CategoryTurn, RewardBreakdown, RewardConfig};
use crate::synth::{dataset_hash, Conversation, ScenarioKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction for ({image_id}, {scenario}) has no matching dataset conversation")]
    Join { image_id: String, scenario: ScenarioKind },
    #[error("duplicate {what} for ({image_id}, {scenario})")]
    Duplicate {
        what: &'static str,
        image_id: String,
        scenario: ScenarioKind,
    },
    #[error("prediction for ({image_id}, {scenario}) does not line up with the dataset turns: {detail}")]
    TurnMismatch {
        image_id: String,
        scenario: ScenarioKind,
        detail: String,
    },
    #[error("incomplete conversation ({image_id}, {scenario}): no predicted turns")]
    IncompleteConversation { image_id: String, scenario: ScenarioKind },
    #[error("no predictions to evaluate")]
    NoPredictions,
    #[error("reports were computed on different datasets ({baseline} vs {candidate})")]
    DatasetMismatch { baseline: String, candidate: String },
    #[error("prediction line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("reward computation failed for ({image_id}, {scenario}): {message}")]
    Reward {
        image_id: String,
        scenario: ScenarioKind,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedTurn {
    pub step: Step,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub scenario: ScenarioKind,
    pub turns: Vec<PredictedTurn>,
    #[serde(default)]
    pub model_name: String,
}

impl PredictionRecord {
    /// Predictions that repeat the dataset targets verbatim.
    pub fn from_targets(conversation: &Conversation, model_name: &str) -> Self {
        PredictionRecord {
            image_id: conversation.image_id.clone(),
            scenario: conversation.scenario,
            turns: conversation
                .turns
                .iter()
                .map(|t| PredictedTurn { step: t.step, prediction: t.target.clone() })
                .collect(),
            model_name: model_name.to_string(),
        }
    }
}

pub fn predictions_from_jsonl(text: &str) -> Result<Vec<PredictionRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Record { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Integer tallies behind one slice of a report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceCounts {
    pub n_questions: usize,
    pub n_conversations: usize,
    pub correct_questions: usize,
    pub all_correct_conversations: usize,
    pub diagnosis_correct_conversations: usize,
    pub invalid_path_conversations: usize,
}

impl SliceCounts {
    pub fn merge(&mut self, other: &SliceCounts) {
        self.n_questions += other.n_questions;
        self.n_conversations += other.n_conversations;
        self.correct_questions += other.correct_questions;
        self.all_correct_conversations += other.all_correct_conversations;
        self.diagnosis_correct_conversations += other.diagnosis_correct_conversations;
        self.invalid_path_conversations += other.invalid_path_conversations;
    }

    pub fn report(&self) -> SliceReport {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        SliceReport {
            a_q: ratio(self.correct_questions, self.n_questions),
            a_c: ratio(self.all_correct_conversations, self.n_conversations),
            a_d: ratio(self.diagnosis_correct_conversations, self.n_conversations),
            h_cc: ratio(self.invalid_path_conversations, self.n_conversations),
            n_questions: self.n_questions,
            n_conversations: self.n_conversations,
            counts: *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub a_q: f64,
    pub a_c: f64,
    pub a_d: f64,
    pub h_cc: f64,
    pub n_questions: usize,
    pub n_conversations: usize,
    pub counts: SliceCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardMeans {
    pub correctness: f64,
    pub consistency: f64,
    pub length_penalty: f64,
    pub nomatch_penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub toolkit_version: String,
    pub dataset_hash: String,
    pub graph_hash: String,
    pub lexicon_hash: String,
    #[serde(flatten)]
    pub overall: SliceReport,
    pub per_scenario: BTreeMap<ScenarioKind, SliceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_component_reward_means: Option<RewardMeans>,
}

/// Outcome of scoring one conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationOutcome {
    pub predicted: Vec<Category>,
    pub correct: Vec<bool>,
    pub all_correct: bool,
    pub diagnosis_correct: bool,
    pub path_valid: bool,
}

/// Scores one predicted turn sequence against its conversation's targets.
pub fn score_conversation(
    graph: &ReasoningGraph,
    steps_and_predictions: &[(Step, Category)],
    conversation: &Conversation,
) -> ConversationOutcome {
    let predicted: Vec<Category> = steps_and_predictions.iter().map(|(_, c)| *c).collect();
    let correct: Vec<bool> = steps_and_predictions
        .iter()
        .map(|(s, c)| *c == conversation.target_category(*s))
        .collect();
    let diagnosis_correct = steps_and_predictions
        .iter()
        .zip(&correct)
        .filter(|((s, _), _)| *s == Step::Diagnosis)
        .all(|(_, ok)| *ok);
    let path_valid = canonical_path(steps_and_predictions)
        .map(|p| graph.is_consistent(&p))
        .unwrap_or(false);
    ConversationOutcome {
        all_correct: correct.iter().all(|c| *c),
        predicted,
        correct,
        diagnosis_correct,
        path_valid,
    }
}

fn index_dataset(dataset: &[Conversation]) -> Result<HashMap<(&str, ScenarioKind), &Conversation>, EvalError> {
    let mut index = HashMap::with_capacity(dataset.len());
    for c in dataset {
        if index.insert((c.image_id.as_str(), c.scenario), c).is_some() {
            return Err(EvalError::Duplicate {
                what: "dataset conversation",
                image_id: c.image_id.clone(),
                scenario: c.scenario,
            });
        }
    }
    Ok(index)
}

fn record_reward(
    graph: &ReasoningGraph,
    record: &PredictionRecord,
    conv: &Conversation,
    classified: &[(Step, Category)],
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, EvalError> {
    let turns: Vec<CategoryTurn> = record
        .turns
        .iter()
        .zip(&conv.turns)
        .zip(classified)
        .map(|((p, t), (step, cat))| CategoryTurn {
            step: *step,
            predicted: *cat,
            target: conv.target_category(*step),
            predicted_len: token_length(&p.prediction),
            target_len: token_length(&t.target),
        })
        .collect();
    reward_from_categories(graph, &turns, cfg).map_err(|e| EvalError::Reward {
        image_id: record.image_id.clone(),
        scenario: record.scenario,
        message: e.to_string(),
    })
}

/// Reward of one prediction record against its dataset conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub image_id: String,
    pub scenario: ScenarioKind,
    pub breakdown: RewardBreakdown,
    pub target_categories: Vec<Category>,
}

/// Per-record reward breakdowns, in prediction order. Joins and turn
/// alignment follow [`evaluate`].
pub fn score_predictions(
    graph: &ReasoningGraph,
    lexicon: &Lexicon,
    dataset: &[Conversation],
    predictions: &[PredictionRecord],
    reward: &RewardConfig,
) -> Result<Vec<RecordScore>, EvalError> {
    let index = index_dataset(dataset)?;
    let mut seen = HashMap::with_capacity(predictions.len());
    let mut out = Vec::with_capacity(predictions.len());
    for record in predictions {
        if seen.insert((record.image_id.as_str(), record.scenario), ()).is_some() {
            return Err(EvalError::Duplicate {
                what: "prediction",
                image_id: record.image_id.clone(),
                scenario: record.scenario,
            });
        }
        let conv = join(&index, record)?;
        let classified: Vec<(Step, Category)> = record
            .turns
            .iter()
            .map(|t| (t.step, lexicon.classify(t.step, &t.prediction).category))
            .collect();
        out.push(RecordScore {
            image_id: record.image_id.clone(),
            scenario: record.scenario,
            breakdown: record_reward(graph, record, conv, &classified, reward)?,
            target_categories: conv.turns.iter().map(|t| conv.target_category(t.step)).collect(),
        });
    }
    Ok(out)
}

fn join<'a>(
    index: &HashMap<(&'a str, ScenarioKind), &'a Conversation>,
    record: &PredictionRecord,
) -> Result<&'a Conversation, EvalError> {
    let conv = index
        .get(&(record.image_id.as_str(), record.scenario))
        .copied()
        .ok_or_else(|| EvalError::Join { image_id: record.image_id.clone(), scenario: record.scenario })?;
    if record.turns.is_empty() {
        return Err(EvalError::IncompleteConversation {
            image_id: record.image_id.clone(),
            scenario: record.scenario,
        });
    }
    let mismatch = |detail: String| EvalError::TurnMismatch {
        image_id: record.image_id.clone(),
        scenario: record.scenario,
        detail,
    };
    if record.turns.len() != conv.turns.len() {
        return Err(mismatch(format!("{} predicted turns, {} in dataset", record.turns.len(), conv.turns.len())));
    }
    for (i, (p, t)) in record.turns.iter().zip(&conv.turns).enumerate() {
        if p.step != t.step {
            return Err(mismatch(format!("turn {i} predicts {} but asks {}", p.step, t.step)));
        }
    }
    Ok(conv)
}

pub fn evaluate(
    graph: &ReasoningGraph,
    lexicon: &Lexicon,
    dataset: &[Conversation],
    predictions: &[PredictionRecord],
) -> Result<MetricsReport, EvalError> {
    evaluate_inner(graph, lexicon, dataset, predictions, None)
}

/// Like [`evaluate`], additionally averaging reward components.
pub fn evaluate_with_rewards(
    graph: &ReasoningGraph,
    lexicon: &Lexicon,
    dataset: &[Conversation],
    predictions: &[PredictionRecord],
    reward: &RewardConfig,
) -> Result<MetricsReport, EvalError> {
    evaluate_inner(graph, lexicon, dataset, predictions, Some(reward))
}

fn evaluate_inner(
    graph: &ReasoningGraph,
    lexicon: &Lexicon,
    dataset: &[Conversation],
    predictions: &[PredictionRecord],
    reward: Option<&RewardConfig>,
) -> Result<MetricsReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::NoPredictions);
    }
    let index = index_dataset(dataset)?;
    let mut seen = HashMap::with_capacity(predictions.len());
    let mut per_scenario: BTreeMap<ScenarioKind, SliceCounts> = BTreeMap::new();
    let mut reward_sum = RewardMeans::default();
    for record in predictions {
        if seen.insert((record.image_id.as_str(), record.scenario), ()).is_some() {
            return Err(EvalError::Duplicate {
                what: "prediction",
                image_id: record.image_id.clone(),
                scenario: record.scenario,
            });
        }
        let conv = join(&index, record)?;
        let classified: Vec<(Step, Category)> = record
            .turns
            .iter()
            .map(|t| (t.step, lexicon.classify(t.step, &t.prediction).category))
            .collect();
        let outcome = score_conversation(graph, &classified, conv);

        let slice = per_scenario.entry(record.scenario).or_default();
        slice.n_conversations += 1;
        slice.n_questions += outcome.correct.len();
        slice.correct_questions += outcome.correct.iter().filter(|c| **c).count();
        slice.all_correct_conversations += usize::from(outcome.all_correct);
        slice.diagnosis_correct_conversations += usize::from(outcome.diagnosis_correct);
        slice.invalid_path_conversations += usize::from(!outcome.path_valid);

        if let Some(cfg) = reward {
            let b = record_reward(graph, record, conv, &classified, cfg)?;
            reward_sum.correctness += b.correctness;
            reward_sum.consistency += b.consistency;
            reward_sum.length_penalty += b.length_penalty;
            reward_sum.nomatch_penalty += b.nomatch_penalty;
            reward_sum.total += b.total;
        }
    }

    let mut overall = SliceCounts::default();
    for counts in per_scenario.values() {
        overall.merge(counts);
    }
    let per_component_reward_means = reward.map(|_| {
        let n = overall.n_conversations as f64;
        RewardMeans {
            correctness: reward_sum.correctness / n,
            consistency: reward_sum.consistency / n,
            length_penalty: reward_sum.length_penalty / n,
            nomatch_penalty: reward_sum.nomatch_penalty / n,
            total: reward_sum.total / n,
        }
    });
    Ok(MetricsReport {
        toolkit_version: crate::VERSION.to_string(),
        dataset_hash: dataset_hash(dataset),
        graph_hash: graph.hash().to_string(),
        lexicon_hash: lexicon.hash().to_string(),
        overall: overall.report(),
        per_scenario: per_scenario.into_iter().map(|(k, c)| (k, c.report())).collect(),
        per_component_reward_means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    /// `overall` or a scenario code.
    pub slice: String,
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    pub delta: f64,
    /// `delta` in percentage points.
    pub delta_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_hash: String,
    pub rows: Vec<DeltaRow>,
}

fn slice_rows(slice: &str, b: &SliceReport, c: &SliceReport, rows: &mut Vec<DeltaRow>) {
    for (metric, bv, cv) in [
        ("a_q", b.a_q, c.a_q),
        ("a_c", b.a_c, c.a_c),
        ("a_d", b.a_d, c.a_d),
        ("h_cc", b.h_cc, c.h_cc),
    ] {
        let delta = cv - bv;
        rows.push(DeltaRow {
            slice: slice.to_string(),
            metric: metric.to_string(),
            baseline: bv,
            candidate: cv,
            delta,
            delta_points: delta * 100.0,
        });
    }
}

/// Per-metric deltas, candidate minus baseline, for the overall slice and
/// every scenario present in both reports.
pub fn compare_reports(baseline: &MetricsReport, candidate: &MetricsReport) -> Result<Comparison, EvalError> {
    if baseline.dataset_hash != candidate.dataset_hash {
        return Err(EvalError::DatasetMismatch {
            baseline: baseline.dataset_hash.clone(),
            candidate: candidate.dataset_hash.clone(),
        });
    }
    let mut rows = Vec::new();
    slice_rows("overall", &baseline.overall, &candidate.overall, &mut rows);
    for (scenario, b) in &baseline.per_scenario {
        if let Some(c) = candidate.per_scenario.get(scenario) {
            slice_rows(scenario.code(), b, c, &mut rows);
        }
    }
    Ok(Comparison { dataset_hash: baseline.dataset_hash.clone(), rows })
}

pub(crate) fn csv_text(comment: String, header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8");
    format!("# {comment}\n{body}")
}

/// Flat table, one row per slice, preceded by a `#` comment line carrying
/// the toolkit version and dataset hash.
pub fn report_to_csv(report: &MetricsReport) -> String {
    let mut slices = vec![("overall".to_string(), &report.overall)];
    slices.extend(report.per_scenario.iter().map(|(k, v)| (k.code().to_string(), v)));
    let rows = slices
        .into_iter()
        .map(|(name, s)| {
            vec![
                name,
                s.a_q.to_string(),
                s.a_c.to_string(),
                s.a_d.to_string(),
                s.h_cc.to_string(),
                s.n_questions.to_string(),
                s.n_conversations.to_string(),
            ]
        })
        .collect();
    csv_text(
        format!("pathwise {} dataset {}", report.toolkit_version, report.dataset_hash),
        &["slice", "a_q", "a_c", "a_d", "h_cc", "n_questions", "n_conversations"],
        rows,
    )
}

pub fn comparison_to_csv(comparison: &Comparison) -> String {
    let rows = comparison
        .rows
        .iter()
        .map(|r| {
            vec![
                r.slice.clone(),
                r.metric.clone(),
                r.baseline.to_string(),
                r.candidate.to_string(),
                r.delta.to_string(),
                format!("{:+.1}", r.delta_points),
            ]
        })
        .collect();
    csv_text(
        format!("pathwise {} dataset {}", crate::VERSION, comparison.dataset_hash),
        &["slice", "metric", "baseline", "candidate", "delta", "delta_points"],
        rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize_dataset, ClassLabel, ScenarioMix, SynthOptions, TemplateBank};

    fn dataset(kinds: &[ScenarioKind], per_class: usize) -> Vec<Conversation> {
        let opts = SynthOptions {
            counts: ClassLabel::ALL.iter().map(|l| (*l, per_class)).collect(),
            split_fraction: 0.5,
            seed: 17,
            scenario_mix: ScenarioMix::uniform(kinds),
        };
        synthesize_dataset(&ReasoningGraph::bma_default(), &TemplateBank::bma_default(), &opts)
            .unwrap()
            .conversations
    }

    fn self_predictions(ds: &[Conversation]) -> Vec<PredictionRecord> {
        ds.iter().map(|c| PredictionRecord::from_targets(c, "oracle")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let ds = dataset(&ScenarioKind::ALL, 6);
        let r = evaluate(&ReasoningGraph::bma_default(), &Lexicon::bma_default(), &ds, &self_predictions(&ds)).unwrap();
        assert_eq!((r.overall.a_q, r.overall.a_c, r.overall.a_d, r.overall.h_cc), (1.0, 1.0, 1.0, 0.0));
        assert_eq!(r.overall.n_conversations, 30);
        assert_eq!(r.overall.n_questions, 150);
    }

    #[test]
    fn record_scores_follow_prediction_order() {
        let ds = dataset(&ScenarioKind::ALL, 3);
        let mut preds = self_predictions(&ds);
        preds.reverse();
        let cfg = RewardConfig::default();
        let scores =
            score_predictions(&ReasoningGraph::bma_default(), &Lexicon::bma_default(), &ds, &preds, &cfg).unwrap();
        assert_eq!(scores.len(), preds.len());
        for (s, p) in scores.iter().zip(&preds) {
            assert_eq!((&s.image_id, s.scenario), (&p.image_id, p.scenario));
            assert_eq!(s.breakdown.total, 1.5);
            assert_eq!(s.target_categories.len(), p.turns.len());
        }
        preds.push(preds[0].clone());
        assert!(matches!(
            score_predictions(&ReasoningGraph::bma_default(), &Lexicon::bma_default(), &ds, &preds, &cfg),
            Err(EvalError::Duplicate { .. })
        ));
    }

    #[test]
    fn all_nomatch_predictions() {
        let ds = dataset(&[ScenarioKind::Standard], 2);
        let preds: Vec<_> = self_predictions(&ds)
            .into_iter()
            .map(|mut p| {
                for t in &mut p.turns {
                    t.prediction = "I cannot tell.".into();
                }
                p
            })
            .collect();
        let r = evaluate(&ReasoningGraph::bma_default(), &Lexicon::bma_default(), &ds, &preds).unwrap();
        assert_eq!((r.overall.a_q, r.overall.a_c, r.overall.a_d, r.overall.h_cc), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn ratios_from_counts() {
        let counts = SliceCounts {
            n_questions: 50,
            n_conversations: 10,
            correct_questions: 46,
            all_correct_conversations: 7,
            diagnosis_correct_conversations: 9,
            invalid_path_conversations: 2,
        };
        let r = counts.report();
        assert_eq!((r.a_q, r.a_c, r.a_d, r.h_cc), (0.92, 0.7, 0.9, 0.2));
    }

    #[test]
    fn join_errors() {
        let ds = dataset(&[ScenarioKind::Standard], 1);
        let g = ReasoningGraph::bma_default();
        let lex = Lexicon::bma_default();
        let mut preds = self_predictions(&ds);
        preds[0].image_id = "nobody".into();
        assert!(matches!(evaluate(&g, &lex, &ds, &preds), Err(EvalError::Join { .. })));

        let mut preds = self_predictions(&ds);
        preds[1].turns.pop();
        assert!(matches!(evaluate(&g, &lex, &ds, &preds), Err(EvalError::TurnMismatch { .. })));

        let mut preds = self_predictions(&ds);
        preds[1].turns.clear();
        assert!(matches!(evaluate(&g, &lex, &ds, &preds), Err(EvalError::IncompleteConversation { .. })));

        let mut preds = self_predictions(&ds);
        preds.push(preds[0].clone());
        assert!(matches!(evaluate(&g, &lex, &ds, &preds), Err(EvalError::Duplicate { .. })));

        assert!(matches!(evaluate(&g, &lex, &ds, &[]), Err(EvalError::NoPredictions)));
    }

    #[test]
    fn compare_examples() {
        let ds = dataset(&[ScenarioKind::Standard], 1);
        let g = ReasoningGraph::bma_default();
        let lex = Lexicon::bma_default();
        let r = evaluate(&g, &lex, &ds, &self_predictions(&ds)).unwrap();
        let same = compare_reports(&r, &r).unwrap();
        assert!(same.rows.iter().all(|row| row.delta == 0.0));

        let mut base = r.clone();
        let mut cand = r.clone();
        base.overall.a_c = 0.476;
        cand.overall.a_c = 0.700;
        let cmp = compare_reports(&base, &cand).unwrap();
        let row = cmp.rows.iter().find(|r| r.slice == "overall" && r.metric == "a_c").unwrap();
        assert!((row.delta_points - 22.4).abs() < 1e-9);
        assert!(comparison_to_csv(&cmp).contains("overall,a_c,0.476,0.7,"));
        assert!(comparison_to_csv(&cmp).contains(",+22.4\n"));

        cand.dataset_hash = "other".into();
        assert!(matches!(compare_reports(&base, &cand), Err(EvalError::DatasetMismatch { .. })));
    }

    #[test]
    fn csv_export_has_header_comment() {
        let ds = dataset(&[ScenarioKind::Standard, ScenarioKind::Improvised], 2);
        let r = evaluate(&ReasoningGraph::bma_default(), &Lexicon::bma_default(), &ds, &self_predictions(&ds)).unwrap();
        let text = report_to_csv(&r);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("# pathwise {} dataset {}", crate::VERSION, r.dataset_hash));
        assert_eq!(lines.next().unwrap(), "slice,a_q,a_c,a_d,h_cc,n_questions,n_conversations");
        assert!(lines.next().unwrap().starts_with("overall,1,1,1,0,"));
    }

    #[test]
    fn reward_means_for_self_predictions() {
        let ds = dataset(&[ScenarioKind::Standard], 2);
        let r = evaluate_with_rewards(
            &ReasoningGraph::bma_default(),
            &Lexicon::bma_default(),
            &ds,
            &self_predictions(&ds),
            &RewardConfig::default(),
        )
        .unwrap();
        assert_eq!(r.per_component_reward_means.unwrap().total, 1.5);
    }

    #[test]
    fn improvised_partial_paths_judged_on_answered_steps() {
        let g = ReasoningGraph::bma_default();
        let ds = dataset(&[ScenarioKind::Improvised], 3);
        for c in &ds {
            let preds: Vec<(Step, Category)> = c.turns.iter().map(|t| (t.step, c.target_category(t.step))).collect();
            assert!(score_conversation(&g, &preds, c).path_valid);
        }
    }

    #[test]
    fn prediction_jsonl_round_trip() {
        let ds = dataset(&[ScenarioKind::Standard], 1);
        let preds = self_predictions(&ds);
        assert_eq!(predictions_from_jsonl(&predictions_to_jsonl(&preds)).unwrap(), preds);
        assert!(matches!(predictions_from_jsonl("\n{\"x\":1}"), Err(EvalError::Record { line: 2, .. })));
    }
}
