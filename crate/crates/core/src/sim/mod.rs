//! Tabular stand-in for supervised-then-RL tuning of a review assistant.
//!
//! The policy sees a noisy copy of the image label and answers each step
//! with a category, conditioned on its own answer to the previous canonical
//! step. Expected metrics are computed exactly by enumerating answer
//! sequences, so training curves carry no evaluation noise.

mod train;

pub use train::{
    estimate_gradient_fd, expected_component, pretrain_sft, score_function_gradient, sweep_lambda, sweep_medians,
    sweep_to_csv, train_rl, Baseline, RewardComponent, SftConfig, SftHistory, SweepRow, TrainConfig, TrainTrace,
};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Category, ReasoningGraph, Step, STEP_COUNT};
use crate::reward::{reward_from_categories, CategoryTurn, RewardConfig, RewardError};
use crate::synth::{ClassLabel, Conversation, TemplateBank};

pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dataset has no usable conversations")]
    EmptyDataset,
    #[error("label {0} is not part of the policy layout")]
    UnknownLabel(ClassLabel),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("training diverged at epoch {epoch}: non-finite logits")]
    Divergence { epoch: usize, trace: Box<TrainTrace> },
    #[error("policy file: {0}")]
    PolicyFile(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Labels the policy can observe and the answer set offered at each step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub labels: Vec<ClassLabel>,
    /// One action list per canonical step.
    pub actions: Vec<Vec<Category>>,
}

impl PolicyLayout {
    /// Every label, every category of every step including `NoMatch`.
    pub fn full() -> Self {
        PolicyLayout {
            labels: ClassLabel::ALL.to_vec(),
            actions: Step::ALL.iter().map(|s| s.categories().to_vec()).collect(),
        }
    }

    /// Three labels, at most three answers per step.
    pub fn tiny() -> Self {
        use Category::*;
        PolicyLayout {
            labels: vec![ClassLabel::Aml, ClassLabel::Mm, ClassLabel::Healthy],
            actions: vec![
                vec![HighQuality, NoMatch],
                vec![Adequate, NoMatch],
                vec![Normal, Abnormal, NoMatch],
                vec![NormalProlif, BlastProlif, PlasmaProlif],
                vec![Healthy, Aml, Mm],
            ],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.labels.is_empty() {
            return Err(SimError::Layout("no labels".into()));
        }
        let mut seen = self.labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.labels.len() {
            return Err(SimError::Layout("duplicate label".into()));
        }
        if self.actions.len() != STEP_COUNT {
            return Err(SimError::Layout(format!("expected {STEP_COUNT} action lists, got {}", self.actions.len())));
        }
        for (step, acts) in Step::ALL.iter().zip(&self.actions) {
            if acts.is_empty() {
                return Err(SimError::Layout(format!("no actions at {step}")));
            }
            for (i, a) in acts.iter().enumerate() {
                if !step.admits(*a) {
                    return Err(SimError::Layout(format!("{a} is not an answer to {step}")));
                }
                if acts[..i].contains(a) {
                    return Err(SimError::Layout(format!("duplicate action {a} at {step}")));
                }
            }
        }
        Ok(())
    }

    pub fn label_index(&self, label: ClassLabel) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }

    /// Bucket 0 means the previous step has not been answered (or its
    /// answer is outside the layout); bucket `j + 1` is action `j` of the
    /// previous step.
    pub fn bucket_count(&self, step: usize) -> usize {
        if step == 0 {
            1
        } else {
            self.actions[step - 1].len() + 1
        }
    }

    pub fn bucket_of(&self, step: usize, previous: Option<Category>) -> usize {
        match (step, previous) {
            (0, _) | (_, None) => 0,
            (k, Some(c)) => self.actions[k - 1].iter().position(|a| *a == c).map_or(0, |j| j + 1),
        }
    }

    fn label_block(&self) -> usize {
        (0..STEP_COUNT).map(|k| self.bucket_count(k) * self.actions[k].len()).sum()
    }

    pub fn logit_count(&self) -> usize {
        self.labels.len() * self.label_block()
    }

    /// Offset of the logits for one state.
    pub fn offset(&self, label: usize, step: usize, bucket: usize) -> usize {
        let mut off = label * self.label_block();
        for k in 0..step {
            off += self.bucket_count(k) * self.actions[k].len();
        }
        off + bucket * self.actions[step].len()
    }

    /// All states as `(label, step, bucket)`.
    pub fn states(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.labels.len() {
            for k in 0..STEP_COUNT {
                for b in 0..self.bucket_count(k) {
                    out.push((l, k, b));
                }
            }
        }
        out
    }
}

/// Categorical answer policy stored as a flat logit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub layout: PolicyLayout,
    pub temperature: f64,
    pub logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format_version: u32,
    toolkit_version: String,
    policy: PolicyTable,
}

impl PolicyTable {
    pub fn uniform(layout: PolicyLayout) -> Result<Self, SimError> {
        layout.validate()?;
        let n = layout.logit_count();
        Ok(PolicyTable { layout, temperature: 1.0, logits: vec![0.0; n] })
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|v| v.is_finite())
    }

    pub fn action_count(&self, step: usize) -> usize {
        self.layout.actions[step].len()
    }

    /// Softmax at the state whose logits start at `offset`.
    pub fn probs_into(&self, offset: usize, step: usize, out: &mut Vec<f64>) {
        let n = self.action_count(step);
        softmax_into(&self.logits[offset..offset + n], self.temperature, out);
    }

    pub fn probs(&self, label: usize, step: usize, bucket: usize) -> Vec<f64> {
        let mut out = Vec::new();
        self.probs_into(self.layout.offset(label, step, bucket), step, &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PolicyFile {
            format_version: POLICY_FORMAT_VERSION,
            toolkit_version: crate::VERSION.to_string(),
            policy: self.clone(),
        })
        .expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let file: PolicyFile = serde_json::from_str(text).map_err(|e| SimError::PolicyFile(e.to_string()))?;
        if file.format_version != POLICY_FORMAT_VERSION {
            return Err(SimError::PolicyFile(format!("unsupported format version {}", file.format_version)));
        }
        let p = file.policy;
        p.layout.validate()?;
        if p.logits.len() != p.layout.logit_count() {
            return Err(SimError::PolicyFile("logit count does not match layout".into()));
        }
        if !(p.temperature.is_finite() && p.temperature > 0.0) || !p.is_finite() {
            return Err(SimError::PolicyFile("non-finite or non-positive values".into()));
        }
        Ok(p)
    }
}

pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        let e = ((l - max) / temperature).exp();
        out.push(e);
        sum += e;
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// What the policy sees about an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub noisy_label: ClassLabel,
    pub true_label: ClassLabel,
    pub noise_rate: f64,
}

/// Keeps the true label with probability `1 - noise_rate`, otherwise picks
/// uniformly among the other labels.
pub fn observe(true_label: ClassLabel, labels: &[ClassLabel], noise_rate: f64, rng: &mut ChaCha8Rng) -> Observation {
    let others: Vec<ClassLabel> = labels.iter().copied().filter(|l| *l != true_label).collect();
    let flip = rng.random::<f64>() < noise_rate;
    let noisy_label = if flip && !others.is_empty() {
        others[rng.random_range(0..others.len())]
    } else {
        true_label
    };
    Observation { noisy_label, true_label, noise_rate }
}

/// `P(noisy = j | true = i)` over layout label indices.
pub fn noise_matrix(n_labels: usize, noise_rate: f64) -> Vec<Vec<f64>> {
    (0..n_labels)
        .map(|i| {
            (0..n_labels)
                .map(|j| {
                    if n_labels == 1 {
                        1.0
                    } else if i == j {
                        1.0 - noise_rate
                    } else {
                        noise_rate / (n_labels - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Category-level reward as used by the simulator. Answers are rendered
/// from templates of comparable length, so the length term is neutral.
pub fn sim_reward(
    graph: &ReasoningGraph,
    steps: &[Step],
    predicted: &[Category],
    target: &crate::graph::ReasoningPath,
    config: &RewardConfig,
) -> Result<crate::reward::RewardBreakdown, RewardError> {
    let turns: Vec<CategoryTurn> = steps
        .iter()
        .zip(predicted)
        .map(|(s, p)| CategoryTurn {
            step: *s,
            predicted: *p,
            target: target.category(*s),
            predicted_len: 1,
            target_len: 1,
        })
        .collect();
    reward_from_categories(graph, &turns, config)
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub conversation: Conversation,
    pub observation: Observation,
    pub predicted: Vec<Category>,
}

/// Samples an answer per turn of `conversation`, in its own turn order, and
/// renders each answer from the bank's templates for the conversation's
/// split.
pub fn rollout(
    policy: &PolicyTable,
    bank: &TemplateBank,
    conversation: &Conversation,
    noise_rate: f64,
    seed: u64,
) -> Result<RolloutResult, SimError> {
    let layout = &policy.layout;
    if layout.label_index(conversation.class_label).is_none() {
        return Err(SimError::UnknownLabel(conversation.class_label));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observation = observe(conversation.class_label, &layout.labels, noise_rate, &mut rng);
    let li = layout.label_index(observation.noisy_label).expect("drawn from layout");

    let mut answered: [Option<Category>; STEP_COUNT] = [None; STEP_COUNT];
    let mut out = conversation.clone();
    let mut predicted = Vec::with_capacity(out.turns.len());
    let mut probs = Vec::new();
    for turn in &mut out.turns {
        let k = turn.step.ordinal();
        let prev = if k == 0 { None } else { answered[k - 1] };
        let bucket = layout.bucket_of(k, prev);
        policy.probs_into(layout.offset(li, k, bucket), k, &mut probs);
        let cat = layout.actions[k][sample_index(&probs, &mut rng)];
        answered[k] = Some(cat);
        predicted.push(cat);
        let pool = bank.answers(turn.step, cat, conversation.split);
        turn.prediction = Some(if pool.is_empty() {
            String::new()
        } else {
            pool[rng.random_range(0..pool.len())].clone()
        });
    }
    Ok(RolloutResult { conversation: out, observation, predicted })
}

/// Class weights of the conversations whose label is in the layout.
pub fn label_weights(layout: &PolicyLayout, conversations: &[Conversation]) -> Result<Vec<f64>, SimError> {
    let mut counts = vec![0.0; layout.labels.len()];
    for c in conversations {
        if let Some(i) = layout.label_index(c.class_label) {
            counts[i] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Err(SimError::EmptyDataset);
    }
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Visits every canonical-order answer sequence for one observed label with
/// its probability and per-step logit offsets.
pub(crate) fn enumerate_sequences(
    policy: &PolicyTable,
    noisy: usize,
    visit: &mut dyn FnMut(&[usize; STEP_COUNT], &[usize; STEP_COUNT], f64),
) {
    fn go(
        policy: &PolicyTable,
        noisy: usize,
        k: usize,
        prob: f64,
        actions: &mut [usize; STEP_COUNT],
        offsets: &mut [usize; STEP_COUNT],
        visit: &mut dyn FnMut(&[usize; STEP_COUNT], &[usize; STEP_COUNT], f64),
    ) {
        if k == STEP_COUNT {
            visit(actions, offsets, prob);
            return;
        }
        let bucket = if k == 0 { 0 } else { actions[k - 1] + 1 };
        let off = policy.layout.offset(noisy, k, bucket);
        let mut probs = Vec::new();
        policy.probs_into(off, k, &mut probs);
        offsets[k] = off;
        for (a, p) in probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            actions[k] = a;
            go(policy, noisy, k + 1, prob * p, actions, offsets, visit);
        }
    }
    let mut actions = [0; STEP_COUNT];
    let mut offsets = [0; STEP_COUNT];
    go(policy, noisy, 0, 1.0, &mut actions, &mut offsets, visit);
}

pub(crate) fn kl_at(policy: &PolicyTable, reference: &PolicyTable, offset: usize, step: usize) -> f64 {
    let mut p = Vec::new();
    let mut q = Vec::new();
    policy.probs_into(offset, step, &mut p);
    reference.probs_into(offset, step, &mut q);
    p.iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Exact expectations under the policy for a label mix, answering in
/// canonical order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectedMetrics {
    pub reward: f64,
    pub correctness: f64,
    pub consistency: f64,
    pub nomatch_penalty: f64,
    pub a_q: f64,
    pub a_c: f64,
    pub a_d: f64,
    pub h_cc: f64,
    /// Summed per-turn KL to the reference; zero without a reference.
    pub kl: f64,
}

pub fn expected_metrics(
    graph: &ReasoningGraph,
    policy: &PolicyTable,
    reference: Option<&PolicyTable>,
    weights: &[f64],
    noise_rate: f64,
    reward: &RewardConfig,
) -> Result<ExpectedMetrics, SimError> {
    let layout = &policy.layout;
    if weights.len() != layout.labels.len() {
        return Err(SimError::InvalidConfig("label weight count does not match layout".into()));
    }
    let noise = noise_matrix(layout.labels.len(), noise_rate);
    let targets: Vec<_> = layout.labels.iter().map(|l| l.target_path()).collect();
    let mut m = ExpectedMetrics::default();
    let mut err = None;
    let mut cache: BTreeMap<[usize; STEP_COUNT], Vec<Category>> = BTreeMap::new();
    for noisy in 0..layout.labels.len() {
        let mass: Vec<f64> = (0..layout.labels.len()).map(|t| weights[t] * noise[t][noisy]).collect();
        if mass.iter().all(|w| *w == 0.0) {
            continue;
        }
        enumerate_sequences(policy, noisy, &mut |actions, offsets, prob| {
            let cats = cache
                .entry(*actions)
                .or_insert_with(|| (0..STEP_COUNT).map(|k| layout.actions[k][actions[k]]).collect());
            let kl: f64 = match reference {
                Some(r) => (0..STEP_COUNT).map(|k| kl_at(policy, r, offsets[k], k)).sum(),
                None => 0.0,
            };
            for (t, w) in mass.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let pw = prob * w;
                let b = match sim_reward(graph, &Step::ALL, cats, &targets[t], reward) {
                    Ok(b) => b,
                    Err(e) => {
                        err.get_or_insert(e);
                        return;
                    }
                };
                let correct = b.per_turn_correct.iter().filter(|c| **c).count() as f64;
                m.reward += pw * b.total;
                m.correctness += pw * b.correctness;
                m.consistency += pw * b.consistency;
                m.nomatch_penalty += pw * b.nomatch_penalty;
                m.a_q += pw * correct / STEP_COUNT as f64;
                m.a_c += pw * f64::from(u8::from(b.per_turn_correct.iter().all(|c| *c)));
                m.a_d += pw * f64::from(u8::from(b.per_turn_correct[Step::Diagnosis.ordinal()]));
                m.h_cc += pw * f64::from(u8::from(!b.path_valid));
                m.kl += pw * kl;
            }
        });
    }
    match err {
        Some(e) => Err(e.into()),
        None => Ok(m),
    }
}
