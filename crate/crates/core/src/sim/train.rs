use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    expected_metrics, label_weights, noise_matrix, sample_index, sim_reward, softmax_into, ExpectedMetrics,
    PolicyLayout, PolicyTable, SimError,
};
use crate::eval::csv_text;
use crate::graph::{ReasoningGraph, Step, STEP_COUNT};
use crate::reward::{RewardBreakdown, RewardConfig};
use crate::synth::{ClassLabel, Conversation};

/// Which part of the reward a gradient or expectation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardComponent {
    Correctness,
    Consistency,
    NoMatch,
    Total,
}

impl RewardComponent {
    fn pick(self, b: &RewardBreakdown) -> f64 {
        match self {
            RewardComponent::Correctness => b.correctness,
            RewardComponent::Consistency => b.consistency,
            RewardComponent::NoMatch => b.nomatch_penalty,
            RewardComponent::Total => b.total,
        }
    }

    fn pick_expected(self, m: &ExpectedMetrics) -> f64 {
        match self {
            RewardComponent::Correctness => m.correctness,
            RewardComponent::Consistency => m.consistency,
            RewardComponent::NoMatch => m.nomatch_penalty,
            RewardComponent::Total => m.reward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Exponential moving average of past batch rewards.
    RunningMean,
}

/// Where the history bucket comes from during supervised fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftHistory {
    /// The previous step's target answer.
    Target,
    /// The policy's own previous answer, as at rollout time. The bucket then
    /// carries no label information beyond the observation.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub noise_rate: f64,
    pub history: SftHistory,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 500, learning_rate: 2.0, noise_rate: 0.3, history: SftHistory::Sampled }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the KL penalty to the reference policy.
    pub beta: f64,
    pub learning_rate: f64,
    pub episodes: usize,
    pub batch_size: usize,
    /// Batches per recorded epoch.
    pub eval_every: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub baseline: Baseline,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            learning_rate: 8.0,
            episodes: 20_000,
            batch_size: 64,
            eval_every: 25,
            noise_rate: 0.3,
            seed: 0,
            baseline: Baseline::RunningMean,
            reward: RewardConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch size and eval interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise rate must lie in [0, 1]");
        }
        self.reward.validate()?;
        Ok(())
    }
}

/// Per-epoch held-out expectations plus the mean sampled training reward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub episodes_seen: Vec<usize>,
    pub batch_reward: Vec<f64>,
    pub mean_reward: Vec<f64>,
    pub mean_kl: Vec<f64>,
    pub a_q: Vec<f64>,
    pub h_cc: Vec<f64>,
}

impl TrainTrace {
    pub fn epochs(&self) -> usize {
        self.mean_reward.len()
    }

    /// One row per epoch, preceded by a `#` comment line.
    pub fn to_csv(&self, comment: &str) -> String {
        let rows = (0..self.epochs())
            .map(|i| {
                vec![
                    (i + 1).to_string(),
                    self.episodes_seen[i].to_string(),
                    self.batch_reward[i].to_string(),
                    self.mean_reward[i].to_string(),
                    self.mean_kl[i].to_string(),
                    self.a_q[i].to_string(),
                    self.h_cc[i].to_string(),
                ]
            })
            .collect();
        csv_text(
            comment.to_string(),
            &["epoch", "episodes", "batch_reward", "reward", "kl", "a_q", "h_cc"],
            rows,
        )
    }

    fn push(&mut self, episodes: usize, batch_reward: f64, m: &ExpectedMetrics) {
        self.episodes_seen.push(episodes);
        self.batch_reward.push(batch_reward);
        self.mean_reward.push(m.reward);
        self.mean_kl.push(m.kl);
        self.a_q.push(m.a_q);
        self.h_cc.push(m.h_cc);
    }
}

fn label_indices(layout: &PolicyLayout, conversations: &[Conversation]) -> Vec<usize> {
    conversations.iter().filter_map(|c| layout.label_index(c.class_label)).collect()
}

/// Fits the table by full-batch gradient descent on the expected
/// cross-entropy of target answers, with the previous step's target as the
/// history bucket. Observation noise is integrated out exactly.
pub fn pretrain_sft(
    layout: &PolicyLayout,
    train: &[Conversation],
    config: &SftConfig,
) -> Result<PolicyTable, SimError> {
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(SimError::InvalidConfig("learning rate must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.noise_rate) {
        return Err(SimError::InvalidConfig("noise rate must lie in [0, 1]".into()));
    }
    let mut policy = PolicyTable::uniform(layout.clone())?;
    let weights = label_weights(layout, train)?;
    let noise = noise_matrix(layout.labels.len(), config.noise_rate);

    match config.history {
        SftHistory::Target => fit_teacher_forced(&mut policy, &weights, &noise, config),
        SftHistory::Sampled => fit_sampled_history(&mut policy, &weights, &noise, config),
    }
    Ok(policy)
}

fn fit_teacher_forced(policy: &mut PolicyTable, weights: &[f64], noise: &[Vec<f64>], config: &SftConfig) {
    let layout = policy.layout.clone();
    // Soft target counts per logit, normalised per conversation.
    let mut target = vec![0.0; layout.logit_count()];
    let mut mass = vec![0.0; layout.logit_count()];
    let mut states = Vec::new();
    for (t, label) in layout.labels.iter().enumerate() {
        let path = label.target_path();
        for noisy in 0..layout.labels.len() {
            let w = weights[t] * noise[t][noisy];
            if w == 0.0 {
                continue;
            }
            for (k, step) in Step::ALL.iter().enumerate() {
                let prev = if k == 0 { None } else { Some(path.category(Step::ALL[k - 1])) };
                let off = layout.offset(noisy, k, layout.bucket_of(k, prev));
                let Some(a) = layout.actions[k].iter().position(|c| *c == path.category(*step)) else {
                    continue;
                };
                target[off + a] += w;
                if mass[off] == 0.0 {
                    states.push((off, k));
                }
                mass[off] += w;
            }
        }
    }
    let tau = policy.temperature;
    let mut probs = Vec::new();
    for _ in 0..config.epochs {
        for &(off, k) in &states {
            let n = layout.actions[k].len();
            softmax_into(&policy.logits[off..off + n], tau, &mut probs);
            for j in 0..n {
                let grad = (mass[off] * probs[j] - target[off + j]) / tau;
                policy.logits[off + j] -= config.learning_rate * grad;
            }
        }
    }
}

fn fit_sampled_history(policy: &mut PolicyTable, weights: &[f64], noise: &[Vec<f64>], config: &SftConfig) {
    let layout = policy.layout.clone();
    let n_labels = layout.labels.len();
    // Per observation and step: soft target counts over actions.
    let mut target: Vec<Vec<Vec<f64>>> = vec![layout.actions.iter().map(|a| vec![0.0; a.len()]).collect(); n_labels];
    for (t, label) in layout.labels.iter().enumerate() {
        let path = label.target_path();
        for (noisy, per_step) in target.iter_mut().enumerate() {
            let w = weights[t] * noise[t][noisy];
            for (k, step) in Step::ALL.iter().enumerate() {
                if let Some(a) = layout.actions[k].iter().position(|c| *c == path.category(*step)) {
                    per_step[k][a] += w;
                }
            }
        }
    }
    let tau = policy.temperature;
    let mut probs = Vec::new();
    for _ in 0..config.epochs {
        for (noisy, per_step) in target.iter().enumerate() {
            let mass: f64 = per_step[0].iter().sum();
            if mass == 0.0 {
                continue;
            }
            // Distribution of the previous answer under the current policy.
            let mut bucket_prob = vec![1.0];
            for k in 0..STEP_COUNT {
                let n = layout.actions[k].len();
                let mut next = vec![0.0; n];
                for (b, pb) in bucket_prob.iter().enumerate() {
                    let off = layout.offset(noisy, k, b);
                    softmax_into(&policy.logits[off..off + n], tau, &mut probs);
                    for j in 0..n {
                        next[j] += pb * probs[j];
                    }
                    if *pb == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        let grad = pb * (mass * probs[j] - per_step[k][j]) / tau;
                        policy.logits[off + j] -= config.learning_rate * grad;
                    }
                }
                bucket_prob = std::iter::once(0.0).chain(next).collect();
            }
        }
    }
}

struct Episode {
    offsets: [usize; STEP_COUNT],
    actions: [usize; STEP_COUNT],
    value: f64,
    total: f64,
}

fn sample_episode(
    graph: &ReasoningGraph,
    policy: &PolicyTable,
    true_label: usize,
    noise_rate: f64,
    reward: &RewardConfig,
    component: RewardComponent,
    rng: &mut ChaCha8Rng,
    probs: &mut Vec<f64>,
) -> Result<Episode, SimError> {
    let layout = &policy.layout;
    let label: ClassLabel = layout.labels[true_label];
    let obs = super::observe(label, &layout.labels, noise_rate, rng);
    let noisy = layout.label_index(obs.noisy_label).expect("drawn from layout");
    let mut offsets = [0; STEP_COUNT];
    let mut actions = [0; STEP_COUNT];
    let mut cats = [crate::graph::Category::NoMatch; STEP_COUNT];
    for k in 0..STEP_COUNT {
        let bucket = if k == 0 { 0 } else { actions[k - 1] + 1 };
        let off = layout.offset(noisy, k, bucket);
        policy.probs_into(off, k, probs);
        let a = sample_index(probs, rng);
        offsets[k] = off;
        actions[k] = a;
        cats[k] = layout.actions[k][a];
    }
    let b = sim_reward(graph, &Step::ALL, &cats, &label.target_path(), reward)?;
    Ok(Episode { offsets, actions, value: component.pick(&b), total: b.total })
}

/// Adds `weight * d log pi(episode) / d logits` into `grad`.
fn add_score(policy: &PolicyTable, ep: &Episode, weight: f64, grad: &mut [f64], probs: &mut Vec<f64>) {
    let tau = policy.temperature;
    for k in 0..STEP_COUNT {
        let off = ep.offsets[k];
        policy.probs_into(off, k, probs);
        for (j, p) in probs.iter().enumerate() {
            let indicator = if j == ep.actions[k] { 1.0 } else { 0.0 };
            grad[off + j] += weight * (indicator - p) / tau;
        }
    }
}

/// Expected value of one reward component under the policy, by exact
/// enumeration over labels, observations and answer sequences.
pub fn expected_component(
    graph: &ReasoningGraph,
    policy: &PolicyTable,
    weights: &[f64],
    noise_rate: f64,
    reward: &RewardConfig,
    component: RewardComponent,
) -> Result<f64, SimError> {
    let m = expected_metrics(graph, policy, None, weights, noise_rate, reward)?;
    Ok(component.pick_expected(&m))
}

/// Central finite differences of the exact expected component with respect
/// to every logit.
pub fn estimate_gradient_fd(
    graph: &ReasoningGraph,
    policy: &PolicyTable,
    weights: &[f64],
    noise_rate: f64,
    reward: &RewardConfig,
    component: RewardComponent,
    step: f64,
) -> Result<Vec<f64>, SimError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(SimError::InvalidStep(step));
    }
    let mut probe = policy.clone();
    let mut grad = vec![0.0; policy.logits.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let base = policy.logits[i];
        probe.logits[i] = base + step;
        let up = expected_component(graph, &probe, weights, noise_rate, reward, component)?;
        probe.logits[i] = base - step;
        let down = expected_component(graph, &probe, weights, noise_rate, reward, component)?;
        probe.logits[i] = base;
        *g = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

fn draw_label(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    sample_index(weights, rng)
}

/// Monte-Carlo score-function gradient of the expected component. The
/// baseline comes from an independent pilot batch, so the estimate stays
/// unbiased.
#[allow(clippy::too_many_arguments)]
pub fn score_function_gradient(
    graph: &ReasoningGraph,
    policy: &PolicyTable,
    weights: &[f64],
    noise_rate: f64,
    reward: &RewardConfig,
    component: RewardComponent,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>, SimError> {
    if samples == 0 {
        return Err(SimError::InvalidConfig("need at least one sample".into()));
    }
    if weights.len() != policy.layout.labels.len() {
        return Err(SimError::InvalidConfig("label weight count does not match layout".into()));
    }
    let mut probs = Vec::new();
    let mut pilot_rng = ChaCha8Rng::seed_from_u64(seed);
    pilot_rng.set_stream(1);
    let pilot = samples.clamp(1, 10_000);
    let mut baseline = 0.0;
    for _ in 0..pilot {
        let t = draw_label(weights, &mut pilot_rng);
        let ep = sample_episode(graph, policy, t, noise_rate, reward, component, &mut pilot_rng, &mut probs)?;
        baseline += ep.value;
    }
    baseline /= pilot as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad = vec![0.0; policy.logits.len()];
    for _ in 0..samples {
        let t = draw_label(weights, &mut rng);
        let ep = sample_episode(graph, policy, t, noise_rate, reward, component, &mut rng, &mut probs)?;
        add_score(policy, &ep, ep.value - baseline, &mut grad, &mut probs);
    }
    for g in &mut grad {
        *g /= samples as f64;
    }
    Ok(grad)
}

/// Solves `(I + c F) x = r` for the softmax Fisher matrix
/// `F = (diag(p) - p p^T) / tau^2`.
fn solve_fisher(p: &[f64], c: f64, r: &[f64], out: &mut Vec<f64>) {
    out.clear();
    if c == 0.0 {
        out.extend_from_slice(r);
        return;
    }
    let d: Vec<f64> = p.iter().map(|pi| 1.0 + c * pi).collect();
    let ainv_r: Vec<f64> = r.iter().zip(&d).map(|(ri, di)| ri / di).collect();
    let p_ainv_r: f64 = p.iter().zip(&ainv_r).map(|(pi, x)| pi * x).sum();
    // 1 - c p^T A^-1 p, written without cancellation.
    let denom: f64 = p.iter().zip(&d).map(|(pi, di)| pi / di).sum();
    for ((x, pi), di) in ainv_r.iter().zip(p).zip(&d) {
        out.push(x + c * pi / di * p_ainv_r / denom);
    }
}

/// Policy-gradient fine-tuning from `reference`, penalised by the summed
/// per-turn KL divergence to it. Each update takes the reward gradient
/// explicitly and the KL term with a Fisher-preconditioned implicit step,
/// which keeps large penalty weights stable.
pub fn train_rl(
    graph: &ReasoningGraph,
    reference: &PolicyTable,
    train: &[Conversation],
    held_out: &[Conversation],
    config: &TrainConfig,
) -> Result<(PolicyTable, TrainTrace), SimError> {
    config.validate()?;
    let layout = &reference.layout;
    let train_labels = label_indices(layout, train);
    if train_labels.is_empty() {
        return Err(SimError::EmptyDataset);
    }
    let eval_weights = label_weights(layout, held_out)?;
    let tau = reference.temperature;
    let mut policy = reference.clone();
    let mut trace = TrainTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batches = config.episodes.div_ceil(config.batch_size);
    let n = policy.logits.len();
    let mut grad = vec![0.0; n];
    let mut visits = vec![0.0; n];
    let mut visited: Vec<(usize, usize)> = Vec::new();
    let mut probs = Vec::new();
    let mut ref_probs = Vec::new();
    let mut rhs = Vec::new();
    let mut step_out = Vec::new();
    let mut running: Option<f64> = None;
    let mut epoch_reward = 0.0;
    let mut epoch_batches = 0;
    let mut seen = 0;
    let mut episodes = Vec::with_capacity(config.batch_size);

    for batch in 0..batches {
        let size = config.batch_size.min(config.episodes - seen);
        episodes.clear();
        for _ in 0..size {
            let t = train_labels[rng.random_range(0..train_labels.len())];
            episodes.push(sample_episode(
                graph,
                &policy,
                t,
                config.noise_rate,
                &config.reward,
                RewardComponent::Total,
                &mut rng,
                &mut probs,
            )?);
        }
        seen += size;
        let batch_mean = episodes.iter().map(|e| e.total).sum::<f64>() / size as f64;
        let baseline = match config.baseline {
            Baseline::None => 0.0,
            Baseline::RunningMean => *running.get_or_insert(batch_mean),
        };

        for ep in &episodes {
            add_score(&policy, ep, (ep.total - baseline) / size as f64, &mut grad, &mut probs);
            for k in 0..STEP_COUNT {
                let off = ep.offsets[k];
                if visits[off] == 0.0 {
                    visited.push((off, k));
                }
                visits[off] += 1.0 / size as f64;
            }
        }

        for &(off, k) in &visited {
            let m = layout.actions[k].len();
            policy.probs_into(off, k, &mut probs);
            reference.probs_into(off, k, &mut ref_probs);
            let kl: f64 = probs
                .iter()
                .zip(&ref_probs)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p.ln() - q.ln()))
                .sum();
            rhs.clear();
            for j in 0..m {
                let log_ratio = if probs[j] > 0.0 { probs[j].ln() - ref_probs[j].ln() } else { 0.0 };
                let kl_grad = probs[j] * (log_ratio - kl) / tau;
                rhs.push(config.learning_rate * (grad[off + j] - config.beta * visits[off] * kl_grad));
            }
            let c = config.learning_rate * config.beta * visits[off] / (tau * tau);
            solve_fisher(&probs, c, &rhs, &mut step_out);
            for j in 0..m {
                policy.logits[off + j] += step_out[j];
                grad[off + j] = 0.0;
            }
            visits[off] = 0.0;
        }
        visited.clear();

        if let Some(r) = running.as_mut() {
            *r = 0.9 * *r + 0.1 * batch_mean;
        }
        epoch_reward += batch_mean;
        epoch_batches += 1;

        if !policy.is_finite() {
            return Err(SimError::Divergence { epoch: trace.epochs() + 1, trace: Box::new(trace) });
        }
        if (batch + 1) % config.eval_every == 0 || batch + 1 == batches {
            let m = expected_metrics(graph, &policy, Some(reference), &eval_weights, config.noise_rate, &config.reward)?;
            trace.push(seen, epoch_reward / epoch_batches as f64, &m);
            epoch_reward = 0.0;
            epoch_batches = 0;
        }
    }
    Ok((policy, trace))
}

/// One trained policy's held-out expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub metrics: ExpectedMetrics,
}

/// Trains one policy per `(lambda, seed)` from the same reference.
pub fn sweep_lambda(
    graph: &ReasoningGraph,
    reference: &PolicyTable,
    train: &[Conversation],
    held_out: &[Conversation],
    lambdas: &[f64],
    seeds: &[u64],
    config: &TrainConfig,
) -> Result<Vec<SweepRow>, SimError> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(SimError::InvalidConfig("sweep needs at least one lambda and one seed".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len() * seeds.len());
    for &lambda in lambdas {
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.reward.lambda = lambda;
            cfg.seed = seed;
            let (policy, _) = train_rl(graph, reference, train, held_out, &cfg)?;
            let weights = label_weights(&reference.layout, held_out)?;
            let metrics = expected_metrics(graph, &policy, Some(reference), &weights, cfg.noise_rate, &cfg.reward)?;
            rows.push(SweepRow { lambda, seed, metrics });
        }
    }
    Ok(rows)
}

/// Median of each metric across seeds, one entry per lambda in grid order.
pub fn sweep_medians(rows: &[SweepRow]) -> Vec<(f64, ExpectedMetrics)> {
    let mut lambdas: Vec<f64> = Vec::new();
    for r in rows {
        if !lambdas.contains(&r.lambda) {
            lambdas.push(r.lambda);
        }
    }
    lambdas
        .into_iter()
        .map(|lambda| {
            let group: Vec<&ExpectedMetrics> = rows.iter().filter(|r| r.lambda == lambda).map(|r| &r.metrics).collect();
            let med = |f: fn(&ExpectedMetrics) -> f64| {
                let mut v: Vec<f64> = group.iter().map(|m| f(m)).collect();
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
            };
            let m = ExpectedMetrics {
                reward: med(|m| m.reward),
                correctness: med(|m| m.correctness),
                consistency: med(|m| m.consistency),
                nomatch_penalty: med(|m| m.nomatch_penalty),
                a_q: med(|m| m.a_q),
                a_c: med(|m| m.a_c),
                a_d: med(|m| m.a_d),
                h_cc: med(|m| m.h_cc),
                kl: med(|m| m.kl),
            };
            (lambda, m)
        })
        .collect()
}

/// Per-seed rows followed by one `median` row per lambda.
pub fn sweep_to_csv(rows: &[SweepRow], comment: &str) -> String {
    let line = |lambda: f64, seed: String, m: &ExpectedMetrics| {
        vec![
            lambda.to_string(),
            seed,
            m.reward.to_string(),
            m.correctness.to_string(),
            m.consistency.to_string(),
            m.nomatch_penalty.to_string(),
            m.a_q.to_string(),
            m.a_c.to_string(),
            m.a_d.to_string(),
            m.h_cc.to_string(),
            m.kl.to_string(),
        ]
    };
    let mut out: Vec<Vec<String>> = rows.iter().map(|r| line(r.lambda, r.seed.to_string(), &r.metrics)).collect();
    out.extend(sweep_medians(rows).iter().map(|(l, m)| line(*l, "median".into(), m)));
    csv_text(
        comment.to_string(),
        &["lambda", "seed", "reward", "correctness", "consistency", "nomatch_penalty", "a_q", "a_c", "a_d", "h_cc", "kl"],
        out,
    )
}
