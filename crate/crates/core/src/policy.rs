//! Tabular softmax policies, behaviour cloning, mixtures and the clipped
//! policy-gradient improvement step.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, State};
use crate::rollout::{CollectedEpisode, Trajectory};

/// Logit gap used to encode a zero probability with a finite logit.
/// `exp(-50)` is below f64 resolution relative to 1.
pub const ZERO_PROB_LOGIT_GAP: f64 = 50.0;

/// Log-ratios are clamped to this magnitude before exponentiation.
const MAX_LOG_RATIO: f64 = 30.0;

/// Maximum number of step halvings per epoch before the epoch is rejected.
const MAX_BACKTRACKS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid policy-gradient config: {0}")]
    InvalidConfig(String),
    #[error("invalid logits: {0}")]
    InvalidLogits(String),
    #[error("index out of range: state {state}, action {action}")]
    OutOfRange { state: usize, action: usize },
}

/// `π(a | s) = softmax(θ[s])[a]` over a finite state and action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub struct TabularSoftmaxPolicy {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    num_states: usize,
    num_actions: usize,
    logits: Vec<Vec<f64>>,
}

impl TryFrom<PolicyRepr> for TabularSoftmaxPolicy {
    type Error = PolicyError;
    fn try_from(r: PolicyRepr) -> Result<Self, Self::Error> {
        if r.logits.len() != r.num_states || r.logits.iter().any(|row| row.len() != r.num_actions) {
            return Err(PolicyError::InvalidLogits("logits do not match dimensions".into()));
        }
        Self::from_logits(r.num_states, r.num_actions, r.logits.into_iter().flatten().collect())
    }
}

impl From<TabularSoftmaxPolicy> for PolicyRepr {
    fn from(p: TabularSoftmaxPolicy) -> Self {
        PolicyRepr {
            num_states: p.num_states,
            num_actions: p.num_actions,
            logits: p.logits.chunks(p.num_actions).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl TabularSoftmaxPolicy {
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        assert!(num_states > 0 && num_actions > 0);
        Self { num_states, num_actions, logits: vec![0.0; num_states * num_actions] }
    }

    /// Row-major logits, `num_states * num_actions` entries.
    pub fn from_logits(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self, PolicyError> {
        if num_states == 0 || num_actions == 0 {
            return Err(PolicyError::Empty("policy dimensions"));
        }
        if logits.len() != num_states * num_actions {
            return Err(PolicyError::InvalidLogits(format!(
                "{} logits for {num_states}x{num_actions}",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(PolicyError::InvalidLogits("non-finite logit".into()));
        }
        Ok(Self { num_states, num_actions, logits })
    }

    /// Logits reproducing the given per-state action distributions. Zero entries
    /// get a logit [`ZERO_PROB_LOGIT_GAP`] below the row maximum.
    pub fn from_probs(num_actions: usize, rows: &[Vec<f64>]) -> Result<Self, PolicyError> {
        let mut logits = Vec::with_capacity(rows.len() * num_actions);
        for row in rows {
            if row.len() != num_actions {
                return Err(PolicyError::InvalidLogits("probability row length".into()));
            }
            logits.extend(probs_to_logits(row)?);
        }
        Self::from_logits(rows.len(), num_actions, logits)
    }

    /// A policy that plays `actions[s]` in state `s` (up to `exp(-50)` mass elsewhere).
    pub fn deterministic(actions: &[Action], num_actions: usize) -> Self {
        let rows: Vec<Vec<f64>> = actions
            .iter()
            .map(|&a| {
                let mut r = vec![0.0; num_actions];
                r[a] = 1.0;
                r
            })
            .collect();
        Self::from_probs(num_actions, &rows).expect("valid one-hot rows")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_states, self.num_actions)
    }

    pub fn logits(&self, s: State) -> &[f64] {
        &self.logits[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn logits_flat(&self) -> &[f64] {
        &self.logits
    }

    pub fn set_logits_flat(&mut self, logits: &[f64]) -> Result<(), PolicyError> {
        if logits.len() != self.logits.len() || logits.iter().any(|l| !l.is_finite()) {
            return Err(PolicyError::InvalidLogits("replacement logits".into()));
        }
        self.logits.copy_from_slice(logits);
        Ok(())
    }

    pub fn probs(&self, s: State) -> Vec<f64> {
        softmax(self.logits(s))
    }

    pub fn action_prob(&self, s: State, a: Action) -> f64 {
        self.probs(s)[a]
    }

    pub fn try_action_prob(&self, s: State, a: Action) -> Result<f64, PolicyError> {
        if s >= self.num_states || a >= self.num_actions {
            return Err(PolicyError::OutOfRange { state: s, action: a });
        }
        Ok(self.action_prob(s, a))
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: State, rng: &mut R) -> Action {
        crate::env::sample_index(&self.probs(s), rng)
    }

    pub fn entropy(&self, s: State) -> f64 {
        self.probs(s).iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }

    /// Largest total-variation distance between the two policies over `states`.
    pub fn max_tv_distance(&self, other: &Self, states: impl IntoIterator<Item = State>) -> f64 {
        states
            .into_iter()
            .map(|s| {
                let p = self.probs(s);
                let q = other.probs(s);
                0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn probs_to_logits(probs: &[f64]) -> Result<Vec<f64>, PolicyError> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(PolicyError::InvalidLogits(format!("bad probabilities {probs:?}")));
    }
    let max = probs.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(PolicyError::InvalidLogits("all-zero probability row".into()));
    }
    let floor = max.ln() - ZERO_PROB_LOGIT_GAP;
    Ok(probs.iter().map(|&p| if p > 0.0 { p.ln().max(floor) } else { floor }).collect())
}

/// The `K` context-unaware basis policies `{μ_k}` used as bandit arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TabularSoftmaxPolicy>", into = "Vec<TabularSoftmaxPolicy>")]
pub struct BasisPolicySet {
    policies: Vec<TabularSoftmaxPolicy>,
}

impl BasisPolicySet {
    pub fn new(policies: Vec<TabularSoftmaxPolicy>) -> Result<Self, PolicyError> {
        let first = policies.first().ok_or(PolicyError::Empty("basis policy set"))?.shape();
        if let Some(p) = policies.iter().find(|p| p.shape() != first) {
            return Err(PolicyError::ShapeMismatch { expected: first, got: p.shape() });
        }
        Ok(Self { policies })
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, k: usize) -> &TabularSoftmaxPolicy {
        &self.policies[k]
    }

    pub fn policies(&self) -> &[TabularSoftmaxPolicy] {
        &self.policies
    }

    pub fn shape(&self) -> (usize, usize) {
        self.policies[0].shape()
    }
}

impl TryFrom<Vec<TabularSoftmaxPolicy>> for BasisPolicySet {
    type Error = PolicyError;
    fn try_from(v: Vec<TabularSoftmaxPolicy>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BasisPolicySet> for Vec<TabularSoftmaxPolicy> {
    fn from(b: BasisPolicySet) -> Self {
        b.policies
    }
}

/// Maximum-likelihood tabular fit with additive smoothing.
///
/// `π(a|s) = (n(s,a) + α) / (n(s) + α|A|)`; unvisited states are uniform.
pub fn behavior_clone<'a, I>(
    trajectories: I,
    num_states: usize,
    num_actions: usize,
    smoothing: f64,
) -> Result<TabularSoftmaxPolicy, PolicyError>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    if !(smoothing.is_finite() && smoothing >= 0.0) {
        return Err(PolicyError::InvalidConfig(format!("smoothing {smoothing}")));
    }
    let mut counts = vec![0.0f64; num_states * num_actions];
    let mut any = false;
    for traj in trajectories {
        any = true;
        for &(s, a) in &traj.steps {
            if s >= num_states || a >= num_actions {
                return Err(PolicyError::OutOfRange { state: s, action: a });
            }
            counts[s * num_actions + a] += 1.0;
        }
    }
    if !any {
        return Err(PolicyError::Empty("trajectory list"));
    }
    let mut logits = Vec::with_capacity(counts.len());
    for row in counts.chunks(num_actions) {
        let n: f64 = row.iter().sum();
        if n == 0.0 {
            logits.extend(std::iter::repeat_n(0.0, num_actions));
            continue;
        }
        let denom = n + smoothing * num_actions as f64;
        let probs: Vec<f64> = row.iter().map(|c| (c + smoothing) / denom).collect();
        logits.extend(probs_to_logits(&probs)?);
    }
    TabularSoftmaxPolicy::from_logits(num_states, num_actions, logits)
}

/// Per-state mixture `Σ_k w_k μ_k(·|s)`, returned as logits of the mixture.
pub fn mixture_policy(basis: &BasisPolicySet, weights: &[f64]) -> Result<TabularSoftmaxPolicy, PolicyError> {
    if weights.len() != basis.len() {
        return Err(PolicyError::InvalidWeights(format!(
            "{} weights for {} policies",
            weights.len(),
            basis.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(PolicyError::InvalidWeights(format!("{weights:?} is not a distribution")));
    }
    let (ns, na) = basis.shape();
    let mut rows = Vec::with_capacity(ns);
    for s in 0..ns {
        let mut mix = vec![0.0; na];
        for (w, pi) in weights.iter().zip(basis.policies()) {
            for (m, p) in mix.iter_mut().zip(pi.probs(s)) {
                *m += w * p;
            }
        }
        rows.push(mix);
    }
    TabularSoftmaxPolicy::from_probs(na, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    /// Running mean of the returns seen before the current batch.
    MeanReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyGradientConfig {
    pub learning_rate: f64,
    /// Surrogate clip `ε`; probability ratios are also kept inside `[1-ε, 1+ε]`.
    pub clip_ratio: f64,
    pub epochs_per_episode: usize,
    pub entropy_bonus: f64,
    pub baseline: Baseline,
}

impl Default for PolicyGradientConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            clip_ratio: 0.2,
            epochs_per_episode: 4,
            entropy_bonus: 0.0,
            baseline: Baseline::MeanReturn,
        }
    }
}

impl PolicyGradientConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(PolicyError::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(PolicyError::InvalidConfig(format!("clip_ratio {} outside (0, 1)", self.clip_ratio)));
        }
        if !(self.entropy_bonus.is_finite() && self.entropy_bonus >= 0.0) {
            return Err(PolicyError::InvalidConfig("entropy_bonus".into()));
        }
        Ok(())
    }
}

/// Tracks the mean-return baseline of one learner across updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineTracker {
    count: usize,
    mean: f64,
}

impl BaselineTracker {
    /// Baseline for a new batch; falls back to the batch mean before any history.
    pub fn value(&self, kind: Baseline, batch: &[CollectedEpisode]) -> f64 {
        match kind {
            Baseline::None => 0.0,
            Baseline::MeanReturn if self.count > 0 => self.mean,
            Baseline::MeanReturn if batch.is_empty() => 0.0,
            Baseline::MeanReturn => batch.iter().map(|e| e.ret).sum::<f64>() / batch.len() as f64,
        }
    }

    pub fn observe(&mut self, ret: f64) {
        self.count += 1;
        self.mean += (ret - self.mean) / self.count as f64;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    /// Epochs whose step was accepted.
    pub epochs_applied: usize,
    /// Step-size multiplier accepted in each applied epoch.
    pub step_scales: Vec<f64>,
    /// Number of ratio evaluations that had to be clamped.
    pub clamped_ratios: usize,
}

struct RatioEval {
    ratio: f64,
    clamped: bool,
}

fn ratio(policy: &TabularSoftmaxPolicy, s: State, a: Action, behavior_prob: f64) -> RatioEval {
    let p = policy.action_prob(s, a);
    let log_ratio = p.ln() - behavior_prob.ln();
    if log_ratio.is_finite() && log_ratio.abs() <= MAX_LOG_RATIO {
        RatioEval { ratio: log_ratio.exp(), clamped: false }
    } else {
        let clamped = if log_ratio.is_nan() { 0.0 } else { log_ratio.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO) };
        RatioEval { ratio: clamped.exp(), clamped: true }
    }
}

fn num_transitions(batch: &[CollectedEpisode]) -> usize {
    batch.iter().map(|e| e.steps.len()).sum()
}

/// Clipped surrogate objective averaged over the transitions of `batch`:
/// `mean_t min(ρ_t A_t, clip(ρ_t, 1-ε, 1+ε) A_t) + β mean_t H(π(·|s_t))`,
/// with `ρ_t = π(a_t|s_t) / π_old(a_t|s_t)` and `A_t = V − baseline`.
pub fn surrogate_objective(
    policy: &TabularSoftmaxPolicy,
    batch: &[CollectedEpisode],
    baseline: f64,
    clip_ratio: f64,
    entropy_bonus: f64,
) -> f64 {
    let m = num_transitions(batch);
    if m == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for ep in batch {
        let adv = ep.ret - baseline;
        for st in &ep.steps {
            let rho = ratio(policy, st.state, st.action, st.behavior_prob).ratio;
            let clipped = rho.clamp(1.0 - clip_ratio, 1.0 + clip_ratio);
            total += (rho * adv).min(clipped * adv);
            if entropy_bonus != 0.0 {
                total += entropy_bonus * policy.entropy(st.state);
            }
        }
    }
    total / m as f64
}

/// Analytic gradient of [`surrogate_objective`] with respect to the flat logits.
pub fn surrogate_gradient(
    policy: &TabularSoftmaxPolicy,
    batch: &[CollectedEpisode],
    baseline: f64,
    clip_ratio: f64,
    entropy_bonus: f64,
) -> Vec<f64> {
    let na = policy.num_actions();
    let mut grad = vec![0.0; policy.logits_flat().len()];
    let m = num_transitions(batch);
    if m == 0 {
        return grad;
    }
    let scale = 1.0 / m as f64;
    for ep in batch {
        let adv = ep.ret - baseline;
        for st in &ep.steps {
            let probs = policy.probs(st.state);
            let row = &mut grad[st.state * na..(st.state + 1) * na];
            let r = ratio(policy, st.state, st.action, st.behavior_prob);
            // The unclipped branch is the active one of the min.
            let active = !r.clamped
                && ((adv > 0.0 && r.ratio <= 1.0 + clip_ratio) || (adv < 0.0 && r.ratio >= 1.0 - clip_ratio));
            if active {
                for (b, g) in row.iter_mut().enumerate() {
                    let indicator = if b == st.action { 1.0 } else { 0.0 };
                    *g += scale * adv * r.ratio * (indicator - probs[b]);
                }
            }
            if entropy_bonus != 0.0 {
                let h: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
                for (b, g) in row.iter_mut().enumerate() {
                    let p = probs[b];
                    if p > 0.0 {
                        *g += scale * entropy_bonus * (-p * (p.ln() + h));
                    }
                }
            }
        }
    }
    grad
}

fn ratios_within(policy: &TabularSoftmaxPolicy, batch: &[CollectedEpisode], clip_ratio: f64) -> bool {
    batch.iter().flat_map(|e| &e.steps).all(|st| {
        let r = ratio(policy, st.state, st.action, st.behavior_prob);
        !r.clamped && r.ratio >= 1.0 - clip_ratio && r.ratio <= 1.0 + clip_ratio
    })
}

/// Clipped-surrogate gradient ascent for `epochs_per_episode` passes.
///
/// Each epoch steps along the analytic gradient, halving the step until every
/// batch ratio stays within `[1-ε, 1+ε]`; an epoch that cannot satisfy this
/// is dropped and the remaining epochs are skipped.
pub fn policy_gradient_update(
    policy: &mut TabularSoftmaxPolicy,
    batch: &[CollectedEpisode],
    config: &PolicyGradientConfig,
    baseline: f64,
) -> Result<UpdateReport, PolicyError> {
    config.validate()?;
    let mut report = UpdateReport::default();
    for st in batch.iter().flat_map(|e| &e.steps) {
        if st.state >= policy.num_states() || st.action >= policy.num_actions() {
            return Err(PolicyError::OutOfRange { state: st.state, action: st.action });
        }
        if ratio(policy, st.state, st.action, st.behavior_prob).clamped {
            report.clamped_ratios += 1;
        }
    }
    if config.learning_rate == 0.0 || num_transitions(batch) == 0 {
        return Ok(report);
    }
    for _ in 0..config.epochs_per_episode {
        let grad = surrogate_gradient(policy, batch, baseline, config.clip_ratio, config.entropy_bonus);
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let base = policy.logits_flat().to_vec();
        let mut candidate = policy.clone();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_BACKTRACKS {
            let stepped: Vec<f64> =
                base.iter().zip(&grad).map(|(l, g)| l + scale * config.learning_rate * g).collect();
            candidate.set_logits_flat(&stepped)?;
            if ratios_within(&candidate, batch, config.clip_ratio) {
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        *policy = candidate;
        report.epochs_applied += 1;
        report.step_scales.push(scale);
    }
    Ok(report)
}
