//! Observational statistics over `{m_i, V_i}`, causal bounds on
//! `E[V | do(μ_k)]`, and exact oracles used to validate them.
//!
//! With `p_k = P(μ_k)` and `m_k = E[V | μ_k]` over a return support
//! `[v_lo, v_hi]`:
//!
//! * natural rule: `l_k = m_k p_k + (1 - p_k) v_lo`, `h_k = m_k p_k + (1 - p_k) v_hi`
//! * expert-optimal rule: same `l_k`, `h_k = Σ_j m_j p_j` for every arm.

use std::io::Write;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::LabeledDataset;
use crate::env::{Context, ContextualEnv, EnvError, ValueSupport};
use crate::expert::ExpertModel;
use crate::policy::{BasisPolicySet, TabularSoftmaxPolicy};
use crate::rollout::rollout;

#[derive(Debug, Error)]
pub enum CausalError {
    #[error("invalid statistics: {0}")]
    InvalidStats(String),
    #[error("invalid bound configuration: {0}")]
    InvalidConfig(String),
    #[error("bounds for arm {arm} are inverted: [{lower}, {upper}]")]
    Inverted { arm: usize, lower: f64, upper: f64 },
    #[error("expert and basis disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("bounds export: {0}")]
    Csv(#[from] csv::Error),
}

/// `P̂(μ_k)`, `Ê[V | μ_k]` and, for sampled data, per-arm counts.
///
/// `mean_v[k]` is NaN for an arm with no mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalStats {
    pub p_mu: Vec<f64>,
    pub mean_v: Vec<f64>,
    pub counts: Option<Vec<usize>>,
}

impl ObservationalStats {
    /// Statistics of a known (not sampled) observational distribution.
    pub fn exact(p_mu: Vec<f64>, mean_v: Vec<f64>) -> Result<Self, CausalError> {
        let stats = Self { p_mu, mean_v, counts: None };
        stats.validate()?;
        Ok(stats)
    }

    pub fn num_arms(&self) -> usize {
        self.p_mu.len()
    }

    fn validate(&self) -> Result<(), CausalError> {
        if self.p_mu.is_empty() || self.p_mu.len() != self.mean_v.len() {
            return Err(CausalError::InvalidStats("p_mu and mean_v lengths differ or are empty".into()));
        }
        if self.p_mu.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.p_mu.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(CausalError::InvalidStats(format!("p_mu {:?} is not a distribution", self.p_mu)));
        }
        for (k, (&p, &m)) in self.p_mu.iter().zip(&self.mean_v).enumerate() {
            if p > 0.0 && !m.is_finite() {
                return Err(CausalError::InvalidStats(format!("arm {k} has mass but mean {m}")));
            }
        }
        Ok(())
    }
}

pub fn empirical_stats(labeled: &LabeledDataset) -> ObservationalStats {
    let k = labeled.k();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k];
    for (&m, &v) in labeled.labels().iter().zip(labeled.returns()) {
        counts[m] += 1;
        sums[m] += v;
    }
    let n = labeled.len() as f64;
    let p_mu = counts.iter().map(|&c| c as f64 / n).collect();
    let mean_v =
        counts.iter().zip(&sums).map(|(&c, &s)| if c == 0 { f64::NAN } else { s / c as f64 }).collect();
    ObservationalStats { p_mu, mean_v, counts: Some(counts) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundRule {
    Natural,
    ExpertOptimal,
}

impl BoundRule {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundRule::Natural => "natural",
            BoundRule::ExpertOptimal => "expert-optimal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub rule: BoundRule,
    /// Widen each `Ê[V | μ_k]` by a Hoeffding radius at confidence `1 - δ`.
    #[serde(default)]
    pub hoeffding_delta: Option<f64>,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self { rule: BoundRule::ExpertOptimal, hoeffding_delta: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rule: BoundRule,
    pub warnings: Vec<String>,
}

impl CausalBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, rule: BoundRule) -> Result<Self, CausalError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(CausalError::InvalidStats("lower/upper length mismatch".into()));
        }
        for (arm, (&l, &h)) in lower.iter().zip(&upper).enumerate() {
            if !(l <= h) {
                return Err(CausalError::Inverted { arm, lower: l, upper: h });
            }
        }
        Ok(Self { lower, upper, rule, warnings: Vec::new() })
    }

    pub fn num_arms(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, arm: usize, value: f64, tolerance: f64) -> bool {
        value >= self.lower[arm] - tolerance && value <= self.upper[arm] + tolerance
    }

    /// Bounds export: `arm,p_hat,mean_v_hat,l,h,rule`.
    pub fn write_csv<W: Write>(&self, stats: &ObservationalStats, w: W) -> Result<(), CausalError> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["arm", "p_hat", "mean_v_hat", "l", "h", "rule"])?;
        for k in 0..self.num_arms() {
            out.write_record([
                k.to_string(),
                stats.p_mu[k].to_string(),
                finite_or_empty(stats.mean_v[k]),
                self.lower[k].to_string(),
                self.upper[k].to_string(),
                self.rule.as_str().to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub(crate) fn finite_or_empty(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

/// `(lower, upper)` estimates of each `Ê[V | μ_k]` after optional widening.
fn widened_means(
    stats: &ObservationalStats,
    support: ValueSupport,
    delta: Option<f64>,
) -> Result<(Vec<f64>, Vec<f64>), CausalError> {
    let Some(delta) = delta else {
        return Ok((stats.mean_v.clone(), stats.mean_v.clone()));
    };
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CausalError::InvalidConfig(format!("hoeffding_delta {delta} outside (0, 1)")));
    }
    let counts = stats
        .counts
        .as_ref()
        .ok_or_else(|| CausalError::InvalidConfig("Hoeffding widening needs sampled statistics".into()))?;
    let range = support.v_hi - support.v_lo;
    let radius = |n: usize| range * ((2.0 / delta).ln() / (2.0 * n.max(1) as f64)).sqrt();
    let lo = stats.mean_v.iter().zip(counts).map(|(&m, &n)| (m - radius(n)).max(support.v_lo)).collect();
    let hi = stats.mean_v.iter().zip(counts).map(|(&m, &n)| (m + radius(n)).min(support.v_hi)).collect();
    Ok((lo, hi))
}

fn has_mass(stats: &ObservationalStats, k: usize) -> bool {
    stats.p_mu[k] > 0.0 && stats.mean_v[k].is_finite()
}

fn zero_mass_warning(k: usize) -> String {
    format!("arm {k} has no observations; using the full support as its bound")
}

pub fn natural_bounds_with(
    stats: &ObservationalStats,
    support: ValueSupport,
    hoeffding_delta: Option<f64>,
) -> Result<CausalBounds, CausalError> {
    stats.validate()?;
    let (m_lo, m_hi) = widened_means(stats, support, hoeffding_delta)?;
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut warnings = Vec::new();
    for (k, &p) in stats.p_mu.iter().enumerate() {
        if !has_mass(stats, k) {
            lower.push(support.v_lo);
            upper.push(support.v_hi);
            warnings.push(zero_mass_warning(k));
            continue;
        }
        lower.push(m_lo[k] * p + (1.0 - p) * support.v_lo);
        upper.push(m_hi[k] * p + (1.0 - p) * support.v_hi);
    }
    let mut b = CausalBounds::new(lower, upper, BoundRule::Natural)?;
    b.warnings = warnings;
    Ok(b)
}

pub fn natural_bounds(
    stats: &ObservationalStats,
    support: ValueSupport,
) -> Result<CausalBounds, CausalError> {
    natural_bounds_with(stats, support, None)
}

/// Upper bound valid only when the expert-optimality hypothesis holds; the
/// caller asserts it (see [`verify_hypothesis`] for the oracle-side check).
pub fn expert_optimal_bounds_with(
    stats: &ObservationalStats,
    support: ValueSupport,
    hoeffding_delta: Option<f64>,
) -> Result<CausalBounds, CausalError> {
    let natural = natural_bounds_with(stats, support, hoeffding_delta)?;
    let (_, m_hi) = widened_means(stats, support, hoeffding_delta)?;
    let common: f64 =
        (0..stats.num_arms()).filter(|&j| has_mass(stats, j)).map(|j| m_hi[j] * stats.p_mu[j]).sum();
    // `common - lower[k] = Σ_{j≠k} p_j (m_j - v_lo) ≥ 0`; the max only absorbs rounding.
    let upper = (0..stats.num_arms())
        .map(|k| if has_mass(stats, k) { common.max(natural.lower[k]) } else { support.v_hi })
        .collect();
    let mut b = CausalBounds::new(natural.lower, upper, BoundRule::ExpertOptimal)?;
    b.warnings = natural.warnings;
    Ok(b)
}

pub fn expert_optimal_bounds(
    stats: &ObservationalStats,
    support: ValueSupport,
) -> Result<CausalBounds, CausalError> {
    expert_optimal_bounds_with(stats, support, None)
}

pub fn compute_bounds(
    stats: &ObservationalStats,
    support: ValueSupport,
    config: &BoundsConfig,
) -> Result<CausalBounds, CausalError> {
    match config.rule {
        BoundRule::Natural => natural_bounds_with(stats, support, config.hoeffding_delta),
        BoundRule::ExpertOptimal => expert_optimal_bounds_with(stats, support, config.hoeffding_delta),
    }
}

// ---------------------------------------------------------------------------
// Exact oracles
// ---------------------------------------------------------------------------

/// Largest `|S|·|A|·horizon` evaluated by dynamic programming.
pub const EXACT_SIZE_CAP: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloBudget {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for MonteCarloBudget {
    fn default() -> Self {
        Self { episodes: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoValue {
    pub value: f64,
    /// Present only for Monte-Carlo estimates.
    pub std_error: Option<f64>,
}

/// Expected return of `policy` in the fixed-context MDP, by backward induction
/// over the horizon.
pub fn context_value<E: ContextualEnv>(env: &E, policy: &TabularSoftmaxPolicy, context: Context) -> f64 {
    let ns = env.num_states();
    let na = env.num_actions();
    let gamma = env.gamma();
    let mut next = vec![0.0; ns];
    for _ in 0..env.horizon() {
        let mut cur = vec![0.0; ns];
        for (s, slot) in cur.iter_mut().enumerate() {
            let probs = policy.probs(s);
            let mut v = 0.0;
            for (a, &p) in probs.iter().enumerate().take(na) {
                let out = env.dynamics(context, s, a);
                let cont = if out.terminal { 0.0 } else { gamma * next[out.next_state] };
                v += p * (out.reward + cont);
            }
            *slot = v;
        }
        next = cur;
    }
    env.start_dist().iter().map(|&(s, p)| p * next[s]).sum()
}

/// `E_U[value of policy in context U]`: exact when the model is small enough,
/// otherwise a Monte-Carlo estimate with its standard error.
pub fn exact_do_value<E: ContextualEnv>(
    env: &E,
    policy: &TabularSoftmaxPolicy,
    budget: &MonteCarloBudget,
) -> Result<DoValue, CausalError> {
    let size = env.num_states().saturating_mul(env.num_actions()).saturating_mul(env.horizon());
    if size <= EXACT_SIZE_CAP {
        let value = env
            .context_dist()
            .probs()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(u, &p)| p * context_value(env, policy, Context(u)))
            .sum();
        return Ok(DoValue { value, std_error: None });
    }
    if budget.episodes < 2 {
        return Err(CausalError::InvalidConfig("Monte-Carlo budget needs at least 2 episodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut returns = Vec::with_capacity(budget.episodes);
    for _ in 0..budget.episodes {
        let u = env.sample_context(&mut rng);
        returns.push(rollout(env, policy, u, &mut rng)?.ret);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(DoValue { value: mean, std_error: Some((var / n).sqrt()) })
}

/// `values[j][u]`: value of basis policy `j` in context `u`.
pub fn basis_context_values<E: ContextualEnv>(env: &E, basis: &BasisPolicySet) -> Vec<Vec<f64>> {
    basis
        .policies()
        .iter()
        .map(|pi| (0..env.num_contexts()).map(|u| context_value(env, pi, Context(u))).collect())
        .collect()
}

fn check_expert(
    env_contexts: usize,
    basis: &BasisPolicySet,
    expert: &ExpertModel,
) -> Result<(), CausalError> {
    if expert.num_contexts() != env_contexts {
        return Err(CausalError::Mismatch(format!(
            "{} expert contexts vs {env_contexts} environment contexts",
            expert.num_contexts()
        )));
    }
    if expert.context_to_basis()[0].len() != basis.len() {
        return Err(CausalError::Mismatch(format!(
            "P(μ|u) has {} columns for {} basis policies",
            expert.context_to_basis()[0].len(),
            basis.len()
        )));
    }
    Ok(())
}

/// Observational distribution the expert induces over `(μ_k, V)`, where in
/// context `u` the expert runs `μ_k` with probability `P(μ_k | u)`.
pub fn exact_observational_stats<E: ContextualEnv>(
    env: &E,
    basis: &BasisPolicySet,
    expert: &ExpertModel,
) -> Result<ObservationalStats, CausalError> {
    check_expert(env.num_contexts(), basis, expert)?;
    let values = basis_context_values(env, basis);
    let p_u = env.context_dist().probs();
    let table = expert.context_to_basis();
    let mut p_mu = vec![0.0; basis.len()];
    let mut weighted = vec![0.0; basis.len()];
    for (u, &pu) in p_u.iter().enumerate() {
        for k in 0..basis.len() {
            let w = pu * table[u][k];
            p_mu[k] += w;
            weighted[k] += w * values[k][u];
        }
    }
    let mean_v = p_mu.iter().zip(&weighted).map(|(&p, &s)| if p > 0.0 { s / p } else { f64::NAN }).collect();
    ObservationalStats::exact(p_mu, mean_v)
}

/// Oracle check of `E[V | μ_j, R_μ = k] ≤ E[V | μ_k, R_μ = k]` for all `j ≠ k`:
/// conditioning on the expert having chosen `μ_k` reweights contexts by
/// `P(u) P(μ_k | u)`.
pub fn verify_hypothesis<E: ContextualEnv>(
    env: &E,
    basis: &BasisPolicySet,
    expert: &ExpertModel,
) -> Result<bool, CausalError> {
    check_expert(env.num_contexts(), basis, expert)?;
    if basis.len() == 1 {
        return Ok(true);
    }
    let values = basis_context_values(env, basis);
    let p_u = env.context_dist().probs();
    let table = expert.context_to_basis();
    for k in 0..basis.len() {
        let weights: Vec<f64> = p_u.iter().enumerate().map(|(u, &p)| p * table[u][k]).collect();
        let mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            continue;
        }
        let cond = |j: usize| weights.iter().enumerate().map(|(u, w)| w * values[j][u]).sum::<f64>() / mass;
        let own = cond(k);
        if (0..basis.len()).any(|j| j != k && cond(j) > own + 1e-12 * (1.0 + own.abs())) {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Rational arithmetic for single-step confounded bandits
// ---------------------------------------------------------------------------

pub type Rational = Ratio<i64>;

pub fn rational_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Exact tables of a single-step confounded bandit whose expert plays action
/// `a` in context `u` with probability `expert[u][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalBanditAnalysis {
    pub do_values: Vec<Rational>,
    pub p_action: Vec<Rational>,
    pub observational_means: Vec<Rational>,
    pub natural_lower: Vec<Rational>,
    pub natural_upper: Vec<Rational>,
    pub expert_optimal_upper: Rational,
    /// Per-action probability of the context-mixed expert, `Σ_u P(u) π_e(a | u)`.
    pub direct_imitation: Vec<Rational>,
}

pub fn analyze_bandit_rational(
    rewards: &[Vec<Rational>],
    p_u: &[Rational],
    expert: &[Vec<Rational>],
) -> Result<RationalBanditAnalysis, CausalError> {
    let n_u = rewards.len();
    let n_a = rewards.first().map_or(0, Vec::len);
    if n_u == 0 || n_a == 0 || p_u.len() != n_u || expert.len() != n_u {
        return Err(CausalError::InvalidStats("inconsistent rational bandit tables".into()));
    }
    let zero = Rational::from_integer(0);
    let one = Rational::from_integer(1);
    let v_lo = rewards.iter().flatten().copied().min().unwrap_or(zero);
    let v_hi = rewards.iter().flatten().copied().max().unwrap_or(zero);
    let do_values: Vec<Rational> = (0..n_a).map(|a| (0..n_u).map(|u| p_u[u] * rewards[u][a]).sum()).collect();
    let p_action: Vec<Rational> = (0..n_a).map(|a| (0..n_u).map(|u| p_u[u] * expert[u][a]).sum()).collect();
    let observational_means: Vec<Rational> = (0..n_a)
        .map(|a| {
            let joint: Rational = (0..n_u).map(|u| p_u[u] * expert[u][a] * rewards[u][a]).sum();
            if p_action[a] == zero {
                zero
            } else {
                joint / p_action[a]
            }
        })
        .collect();
    let natural_lower =
        (0..n_a).map(|a| observational_means[a] * p_action[a] + (one - p_action[a]) * v_lo).collect();
    let natural_upper =
        (0..n_a).map(|a| observational_means[a] * p_action[a] + (one - p_action[a]) * v_hi).collect();
    let expert_optimal_upper = (0..n_a).map(|a| observational_means[a] * p_action[a]).sum();
    Ok(RationalBanditAnalysis {
        do_values,
        direct_imitation: p_action.clone(),
        p_action,
        observational_means,
        natural_lower,
        natural_upper,
        expert_optimal_upper,
    })
}
