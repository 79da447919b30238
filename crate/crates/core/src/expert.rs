//! Context-aware experts and the confounded dataset they generate.
//!
//! An expert observes `u` and acts with `π_e*(s, a, u)`. Each dataset episode
//! draws `u ~ P(U)` independently, rolls out the context-`u` expert and keeps
//! only `(states, actions, V)`. The context is retained solely in a separate
//! [`OracleDataset`] for validation.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Context, ContextualEnv, EnvError, State};
use crate::policy::{PolicyError, TabularSoftmaxPolicy};
use crate::rollout::{rollout, Trajectory};

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("value iteration did not converge for context {context} within {iterations} iterations (residual {residual:e})")]
    NoConvergence { context: usize, iterations: usize, residual: f64 },
    #[error("invalid expert: {0}")]
    Invalid(String),
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset record {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertTrainingConfig {
    /// Probability of replacing the greedy action with a uniformly random one.
    pub softening: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_tolerance() -> f64 {
    1e-12
}

fn default_max_iterations() -> usize {
    10_000
}

impl Default for ExpertTrainingConfig {
    fn default() -> Self {
        Self { softening: 0.0, tolerance: default_tolerance(), max_iterations: default_max_iterations() }
    }
}

/// Optimal state values and greedy actions of a context-conditioned MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueIterationResult {
    pub values: Vec<f64>,
    pub greedy: Vec<Action>,
    /// States reachable from `ρ_0` under this context.
    pub reachable: Vec<bool>,
    pub iterations: usize,
}

fn reachable_states<E: ContextualEnv>(env: &E, context: Context) -> Vec<bool> {
    let mut seen = vec![false; env.num_states()];
    let mut queue: VecDeque<State> = VecDeque::new();
    for &(s, p) in env.start_dist() {
        if p > 0.0 && !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(s) = queue.pop_front() {
        for a in 0..env.num_actions() {
            let out = env.dynamics(context, s, a);
            if !out.terminal && !seen[out.next_state] {
                seen[out.next_state] = true;
                queue.push_back(out.next_state);
            }
        }
    }
    seen
}

/// Bellman optimality iteration restricted to states reachable under `context`.
pub fn value_iteration<E: ContextualEnv>(
    env: &E,
    context: Context,
    tolerance: f64,
    max_iterations: usize,
) -> Result<ValueIterationResult, ExpertError> {
    let ns = env.num_states();
    let na = env.num_actions();
    let gamma = env.gamma();
    let reachable = reachable_states(env, context);
    let states: Vec<State> = (0..ns).filter(|&s| reachable[s]).collect();
    let outcomes: Vec<Vec<_>> =
        states.iter().map(|&s| (0..na).map(|a| env.dynamics(context, s, a)).collect()).collect();
    let q = |values: &[f64], out: &crate::env::Outcome| {
        out.reward + if out.terminal { 0.0 } else { gamma * values[out.next_state] }
    };

    let mut values = vec![0.0; ns];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < max_iterations {
        iterations += 1;
        let mut next = values.clone();
        residual = 0.0;
        for (i, &s) in states.iter().enumerate() {
            let best = outcomes[i].iter().map(|o| q(&values, o)).fold(f64::NEG_INFINITY, f64::max);
            residual = f64::max(residual, (best - values[s]).abs());
            next[s] = best;
        }
        values = next;
        if residual <= tolerance {
            break;
        }
    }
    if residual > tolerance {
        return Err(ExpertError::NoConvergence { context: context.0, iterations, residual });
    }
    let mut greedy = vec![0; ns];
    for (i, &s) in states.iter().enumerate() {
        let qs: Vec<f64> = outcomes[i].iter().map(|o| q(&values, o)).collect();
        let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        greedy[s] = qs.iter().position(|&v| v == best).unwrap_or(0);
    }
    Ok(ValueIterationResult { values, greedy, reachable, iterations })
}

/// Train the context-`u` expert: exact value iteration, then ε-softening.
///
/// States unreachable under `u` get a uniform policy.
pub fn train_expert<E: ContextualEnv>(
    env: &E,
    context: Context,
    config: &ExpertTrainingConfig,
) -> Result<TabularSoftmaxPolicy, ExpertError> {
    if !(0.0..0.5).contains(&config.softening) {
        return Err(ExpertError::Invalid(format!("softening {} outside [0, 0.5)", config.softening)));
    }
    let vi = value_iteration(env, context, config.tolerance, config.max_iterations)?;
    let na = env.num_actions();
    let eps = config.softening;
    let rows: Vec<Vec<f64>> = (0..env.num_states())
        .map(|s| {
            if !vi.reachable[s] {
                return vec![1.0 / na as f64; na];
            }
            let mut row = vec![eps / na as f64; na];
            row[vi.greedy[s]] += 1.0 - eps;
            row
        })
        .collect();
    Ok(TabularSoftmaxPolicy::from_probs(na, &rows)?)
}

/// The expert: one policy per context plus `P(μ_k | U)` relative to a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    per_context_policies: Vec<TabularSoftmaxPolicy>,
    /// `context_to_basis[u][k] = P(μ_k | U = u)`.
    context_to_basis: Vec<Vec<f64>>,
    softening: f64,
}

impl ExpertModel {
    pub fn new(
        per_context_policies: Vec<TabularSoftmaxPolicy>,
        context_to_basis: Vec<Vec<f64>>,
        softening: f64,
    ) -> Result<Self, ExpertError> {
        if per_context_policies.is_empty() {
            return Err(ExpertError::Invalid("no context policies".into()));
        }
        let shape = per_context_policies[0].shape();
        if per_context_policies.iter().any(|p| p.shape() != shape) {
            return Err(ExpertError::Invalid("context policies differ in shape".into()));
        }
        if !(0.0..0.5).contains(&softening) {
            return Err(ExpertError::Invalid(format!("softening {softening} outside [0, 0.5)")));
        }
        if context_to_basis.len() != per_context_policies.len() {
            return Err(ExpertError::Invalid("one P(μ|u) row per context required".into()));
        }
        let k = context_to_basis[0].len();
        for row in &context_to_basis {
            let total: f64 = row.iter().sum();
            if row.len() != k || row.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(ExpertError::Invalid(format!("bad P(μ|u) row {row:?}")));
            }
        }
        Ok(Self { per_context_policies, context_to_basis, softening })
    }

    /// Experts whose basis is the per-context policies themselves (`P(μ_k|u) = 1[k = u]`).
    pub fn identity(
        per_context_policies: Vec<TabularSoftmaxPolicy>,
        softening: f64,
    ) -> Result<Self, ExpertError> {
        let n = per_context_policies.len();
        let eye = (0..n).map(|u| (0..n).map(|k| if k == u { 1.0 } else { 0.0 }).collect()).collect();
        Self::new(per_context_policies, eye, softening)
    }

    /// Single-state experts relative to the "always play action k" basis:
    /// `P(μ_k | u) = π_e(a = k | u)`.
    pub fn with_action_basis(
        per_context_policies: Vec<TabularSoftmaxPolicy>,
        softening: f64,
    ) -> Result<Self, ExpertError> {
        let table = per_context_policies.iter().map(|p| p.probs(0)).collect();
        Self::new(per_context_policies, table, softening)
    }

    /// Train one softened value-iteration expert per context.
    pub fn train<E: ContextualEnv>(env: &E, config: &ExpertTrainingConfig) -> Result<Self, ExpertError> {
        let policies = (0..env.num_contexts())
            .map(|u| train_expert(env, Context(u), config))
            .collect::<Result<Vec<_>, _>>()?;
        if env.num_states() == 1 {
            Self::with_action_basis(policies, config.softening)
        } else {
            Self::identity(policies, config.softening)
        }
    }

    pub fn policy(&self, context: Context) -> &TabularSoftmaxPolicy {
        &self.per_context_policies[context.0]
    }

    pub fn per_context_policies(&self) -> &[TabularSoftmaxPolicy] {
        &self.per_context_policies
    }

    pub fn context_to_basis(&self) -> &[Vec<f64>] {
        &self.context_to_basis
    }

    pub fn softening(&self) -> f64 {
        self.softening
    }

    pub fn num_contexts(&self) -> usize {
        self.per_context_policies.len()
    }
}

/// Learner-facing dataset `τ_D`; no trajectory carries its context.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    trajectories: Vec<Trajectory>,
}

impl ExpertDataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self, ExpertError> {
        if trajectories.is_empty() {
            return Err(ExpertError::EmptyDataset);
        }
        Ok(Self { trajectories: trajectories.iter().map(Trajectory::stripped).collect() })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.ret).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ExpertError> {
        for (i, t) in self.trajectories.iter().enumerate() {
            let rec = DatasetRecord {
                traj_id: i,
                states: t.steps.iter().map(|(s, _)| *s).collect(),
                actions: t.steps.iter().map(|(_, a)| *a).collect(),
                ret: t.ret,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| ExpertError::Parse { line: i, source: e })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ExpertError> {
        let mut trajectories = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord =
                serde_json::from_str(&line).map_err(|e| ExpertError::Parse { line: i + 1, source: e })?;
            if rec.states.len() != rec.actions.len() {
                return Err(ExpertError::Invalid(format!(
                    "record {}: {} states but {} actions",
                    rec.traj_id,
                    rec.states.len(),
                    rec.actions.len()
                )));
            }
            trajectories.push(Trajectory {
                steps: rec.states.into_iter().zip(rec.actions).collect(),
                ret: rec.ret,
                hidden_context: None,
            });
        }
        Self::new(trajectories)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    traj_id: usize,
    states: Vec<State>,
    actions: Vec<Action>,
    ret: f64,
}

#[derive(Serialize, Deserialize)]
struct OracleRecord {
    traj_id: usize,
    context: Context,
}

/// Test-side copy of the dataset that keeps each episode's context.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDataset {
    trajectories: Vec<Trajectory>,
}

impl OracleDataset {
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn contexts(&self) -> Vec<Context> {
        self.trajectories.iter().map(|t| t.hidden_context.expect("oracle context")).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ExpertError> {
        for (i, u) in self.contexts().into_iter().enumerate() {
            let rec = OracleRecord { traj_id: i, context: u };
            serde_json::to_writer(&mut w, &rec).map_err(|e| ExpertError::Parse { line: i, source: e })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Re-attach contexts from an oracle sidecar to a stripped dataset.
    pub fn read_jsonl<R: BufRead>(dataset: &ExpertDataset, r: R) -> Result<Self, ExpertError> {
        let mut contexts = vec![None; dataset.len()];
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: OracleRecord =
                serde_json::from_str(&line).map_err(|e| ExpertError::Parse { line: i + 1, source: e })?;
            let slot = contexts.get_mut(rec.traj_id).ok_or_else(|| {
                ExpertError::Invalid(format!("oracle record for unknown trajectory {}", rec.traj_id))
            })?;
            *slot = Some(rec.context);
        }
        let trajectories = dataset
            .trajectories()
            .iter()
            .zip(contexts)
            .enumerate()
            .map(|(i, (t, u))| {
                let u = u.ok_or_else(|| ExpertError::Invalid(format!("no context for trajectory {i}")))?;
                Ok(Trajectory { hidden_context: Some(u), ..t.clone() })
            })
            .collect::<Result<_, ExpertError>>()?;
        Ok(Self { trajectories })
    }
}

/// Deterministic per-episode generator: episode `i` depends only on `(seed, i)`.
pub(crate) fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Run the expert `n` times, each episode under a fresh context draw.
pub fn generate_dataset<E, R>(
    env: &E,
    expert: &ExpertModel,
    n: usize,
    rng: &mut R,
) -> Result<(ExpertDataset, OracleDataset), ExpertError>
where
    E: ContextualEnv,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(ExpertError::EmptyDataset);
    }
    if expert.num_contexts() != env.num_contexts() {
        return Err(ExpertError::Invalid(format!(
            "expert has {} contexts, environment {}",
            expert.num_contexts(),
            env.num_contexts()
        )));
    }
    if expert.per_context_policies[0].shape() != (env.num_states(), env.num_actions()) {
        return Err(ExpertError::Invalid("expert policy shape does not match environment".into()));
    }
    let seed: u64 = rng.gen();
    let oracle: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(seed, i as u64);
            let u = env.sample_context(&mut rng);
            let ep = rollout(env, expert.policy(u), u, &mut rng)?;
            Ok(ep.to_trajectory(true))
        })
        .collect::<Result<_, EnvError>>()?;
    let stripped = ExpertDataset::new(oracle.iter().map(Trajectory::stripped).collect())?;
    Ok((stripped, OracleDataset { trajectories: oracle }))
}
