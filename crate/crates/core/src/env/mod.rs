//! Confounded environments.
//!
//! Every environment here is a tabular contextual MDP: a hidden context `u` is
//! drawn once per episode from `P(U)` and parameterises the reward and
//! transition functions. The learner-visible [`State`] never encodes `u`.
//!
//! Two concrete environments are provided:
//! - [`ConfoundedBanditEnv`]: a single-step bandit with a reward table `r[u][a]`.
//! - [`GridTrackEnv`]: an episodic gridworld whose wall layout depends on `u`.
//!
//! [`Environment`] wraps both behind one serialisable type.

mod bandit;
mod grid;
mod spec;

pub use bandit::ConfoundedBanditEnv;
pub use grid::{Cell, GridAction, GridTrackEnv, Heading};
pub use spec::{EnvSpec, GridTrackSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Learner-visible discrete observation index.
pub type State = usize;
/// Discrete action index.
pub type Action = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid context distribution: {0}")]
    InvalidDistribution(String),
    #[error("context {context} out of range (num_contexts = {num_contexts})")]
    ContextOutOfRange { context: usize, num_contexts: usize },
    #[error("action {action} out of range (num_actions = {num_actions})")]
    ActionOutOfRange { action: usize, num_actions: usize },
    #[error("step called on a finished episode (t = {t})")]
    EpisodeDone { t: usize },
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error("no goal reachable from start cell ({row}, {col}) under context {context}")]
    GoalUnreachable { context: usize, row: usize, col: usize },
}

/// Index of the hidden context `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context(pub usize);

impl Context {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stationary distribution `P(U)` over a finite context set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ContextDistribution {
    probs: Vec<f64>,
}

impl ContextDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, EnvError> {
        if probs.is_empty() {
            return Err(EnvError::InvalidDistribution("no contexts".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(EnvError::InvalidDistribution(format!(
                "entries must be finite and nonnegative: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(EnvError::InvalidDistribution(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    pub fn bernoulli(p_zero: f64) -> Result<Self, EnvError> {
        Self::new(vec![p_zero, 1.0 - p_zero])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, u: Context) -> f64 {
        self.probs[u.0]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Context {
        Context(sample_index(&self.probs, rng))
    }
}

impl TryFrom<Vec<f64>> for ContextDistribution {
    type Error = EnvError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ContextDistribution> for Vec<f64> {
    fn from(d: ContextDistribution) -> Self {
        d.probs
    }
}

/// Inverse-CDF draw from a probability vector using a single uniform.
///
/// Entries with zero mass are never returned.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let x: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = i;
        if x < acc {
            return i;
        }
    }
    last_positive
}

/// Declared compact support `[V_l, V_u]` of episode returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueSupport {
    pub v_lo: f64,
    pub v_hi: f64,
}

impl ValueSupport {
    pub fn new(v_lo: f64, v_hi: f64) -> Result<Self, EnvError> {
        if !(v_lo.is_finite() && v_hi.is_finite()) || v_lo > v_hi {
            return Err(EnvError::Invalid(format!(
                "value support [{v_lo}, {v_hi}] is not a finite interval"
            )));
        }
        Ok(Self { v_lo, v_hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.v_lo && v <= self.v_hi
    }
}

/// Deterministic result of applying an action in a fixed context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub next_state: State,
    pub reward: f64,
    pub terminal: bool,
}

/// One recorded environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
    pub done: bool,
}

/// Caller-owned rollout state of a single episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    context: Context,
    state: State,
    t: usize,
    done: bool,
}

impl Episode {
    pub fn context(&self) -> Context {
        self.context
    }
    pub fn state(&self) -> State {
        self.state
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn is_done(&self) -> bool {
        self.done
    }
}

/// A finite contextual MDP with context-independent observations.
///
/// Dynamics are deterministic given `(u, s, a)`; all randomness comes from
/// `P(U)`, the start distribution and the acting policy.
pub trait ContextualEnv: Send + Sync {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn context_dist(&self) -> &ContextDistribution;
    /// Start distribution `ρ_0` as `(state, probability)` pairs.
    fn start_dist(&self) -> &[(State, f64)];
    fn horizon(&self) -> usize;
    fn gamma(&self) -> f64;
    /// Analytic bounds on any episode return.
    fn value_support(&self) -> ValueSupport;
    fn dynamics(&self, context: Context, state: State, action: Action) -> Outcome;

    fn num_contexts(&self) -> usize {
        self.context_dist().len()
    }

    fn sample_context<R: Rng + ?Sized>(&self, rng: &mut R) -> Context
    where
        Self: Sized,
    {
        self.context_dist().sample(rng)
    }

    fn reset<R: Rng + ?Sized>(&self, context: Context, rng: &mut R) -> Result<Episode, EnvError>
    where
        Self: Sized,
    {
        if context.0 >= self.num_contexts() {
            return Err(EnvError::ContextOutOfRange {
                context: context.0,
                num_contexts: self.num_contexts(),
            });
        }
        let start = self.start_dist();
        let state = if start.len() == 1 {
            start[0].0
        } else {
            let probs: Vec<f64> = start.iter().map(|(_, p)| *p).collect();
            start[sample_index(&probs, rng)].0
        };
        Ok(Episode { context, state, t: 0, done: false })
    }

    fn step(&self, episode: &mut Episode, action: Action) -> Result<Transition, EnvError>
    where
        Self: Sized,
    {
        if episode.done {
            return Err(EnvError::EpisodeDone { t: episode.t });
        }
        if action >= self.num_actions() {
            return Err(EnvError::ActionOutOfRange { action, num_actions: self.num_actions() });
        }
        let out = self.dynamics(episode.context, episode.state, action);
        episode.t += 1;
        let done = out.terminal || episode.t >= self.horizon();
        let tr =
            Transition { state: episode.state, action, reward: out.reward, next_state: out.next_state, done };
        episode.state = out.next_state;
        episode.done = done;
        Ok(tr)
    }
}

/// Discounted sum `Σ γ^t r_t`.
pub fn episode_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// Either of the two built-in environment kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    Bandit(ConfoundedBanditEnv),
    Grid(GridTrackEnv),
}

impl Environment {
    pub fn from_spec(spec: &EnvSpec) -> Result<Self, EnvError> {
        spec.build()
    }

    pub fn to_spec(&self) -> EnvSpec {
        match self {
            Environment::Bandit(b) => EnvSpec::Bandit {
                reward_table: b.reward_table().to_vec(),
                context_probs: b.context_dist().probs().to_vec(),
            },
            Environment::Grid(g) => EnvSpec::GridTrack(g.to_spec()),
        }
    }

    pub fn as_bandit(&self) -> Option<&ConfoundedBanditEnv> {
        match self {
            Environment::Bandit(b) => Some(b),
            Environment::Grid(_) => None,
        }
    }
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            Environment::Bandit($e) => $body,
            Environment::Grid($e) => $body,
        }
    };
}

impl ContextualEnv for Environment {
    fn num_states(&self) -> usize {
        delegate!(self, e => e.num_states())
    }
    fn num_actions(&self) -> usize {
        delegate!(self, e => e.num_actions())
    }
    fn context_dist(&self) -> &ContextDistribution {
        delegate!(self, e => e.context_dist())
    }
    fn start_dist(&self) -> &[(State, f64)] {
        delegate!(self, e => e.start_dist())
    }
    fn horizon(&self) -> usize {
        delegate!(self, e => e.horizon())
    }
    fn gamma(&self) -> f64 {
        delegate!(self, e => e.gamma())
    }
    fn value_support(&self) -> ValueSupport {
        delegate!(self, e => e.value_support())
    }
    fn dynamics(&self, context: Context, state: State, action: Action) -> Outcome {
        delegate!(self, e => e.dynamics(context, state, action))
    }
}
