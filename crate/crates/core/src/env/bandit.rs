use super::{Action, Context, ContextDistribution, ContextualEnv, EnvError, Outcome, State, ValueSupport};

/// Single-step bandit whose reward `r[u][a]` depends on the hidden context.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundedBanditEnv {
    reward_table: Vec<Vec<f64>>,
    context_dist: ContextDistribution,
    start: [(State, f64); 1],
}

impl ConfoundedBanditEnv {
    pub fn new(reward_table: Vec<Vec<f64>>, context_dist: ContextDistribution) -> Result<Self, EnvError> {
        if reward_table.len() != context_dist.len() {
            return Err(EnvError::Invalid(format!(
                "reward table has {} rows but {} contexts",
                reward_table.len(),
                context_dist.len()
            )));
        }
        let num_actions = reward_table[0].len();
        if num_actions < 2 {
            return Err(EnvError::Invalid("a bandit needs at least 2 actions".into()));
        }
        if reward_table.iter().any(|row| row.len() != num_actions) {
            return Err(EnvError::Invalid("reward table is not rectangular".into()));
        }
        if reward_table.iter().flatten().any(|r| !r.is_finite()) {
            return Err(EnvError::Invalid("reward table has non-finite entries".into()));
        }
        Ok(Self { reward_table, context_dist, start: [(0, 1.0)] })
    }

    /// The two-context, two-action bandit with `P(U = 0) = 1/2` and rewards
    /// `r[0] = [1, 3]`, `r[1] = [11, 10]`.
    pub fn example1() -> Self {
        Self::new(vec![vec![1.0, 3.0], vec![11.0, 10.0]], ContextDistribution::bernoulli(0.5).expect("valid"))
            .expect("valid")
    }

    pub fn reward_table(&self) -> &[Vec<f64>] {
        &self.reward_table
    }

    pub fn reward(&self, context: Context, action: Action) -> f64 {
        self.reward_table[context.0][action]
    }

    /// `E_U[r^U(a)]`, the interventional value of always playing `a`.
    pub fn do_value(&self, action: Action) -> f64 {
        self.context_dist.probs().iter().zip(&self.reward_table).map(|(p, row)| p * row[action]).sum()
    }
}

impl ContextualEnv for ConfoundedBanditEnv {
    fn num_states(&self) -> usize {
        1
    }
    fn num_actions(&self) -> usize {
        self.reward_table[0].len()
    }
    fn context_dist(&self) -> &ContextDistribution {
        &self.context_dist
    }
    fn start_dist(&self) -> &[(State, f64)] {
        &self.start
    }
    fn horizon(&self) -> usize {
        1
    }
    fn gamma(&self) -> f64 {
        1.0
    }
    fn value_support(&self) -> ValueSupport {
        let flat = self.reward_table.iter().flatten().copied();
        let lo = flat.clone().fold(f64::INFINITY, f64::min);
        let hi = flat.fold(f64::NEG_INFINITY, f64::max);
        ValueSupport { v_lo: lo, v_hi: hi }
    }
    fn dynamics(&self, context: Context, _state: State, action: Action) -> Outcome {
        Outcome { next_state: 0, reward: self.reward(context, action), terminal: true }
    }
}
