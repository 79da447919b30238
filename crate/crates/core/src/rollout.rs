//! Episode rollouts and the trajectory record shared by every stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{episode_return, Action, Context, ContextualEnv, EnvError, State};
use crate::policy::TabularSoftmaxPolicy;

/// One episode as stored in a dataset: `(state, action)` pairs and the return.
///
/// `hidden_context` is only ever populated on oracle-side copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(State, Action)>,
    pub ret: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_context: Option<Context>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn stripped(&self) -> Trajectory {
        Trajectory { steps: self.steps.clone(), ret: self.ret, hidden_context: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub state: State,
    pub action: Action,
    /// Probability the acting policy assigned to `action` when it was taken.
    pub behavior_prob: f64,
    pub reward: f64,
}

/// A full on-policy episode with everything a policy-gradient update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectedEpisode {
    pub context: Context,
    pub steps: Vec<StepRecord>,
    pub ret: f64,
}

impl CollectedEpisode {
    pub fn to_trajectory(&self, keep_context: bool) -> Trajectory {
        Trajectory {
            steps: self.steps.iter().map(|s| (s.state, s.action)).collect(),
            ret: self.ret,
            hidden_context: keep_context.then_some(self.context),
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

/// Roll out `policy` for one episode under a fixed context.
pub fn rollout<E, R>(
    env: &E,
    policy: &TabularSoftmaxPolicy,
    context: Context,
    rng: &mut R,
) -> Result<CollectedEpisode, EnvError>
where
    E: ContextualEnv,
    R: Rng + ?Sized,
{
    let mut episode = env.reset(context, rng)?;
    let mut steps = Vec::new();
    while !episode.is_done() {
        let s = episode.state();
        let probs = policy.probs(s);
        let a = crate::env::sample_index(&probs, rng);
        let tr = env.step(&mut episode, a)?;
        steps.push(StepRecord { state: s, action: a, behavior_prob: probs[a], reward: tr.reward });
    }
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let ret = episode_return(&rewards, env.gamma());
    Ok(CollectedEpisode { context, steps, ret })
}

/// Draw `u ~ P(U)` and roll out `policy` in that context.
pub fn run_episode<E, R>(
    env: &E,
    policy: &TabularSoftmaxPolicy,
    rng: &mut R,
) -> Result<CollectedEpisode, EnvError>
where
    E: ContextualEnv,
    R: Rng + ?Sized,
{
    let u = env.sample_context(rng);
    rollout(env, policy, u, rng)
}
