//! Bound-constrained UCB over basis policies, with the vanilla-UCB and
//! direct-imitation baselines.
//!
//! Per episode `i` each surviving arm gets `H_k = V̂_k + sqrt(2 f(i) / T_k)`,
//! clipped to `Ĥ_k = min(H_k, h_k)` when causal bounds are enabled; the argmax
//! arm is rolled out, optionally improved online, and its statistics updated.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{finite_or_empty, CausalBounds};
use crate::env::{ContextualEnv, EnvError};
use crate::expert::{episode_rng, ExpertDataset};
use crate::policy::{
    behavior_clone, policy_gradient_update, BaselineTracker, BasisPolicySet, PolicyError,
    PolicyGradientConfig, TabularSoftmaxPolicy,
};
use crate::rollout::run_episode;

#[derive(Debug, Error)]
pub enum BanditError {
    #[error("invalid bandit config: {0}")]
    InvalidConfig(String),
    #[error("{bounds} bounds for {arms} arms")]
    BoundsMismatch { bounds: usize, arms: usize },
    #[error("episode {episode}: {source}")]
    Episode { episode: usize, source: EnvError },
    #[error("episode {episode}: policy update failed: {source}")]
    Update { episode: usize, source: PolicyError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("regret is undefined for runs with online policy improvement")]
    RegretWithImprovement,
    #[error("trace export: {0}")]
    Io(#[from] std::io::Error),
}

/// Exploration schedule `f(i)` of the UCB bonus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationSchedule {
    Constant(f64),
    Log,
    /// `log(i) + 3 log(log(max(i, e)))`.
    LogPlusLogLog,
}

impl ExplorationSchedule {
    pub fn eval(self, i: usize) -> f64 {
        let x = i.max(1) as f64;
        match self {
            ExplorationSchedule::Constant(c) => c,
            ExplorationSchedule::Log => x.ln(),
            ExplorationSchedule::LogPlusLogLog => x.ln() + 3.0 * x.max(std::f64::consts::E).ln().ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// `V̂ ← V/(i+1) + i/(i+1) V̂` with the global episode index `i`.
    PaperFaithful,
    /// Per-arm running mean `V̂ ← V̂ + (V − V̂)/T_k`.
    PerArmMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    LowestIndex,
    /// Higher `V̂` first, then lowest index.
    HighestMean,
    SeededRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Improvement {
    Off,
    ClippedPolicyGradient(PolicyGradientConfig),
}

impl Improvement {
    pub fn is_off(&self) -> bool {
        matches!(self, Improvement::Off)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    #[serde(default = "default_schedule")]
    pub exploration_f: ExplorationSchedule,
    #[serde(default = "default_update_rule")]
    pub update_rule: UpdateRule,
    #[serde(default = "default_true")]
    pub use_causal_bounds: bool,
    #[serde(default = "default_improvement")]
    pub improvement: Improvement,
    pub horizon_episodes: usize,
    #[serde(default = "default_tie_break")]
    pub tie_break: TieBreak,
    /// Also execute eliminated arms in the initialization round.
    #[serde(default)]
    pub faithful_init: bool,
}

fn default_schedule() -> ExplorationSchedule {
    ExplorationSchedule::LogPlusLogLog
}
fn default_update_rule() -> UpdateRule {
    UpdateRule::PerArmMean
}
fn default_true() -> bool {
    true
}
fn default_improvement() -> Improvement {
    Improvement::Off
}
fn default_tie_break() -> TieBreak {
    TieBreak::LowestIndex
}

impl BanditConfig {
    pub fn new(horizon_episodes: usize) -> Self {
        Self {
            exploration_f: default_schedule(),
            update_rule: default_update_rule(),
            use_causal_bounds: true,
            improvement: Improvement::Off,
            horizon_episodes,
            tie_break: default_tie_break(),
            faithful_init: false,
        }
    }

    fn validate(&self, arms: usize) -> Result<(), BanditError> {
        if self.horizon_episodes < arms {
            return Err(BanditError::InvalidConfig(format!(
                "horizon_episodes {} is below the number of arms {arms}",
                self.horizon_episodes
            )));
        }
        if let ExplorationSchedule::Constant(c) = self.exploration_f {
            if !(c.is_finite() && c >= 0.0) {
                return Err(BanditError::InvalidConfig(format!("constant f(i) = {c}")));
            }
        }
        if let Improvement::ClippedPolicyGradient(pg) = &self.improvement {
            pg.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    pub v_hat: f64,
    pub pulls: usize,
    pub eliminated: bool,
    pub policy: TabularSoftmaxPolicy,
    /// Latest UCB index and its clipped value; NaN before the first computation.
    pub index: f64,
    pub clipped_index: f64,
    baseline: BaselineTracker,
}

impl ArmState {
    pub fn new(policy: TabularSoftmaxPolicy) -> Self {
        Self {
            v_hat: 0.0,
            pulls: 0,
            eliminated: false,
            policy,
            index: f64::NAN,
            clipped_index: f64::NAN,
            baseline: BaselineTracker::default(),
        }
    }
}

/// Arm `k` is eliminated iff `h_k < max_j l_j`.
pub fn eliminate_arms(bounds: &CausalBounds) -> Vec<bool> {
    let l_max = bounds.lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flags: Vec<bool> = bounds.upper.iter().map(|&h| h < l_max).collect();
    assert!(flags.iter().any(|e| !e), "every arm eliminated; bounds are inconsistent");
    flags
}

pub fn ucb_index(v_hat: f64, pulls: usize, episode_i: usize, schedule: ExplorationSchedule) -> f64 {
    debug_assert!(pulls >= 1 && episode_i >= 1);
    v_hat + (2.0 * schedule.eval(episode_i) / pulls as f64).sqrt()
}

pub fn clip_index(h_ucb: f64, h_causal: f64, use_causal_bounds: bool) -> f64 {
    if use_causal_bounds {
        h_ucb.min(h_causal)
    } else {
        h_ucb
    }
}

/// Argmax of `indices` over non-eliminated arms.
pub fn select_arm<R: Rng + ?Sized>(
    arms: &[ArmState],
    indices: &[f64],
    tie_break: TieBreak,
    rng: &mut R,
) -> usize {
    let live: Vec<usize> = (0..arms.len()).filter(|&k| !arms[k].eliminated).collect();
    assert!(!live.is_empty(), "no arm left to select");
    let best = live.iter().map(|&k| indices[k]).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = live.into_iter().filter(|&k| indices[k] == best).collect();
    match tie_break {
        TieBreak::LowestIndex => tied[0],
        TieBreak::HighestMean => {
            let mut pick = tied[0];
            for &k in &tied[1..] {
                if arms[k].v_hat > arms[pick].v_hat {
                    pick = k;
                }
            }
            pick
        }
        TieBreak::SeededRandom => tied[rng.gen_range(0..tied.len())],
    }
}

/// New `V̂` of an arm after episode `i`; `pulls` already counts this episode.
pub fn update_value(
    v_hat_prev: f64,
    episode_i: usize,
    observed: f64,
    selected: bool,
    rule: UpdateRule,
    pulls: usize,
) -> f64 {
    if !selected {
        return v_hat_prev;
    }
    match rule {
        UpdateRule::PaperFaithful => {
            let i = episode_i as f64;
            observed / (i + 1.0) + i / (i + 1.0) * v_hat_prev
        }
        UpdateRule::PerArmMean => v_hat_prev + (observed - v_hat_prev) / pulls as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Algorithm1,
    VanillaUcb,
    DirectImitation,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Algorithm1, Method::VanillaUcb, Method::DirectImitation];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Algorithm1 => "algorithm1",
            Method::VanillaUcb => "vanilla-ucb",
            Method::DirectImitation => "direct-imitation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub arm: usize,
    pub ret: f64,
    /// Empty during initialization episodes; NaN for arms without an index.
    pub index: Vec<f64>,
    pub clipped_index: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub num_arms: usize,
    pub episodes: Vec<EpisodeRecord>,
    pub arms: Vec<ArmState>,
    /// Most-pulled arm at the horizon; ties go to the higher `V̂`.
    pub recommended_arm: usize,
    pub improved: bool,
}

impl RunResult {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.ret).collect()
    }

    pub fn chosen_arms(&self) -> Vec<usize> {
        self.episodes.iter().map(|e| e.arm).collect()
    }

    pub fn pull_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_arms];
        for e in &self.episodes {
            counts[e.arm] += 1;
        }
        counts
    }

    pub fn final_policy(&self) -> &TabularSoftmaxPolicy {
        &self.arms[self.recommended_arm].policy
    }

    pub fn cumulative_regret(&self, best_do_value: f64) -> Result<Vec<f64>, BanditError> {
        if self.improved {
            return Err(BanditError::RegretWithImprovement);
        }
        Ok(cumulative_regret(&self.returns(), best_do_value))
    }

    /// `episode,arm,return,regret,H_0..,Hclip_0..`; `regret` is left empty
    /// when no reference value is given or the run improved its policies.
    pub fn write_csv<W: Write>(&self, mut w: W, best_do_value: Option<f64>) -> Result<(), BanditError> {
        let regret = match best_do_value {
            Some(b) if !self.improved => Some(cumulative_regret(&self.returns(), b)),
            _ => None,
        };
        let mut header = vec!["episode".to_string(), "arm".into(), "return".into(), "regret".into()];
        header.extend((0..self.num_arms).map(|k| format!("H_{k}")));
        header.extend((0..self.num_arms).map(|k| format!("Hclip_{k}")));
        writeln!(w, "{}", header.join(","))?;
        for (n, e) in self.episodes.iter().enumerate() {
            let mut row = vec![
                (n + 1).to_string(),
                e.arm.to_string(),
                e.ret.to_string(),
                regret.as_ref().map_or(String::new(), |r| r[n].to_string()),
            ];
            for series in [&e.index, &e.clipped_index] {
                row.extend(
                    (0..self.num_arms).map(|k| series.get(k).copied().map_or(String::new(), finite_or_empty)),
                );
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `R(n) = n · best − Σ_{i≤n} V(i)`.
pub fn cumulative_regret(returns: &[f64], best_do_value: f64) -> Vec<f64> {
    let mut total = 0.0;
    returns
        .iter()
        .enumerate()
        .map(|(n, v)| {
            total += v;
            (n + 1) as f64 * best_do_value - total
        })
        .collect()
}

fn recommend(arms: &[ArmState]) -> usize {
    let mut best = 0;
    for k in 1..arms.len() {
        let (a, b) = (&arms[k], &arms[best]);
        if a.pulls > b.pulls || (a.pulls == b.pulls && a.v_hat > b.v_hat) {
            best = k;
        }
    }
    best
}

struct Pull {
    ret: f64,
}

fn pull_arm<E: ContextualEnv>(
    env: &E,
    arm: &mut ArmState,
    improvement: &Improvement,
    seed: u64,
    episode: usize,
) -> Result<Pull, BanditError> {
    let mut rng = episode_rng(seed, episode as u64);
    let ep = run_episode(env, &arm.policy, &mut rng)
        .map_err(|source| BanditError::Episode { episode: episode + 1, source })?;
    if let Improvement::ClippedPolicyGradient(pg) = improvement {
        let baseline = arm.baseline.value(pg.baseline, std::slice::from_ref(&ep));
        policy_gradient_update(&mut arm.policy, std::slice::from_ref(&ep), pg, baseline)
            .map_err(|source| BanditError::Update { episode: episode + 1, source })?;
        arm.baseline.observe(ep.ret);
    }
    Ok(Pull { ret: ep.ret })
}

fn run_ucb<E, R>(
    env: &E,
    basis: &BasisPolicySet,
    bounds: Option<&CausalBounds>,
    config: &BanditConfig,
    method: Method,
    rng: &mut R,
) -> Result<RunResult, BanditError>
where
    E: ContextualEnv,
    R: Rng + ?Sized,
{
    let k = basis.len();
    config.validate(k)?;
    if let Some(b) = bounds {
        if b.num_arms() != k {
            return Err(BanditError::BoundsMismatch { bounds: b.num_arms(), arms: k });
        }
    }
    let seed: u64 = rng.gen();
    let mut tie_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut arms: Vec<ArmState> = basis.policies().iter().cloned().map(ArmState::new).collect();
    if let Some(b) = bounds {
        for (arm, flag) in arms.iter_mut().zip(eliminate_arms(b)) {
            arm.eliminated = flag;
        }
    }

    let mut episodes = Vec::with_capacity(config.horizon_episodes);
    for a in 0..k {
        if arms[a].eliminated && !config.faithful_init {
            continue;
        }
        if episodes.len() == config.horizon_episodes {
            break;
        }
        let pull = pull_arm(env, &mut arms[a], &config.improvement, seed, episodes.len())?;
        arms[a].pulls = 1;
        arms[a].v_hat = pull.ret;
        episodes.push(EpisodeRecord { arm: a, ret: pull.ret, index: Vec::new(), clipped_index: Vec::new() });
    }

    let mut i = 0;
    while episodes.len() < config.horizon_episodes {
        i += 1;
        let mut index = vec![f64::NAN; k];
        let mut clipped = vec![f64::NAN; k];
        for a in 0..k {
            if arms[a].eliminated {
                continue;
            }
            index[a] = ucb_index(arms[a].v_hat, arms[a].pulls, i, config.exploration_f);
            clipped[a] = match bounds {
                Some(b) => clip_index(index[a], b.upper[a], true),
                None => index[a],
            };
            arms[a].index = index[a];
            arms[a].clipped_index = clipped[a];
        }
        let chosen = select_arm(&arms, &clipped, config.tie_break, &mut tie_rng);
        let pull = pull_arm(env, &mut arms[chosen], &config.improvement, seed, episodes.len())?;
        let arm = &mut arms[chosen];
        arm.pulls += 1;
        arm.v_hat = update_value(arm.v_hat, i, pull.ret, true, config.update_rule, arm.pulls);
        episodes.push(EpisodeRecord { arm: chosen, ret: pull.ret, index, clipped_index: clipped });
    }

    Ok(RunResult {
        method,
        num_arms: k,
        episodes,
        recommended_arm: recommend(&arms),
        arms,
        improved: !config.improvement.is_off(),
    })
}

/// Causal-bound-constrained UCB. With `use_causal_bounds = false` neither
/// elimination nor clipping is applied and the run equals [`run_vanilla_ucb`].
pub fn run_algorithm1<E, R>(
    env: &E,
    basis: &BasisPolicySet,
    bounds: &CausalBounds,
    config: &BanditConfig,
    rng: &mut R,
) -> Result<RunResult, BanditError>
where
    E: ContextualEnv,
    R: Rng + ?Sized,
{
    let active = config.use_causal_bounds.then_some(bounds);
    run_ucb(env, basis, active, config, Method::Algorithm1, rng)
}

pub fn run_vanilla_ucb<E, R>(
    env: &E,
    basis: &BasisPolicySet,
    config: &BanditConfig,
    rng: &mut R,
) -> Result<RunResult, BanditError>
where
    E: ContextualEnv,
    R: Rng + ?Sized,
{
    run_ucb(env, basis, None, config, Method::VanillaUcb, rng)
}

/// Behaviour-clone one policy on the whole dataset and run it (improving it
/// online when configured) for the horizon.
pub fn run_direct_imitation<E, R>(
    env: &E,
    dataset: &ExpertDataset,
    smoothing: f64,
    config: &BanditConfig,
    rng: &mut R,
) -> Result<RunResult, BanditError>
where
    E: ContextualEnv,
    R: Rng + ?Sized,
{
    config.validate(1)?;
    let policy = behavior_clone(dataset.trajectories(), env.num_states(), env.num_actions(), smoothing)?;
    let seed: u64 = rng.gen();
    let mut arm = ArmState::new(policy);
    let mut episodes = Vec::with_capacity(config.horizon_episodes);
    for n in 0..config.horizon_episodes {
        let pull = pull_arm(env, &mut arm, &config.improvement, seed, n)?;
        arm.pulls += 1;
        arm.v_hat += (pull.ret - arm.v_hat) / arm.pulls as f64;
        episodes.push(EpisodeRecord { arm: 0, ret: pull.ret, index: Vec::new(), clipped_index: Vec::new() });
    }
    Ok(RunResult {
        method: Method::DirectImitation,
        num_arms: 1,
        episodes,
        arms: vec![arm],
        recommended_arm: 0,
        improved: !config.improvement.is_off(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::BoundRule;
    use crate::env::ConfoundedBanditEnv;

    fn example1_basis() -> BasisPolicySet {
        BasisPolicySet::new(vec![
            TabularSoftmaxPolicy::deterministic(&[0], 2),
            TabularSoftmaxPolicy::deterministic(&[1], 2),
        ])
        .unwrap()
    }

    fn bounds(lower: Vec<f64>, upper: Vec<f64>) -> CausalBounds {
        CausalBounds::new(lower, upper, BoundRule::Natural).unwrap()
    }

    #[test]
    fn elimination_examples() {
        assert_eq!(eliminate_arms(&bounds(vec![5.5, 2.35], vec![10.5, 7.35])), vec![false, false]);
        assert_eq!(eliminate_arms(&bounds(vec![0.0, 2.0], vec![1.0, 3.0])), vec![true, false]);
        assert_eq!(eliminate_arms(&bounds(vec![0.0], vec![1.0])), vec![false]);
    }

    #[test]
    fn ucb_index_examples() {
        assert_eq!(ucb_index(0.0, 2, 5, ExplorationSchedule::Constant(1.0)), 1.0);
        let e = std::f64::consts::E;
        let v = ucb_index(6.0, 1, 3, ExplorationSchedule::Constant(e.ln()));
        assert!((v - (6.0 + 2f64.sqrt())).abs() < 1e-15);
        assert_eq!(ucb_index(4.5, 3, 9, ExplorationSchedule::Constant(0.0)), 4.5);
        assert_eq!(ExplorationSchedule::Log.eval(1), 0.0);
        assert_eq!(ExplorationSchedule::LogPlusLogLog.eval(2), 2f64.ln());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_index(9.2, 6.85, true), 6.85);
        assert_eq!(clip_index(3.0, 6.85, true), 3.0);
        assert_eq!(clip_index(9.2, 6.85, false), 9.2);
    }

    #[test]
    fn select_examples() {
        let mut arms: Vec<ArmState> =
            example1_basis().policies().iter().cloned().map(ArmState::new).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_arm(&arms, &[6.85, 7.1], TieBreak::LowestIndex, &mut rng), 1);
        assert_eq!(select_arm(&arms, &[5.0, 5.0], TieBreak::LowestIndex, &mut rng), 0);
        arms[1].v_hat = 3.0;
        assert_eq!(select_arm(&arms, &[5.0, 5.0], TieBreak::HighestMean, &mut rng), 1);
        arms[0].eliminated = true;
        assert_eq!(select_arm(&arms, &[9.0, 2.0], TieBreak::LowestIndex, &mut rng), 1);
    }

    #[test]
    fn update_examples() {
        assert_eq!(update_value(2.0, 1, 4.0, true, UpdateRule::PaperFaithful, 2), 3.0);
        assert_eq!(update_value(2.0, 1, 4.0, false, UpdateRule::PaperFaithful, 2), 2.0);
        assert_eq!(update_value(2.0, 7, 4.0, true, UpdateRule::PerArmMean, 2), 3.0);
    }

    #[test]
    fn single_arm_run_has_no_regret() {
        let env = ConfoundedBanditEnv::example1();
        let basis = BasisPolicySet::new(vec![TabularSoftmaxPolicy::deterministic(&[1], 2)]).unwrap();
        let b = bounds(vec![1.0], vec![11.0]);
        let cfg = BanditConfig::new(50);
        let r = run_algorithm1(&env, &basis, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.chosen_arms().iter().all(|&a| a == 0));
        assert_eq!(r.episodes.len(), 50);
        let v = run_vanilla_ucb(&env, &basis, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(v.episodes, r.episodes);
    }

    #[test]
    fn eliminated_arm_never_pulled() {
        let env = ConfoundedBanditEnv::example1();
        let b = bounds(vec![0.0, 7.0], vec![6.9, 11.0]);
        let r = run_algorithm1(
            &env,
            &example1_basis(),
            &b,
            &BanditConfig::new(200),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert!(r.chosen_arms().iter().all(|&a| a == 1));
        assert!(r.arms[0].eliminated);
    }

    #[test]
    fn horizon_below_arm_count_rejected() {
        let env = ConfoundedBanditEnv::example1();
        let r = run_vanilla_ucb(
            &env,
            &example1_basis(),
            &BanditConfig::new(1),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(BanditError::InvalidConfig(_))));
    }

    #[test]
    fn regret_examples() {
        assert!(cumulative_regret(&[], 6.5).is_empty());
        assert_eq!(cumulative_regret(&[6.0], 6.5), vec![0.5]);
        assert_eq!(cumulative_regret(&[7.0, 6.0], 6.5), vec![-0.5, 0.0]);
    }

    #[test]
    fn regret_refused_with_improvement() {
        let env = ConfoundedBanditEnv::example1();
        let mut cfg = BanditConfig::new(10);
        cfg.improvement = Improvement::ClippedPolicyGradient(PolicyGradientConfig::default());
        let basis = BasisPolicySet::new(vec![TabularSoftmaxPolicy::uniform(1, 2)]).unwrap();
        let r = run_vanilla_ucb(&env, &basis, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(r.cumulative_regret(6.5), Err(BanditError::RegretWithImprovement)));
    }

    #[test]
    fn improvement_config_json() {
        let off: Improvement = serde_json::from_str(r#"{"kind":"off"}"#).unwrap();
        assert!(off.is_off());
        let pg: Improvement = serde_json::from_str(
            r#"{"kind":"clipped-policy-gradient","learning_rate":0.3,"clip_ratio":0.2,
                "epochs_per_episode":2,"entropy_bonus":0.0,"baseline":"mean-return"}"#,
        )
        .unwrap();
        assert!(matches!(pg, Improvement::ClippedPolicyGradient(c) if c.learning_rate == 0.3));
    }

    #[test]
    fn csv_layout() {
        let env = ConfoundedBanditEnv::example1();
        let b = bounds(vec![5.5, 2.35], vec![6.85, 6.85]);
        let r = run_algorithm1(
            &env,
            &example1_basis(),
            &b,
            &BanditConfig::new(4),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf, Some(6.5)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "episode,arm,return,regret,H_0,H_1,Hclip_0,Hclip_1");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].ends_with(",,,,"));
        let last: Vec<&str> = lines[4].split(',').collect();
        let hclip: f64 = last[6].parse().unwrap();
        assert!(hclip <= 6.85);
    }

    #[test]
    fn non_binding_bounds_match_vanilla() {
        let env = ConfoundedBanditEnv::example1();
        let b = bounds(vec![-1e9, -1e9], vec![1e9, 1e9]);
        let cfg = BanditConfig::new(300);
        let a = run_algorithm1(&env, &example1_basis(), &b, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let v = run_vanilla_ucb(&env, &example1_basis(), &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.chosen_arms(), v.chosen_arms());
        assert_eq!(a.returns(), v.returns());
    }

    #[test]
    fn pulls_sum_to_loop_index_plus_initialized_arms() {
        let env = ConfoundedBanditEnv::example1();
        let three = BasisPolicySet::new(vec![
            TabularSoftmaxPolicy::deterministic(&[0], 2),
            TabularSoftmaxPolicy::deterministic(&[1], 2),
            TabularSoftmaxPolicy::uniform(1, 2),
        ])
        .unwrap();
        let b = bounds(vec![0.0, 7.0, 0.0], vec![6.9, 11.0, 11.0]);
        let r = run_algorithm1(&env, &three, &b, &BanditConfig::new(120), &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let initialized = r.episodes.iter().filter(|e| e.index.is_empty()).count();
        let loop_steps = r.episodes.len() - initialized;
        assert_eq!(initialized, 2);
        assert_eq!(r.pull_counts().iter().sum::<usize>(), loop_steps + initialized);
        assert_eq!(r.pull_counts()[0], 0);
    }

    #[test]
    fn best_arm_trace_has_vanishing_average_regret() {
        let env = ConfoundedBanditEnv::example1();
        let basis = BasisPolicySet::new(vec![TabularSoftmaxPolicy::deterministic(&[1], 2)]).unwrap();
        let r = run_vanilla_ucb(&env, &basis, &BanditConfig::new(2000), &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        let regret = r.cumulative_regret(6.5).unwrap();
        // Returns are 3 or 10 with equal probability: standard deviation 3.5.
        let se = 3.5 / (2000f64).sqrt();
        assert!((regret[1999] / 2000.0).abs() <= 3.0 * se);
        // Per-arm running mean is the sample mean of an unbiased draw.
        assert!((r.arms[0].v_hat - 6.5).abs() <= 3.0 * se);
        let mean: f64 = r.returns().iter().sum::<f64>() / 2000.0;
        assert!((r.arms[0].v_hat - mean).abs() < 1e-9);
    }

    #[test]
    fn direct_imitation_without_improvement_is_flat() {
        use crate::rollout::Trajectory;
        let env = ConfoundedBanditEnv::example1();
        let traj = |a: usize| Trajectory { steps: vec![(0, a)], ret: 0.0, hidden_context: None };
        let dataset = ExpertDataset::new(vec![traj(0), traj(1), traj(1), traj(0)]).unwrap();
        let n = 4000;
        let r = run_direct_imitation(
            &env,
            &dataset,
            0.5,
            &BanditConfig::new(n),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(r.final_policy().probs(0), vec![0.5, 0.5]);
        // Per-episode return has mean 6.25 and variance 12.6875.
        let se = 12.6875f64.sqrt() / (n as f64 / 2.0).sqrt();
        let returns = r.returns();
        let first: f64 = returns[..n / 2].iter().sum::<f64>() / (n / 2) as f64;
        let second: f64 = returns[n / 2..].iter().sum::<f64>() / (n / 2) as f64;
        assert!((first - 6.25).abs() <= 3.0 * se && (second - 6.25).abs() <= 3.0 * se);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_bounds(k: usize) -> impl Strategy<Value = CausalBounds> {
            prop::collection::vec((1.0f64..11.0, 0.0f64..6.0), k).prop_map(|lw| {
                let lower: Vec<f64> = lw.iter().map(|(l, _)| *l).collect();
                let upper: Vec<f64> = lw.iter().map(|(l, w)| l + w).collect();
                CausalBounds::new(lower, upper, BoundRule::Natural).unwrap()
            })
        }

        proptest! {
            #[test]
            fn clipping_never_exceeds_either_input(ucb in -1e6f64..1e6, h in -1e6f64..1e6, d in 0.0f64..10.0) {
                let c = clip_index(ucb, h, true);
                prop_assert!(c <= h && c <= ucb);
                prop_assert!(c == h || c == ucb);
                prop_assert!(clip_index(ucb + d, h, true) >= c);
                prop_assert_eq!(clip_index(ucb, h, false), ucb);
            }

            #[test]
            fn selection_is_live_argmax(
                idx in prop::collection::vec(-5i32..5, 1..6),
                dead in prop::collection::vec(any::<bool>(), 6),
                v in prop::collection::vec(-5.0f64..5.0, 6),
                seed in any::<u64>(),
            ) {
                let k = idx.len();
                prop_assume!(dead[..k].iter().any(|d| !d));
                let mut arms: Vec<ArmState> = (0..k).map(|_| ArmState::new(TabularSoftmaxPolicy::uniform(1, 2))).collect();
                for a in 0..k {
                    arms[a].eliminated = dead[a];
                    arms[a].v_hat = v[a];
                }
                let indices: Vec<f64> = idx.iter().map(|&x| x as f64).collect();
                let best = (0..k).filter(|&a| !dead[a]).map(|a| indices[a]).fold(f64::NEG_INFINITY, f64::max);
                for tb in [TieBreak::LowestIndex, TieBreak::HighestMean, TieBreak::SeededRandom] {
                    let pick = select_arm(&arms, &indices, tb, &mut ChaCha8Rng::seed_from_u64(seed));
                    prop_assert!(!dead[pick]);
                    prop_assert_eq!(indices[pick], best);
                }
            }

            #[test]
            fn runs_respect_elimination_and_clipping(b in random_bounds(2), seed in any::<u64>(), n in 2usize..80) {
                let env = ConfoundedBanditEnv::example1();
                let r = run_algorithm1(&env, &example1_basis(), &b, &BanditConfig::new(n), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let eliminated = eliminate_arms(&b);
                prop_assert_eq!(r.episodes.len(), n);
                for e in &r.episodes {
                    prop_assert!(!eliminated[e.arm]);
                    for (a, c) in e.clipped_index.iter().enumerate() {
                        if !eliminated[a] {
                            prop_assert!(*c <= b.upper[a] && *c <= e.index[a]);
                        }
                    }
                }
                prop_assert_eq!(r.pull_counts().iter().sum::<usize>(), n);
            }

            #[test]
            fn disabled_bounds_reproduce_vanilla_bitwise(b in random_bounds(2), seed in any::<u64>(), n in 2usize..80) {
                let env = ConfoundedBanditEnv::example1();
                let mut cfg = BanditConfig::new(n);
                cfg.use_causal_bounds = false;
                let a = run_algorithm1(&env, &example1_basis(), &b, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let v = run_vanilla_ucb(&env, &example1_basis(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                prop_assert_eq!(&a.episodes, &v.episodes);
                let bits = |r: &RunResult| r.arms.iter().map(|x| x.v_hat.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a), bits(&v));
            }
        }
    }
}
