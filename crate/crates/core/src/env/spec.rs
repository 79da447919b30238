//! JSON schema for environment definitions.
//!
//! ```json
//! { "kind": "bandit",
//!   "reward_table": [[1, 3], [11, 10]],
//!   "context_probs": [0.5, 0.5] }
//!
//! { "kind": "grid_track",
//!   "layouts": [["G..", "...", "S.."], ["#.G", "...", "S.."]],
//!   "context_probs": [0.7, 0.3],
//!   "step_reward": -0.003, "collision_reward": -0.08, "goal_reward": 1.0,
//!   "horizon": 100, "gamma": 1.0, "start_heading": "N" }
//! ```
//!
//! Layout rows use `.` free, `#` wall, `G` goal, `S` start (free). One layout per
//! context, all of the same size and with identical `S` cells. `start_probs`
//! (row-major over `S` cells) defaults to uniform.

use serde::{Deserialize, Serialize};

use super::grid::{GridTrackEnv, Heading};
use super::{ConfoundedBanditEnv, ContextDistribution, EnvError, Environment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Bandit { reward_table: Vec<Vec<f64>>, context_probs: Vec<f64> },
    GridTrack(GridTrackSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTrackSpec {
    pub layouts: Vec<Vec<String>>,
    pub context_probs: Vec<f64>,
    #[serde(default = "default_step_reward")]
    pub step_reward: f64,
    #[serde(default = "default_collision_reward")]
    pub collision_reward: f64,
    #[serde(default = "default_goal_reward")]
    pub goal_reward: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_heading")]
    pub start_heading: Heading,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_probs: Option<Vec<f64>>,
}

fn default_step_reward() -> f64 {
    -0.003
}
fn default_collision_reward() -> f64 {
    -0.08
}
fn default_goal_reward() -> f64 {
    1.0
}
fn default_horizon() -> usize {
    100
}
fn default_gamma() -> f64 {
    1.0
}
fn default_heading() -> Heading {
    Heading::N
}

impl EnvSpec {
    pub fn build(&self) -> Result<Environment, EnvError> {
        match self {
            EnvSpec::Bandit { reward_table, context_probs } => {
                let dist = ContextDistribution::new(context_probs.clone())?;
                Ok(Environment::Bandit(ConfoundedBanditEnv::new(reward_table.clone(), dist)?))
            }
            EnvSpec::GridTrack(g) => Ok(Environment::Grid(GridTrackEnv::from_spec(g)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ContextualEnv;

    #[test]
    fn parses_documented_examples() {
        let bandit: EnvSpec = serde_json::from_str(
            r#"{"kind":"bandit","reward_table":[[1,3],[11,10]],"context_probs":[0.5,0.5]}"#,
        )
        .unwrap();
        let env = bandit.build().unwrap();
        assert_eq!(env.num_actions(), 2);

        let grid: EnvSpec = serde_json::from_str(
            r##"{"kind":"grid_track","layouts":[["G..","...","S.."],["#.G","...","S.."]],
                "context_probs":[0.7,0.3]}"##,
        )
        .unwrap();
        let env = grid.build().unwrap();
        assert_eq!(env.num_states(), 36);
        assert_eq!(env.horizon(), 100);
    }

    #[test]
    fn unknown_cell_rejected() {
        let grid: EnvSpec =
            serde_json::from_str(r#"{"kind":"grid_track","layouts":[["GX.","S.."]],"context_probs":[1.0]}"#)
                .unwrap();
        assert!(grid.build().is_err());
    }
}
