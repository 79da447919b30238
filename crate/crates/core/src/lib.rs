//! Transfer learning from confounded expert demonstrations.
//!
//! A hidden context drawn per episode changes the environment's dynamics and
//! rewards. Experts see it, the learner does not. The crate generates the
//! expert's context-stripped dataset, clusters it into basis policies, bounds
//! each basis policy's interventional value from the observational data, and
//! runs a UCB learner whose indices are clipped by those bounds.

pub mod bandit;
pub mod causal;
pub mod cluster;
pub mod env;
pub mod expert;
pub mod harness;
pub mod policy;
pub mod rollout;
