//! Exact analysis of the two-armed confounded bandit fixture.

use std::fmt;
use std::io::Write;

use anyhow::Result;
use serde::Serialize;

use crate::causal::{analyze_bandit_rational, rational_to_f64, Rational};
use crate::env::ConfoundedBanditEnv;

/// Every quantity is computed in exact rational arithmetic and converted once.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Example1Report {
    pub context_probs: Vec<f64>,
    pub expert_accuracy: f64,
    pub do_values: Vec<f64>,
    pub p_action: Vec<f64>,
    pub observational_means: Vec<f64>,
    pub direct_imitation: Vec<f64>,
    pub direct_imitation_value: f64,
    pub natural_lower: Vec<f64>,
    pub natural_upper: Vec<f64>,
    pub expert_optimal_upper: f64,
    /// Arm picked by trusting observational means.
    pub empirical_best_arm: usize,
    /// Arm with the highest interventional value.
    pub do_optimal_arm: usize,
}

fn to_f64(xs: &[Rational]) -> Vec<f64> {
    xs.iter().copied().map(rational_to_f64).collect()
}

fn argmax(xs: &[Rational]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Rewards `[[1, 3], [11, 10]]`, `P(U = 0) = 1/2`, and an expert that plays its
/// context's better arm after softening `1/5` (so with probability `9/10`).
pub fn example1_report() -> Result<Example1Report> {
    let env = ConfoundedBanditEnv::example1();
    let int = |x: f64| Rational::from_integer(x as i64);
    let rewards: Vec<Vec<Rational>> =
        env.reward_table().iter().map(|row| row.iter().map(|&r| int(r)).collect()).collect();
    let p_u = vec![Rational::new(1, 2), Rational::new(1, 2)];
    let softening = Rational::new(1, 5);
    let n_a = Rational::from_integer(2);
    let expert: Vec<Vec<Rational>> = rewards
        .iter()
        .map(|row| {
            let greedy = argmax(row);
            (0..row.len())
                .map(|a| {
                    let explore = softening / n_a;
                    if a == greedy {
                        Rational::from_integer(1) - softening + explore
                    } else {
                        explore
                    }
                })
                .collect()
        })
        .collect();
    let a = analyze_bandit_rational(&rewards, &p_u, &expert)?;
    let di_value: Rational = a.direct_imitation.iter().zip(&a.do_values).map(|(p, v)| p * v).sum();
    Ok(Example1Report {
        context_probs: to_f64(&p_u),
        expert_accuracy: rational_to_f64(expert[0][1]),
        do_values: to_f64(&a.do_values),
        p_action: to_f64(&a.p_action),
        observational_means: to_f64(&a.observational_means),
        direct_imitation: to_f64(&a.direct_imitation),
        direct_imitation_value: rational_to_f64(di_value),
        natural_lower: to_f64(&a.natural_lower),
        natural_upper: to_f64(&a.natural_upper),
        expert_optimal_upper: rational_to_f64(a.expert_optimal_upper),
        empirical_best_arm: argmax(&a.observational_means),
        do_optimal_arm: argmax(&a.do_values),
    })
}

impl Example1Report {
    /// `arm,p_hat,mean_v_hat,l,h,rule` for both rules.
    pub fn write_bounds_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "arm,p_hat,mean_v_hat,l,h,rule")?;
        for k in 0..self.do_values.len() {
            writeln!(
                w,
                "{k},{},{},{},{},natural",
                self.p_action[k], self.observational_means[k], self.natural_lower[k], self.natural_upper[k]
            )?;
        }
        for k in 0..self.do_values.len() {
            writeln!(
                w,
                "{k},{},{},{},{},expert-optimal",
                self.p_action[k],
                self.observational_means[k],
                self.natural_lower[k],
                self.expert_optimal_upper
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for Example1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "two-armed confounded bandit, P(U=0) = {}", self.context_probs[0])?;
        writeln!(f, "expert plays its context's better arm with probability {}", self.expert_accuracy)?;
        writeln!(f)?;
        writeln!(
            f,
            "{:<6}{:>10}{:>12}{:>10}{:>18}{:>16}",
            "arm", "E[V|a]", "E[V|do(a)]", "P(a)", "natural [l, h]", "expert-opt h"
        )?;
        for k in 0..self.do_values.len() {
            writeln!(
                f,
                "{:<6}{:>10}{:>12}{:>10}{:>18}{:>16}",
                k,
                self.observational_means[k],
                self.do_values[k],
                self.p_action[k],
                format!("[{}, {}]", self.natural_lower[k], self.natural_upper[k]),
                self.expert_optimal_upper
            )?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "direct imitation policy: {:?}, value {}",
            self.direct_imitation, self.direct_imitation_value
        )?;
        writeln!(f, "empirical-best arm: {}", self.empirical_best_arm)?;
        write!(f, "do-optimal arm:     {}", self.do_optimal_arm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_is_exact() {
        let r = example1_report().unwrap();
        assert_eq!(r.do_values, vec![6.0, 6.5]);
        assert_eq!(r.observational_means, vec![10.0, 3.7]);
        assert_eq!(r.direct_imitation, vec![0.5, 0.5]);
        assert_eq!(r.direct_imitation_value, 6.25);
        assert_eq!(r.expert_accuracy, 0.9);
        assert_eq!(r.empirical_best_arm, 0);
        assert_eq!(r.do_optimal_arm, 1);
    }
}
