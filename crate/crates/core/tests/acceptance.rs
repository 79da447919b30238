//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line with
//! the measured quantities, then asserts. Run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use causal_transfer::bandit::{run_algorithm1, run_vanilla_ucb, BanditConfig, RunResult};
use causal_transfer::causal::{
    exact_do_value, exact_observational_stats, expert_optimal_bounds, natural_bounds, verify_hypothesis,
    CausalBounds, MonteCarloBudget, ObservationalStats,
};
use causal_transfer::env::{ConfoundedBanditEnv, ContextDistribution, ContextualEnv};
use causal_transfer::expert::ExpertModel;
use causal_transfer::harness::{
    basis_do_values, bounds_stage, cluster_stage, cmd_pipeline, example1_report, generate_stage, run_stage,
    stage_rng, stage_seed, ExperimentConfig, Preset,
};
use causal_transfer::policy::{
    behavior_clone, surrogate_gradient, surrogate_objective, BasisPolicySet, TabularSoftmaxPolicy,
};
use causal_transfer::rollout::{CollectedEpisode, StepRecord, Trajectory};

fn report(criterion: u32, title: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} [{verdict}] {title}: {detail}");
}

fn action_basis(k: usize) -> BasisPolicySet {
    BasisPolicySet::new((0..k).map(|a| TabularSoftmaxPolicy::deterministic(&[a], k)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// 1 and 2: exact Example-1 analytics
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_example1_analytics() {
    let start = Instant::now();
    let r = example1_report().unwrap();
    let elapsed = start.elapsed();
    let pass = r.do_values == [6.0, 6.5]
        && r.observational_means == [10.0, 3.7]
        && r.direct_imitation == [0.5, 0.5]
        && elapsed < Duration::from_secs(1);
    report(
        1,
        "Example-1 analytics",
        pass,
        format!(
            "do = {:?}, E[r|a] = {:?}, pi_DI = {:?}, {elapsed:.2?} (limit 1 s, zero tolerance)",
            r.do_values, r.observational_means, r.direct_imitation
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_example1_bounds() {
    let r = example1_report().unwrap();
    // Independent oracle: dynamic-programming do-values of the action basis.
    let env = ConfoundedBanditEnv::example1();
    let basis = action_basis(2);
    let dp: Vec<f64> = basis
        .policies()
        .iter()
        .map(|pi| exact_do_value(&env, pi, &MonteCarloBudget::default()).unwrap().value)
        .collect();
    let inside = (0..2).all(|k| {
        r.natural_lower[k] <= dp[k] && dp[k] <= r.natural_upper[k] && dp[k] <= r.expert_optimal_upper
    });
    let pass = r.natural_lower == [5.5, 2.35]
        && r.natural_upper == [10.5, 7.35]
        && r.expert_optimal_upper == 6.85
        && dp == r.do_values
        && inside;
    report(
        2,
        "Example-1 causal bounds",
        pass,
        format!(
            "natural [{}, {}] and [{}, {}], expert-optimal upper {}, oracle do-values {:?} (zero tolerance)",
            r.natural_lower[0],
            r.natural_upper[0],
            r.natural_lower[1],
            r.natural_upper[1],
            r.expert_optimal_upper,
            dp
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3: bound validity over random confounded bandits
// ---------------------------------------------------------------------------

struct RandomBandit {
    env: ConfoundedBanditEnv,
    expert: ExpertModel,
}

fn random_distribution<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Half the instances use an arbitrary expert table, half a softened
/// context-greedy expert (which usually satisfies the optimality hypothesis).
fn random_bandit<R: Rng>(rng: &mut R, greedy: bool) -> RandomBandit {
    let k = rng.gen_range(2..=4);
    let u = rng.gen_range(1..=4);
    let rewards: Vec<Vec<f64>> =
        (0..u).map(|_| (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
    let p_u = random_distribution(u, rng);
    let table: Vec<Vec<f64>> = rewards
        .iter()
        .map(|row| {
            if greedy {
                let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                let eps = rng.gen_range(0.0..0.1);
                (0..k).map(|a| eps / k as f64 + if a == best { 1.0 - eps } else { 0.0 }).collect()
            } else {
                random_distribution(k, rng)
            }
        })
        .collect();
    let policies = table
        .iter()
        .map(|row| TabularSoftmaxPolicy::from_probs(k, std::slice::from_ref(row)).unwrap())
        .collect();
    RandomBandit {
        env: ConfoundedBanditEnv::new(rewards, ContextDistribution::new(p_u).unwrap()).unwrap(),
        expert: ExpertModel::new(policies, table, 0.0).unwrap(),
    }
}

#[test]
fn criterion_3_bound_validity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(1, "bound-validity", 0));
    let instances = 600;
    let mut natural_violations = 0;
    let mut eo_violations = 0;
    let mut eo_above_natural = 0;
    let mut hypothesis_held = 0;
    for i in 0..instances {
        let b = random_bandit(&mut rng, i % 2 == 0);
        let basis = action_basis(b.env.num_actions());
        let stats = exact_observational_stats(&b.env, &basis, &b.expert).unwrap();
        let support = b.env.value_support();
        let nat = natural_bounds(&stats, support).unwrap();
        let eo = expert_optimal_bounds(&stats, support).unwrap();
        let holds = verify_hypothesis(&b.env, &basis, &b.expert).unwrap();
        hypothesis_held += usize::from(holds);
        for (k, pi) in basis.policies().iter().enumerate() {
            let v = exact_do_value(&b.env, pi, &MonteCarloBudget::default()).unwrap().value;
            if !nat.contains(k, v, 1e-9) {
                natural_violations += 1;
            }
            if holds && v > eo.upper[k] + 1e-9 {
                eo_violations += 1;
            }
            if eo.upper[k] > nat.upper[k] + 1e-9 {
                eo_above_natural += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = natural_violations == 0
        && eo_violations == 0
        && eo_above_natural == 0
        && elapsed < Duration::from_secs(60);
    report(
        3,
        "bound validity",
        pass,
        format!(
            "{instances} bandits ({hypothesis_held} satisfy the hypothesis): natural misses {natural_violations}, \
             expert-optimal misses {eo_violations}, expert-optimal above natural {eo_above_natural}, \
             {elapsed:.2?} (tolerance 1e-9, limit 60 s)"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4: regret on Example 1
// ---------------------------------------------------------------------------

fn example1_bounds() -> (ObservationalStats, CausalBounds) {
    let env = ConfoundedBanditEnv::example1();
    let r = example1_report().unwrap();
    let stats = ObservationalStats::exact(r.p_action.clone(), r.observational_means.clone()).unwrap();
    let bounds = expert_optimal_bounds(&stats, env.value_support()).unwrap();
    (stats, bounds)
}

#[test]
fn criterion_4_example1_regret() {
    let start = Instant::now();
    let env = ConfoundedBanditEnv::example1();
    let basis = action_basis(2);
    let (_, bounds) = example1_bounds();
    let cfg = ExperimentConfig::preset(Preset::Example1).bandit;
    assert!(cfg.improvement.is_off() && cfg.horizon_episodes == 2000);
    let seeds = 50;
    let best = 6.5;
    let mut regret = [0.0; 2];
    let mut suboptimal = [0.0; 2];
    let mut recommended_optimal = 0;
    for t in 0..seeds {
        let a = run_algorithm1(&env, &basis, &bounds, &cfg, &mut stage_rng(1, "bandit", t)).unwrap();
        let v = run_vanilla_ucb(&env, &basis, &cfg, &mut stage_rng(1, "bandit", t)).unwrap();
        for (slot, run) in [&a, &v].into_iter().enumerate() {
            regret[slot] += *run.cumulative_regret(best).unwrap().last().unwrap() / seeds as f64;
            suboptimal[slot] += run.pull_counts()[0] as f64 / seeds as f64;
        }
        recommended_optimal += usize::from(a.recommended_arm == 1);
    }
    let elapsed = start.elapsed();
    let rate = recommended_optimal as f64 / seeds as f64;
    let pass = regret[0] <= regret[1]
        && suboptimal[0] < suboptimal[1]
        && rate >= 0.9
        && elapsed < Duration::from_secs(120);
    report(
        4,
        "Example-1 regret",
        pass,
        format!(
            "mean regret algorithm1 {:.3} vs vanilla {:.3}, suboptimal pulls {:.2} vs {:.2}, \
             optimal recommendation {:.0}% of {seeds} seeds, {elapsed:.2?} (limit 2 min)",
            regret[0],
            regret[1],
            suboptimal[0],
            suboptimal[1],
            100.0 * rate
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5: two-track gridworld transfer
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_gridworld_transfer() {
    let start = Instant::now();
    let cfg = ExperimentConfig::preset(Preset::TwoTrack);
    assert_eq!(cfg.trials, 10);
    let env = cfg.build_env().unwrap();
    let data = generate_stage(&cfg, &env).unwrap();
    let cluster = cluster_stage(&cfg, &env, &data.dataset).unwrap();
    let bounds = bounds_stage(&cfg, &env, &cluster.labeled).unwrap();

    // Oracle validation before any bandit run: empirical and do-value rankings disagree.
    let do_values = basis_do_values(&env, &cluster.basis);
    let argmax = |xs: &[f64]| (0..xs.len()).max_by(|&a, &b| xs[a].total_cmp(&xs[b])).unwrap();
    let contradiction = argmax(&bounds.stats.mean_v) != argmax(&do_values);

    let run =
        run_stage(&cfg, &env, &data.dataset, &cluster.basis, &bounds.stats, bounds.active(cfg.bounds.rule))
            .unwrap();
    let elapsed = start.elapsed();
    let m: BTreeMap<_, _> = run
        .summary
        .methods
        .iter()
        .map(|(method, s)| (method.as_str(), (s.terminal_mean, s.terminal_std)))
        .collect();
    let (a, v, d) = (m["algorithm1"], m["vanilla-ucb"], m["direct-imitation"]);
    let pass = contradiction
        && a.0 >= v.0
        && v.0 >= d.0
        && a.1 < v.1
        && a.1 < d.1
        && elapsed < Duration::from_secs(600);
    report(
        5,
        "two-track transfer",
        pass,
        format!(
            "E[V|mu] = {:.3?} vs do = {:.3?} (contradiction {contradiction}); final-quartile mean/std \
             algorithm1 {:.4}/{:.4}, vanilla {:.4}/{:.4}, direct imitation {:.4}/{:.4}; \
             {} trials, {elapsed:.2?} (limit 10 min)",
            bounds.stats.mean_v, do_values, a.0, a.1, v.0, v.1, d.0, d.1, cfg.trials
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6: behaviour-cloning consistency
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_behavior_cloning() {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(1, "behavior-cloning", 0));
    let (ns, na, transitions) = (6, 4, 10_000);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let logits: Vec<f64> = (0..ns * na).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let truth = TabularSoftmaxPolicy::from_logits(ns, na, logits).unwrap();
        let steps: Vec<(usize, usize)> = (0..transitions)
            .map(|_| {
                let s = rng.gen_range(0..ns);
                (s, truth.sample_action(s, &mut rng))
            })
            .collect();
        let visited: Vec<usize> = (0..ns).filter(|s| steps.iter().any(|x| x.0 == *s)).collect();
        let data = Trajectory { steps, ret: 0.0, hidden_context: None };
        let fit = behavior_clone([&data], ns, na, 0.5).unwrap();
        worst = worst.max(fit.max_tv_distance(&truth, visited));
    }
    let pass = worst <= 0.05;
    report(
        6,
        "behaviour-cloning consistency",
        pass,
        format!("max TV over visited states {worst:.4} across 10 random policies (limit 0.05, {transitions} transitions)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7: policy-gradient gradient check
// ---------------------------------------------------------------------------

fn finite_difference(
    policy: &TabularSoftmaxPolicy,
    batch: &[CollectedEpisode],
    baseline: f64,
    clip: f64,
    beta: f64,
) -> Vec<f64> {
    let h = 1e-6;
    let base = policy.logits_flat().to_vec();
    let mut q = policy.clone();
    (0..base.len())
        .map(|j| {
            let mut l = base.clone();
            l[j] = base[j] + h;
            q.set_logits_flat(&l).unwrap();
            let up = surrogate_objective(&q, batch, baseline, clip, beta);
            l[j] = base[j] - h;
            q.set_logits_flat(&l).unwrap();
            let down = surrogate_objective(&q, batch, baseline, clip, beta);
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn criterion_7_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(1, "gradient-check", 0));
    let clip = 0.2;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    while checked < 20 {
        let (ns, na) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let logits =
            |rng: &mut ChaCha8Rng| (0..ns * na).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
        let policy = TabularSoftmaxPolicy::from_logits(ns, na, logits(&mut rng)).unwrap();
        let old = TabularSoftmaxPolicy::from_logits(ns, na, logits(&mut rng)).unwrap();
        let batch: Vec<CollectedEpisode> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let steps = (0..rng.gen_range(1..=5))
                    .map(|_| {
                        let s = rng.gen_range(0..ns);
                        let a = old.sample_action(s, &mut rng);
                        StepRecord { state: s, action: a, behavior_prob: old.action_prob(s, a), reward: 0.0 }
                    })
                    .collect();
                CollectedEpisode {
                    context: causal_transfer::env::Context(0),
                    steps,
                    ret: rng.gen_range(-2.0..2.0),
                }
            })
            .collect();
        let baseline = rng.gen_range(-1.0..1.0);
        let beta = rng.gen_range(0.0..0.05);
        // The objective has kinks where a ratio meets the clip range; skip those draws.
        let near_kink = batch.iter().flat_map(|e| &e.steps).any(|st| {
            let r = policy.action_prob(st.state, st.action) / st.behavior_prob;
            (r - (1.0 - clip)).abs() < 1e-4 || (r - (1.0 + clip)).abs() < 1e-4
        });
        if near_kink {
            skipped += 1;
            continue;
        }
        let g = surrogate_gradient(&policy, &batch, baseline, clip, beta);
        let fd = finite_difference(&policy, &batch, baseline, clip, beta);
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm =
            g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(if norm > 0.0 { diff / norm } else { diff });
        checked += 1;
    }
    let pass = worst <= 1e-5;
    report(
        7,
        "policy-gradient correctness",
        pass,
        format!("max relative error {worst:.2e} over {checked} instances ({skipped} near-kink draws skipped, limit 1e-5)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8: mechanical invariants
// ---------------------------------------------------------------------------

fn clipped_within_bounds(run: &RunResult, bounds: &CausalBounds) -> bool {
    run.episodes.iter().all(|e| {
        e.clipped_index
            .iter()
            .enumerate()
            .all(|(k, c)| c.is_nan() || (*c <= bounds.upper[k] && *c <= e.index[k]))
    })
}

fn eliminated_untouched(run: &RunResult) -> bool {
    run.episodes.iter().all(|e| !run.arms[e.arm].eliminated)
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_8_mechanical_invariants() {
    let mut clip_ok = true;
    let mut elim_ok = true;
    let mut identical = true;
    let mut eliminations = 0;

    // Example 1 under its exact bounds.
    let env = ConfoundedBanditEnv::example1();
    let (_, bounds) = example1_bounds();
    for t in 0..10 {
        let a = run_algorithm1(
            &env,
            &action_basis(2),
            &bounds,
            &BanditConfig::new(500),
            &mut stage_rng(1, "bandit", t),
        )
        .unwrap();
        clip_ok &= clipped_within_bounds(&a, &bounds);
    }

    // Random bandits, natural bounds (which eliminate arms on some instances).
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(1, "invariants", 0));
    for i in 0..1000 {
        let b = random_bandit(&mut rng, i % 2 == 0);
        let basis = action_basis(b.env.num_actions());
        let stats = exact_observational_stats(&b.env, &basis, &b.expert).unwrap();
        let nat = natural_bounds(&stats, b.env.value_support()).unwrap();
        let mut cfg = BanditConfig::new(200);
        let a = run_algorithm1(&b.env, &basis, &nat, &cfg, &mut stage_rng(1, "bandit", i)).unwrap();
        eliminations += a.arms.iter().filter(|x| x.eliminated).count();
        clip_ok &= clipped_within_bounds(&a, &nat);
        elim_ok &= eliminated_untouched(&a);

        cfg.use_causal_bounds = false;
        let off = run_algorithm1(&b.env, &basis, &nat, &cfg, &mut stage_rng(1, "bandit", i)).unwrap();
        let van = run_vanilla_ucb(&b.env, &basis, &cfg, &mut stage_rng(1, "bandit", i)).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        off.write_csv(&mut x, None).unwrap();
        van.write_csv(&mut y, None).unwrap();
        identical &= x == y && off.episodes == van.episodes;
        identical &= off.arms.iter().zip(&van.arms).all(|(p, q)| p.v_hat.to_bits() == q.v_hat.to_bits());
    }

    // Full pipelines, twice each, compared byte for byte.
    let mut reproducible = true;
    let mut compared = 0;
    for (preset, trials) in [(Preset::Example1, 4), (Preset::TwoTrack, 2)] {
        let mut cfg = ExperimentConfig::preset(preset);
        cfg.trials = trials;
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            cmd_pipeline(&cfg, d.path(), true).unwrap();
        }
        let (a, b) = (files_under(dirs[0].path()), files_under(dirs[1].path()));
        compared += a.len();
        reproducible &= !a.is_empty() && a == b;
    }

    let pass = clip_ok && elim_ok && identical && reproducible && eliminations > 0;
    report(
        8,
        "mechanical invariants",
        pass,
        format!(
            "clipped <= h {clip_ok}, eliminated never pulled {elim_ok} ({eliminations} eliminations), \
             bounds-off identical to vanilla {identical}, pipeline byte-reproducible {reproducible} ({compared} files)"
        ),
    );
    assert!(pass);
}
