//! Experiment orchestration: config loading, seeded stages, multi-trial runs,
//! aggregation and CSV/JSON emission.
//!
//! Every stage reads only its predecessors' serialized outputs and draws its
//! randomness from `stage_seed(master_seed, stage, trial)`, so a stage can be
//! re-run in isolation with identical results.

mod example1;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandit::{run_algorithm1, run_direct_imitation, run_vanilla_ucb, BanditConfig, Method, RunResult};
use crate::causal::{
    context_value, empirical_stats, expert_optimal_bounds_with, natural_bounds_with, BoundRule, BoundsConfig,
    CausalBounds, ObservationalStats,
};
use crate::cluster::{cluster_dataset, ClusterConfig, LabeledDataset};
use crate::env::{Context, ContextualEnv, EnvSpec, Environment};
use crate::expert::{generate_dataset, ExpertDataset, ExpertModel, ExpertTrainingConfig, OracleDataset};
use crate::policy::{behavior_clone, BasisPolicySet, TabularSoftmaxPolicy};

pub use example1::{example1_report, Example1Report};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const ORACLE_FILE: &str = "oracle.jsonl";
pub const LABELED_FILE: &str = "labeled.csv";
pub const BASIS_FILE: &str = "basis.json";
pub const BOUNDS_FILE: &str = "bounds.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUNS_DIR: &str = "runs";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Inline environment definition or a path to one (relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    Path(PathBuf),
    Inline(EnvSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSource,
    #[serde(default)]
    pub expert: ExpertTrainingConfig,
    pub dataset_size: usize,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default = "default_smoothing")]
    pub bc_smoothing: f64,
    #[serde(default)]
    pub bounds: BoundsConfig,
    pub bandit: BanditConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_smoothing() -> f64 {
    0.5
}
fn default_trials() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Example1,
    TwoTrack,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "example1" => Ok(Preset::Example1),
            "two-track" => Ok(Preset::TwoTrack),
            other => bail!("unknown preset {other:?} (expected example1 or two-track)"),
        }
    }

    fn json(self) -> &'static str {
        match self {
            Preset::Example1 => include_str!("presets/example1.json"),
            Preset::TwoTrack => include_str!("presets/two_track.json"),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        serde_json::from_str(preset.json()).expect("built-in preset parses")
    }

    /// Load a config file; an environment path is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let EnvSource::Path(p) = &cfg.env {
            if p.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.env = EnvSource::Path(base.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.trials >= 1, "trials must be at least 1");
        ensure!(self.dataset_size >= 1, "dataset_size must be at least 1");
        ensure!(
            self.bc_smoothing.is_finite() && self.bc_smoothing >= 0.0,
            "bc_smoothing must be a nonnegative number"
        );
        if let EnvSource::Path(p) = &self.env {
            ensure!(p.exists(), "environment file {} does not exist", p.display());
        }
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        match &self.env {
            EnvSource::Inline(spec) => Ok(spec.clone()),
            EnvSource::Path(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn build_env(&self) -> Result<Environment> {
        Ok(self.env_spec()?.build()?)
    }
}

/// Stable 64-bit seed for `(master, stage, trial)`.
pub fn stage_seed(master: u64, stage: &str, trial: u64) -> u64 {
    let digest = Sha256::new()
        .chain_update(master.to_le_bytes())
        .chain_update((stage.len() as u64).to_le_bytes())
        .chain_update(stage.as_bytes())
        .chain_update(trial.to_le_bytes())
        .finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stage_rng(master: u64, stage: &str, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(master, stage, trial))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub struct GeneratedData {
    pub expert: ExpertModel,
    pub dataset: ExpertDataset,
    pub oracle: OracleDataset,
}

pub fn generate_stage(cfg: &ExperimentConfig, env: &Environment) -> Result<GeneratedData> {
    let expert = ExpertModel::train(env, &cfg.expert).context("training experts")?;
    let mut rng = stage_rng(cfg.master_seed, "dataset", 0);
    let (dataset, oracle) = generate_dataset(env, &expert, cfg.dataset_size, &mut rng)?;
    Ok(GeneratedData { expert, dataset, oracle })
}

/// Writes the dataset (and, if asked, the oracle sidecar); returns the
/// per-context frequencies when the oracle is available.
pub fn cmd_gen_expert(cfg: &ExperimentConfig, out: &Path, with_oracle: bool) -> Result<GeneratedData> {
    let env = cfg.build_env()?;
    let data = generate_stage(cfg, &env).context("gen-expert")?;
    let mut w = create(&out.join(DATASET_FILE))?;
    data.dataset.write_jsonl(&mut w)?;
    w.flush()?;
    if with_oracle {
        let mut w = create(&out.join(ORACLE_FILE))?;
        data.oracle.write_jsonl(&mut w)?;
        w.flush()?;
    }
    Ok(data)
}

pub fn context_frequencies(oracle: &OracleDataset, num_contexts: usize) -> Vec<f64> {
    let contexts = oracle.contexts();
    let mut counts = vec![0usize; num_contexts];
    for u in &contexts {
        counts[u.0] += 1;
    }
    counts.iter().map(|&c| c as f64 / contexts.len() as f64).collect()
}

pub struct ClusterOutput {
    pub labeled: LabeledDataset,
    pub basis: BasisPolicySet,
}

/// Cluster the dataset and behaviour-clone one basis policy per cluster.
/// A cluster left empty by K-means gets a uniform policy.
pub fn cluster_stage(
    cfg: &ExperimentConfig,
    env: &Environment,
    dataset: &ExpertDataset,
) -> Result<ClusterOutput> {
    let mut rng = stage_rng(cfg.master_seed, "cluster", 0);
    let (labeled, _) = cluster_dataset(dataset, env.num_states(), env.num_actions(), &cfg.cluster, &mut rng)?;
    let mut policies = Vec::with_capacity(labeled.k());
    for k in 0..labeled.k() {
        let members: Vec<_> = dataset
            .trajectories()
            .iter()
            .zip(labeled.labels())
            .filter(|(_, &m)| m == k)
            .map(|(t, _)| t)
            .collect();
        if members.is_empty() {
            log::warn!("cluster {k} is empty; using a uniform basis policy");
            policies.push(TabularSoftmaxPolicy::uniform(env.num_states(), env.num_actions()));
        } else {
            policies.push(behavior_clone(members, env.num_states(), env.num_actions(), cfg.bc_smoothing)?);
        }
    }
    Ok(ClusterOutput { labeled, basis: BasisPolicySet::new(policies)? })
}

pub fn cmd_cluster(cfg: &ExperimentConfig, out: &Path) -> Result<ClusterOutput> {
    let env = cfg.build_env()?;
    let dataset = ExpertDataset::read_jsonl(open(&out.join(DATASET_FILE))?)?;
    let result = cluster_stage(cfg, &env, &dataset).context("cluster")?;
    let mut w = create(&out.join(LABELED_FILE))?;
    result.labeled.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join(BASIS_FILE))?;
    serde_json::to_writer(&mut w, &result.basis)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(result)
}

pub struct BoundsOutput {
    pub stats: ObservationalStats,
    pub natural: CausalBounds,
    pub expert_optimal: CausalBounds,
}

impl BoundsOutput {
    pub fn active(&self, rule: BoundRule) -> &CausalBounds {
        match rule {
            BoundRule::Natural => &self.natural,
            BoundRule::ExpertOptimal => &self.expert_optimal,
        }
    }
}

pub fn bounds_stage(
    cfg: &ExperimentConfig,
    env: &Environment,
    labeled: &LabeledDataset,
) -> Result<BoundsOutput> {
    let stats = empirical_stats(labeled);
    let support = env.value_support();
    let delta = cfg.bounds.hoeffding_delta;
    let natural = natural_bounds_with(&stats, support, delta)?;
    let expert_optimal = expert_optimal_bounds_with(&stats, support, delta)?;
    for w in natural.warnings.iter().chain(&expert_optimal.warnings) {
        log::warn!("{w}");
    }
    Ok(BoundsOutput { stats, natural, expert_optimal })
}

/// Both rules in one table: `arm,p_hat,mean_v_hat,l,h,rule`.
pub fn write_bounds_csv<W: Write>(out: &BoundsOutput, mut w: W) -> Result<()> {
    let mut natural = Vec::new();
    out.natural.write_csv(&out.stats, &mut natural)?;
    let mut expert = Vec::new();
    out.expert_optimal.write_csv(&out.stats, &mut expert)?;
    w.write_all(&natural)?;
    // Skip the second header row.
    let body = expert.iter().position(|&b| b == b'\n').map_or(&expert[..], |i| &expert[i + 1..]);
    w.write_all(body)?;
    Ok(())
}

/// Bounds for one rule from a table written by [`write_bounds_csv`].
pub fn read_bounds_csv(path: &Path, rule: BoundRule) -> Result<CausalBounds> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        ensure!(rec.len() == 6, "bounds row has {} fields", rec.len());
        if &rec[5] != rule.as_str() {
            continue;
        }
        rows.push((rec[0].parse()?, rec[3].parse()?, rec[4].parse()?));
    }
    ensure!(!rows.is_empty(), "no {} bounds in {}", rule.as_str(), path.display());
    rows.sort_by_key(|r| r.0);
    let (lower, upper) = rows.iter().map(|r| (r.1, r.2)).unzip();
    Ok(CausalBounds::new(lower, upper, rule)?)
}

pub fn cmd_bounds(cfg: &ExperimentConfig, out: &Path) -> Result<BoundsOutput> {
    let env = cfg.build_env()?;
    let labeled = LabeledDataset::read_csv(open(&out.join(LABELED_FILE))?, None)?;
    let result = bounds_stage(cfg, &env, &labeled).context("bounds")?;
    let mut w = create(&out.join(BOUNDS_FILE))?;
    write_bounds_csv(&result, &mut w)?;
    w.flush()?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRuns {
    pub algorithm1: RunResult,
    pub vanilla: RunResult,
    pub direct_imitation: RunResult,
}

impl TrialRuns {
    pub fn get(&self, method: Method) -> &RunResult {
        match method {
            Method::Algorithm1 => &self.algorithm1,
            Method::VanillaUcb => &self.vanilla,
            Method::DirectImitation => &self.direct_imitation,
        }
    }
}

/// One trial of all three methods. Algorithm 1 and vanilla UCB share the
/// trial's bandit stream, so their episodes see the same contexts.
pub fn run_trial(
    cfg: &ExperimentConfig,
    env: &Environment,
    dataset: &ExpertDataset,
    basis: &BasisPolicySet,
    bounds: &CausalBounds,
    trial: usize,
) -> Result<TrialRuns> {
    let t = trial as u64;
    let algorithm1 =
        run_algorithm1(env, basis, bounds, &cfg.bandit, &mut stage_rng(cfg.master_seed, "bandit", t))
            .with_context(|| format!("run: algorithm1, trial {trial}"))?;
    let vanilla = run_vanilla_ucb(env, basis, &cfg.bandit, &mut stage_rng(cfg.master_seed, "bandit", t))
        .with_context(|| format!("run: vanilla-ucb, trial {trial}"))?;
    let direct_imitation = run_direct_imitation(
        env,
        dataset,
        cfg.bc_smoothing,
        &cfg.bandit,
        &mut stage_rng(cfg.master_seed, "direct-imitation", t),
    )
    .with_context(|| format!("run: direct-imitation, trial {trial}"))?;
    Ok(TrialRuns { algorithm1, vanilla, direct_imitation })
}

pub fn run_trials(
    cfg: &ExperimentConfig,
    env: &Environment,
    dataset: &ExpertDataset,
    basis: &BasisPolicySet,
    bounds: &CausalBounds,
) -> Result<Vec<TrialRuns>> {
    (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, env, dataset, basis, bounds, t)).collect()
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub mean: Vec<f64>,
    /// Unbiased across-trial standard deviation; zero for a single trial.
    pub std: Vec<f64>,
    pub trials: usize,
}

impl Curve {
    fn final_quartile(&self) -> std::ops::Range<usize> {
        let n = self.mean.len();
        n - n.div_ceil(4)..n
    }

    /// Mean return over the final quarter of episodes.
    pub fn terminal_mean(&self) -> f64 {
        let r = self.final_quartile();
        self.mean[r.clone()].iter().sum::<f64>() / r.len() as f64
    }

    /// Episode-wise standard deviation averaged over the final quarter.
    pub fn terminal_std(&self) -> f64 {
        let r = self.final_quartile();
        self.std[r.clone()].iter().sum::<f64>() / r.len() as f64
    }
}

/// Pointwise mean and standard deviation of the return across runs.
pub fn aggregate(runs: &[&RunResult]) -> Result<Curve> {
    ensure!(!runs.is_empty(), "nothing to aggregate");
    let horizon = runs[0].episodes.len();
    ensure!(runs.iter().all(|r| r.episodes.len() == horizon), "runs have different horizons");
    let n = runs.len() as f64;
    let mut mean = Vec::with_capacity(horizon);
    let mut std = Vec::with_capacity(horizon);
    for i in 0..horizon {
        let m = runs.iter().map(|r| r.episodes[i].ret).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r.episodes[i].ret - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(Curve { mean, std, trials: runs.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurves {
    pub curves: Vec<(Method, Curve)>,
}

impl AggregateCurves {
    pub fn from_trials(trials: &[TrialRuns]) -> Result<Self> {
        let curves = Method::ALL
            .iter()
            .map(|&m| Ok((m, aggregate(&trials.iter().map(|t| t.get(m)).collect::<Vec<_>>())?)))
            .collect::<Result<_>>()?;
        Ok(Self { curves })
    }

    pub fn get(&self, method: Method) -> &Curve {
        &self.curves.iter().find(|(m, _)| *m == method).expect("all methods aggregated").1
    }

    /// `episode,<method>_mean,<method>_std,...`
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["episode".to_string()];
        for (m, _) in &self.curves {
            header.push(format!("{}_mean", m.as_str()));
            header.push(format!("{}_std", m.as_str()));
        }
        writeln!(w, "{}", header.join(","))?;
        let horizon = self.curves[0].1.mean.len();
        for i in 0..horizon {
            let mut row = vec![(i + 1).to_string()];
            for (_, c) in &self.curves {
                row.push(c.mean[i].to_string());
                row.push(c.std[i].to_string());
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run stage and full pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub terminal_mean: f64,
    pub terminal_std: f64,
    /// Mean cumulative regret at the horizon against the best basis do-value;
    /// absent when policies were improved online.
    pub mean_final_regret: Option<f64>,
    pub recommended_arms: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub trials: usize,
    pub horizon_episodes: usize,
    pub num_arms: usize,
    pub bound_rule: BoundRule,
    pub p_hat: Vec<f64>,
    pub mean_v_hat: Vec<Option<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Exact `E[V | do(μ_k)]` of each basis policy.
    pub basis_do_values: Vec<f64>,
    /// Whether the empirical-mean best arm differs from the do-value best arm.
    pub ranking_contradiction: bool,
    pub methods: Vec<(Method, MethodSummary)>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Exact do-values of the basis policies.
pub fn basis_do_values(env: &Environment, basis: &BasisPolicySet) -> Vec<f64> {
    let p_u = env.context_dist().probs();
    basis
        .policies()
        .par_iter()
        .map(|pi| {
            p_u.iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(u, &p)| p * context_value(env, pi, Context(u)))
                .sum()
        })
        .collect()
}

pub fn summarize(
    cfg: &ExperimentConfig,
    env: &Environment,
    basis: &BasisPolicySet,
    stats: &ObservationalStats,
    bounds: &CausalBounds,
    trials: &[TrialRuns],
    curves: &AggregateCurves,
) -> Result<RunSummary> {
    let do_values = basis_do_values(env, basis);
    let best = do_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let means: Vec<f64> =
        stats.mean_v.iter().map(|m| if m.is_finite() { *m } else { f64::NEG_INFINITY }).collect();
    let mut methods = Vec::new();
    for &m in &Method::ALL {
        let curve = curves.get(m);
        let runs: Vec<&RunResult> = trials.iter().map(|t| t.get(m)).collect();
        let mean_final_regret = if runs.iter().any(|r| r.improved) {
            None
        } else {
            let finals = runs
                .iter()
                .map(|r| r.cumulative_regret(best).map(|c| c.last().copied().unwrap_or(0.0)))
                .collect::<Result<Vec<_>, _>>()?;
            Some(finals.iter().sum::<f64>() / finals.len() as f64)
        };
        methods.push((
            m,
            MethodSummary {
                terminal_mean: curve.terminal_mean(),
                terminal_std: curve.terminal_std(),
                mean_final_regret,
                recommended_arms: runs.iter().map(|r| r.recommended_arm).collect(),
            },
        ));
    }
    Ok(RunSummary {
        trials: cfg.trials,
        horizon_episodes: cfg.bandit.horizon_episodes,
        num_arms: basis.len(),
        bound_rule: bounds.rule,
        p_hat: stats.p_mu.clone(),
        mean_v_hat: stats.mean_v.iter().map(|m| m.is_finite().then_some(*m)).collect(),
        lower: bounds.lower.clone(),
        upper: bounds.upper.clone(),
        ranking_contradiction: argmax(&means) != argmax(&do_values),
        basis_do_values: do_values,
        methods,
    })
}

pub struct RunOutput {
    pub trials: Vec<TrialRuns>,
    pub curves: AggregateCurves,
    pub summary: RunSummary,
}

fn write_run_outputs(out: &Path, run: &RunOutput) -> Result<()> {
    let best = run.summary.basis_do_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (t, trial) in run.trials.iter().enumerate() {
        for &m in &Method::ALL {
            let path = out.join(RUNS_DIR).join(format!("{}_trial{t:02}.csv", m.as_str()));
            let mut w = create(&path)?;
            trial.get(m).write_csv(&mut w, Some(best))?;
            w.flush()?;
        }
    }
    let mut w = create(&out.join(CURVES_FILE))?;
    run.curves.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join(SUMMARY_FILE))?;
    serde_json::to_writer_pretty(&mut w, &run.summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn run_stage(
    cfg: &ExperimentConfig,
    env: &Environment,
    dataset: &ExpertDataset,
    basis: &BasisPolicySet,
    stats: &ObservationalStats,
    bounds: &CausalBounds,
) -> Result<RunOutput> {
    let trials = run_trials(cfg, env, dataset, basis, bounds)?;
    let curves = AggregateCurves::from_trials(&trials)?;
    let summary = summarize(cfg, env, basis, stats, bounds, &trials, &curves)?;
    Ok(RunOutput { trials, curves, summary })
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let env = cfg.build_env()?;
    let dataset = ExpertDataset::read_jsonl(open(&out.join(DATASET_FILE))?)?;
    let basis: BasisPolicySet = serde_json::from_reader(open(&out.join(BASIS_FILE))?)
        .with_context(|| format!("parsing {}", out.join(BASIS_FILE).display()))?;
    let labeled = LabeledDataset::read_csv(open(&out.join(LABELED_FILE))?, Some(basis.len()))?;
    let stats = empirical_stats(&labeled);
    let bounds = read_bounds_csv(&out.join(BOUNDS_FILE), cfg.bounds.rule)?;
    let run = run_stage(cfg, &env, &dataset, &basis, &stats, &bounds).context("run")?;
    write_run_outputs(out, &run)?;
    Ok(run)
}

pub struct PipelineOutput {
    pub data: GeneratedData,
    pub cluster: ClusterOutput,
    pub bounds: BoundsOutput,
    pub run: RunOutput,
    /// Cluster purity against the hidden contexts.
    pub context_agreement: f64,
}

/// Fraction of trajectories whose cluster's majority context is their own.
pub fn context_agreement(labeled: &LabeledDataset, oracle: &OracleDataset, num_contexts: usize) -> f64 {
    let mut table = vec![vec![0usize; num_contexts]; labeled.k()];
    for (&m, u) in labeled.labels().iter().zip(oracle.contexts()) {
        table[m][u.0] += 1;
    }
    let agree: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    agree as f64 / labeled.len() as f64
}

/// Every stage in sequence, each one reading back its predecessor's files.
pub fn cmd_pipeline(cfg: &ExperimentConfig, out: &Path, with_oracle: bool) -> Result<PipelineOutput> {
    let data = cmd_gen_expert(cfg, out, with_oracle)?;
    let cluster = cmd_cluster(cfg, out)?;
    let bounds = cmd_bounds(cfg, out)?;
    let run = cmd_run(cfg, out)?;
    let env = cfg.build_env()?;
    let context_agreement = context_agreement(&cluster.labeled, &data.oracle, env.num_contexts());
    Ok(PipelineOutput { data, cluster, bounds, run, context_agreement })
}
