use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use causal_transfer::env::ContextualEnv;
use causal_transfer::harness::{self, ExperimentConfig, Preset};

#[derive(Parser)]
#[command(
    name = "causal-transfer",
    version,
    about = "Confounded expert data, causal bounds and bound-constrained UCB"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the experts and write the context-stripped dataset.
    GenExpert(Common),
    /// Cluster the dataset and behaviour-clone the basis policies.
    Cluster(Common),
    /// Compute causal bounds from the labeled dataset.
    Bounds(Common),
    /// Run Algorithm 1, vanilla UCB and direct imitation for every trial.
    Run(Common),
    /// All stages end to end.
    Pipeline(Common),
    /// Exact analysis of the two-armed confounded bandit.
    Example1 {
        /// Also write the report and bounds table to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: example1 or two-track.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the hidden contexts next to the dataset.
    #[arg(long)]
    with_oracle: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(Preset::parse(name)?),
            _ => bail!("exactly one of --config or --preset is required"),
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_run(summary: &harness::RunSummary) {
    println!("basis do-values: {:?}", summary.basis_do_values);
    println!("empirical ranking contradicts do-values: {}", summary.ranking_contradiction);
    println!("{:<18}{:>16}{:>16}{:>16}", "method", "terminal mean", "terminal std", "final regret");
    for (m, s) in &summary.methods {
        let regret = s.mean_final_regret.map_or("-".to_string(), |r| format!("{r:.3}"));
        println!("{:<18}{:>16.4}{:>16.4}{:>16}", m.as_str(), s.terminal_mean, s.terminal_std, regret);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenExpert(c) => {
            let cfg = c.load()?;
            let data = harness::cmd_gen_expert(&cfg, &cfg.output_dir, c.with_oracle)?;
            println!("wrote {} trajectories to {}", data.dataset.len(), cfg.output_dir.display());
            if c.with_oracle {
                let env = cfg.build_env()?;
                let freq = harness::context_frequencies(&data.oracle, env.num_contexts());
                println!("context frequencies: {freq:?}");
            }
        }
        Command::Cluster(c) => {
            let cfg = c.load()?;
            let out = harness::cmd_cluster(&cfg, &cfg.output_dir)?;
            println!("K = {}, {} labeled trajectories", out.labeled.k(), out.labeled.len());
        }
        Command::Bounds(c) => {
            let cfg = c.load()?;
            let b = harness::cmd_bounds(&cfg, &cfg.output_dir)?;
            println!("p_hat {:?}\nmean_v_hat {:?}", b.stats.p_mu, b.stats.mean_v);
            println!("natural l {:?} h {:?}", b.natural.lower, b.natural.upper);
            println!("expert-optimal l {:?} h {:?}", b.expert_optimal.lower, b.expert_optimal.upper);
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            let run = harness::cmd_run(&cfg, &cfg.output_dir)?;
            print_run(&run.summary);
        }
        Command::Pipeline(c) => {
            let cfg = c.load()?;
            let p = harness::cmd_pipeline(&cfg, &cfg.output_dir, c.with_oracle)?;
            println!("K = {}, cluster/context agreement {:.3}", p.cluster.labeled.k(), p.context_agreement);
            print_run(&p.run.summary);
        }
        Command::Example1 { out } => {
            let report = harness::example1_report()?;
            println!("{report}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                report.write_bounds_csv(std::fs::File::create(dir.join("example1_bounds.csv"))?)?;
                std::fs::write(dir.join("example1.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
