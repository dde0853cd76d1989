use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};

use fedcpu::channel::{sample_channel, ChannelConfig};
use fedcpu::coeff_select::{
    brute_force_oracle, default_theta, select_coefficients, LearningTerms, MetricInputs, SelectionConfig,
};
use fedcpu::harness::{desk_scale, preset, run_experiment, summarize, write_outputs, ExperimentConfig};
use fedcpu::lattice::{LatticeKind, LatticeSpec};
use fedcpu::seed::SimRng;

#[derive(Parser)]
#[command(
    name = "fedcpu",
    version,
    about = "Lattice-coded over-the-air federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment (or every variant of a preset sweep).
    Run(RunArgs),
    /// Print the effective configuration as TOML.
    Config(ConfigArgs),
    /// Exhaustive reference checks.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Args)]
struct ConfigSource {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the laptop-sized base instead of the full defaults.
    #[arg(long)]
    desk: bool,
    /// Dotted override, e.g. `channel.snr=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None if self.desk => desk_scale(),
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Sweep name: local-steps, antennas, devices, scale or lattices.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides `output` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Compare coefficient selection against exhaustive search on random channels.
    Coefficients {
        #[arg(long, default_value_t = 3)]
        devices: usize,
        #[arg(long, default_value_t = 4)]
        antennas: usize,
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        bound: i64,
        #[arg(long, default_value = "e8")]
        lattice: LatticeKind,
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
        /// DMSE budget; derived from the lattice when omitted.
        #[arg(long)]
        theta: Option<f64>,
        /// Device standard deviations are drawn from `[1, 1 + spread)`.
        #[arg(long, default_value_t = 0.0)]
        sigma_spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the fast nearest-point decoder against enumeration.
    Lattice {
        #[arg(long, default_value = "e8")]
        kind: LatticeKind,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Config(args) => {
            print!("{}", args.source.load()?.to_toml_string()?);
            Ok(())
        }
        Command::Oracle(cmd) => oracle(cmd),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let base = args.source.load()?;
    let out = args
        .out
        .or_else(|| base.output.clone())
        .unwrap_or_else(|| PathBuf::from("fedcpu-out"));
    let variants = match &args.preset {
        Some(name) => preset(name, &base)?
            .into_iter()
            .map(|(label, c)| (out.join(label), c))
            .collect(),
        None => vec![(out, base)],
    };
    for (dir, cfg) in variants {
        let result = run_experiment(&cfg).with_context(|| format!("experiment for {}", dir.display()))?;
        let (rounds, _) = write_outputs(&result, &dir)?;
        let tail = summarize(&result.rounds).pop();
        match tail {
            Some(s) => println!(
                "{}: round {} accuracy {:.4} ± {:.4} decode-error rate {:.3}",
                rounds.display(),
                s.round,
                s.test_accuracy_mean,
                s.test_accuracy_se,
                s.decode_error_rate
            ),
            None => println!("{}: no rounds", rounds.display()),
        }
    }
    Ok(())
}

fn oracle(cmd: OracleCommand) -> Result<()> {
    match cmd {
        OracleCommand::Coefficients {
            devices,
            antennas,
            snr,
            trials,
            bound,
            lattice,
            scale,
            theta,
            sigma_spread,
            seed,
        } => {
            let mut lat = LatticeSpec::new(lattice, scale)?;
            let mut rng = SimRng::seed_from_u64(seed);
            let sq = lat.second_moment(100_000, &mut rng)?;
            let cfg = SelectionConfig::new(theta.unwrap_or_else(|| default_theta(&lat)));
            let channel = ChannelConfig {
                antennas,
                devices,
                snr,
                ..Default::default()
            };
            let mut worst = 1.0f64;
            let mut violations = 0usize;
            for trial in 0..trials {
                let h = sample_channel(&channel, &mut rng)?;
                let inputs = MetricInputs {
                    learning: LearningTerms {
                        lr: 0.01,
                        grad_var: 1.0,
                        batch: 100,
                        local_steps: 3,
                    },
                    sigmas: (0..devices).map(|_| 1.0 + sigma_spread * rng.random::<f64>()).collect(),
                    second_moment: sq,
                    s: 48,
                };
                let ours = select_coefficients(&h, snr, sq, &cfg, &inputs)?;
                let best = brute_force_oracle(&h, snr, cfg.theta, &inputs, bound)?;
                match best {
                    Some(b) => {
                        let ratio = ours.metric / b.metric;
                        let feasible = ours.dmse_slack >= 0.0;
                        if feasible {
                            worst = worst.max(ratio);
                        } else {
                            violations += 1;
                        }
                        println!(
                            "trial {trial}: selected {:?} metric {:.6e}{} | oracle {:?} metric {:.6e} | ratio {ratio:.4}",
                            ours.a,
                            ours.metric,
                            if feasible { "" } else { " (over budget)" },
                            b.a,
                            b.metric
                        );
                    }
                    None => println!("trial {trial}: selected {:?} | oracle found no feasible vector", ours.a),
                }
            }
            println!("worst ratio {worst:.4} over in-budget selections; {violations} selections over budget");
        }
        OracleCommand::Lattice {
            kind,
            scale,
            trials,
            seed,
        } => {
            if kind == LatticeKind::Custom {
                bail!("custom lattices have no exact decoder to check");
            }
            let lat = LatticeSpec::new(kind, scale)?;
            let n = lat.block_dim();
            let mut rng = SimRng::seed_from_u64(seed);
            let mut mismatches = 0usize;
            for _ in 0..trials {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0) * scale).collect();
                let fast = lat.nearest_point(&x)?.point;
                let slow = lat.enumerate_nearest(&x)?;
                let d = |p: &[f64]| p.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                if (d(&fast) - d(&slow)).abs() > 1e-9 * scale * scale {
                    mismatches += 1;
                }
            }
            println!(
                "{} ρ={scale}: {mismatches} of {trials} disagree with enumeration",
                lat.name()
            );
            if mismatches > 0 {
                bail!("decoder disagrees with enumeration");
            }
        }
    }
    Ok(())
}
