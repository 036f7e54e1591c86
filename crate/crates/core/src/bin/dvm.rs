use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use dvm::env::Domain;
use dvm::harness::{
    dump_policy_grid, eval_rng, evaluate_policy, phase_env, run_experiment, seed_offset_from_env, write_grid,
    write_outputs, Condition, ExperimentConfig, GridLayout, Snapshot,
};
use dvm::marl::Algorithm;

#[derive(Parser)]
#[command(name = "dvm", version, about = "Train, evaluate and inspect merged multiagent teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-phase protocol for every configured seed.
    Train {
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        algo: Option<Algorithm>,
        #[arg(long)]
        condition: Option<Condition>,
        /// Comma-separated seeds, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Mean exploration-free return of a saved team.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Greedy actions and critic values over a lattice of positions.
    Grid {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        agent: usize,
        #[arg(long, default_value_t = GridLayout::Mirrored)]
        layout: GridLayout,
    },
}

fn train(
    config: Option<PathBuf>,
    domain: Option<Domain>,
    algo: Option<Algorithm>,
    condition: Option<Condition>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    overrides: Vec<String>,
) -> anyhow::Result<()> {
    let mut cfg = match &config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(Domain::Spread(2), Algorithm::MaddpgDiscrete),
    };
    if let Some(d) = domain {
        cfg.set("domain", &d.to_string())?;
    }
    if let Some(a) = algo {
        cfg.set("algorithm", &a.to_string())?;
    }
    if let Some(c) = condition {
        cfg.condition = c;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
    for o in &overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override `{o}` is not of the form key=value");
        };
        cfg.set(k.trim(), v)?;
    }
    cfg.offset_seeds(seed_offset_from_env()?);
    cfg.validate()?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let runs = run_experiment(&cfg)?;
    let files = write_outputs(&cfg, &runs, &out_dir)?;
    for run in &runs {
        let last = run.records.last().map_or(f64::NAN, |r| r.mean_return);
        println!("seed {}: {} final mean return {last:.4}", run.seed, run.condition);
    }
    println!("metrics written to {}", files.metrics.display());
    Ok(())
}

fn eval(snapshot: PathBuf, episodes: usize) -> anyhow::Result<()> {
    let team = Snapshot::read(&snapshot)?.restore()?;
    let env = phase_env(&team.config, team.phase)?;
    let mut rng = eval_rng(team.seed, team.phase.number());
    let mean = evaluate_policy(&team.bundles, &env, episodes, &mut rng)?;
    println!("{mean}");
    Ok(())
}

fn grid(snapshot: PathBuf, resolution: usize, out: PathBuf, agent: usize, layout: GridLayout) -> anyhow::Result<()> {
    let team = Snapshot::read(&snapshot)?.restore()?;
    let env = phase_env(&team.config, team.phase)?;
    let cells = dump_policy_grid(&team.bundles, &env, agent, resolution, layout)?;
    write_grid(&cells, &out).with_context(|| format!("writing {}", out.display()))?;
    println!("{} cells written to {}", cells.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            domain,
            algo,
            condition,
            seeds,
            out,
            overrides,
        } => train(config, domain, algo, condition, seeds, out, overrides),
        Command::Eval { snapshot, episodes } => eval(snapshot, episodes),
        Command::Grid {
            snapshot,
            resolution,
            out,
            agent,
            layout,
        } => grid(snapshot, resolution, out, agent, layout),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
