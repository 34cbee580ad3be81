//! Command-line front end: closed-loop Monte Carlo simulation, config
//! validation, scenario-tree inspection, and chart regeneration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use dualmpc::belief::BeliefState;
use dualmpc::config::{load_benchmark, parse_real, Benchmark};
use dualmpc::controller::ControllerKind;
use dualmpc::objective::ControlPlan;
use dualmpc::sim::{
    monte_carlo, plot_meta, summarize, write_plots, PlotMeta, StatsBundle,
};
use dualmpc::tree::{expand, SampleBank};
use dualmpc::{Error, Result};

mod validate_suite;

#[derive(Parser)]
#[command(
    name = "dualmpc",
    version,
    about = "Sampling-based dual model predictive control under structural and parametric uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerChoice {
    /// Dual controller planning over the scenario tree.
    Dmpc,
    /// Certainty-equivalent baseline.
    Cempc,
    /// Both controllers on paired seeds.
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop Monte Carlo batches and write logs, statistics, and charts.
    Simulate {
        /// Benchmark configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = ControllerChoice::Both)]
        controller: ControllerChoice,
        /// Number of closed-loop runs per controller.
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Master seed (defaults to the config's rng_seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for CSV logs, statistics, and SVG charts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a configuration end to end; prints one PASS/FAIL line per check.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Expand one scenario tree at a given state and print it as JSON.
    DumpTree {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated state vector, e.g. "0,0,0,0".
        #[arg(long)]
        state: String,
    },
    /// Regenerate the summary charts from a statistics directory.
    Plot {
        /// Directory holding meta.json and *_stats.csv from a simulate run.
        #[arg(long)]
        stats: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Simulate { config, controller, runs, seed, out } => {
            simulate(&config, controller, runs, seed, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let bench = load_benchmark(&config)?;
            let checks = validate_suite::run_all(&bench);
            let mut all_passed = true;
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                all_passed &= c.passed;
                println!("{status} {} — {}", c.name, c.detail);
            }
            if all_passed {
                println!("{} checks passed for {}", checks.len(), bench.name);
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::DumpTree { config, state } => {
            let bench = load_benchmark(&config)?;
            let dump = dump_tree(&bench, &state)?;
            println!("{}", serde_json::to_string_pretty(&dump)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { stats } => {
            plot_from_dir(&stats)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn controller_kinds(choice: ControllerChoice) -> Vec<ControllerKind> {
    match choice {
        ControllerChoice::Dmpc => vec![ControllerKind::Dual],
        ControllerChoice::Cempc => vec![ControllerKind::CertaintyEquivalent],
        ControllerChoice::Both => {
            vec![ControllerKind::Dual, ControllerKind::CertaintyEquivalent]
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io_at(path.display().to_string(), e))
}

fn simulate(
    config: &Path,
    choice: ControllerChoice,
    runs: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let bench = load_benchmark(config)?;
    let master_seed = seed.unwrap_or(bench.rng_seed);
    std::fs::create_dir_all(out).map_err(|e| Error::io_at(out.display().to_string(), e))?;

    let mut bundles: Vec<StatsBundle> = Vec::new();
    for kind in controller_kinds(choice) {
        let label = kind.label();
        let started = Instant::now();
        let outcome = monte_carlo(&bench, kind, runs, master_seed)?;
        let elapsed = started.elapsed().as_secs_f64();
        for (i, log) in outcome.logs.iter().enumerate() {
            write_file(&out.join(format!("{label}_run_{i:03}.csv")), &log.to_csv())?;
        }
        let stats = summarize(&bench, &outcome)?;
        write_file(&out.join(format!("{label}_stats.csv")), &stats.to_csv())?;
        let total_cost: f64 =
            stats.channel("stage_cost").map_or(0.0, |c| c.median.iter().sum());
        println!(
            "{label}: {} runs ({} failed) in {elapsed:.1}s, median stage-cost total {total_cost:.3}",
            stats.runs_used, stats.failed_runs
        );
        bundles.push(stats);
    }

    let meta = plot_meta(&bench);
    write_file(&out.join("meta.json"), &serde_json::to_string_pretty(&meta)?)?;
    let refs: Vec<&StatsBundle> = bundles.iter().collect();
    write_plots(&meta, &refs, out)?;
    println!(
        "wrote {} run logs, {} stats files, meta.json, and 4 charts to {}",
        bundles.iter().map(|b| b.runs_used).sum::<usize>(),
        bundles.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct NodeDump {
    state: Vec<f64>,
    weight: f64,
    mode_index: Option<usize>,
    mode_probs: Vec<f64>,
    param_means: Vec<Vec<f64>>,
    param_vars: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct TreeDump {
    name: String,
    horizon: usize,
    dual_horizon: usize,
    num_samples: usize,
    schedule: Vec<usize>,
    stages: Vec<Vec<NodeDump>>,
}

fn dump_tree(bench: &Benchmark, state: &str) -> Result<TreeDump> {
    let models = &bench.models;
    let values: Vec<f64> = state
        .split(',')
        .enumerate()
        .map(|(i, s)| parse_real(s, &format!("state[{i}]")))
        .collect::<Result<_>>()?;
    if values.len() != models.n_x {
        return Err(Error::Dimension(format!(
            "state has {} entries, model has {} states",
            values.len(),
            models.n_x
        )));
    }
    let root_state = DVector::from_vec(values);
    let topology = &bench.scenario.topology;
    let bank = SampleBank::for_step(topology, models, bench.rng_seed, 0)?;
    let plan = ControlPlan::zeros(topology, models.n_u);
    let tree = expand(
        models,
        &bench.scenario.caps,
        topology,
        &bank,
        &root_state,
        &BeliefState::from_priors(models),
        &plan.dual_inputs,
    )?;
    let stages = tree
        .stages
        .iter()
        .map(|stage| {
            stage
                .iter()
                .map(|node| NodeDump {
                    state: node.state.iter().copied().collect(),
                    weight: node.weight,
                    mode_index: node.mode_index,
                    mode_probs: node.belief.mode_probs.clone(),
                    param_means: node
                        .belief
                        .params
                        .iter()
                        .map(|p| p.mean.iter().copied().collect())
                        .collect(),
                    param_vars: node
                        .belief
                        .params
                        .iter()
                        .map(|p| p.cov.diagonal().iter().copied().collect())
                        .collect(),
                })
                .collect()
        })
        .collect();
    Ok(TreeDump {
        name: bench.name.clone(),
        horizon: topology.horizon,
        dual_horizon: topology.dual_horizon,
        num_samples: topology.num_samples,
        schedule: topology.schedule.clone(),
        stages,
    })
}

fn plot_from_dir(dir: &Path) -> Result<()> {
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::io_at(meta_path.display().to_string(), e))?;
    let meta: PlotMeta = serde_json::from_str(&meta_text)?;
    let mut bundles = Vec::new();
    for label in ["dmpc", "cempc"] {
        let path = dir.join(format!("{label}_stats.csv"));
        if path.exists() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::io_at(path.display().to_string(), e))?;
            bundles.push(StatsBundle::from_csv(&text)?);
        }
    }
    if bundles.is_empty() {
        return Err(Error::Config(format!(
            "no dmpc_stats.csv or cempc_stats.csv found in {}",
            dir.display()
        )));
    }
    let refs: Vec<&StatsBundle> = bundles.iter().collect();
    write_plots(&meta, &refs, dir)?;
    println!("regenerated 4 charts in {}", dir.display());
    Ok(())
}
