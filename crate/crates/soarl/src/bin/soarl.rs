use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use soarl::harness::{
    parse_seed_list, run_experiment, summarize, ExperimentConfig, Protocol,
};
use soarl::planner::{solve, PlanningProblem};
use soarl::symbolic::{parse_domain, Proposition, SymbolicState};

#[derive(Parser)]
#[command(name = "soarl", about = "Symbolic-option RL experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment protocol over one or more seeds.
    Run {
        /// TOML config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// "A", "B", or a map file path.
        #[arg(long)]
        map: Option<String>,
        /// Task id 1-3.
        #[arg(long)]
        task: Option<u8>,
        /// Natural-language constraint; empty disables monitoring.
        #[arg(long)]
        constraint: Option<String>,
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        library_in: Option<PathBuf>,
        #[arg(long)]
        library_out: Option<PathBuf>,
        /// Comma-separated seed list, e.g. 0,1,2.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<u64>,
    },
    /// Aggregate metrics from completed run directories.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Solve a planning problem from a domain file (debugging aid).
    Plan {
        #[arg(long)]
        domain: PathBuf,
        /// Goal propositions, comma-separated.
        #[arg(long)]
        goal: String,
        /// Initial propositions, comma-separated (default empty).
        #[arg(long)]
        initial: Option<String>,
        /// Per-action weights as name=value pairs, comma-separated.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        max_len: Option<usize>,
    },
}

fn props(text: &str) -> Result<SymbolicState, String> {
    let mut state = SymbolicState::empty();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        state.insert(Proposition::parse(part)?);
    }
    Ok(state)
}

fn run_command(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            config,
            map,
            task,
            constraint,
            protocol,
            library_in,
            library_out,
            seeds,
            out,
            episodes,
        } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::from_file(&path).map_err(|e| e.to_string())?,
                None => ExperimentConfig::default(),
            };
            cfg.apply_env();
            if let Some(v) = map {
                cfg.map = v;
            }
            if let Some(v) = task {
                cfg.task = v;
            }
            if let Some(v) = constraint {
                cfg.constraint = v;
            }
            if let Some(v) = protocol {
                cfg.protocol = v;
            }
            if let Some(v) = library_in {
                cfg.library_in = Some(v);
            }
            if let Some(v) = library_out {
                cfg.library_out = Some(v);
            }
            if let Some(v) = seeds {
                cfg.seeds = parse_seed_list(&v).ok_or("invalid --seeds list")?;
            }
            if let Some(v) = out {
                cfg.out_dir = v;
            }
            if let Some(v) = episodes {
                cfg.learner.episode_budget = v;
            }
            let output = run_experiment(&cfg).map_err(|e| e.to_string())?;
            println!("run complete: {}", output.out_dir.display());
            for seed in &output.seeds {
                for task in &seed.tasks {
                    let criterion = task
                        .samples_to_criterion
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| "not reached".to_string());
                    println!(
                        "  seed {} task {}: samples-to-criterion {}, violations {}",
                        seed.seed,
                        task.task.id(),
                        criterion,
                        task.total_violations
                    );
                }
            }
            Ok(())
        }
        Command::Summarize { dirs } => {
            let summary = summarize(&dirs).map_err(|e| e.to_string())?;
            print!("{}", summary.text);
            print!("{}", summary.csv);
            Ok(())
        }
        Command::Plan { domain, goal, initial, weights, max_len } => {
            let text = std::fs::read_to_string(&domain).map_err(|e| e.to_string())?;
            let domain = parse_domain(&text).map_err(|e| e.to_string())?;
            let initial = initial.as_deref().map(props).transpose()?.unwrap_or_default();
            let goal = props(&goal)?;
            let mut problem = PlanningProblem::new(domain, initial, goal);
            if let Some(spec) = weights {
                let mut map = BTreeMap::new();
                for pair in spec.split(',').filter(|p| !p.is_empty()) {
                    let (name, value) =
                        pair.split_once('=').ok_or("weights expect name=value pairs")?;
                    map.insert(
                        name.trim().to_string(),
                        value.trim().parse::<f64>().map_err(|e| e.to_string())?,
                    );
                }
                problem.weights = map;
            }
            if let Some(n) = max_len {
                problem.max_plan_length = n;
            }
            match solve(&problem, None) {
                Some(plan) => {
                    println!("quality {}", plan.quality);
                    for step in &plan.steps {
                        println!("{step}");
                    }
                    Ok(())
                }
                None => Err("no plan reaches the goal".to_string()),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
