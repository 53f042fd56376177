use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use vlplan::config::ExperimentConfig;
use vlplan::eval::format_table;
use vlplan::experiment::{self, Regime, Workspace};
use vlplan::validity::Variant;
use vlplan::Error;

#[derive(Parser, Debug)]
#[command(name = "vlplan", version, about = "Sample-based planner with validity learning")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and VLPLAN_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dotted config override, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate worlds, expert logs, scenarios and expert datasets.
    GenData,
    /// Train one regime: il, vl, il-rl or vl-on-expert.
    Train {
        #[arg(long)]
        regime: String,
        /// Training run index; all runs (eval.seeds) when omitted.
        #[arg(long)]
        run: Option<usize>,
    },
    /// Benchmark planners on the test split.
    Evaluate {
        /// Comma-separated planner names; defaults to eval.planners.
        #[arg(long, value_delimiter = ',')]
        planners: Option<Vec<String>>,
    },
    /// Run the self-checks and validate artifacts under --out.
    Verify,
    /// gen-data, every training regime, then evaluate.
    Run,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(s) = std::env::var("VLPLAN_SEED") {
        cfg.seed = s
            .parse()
            .map_err(|_| Error::Config(format!("VLPLAN_SEED={s:?} is not an integer")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for s in &cli.sets {
        cfg.set(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_runs(ws: &Workspace, regime: Regime, run: Option<usize>) -> anyhow::Result<()> {
    let runs: Vec<usize> = match run {
        Some(k) => vec![k],
        None => (0..ws.cfg.eval.seeds).collect(),
    };
    for k in runs {
        let summary = experiment::train(ws, regime, k)
            .with_context(|| format!("training {} run {k}", regime.model_name(ws.cfg.validity.variant)))?;
        println!(
            "{} ({} steps, held-out imitation {}){}",
            summary.model.display(),
            summary.steps,
            summary.final_heldout.map_or("n/a".into(), |h| format!("{h:.4}")),
            summary
                .failure_samples
                .map_or(String::new(), |n| format!(", {n} failure states"))
        );
    }
    Ok(())
}

fn evaluate(ws: &Workspace, planners: &[String]) -> anyhow::Result<()> {
    let out = experiment::evaluate(ws, planners)?;
    print!("{}", format_table(&out.reports));
    println!("wrote {}", ws.paths.eval_dir().display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("starting worker pool")?;
    }
    match &cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::GenData => {
            let summary = experiment::gen_data(&cfg, &cli.out)?;
            println!("{summary}");
        }
        Command::Train { regime, run } => {
            let regime: Regime = regime.parse()?;
            let ws = Workspace::open(&cfg, &cli.out)?;
            train_runs(&ws, regime, *run)?;
        }
        Command::Evaluate { planners } => {
            let ws = Workspace::open(&cfg, &cli.out)?;
            let planners = planners.clone().unwrap_or_else(|| cfg.eval.planners.clone());
            evaluate(&ws, &planners)?;
        }
        Command::Verify => {
            let out = cli.out.exists().then_some(cli.out.as_path());
            let checks = vlplan::verify::run_checks(&cfg.scorer, out, cfg.seed);
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(ok);
        }
        Command::Run => {
            println!("{}", experiment::gen_data(&cfg, &cli.out)?);
            let ws = Workspace::open(&cfg, &cli.out)?;
            train_runs(&ws, Regime::Il, None)?;
            for variant in [Variant::C, Variant::CS] {
                let mut c = cfg.clone();
                c.validity.variant = variant;
                let ws = Workspace::open(&c, &cli.out)?;
                train_runs(&ws, Regime::Vl, None)?;
            }
            train_runs(&ws, Regime::VlOnExpert, None)?;
            train_runs(&ws, Regime::IlRl, None)?;
            evaluate(&ws, &cfg.eval.planners)?;
        }
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidSpec(_) | Error::LogTooShort { .. }) => 2,
        Some(Error::MissingPrerequisite(_)) => 3,
        Some(Error::SchemaMismatch(_) | Error::CountMismatch { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
