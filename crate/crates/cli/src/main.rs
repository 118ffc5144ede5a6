use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use rlos::agent::{load_checkpoint, save_checkpoint, Agent, AgentParameters};
use rlos::backtest::{compare, emit_report, file_digest, write_manifest, Rlosrl};
use rlos::config::{DataConfig, RunConfig};
use rlos::market::save_panel;
use rlos::suite;

/// Environment variable that replaces the configured output directory.
const OUTPUT_ENV: &str = "RLOS_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "rlos", version, about = "Log-optimal pattern-matching portfolios with a learned adjuster")]
struct Cli {
    /// Worker threads for backtest cells and Monte Carlo trials (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic OHLCV panel as CSV.
    Generate(GenerateArgs),
    /// Compare strategies and write the report directory.
    Backtest(RunArgs),
    /// Train the agent over the configured panel and save a checkpoint.
    Train(RunArgs),
    /// Run the numerical theory checks and print a pass/fail table.
    Oracle(OracleArgs),
    /// Verify a report directory against its manifest and print its summary.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// One of const, iid, trend, meanrevert.
    #[arg(long, default_value = "meanrevert")]
    generator: String,
    #[arg(long, default_value_t = 10)]
    assets: usize,
    #[arg(long, default_value_t = 300)]
    periods: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Distribution file for the iid generator.
    #[arg(long)]
    distribution: Option<PathBuf>,
    /// Output CSV (default: panel.csv in the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding both the config and the environment.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `backtest`.
    #[arg(long)]
    dir: PathBuf,
}

/// Exit status classes: 1 for bad input, 2 for failures while running.
enum Failure {
    Validation(String),
    Runtime(String),
}

fn invalid(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn failed(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(invalid("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(failed)?;
    }
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Backtest(a) => backtest(a),
        Command::Train(a) => train(a),
        Command::Oracle(a) => oracle(a),
        Command::Report(a) => report(a),
    }
}

fn load_config(args: &RunArgs) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(invalid)?,
        None => {
            let cfg = RunConfig::default();
            cfg.validate().map_err(invalid)?;
            cfg
        }
    };
    if let Some(dir) = std::env::var_os(OUTPUT_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(dir) = &args.output {
        cfg.output_dir = dir.clone();
    }
    let dir = cfg.output_dir.clone();
    Ok((cfg, dir))
}

fn initial_parameters(cfg: &RunConfig) -> Result<Option<AgentParameters>, Failure> {
    cfg.agent
        .checkpoint
        .as_deref()
        .map(|p| load_checkpoint(p, Some(&cfg.architecture())))
        .transpose()
        .map_err(invalid)
}

/// Writes the effective configuration next to the artifacts.
fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<PathBuf, Failure> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml().map_err(failed)?).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let data = DataConfig {
        generator: a.generator,
        assets: a.assets,
        periods: a.periods,
        seed: a.seed,
        distribution: a.distribution,
        ..DataConfig::default()
    };
    let spec = data.generator_spec().map_err(invalid)?;
    let out = match a.out {
        Some(p) => p,
        None => std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| RunConfig::default().output_dir)
            .join("panel.csv"),
    };
    let panel = rlos::synthetic::generate(&spec, data.seed).map_err(invalid)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| failed(format!("{}: {e}", parent.display())))?;
    }
    save_panel(&panel, &out).map_err(failed)?;
    println!(
        "wrote {} ({} assets x {} periods)",
        out.display(),
        panel.assets(),
        panel.periods()
    );
    Ok(())
}

fn backtest(a: RunArgs) -> Result<(), Failure> {
    let (cfg, dir) = load_config(&a)?;
    let panel = cfg.data.panel().map_err(invalid)?;
    let specs = cfg.strategy_specs(initial_parameters(&cfg)?).map_err(invalid)?;
    let report = compare(&specs, &panel, &cfg.spans(), &cfg.backtest.seeds, &cfg.compare_settings()).map_err(failed)?;
    let mut files = emit_report(&report, &dir).map_err(failed)?;
    files.push(echo_config(&cfg, &dir)?);
    let manifest = write_manifest(&dir, &files).map_err(failed)?;
    print!("{}", std::fs::read_to_string(dir.join("summary.txt")).map_err(failed)?);
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn train(a: RunArgs) -> Result<(), Failure> {
    let (cfg, dir) = load_config(&a)?;
    let panel = cfg.data.panel().map_err(invalid)?;
    let params = match initial_parameters(&cfg)? {
        Some(p) => p,
        None => AgentParameters::init(cfg.architecture(), cfg.agent.seed).map_err(invalid)?,
    };
    let agent = Agent::new(params, cfg.hyperparameters(), cfg.agent.seed).map_err(invalid)?;
    let mut strategy = Rlosrl::new(cfg.rlos_params().map_err(invalid)?, agent, true, false);
    strategy.train_over(&panel, 0, panel.periods()).map_err(failed)?;
    let agent = strategy.into_agent();

    std::fs::create_dir_all(&dir).map_err(|e| failed(format!("{}: {e}", dir.display())))?;
    let curve = dir.join("training_curve.csv");
    std::fs::write(&curve, agent.curve_csv()).map_err(|e| failed(format!("{}: {e}", curve.display())))?;
    let checkpoint = dir.join("agent.json");
    let steps = agent.steps();
    save_checkpoint(&agent.into_params(), &checkpoint).map_err(failed)?;
    let files = vec![checkpoint.clone(), curve, echo_config(&cfg, &dir)?];
    write_manifest(&dir, &files).map_err(failed)?;
    println!("trained {steps} steps; checkpoint {}", checkpoint.display());
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<(), Failure> {
    if a.trials == 0 {
        return Err(invalid("--trials must be at least 1"));
    }
    let results = suite::run_all(a.trials, a.seed).map_err(failed)?;
    print!("{}", suite::render_table(&results));
    let failures = results.iter().filter(|r| !r.passed).count();
    if failures > 0 {
        return Err(failed(format!("{failures} check(s) failed")));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let manifest = a.dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).map_err(|e| invalid(format!("{}: {e}", manifest.display())))?;
    let mut mismatches = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let (name, digest) = line
            .rsplit_once(',')
            .ok_or_else(|| invalid(format!("{}: malformed line `{line}`", manifest.display())))?;
        let actual = file_digest(&a.dir.join(name)).map_err(failed)?;
        if actual != digest {
            mismatches.push(name.to_string());
        }
    }
    if !mismatches.is_empty() {
        return Err(failed(format!("digest mismatch: {}", mismatches.join(", "))));
    }
    let summary = a.dir.join("summary.txt");
    print!("{}", std::fs::read_to_string(&summary).map_err(|e| failed(format!("{}: {e}", summary.display())))?);
    Ok(())
}
