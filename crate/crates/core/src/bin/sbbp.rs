use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use sbbp::harness::{generate_instance, parse_config, render_table, report, run_experiment, InstanceConfig};
use sbbp::instances::{LfpSpec, SfpSpec};
use sbbp::Error;

#[derive(Parser)]
#[command(name = "sbbp", version, about = "Stochastic block Bregman projection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one instance from `{"lfp": {...}}` or `{"sfp": {...}}`.
    Generate {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment config.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output` key.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Merge run summaries and write plot data.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateSpec {
    lfp: Option<LfpSpec>,
    sfp: Option<SfpSpec>,
}

enum Failure {
    Config(String),
    Abort(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::InvalidConfig(_) => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

fn read_config_file(path: &PathBuf) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn generate(spec: PathBuf, output: PathBuf, seed: Option<u64>) -> Result<(), Failure> {
    let text = read_config_file(&spec)?;
    let g: GenerateSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: line {}: {e}", spec.display(), e.line())))?;
    let mut inst = InstanceConfig { name: "generated".into(), lfp: g.lfp, sfp: g.sfp };
    if let Some(s) = seed {
        inst.lfp.iter_mut().for_each(|l| l.seed = s);
        inst.sfp.iter_mut().for_each(|l| l.seed = s);
    }
    match (&inst.lfp, &inst.sfp) {
        (Some(l), None) => l.validate()?,
        (None, Some(s)) => s.validate()?,
        _ => return Err(Failure::Config("spec needs exactly one of `lfp`, `sfp`".into())),
    }
    let g = generate_instance(&inst, 0)?;
    fs::write(&output, g.problem.to_text()).map_err(|e| Failure::Other(e.to_string()))?;
    let xhat: String = g.xhat.iter().map(|v| format!("{v:.16e}\n")).collect();
    let mut xhat_path = output.into_os_string();
    xhat_path.push(".xhat");
    fs::write(xhat_path, xhat).map_err(|e| Failure::Other(e.to_string()))?;
    Ok(())
}

fn run(
    config: PathBuf,
    output: Option<PathBuf>,
    seed: Option<u64>,
    trials: Option<usize>,
    threads: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = parse_config(&read_config_file(&config)?)?;
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if threads == Some(0) {
        return Err(Failure::Config("--threads must be at least 1".into()));
    }
    cfg.validate()?;
    let dir = output
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Failure::Config("no output directory: pass -o or set `output`".into()))?;
    let outcome = run_experiment(&cfg, &dir, threads)?;
    print!("{}", render_table(&outcome.summary));
    if !outcome.aborted.is_empty() {
        let lines: Vec<String> =
            outcome.aborted.iter().map(|a| format!("{} trial {}: {}", a.curve, a.trial, a.error)).collect();
        return Err(Failure::Abort(lines.join("\n")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec, output, seed } => generate(spec, output, seed),
        Command::Run { config, output, seed, trials, threads } => run(config, output, seed, trials, threads),
        Command::Report { dirs } => report(&dirs).map(|t| print!("{t}")).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Abort(msg)) => {
            eprintln!("trial aborted:\n{msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
