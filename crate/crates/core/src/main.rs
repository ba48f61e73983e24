use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dst_lab::config::{DisabledBranch, ExperimentConfig, Method};
use dst_lab::{lab, Error};

/// Environment variable naming the directory under which runs are created.
const OUT_ENV: &str = "DST_LAB_OUT";

#[derive(Debug, Parser)]
#[command(name = "dst-lab", version, about = "Noisy-label training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Run directory. Defaults to `output_dir` from the config, then
        /// `$DST_LAB_OUT/<config name>`, then `runs/<config name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_mixup: bool,
        #[arg(long)]
        single_network: bool,
        #[arg(long, value_enum)]
        disable_branch: Option<BranchArg>,
        #[arg(long)]
        all_wrong: bool,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the path of a loss scatter CSV, regenerating it from the epoch
    /// checkpoint if needed.
    DumpScatter { dir: PathBuf, epoch: usize, net: usize },
    /// Print per-metric deltas of each candidate summary against a baseline.
    Compare {
        baseline: PathBuf,
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum BranchArg {
    Labeled,
    Predicted,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Dst,
    Ce,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run_dir(config_path: &Path, cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    if let Some(out) = out.or_else(|| cfg.output_dir.clone()) {
        return out;
    }
    let name = config_path.file_stem().map(PathBuf::from).unwrap_or_else(|| "run".into());
    match std::env::var_os(OUT_ENV) {
        Some(root) => PathBuf::from(root).join(name),
        None => PathBuf::from("runs").join(name),
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out, no_mixup, single_network, disable_branch, all_wrong, method, seed } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| Failure::Config(e.to_string()))?;
            cfg.no_mixup |= no_mixup;
            cfg.single_network |= single_network;
            cfg.all_wrong |= all_wrong;
            if let Some(b) = disable_branch {
                cfg.disable_branch = Some(match b {
                    BranchArg::Labeled => DisabledBranch::Labeled,
                    BranchArg::Predicted => DisabledBranch::Predicted,
                });
            }
            if let Some(m) = method {
                cfg.method = match m {
                    MethodArg::Dst => Method::Dst,
                    MethodArg::Ce => Method::Ce,
                };
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            cfg.validate()?;
            let dir = run_dir(&config, &cfg, out);
            let outcome = lab::run(&cfg, &dir)?;
            println!("{}", outcome.dir.summary().display());
            for (k, v) in &outcome.summary.metrics {
                eprintln!("{k:>12} {v:.4}");
            }
        }
        Command::DumpScatter { dir, epoch, net } => {
            println!("{}", lab::dump_scatter(&dir, epoch, net)?.display());
        }
        Command::Compare { baseline, candidates } => {
            let report = lab::compare(&baseline, &candidates)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
