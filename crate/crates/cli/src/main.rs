use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedrec_core::experiment::{run_mode, Manifest, Mode};
use fedrec_core::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedrec-lab", version, about = "Federated recommendation attack/defense lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a key=value config or a previous manifest.json.
    Run {
        config: PathBuf,
        /// effectiveness | attack | defense | ablation | poc | sweep | single
        #[arg(long)]
        mode: Option<String>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Sweep parameter key.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated sweep values.
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated uniformity strengths for `poc`.
        #[arg(long = "alpha-grid")]
        alpha_grid: Option<String>,
    },
    /// Print the fully resolved default configuration.
    Defaults,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parse { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<(ExperimentConfig, Option<Manifest>), Failure> {
    if path.extension().is_some_and(|e| e == "json") {
        let m = Manifest::read(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Ok((m.experiment_config()?, Some(m)))
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        Ok((ExperimentConfig::parse_str(&text)?, None))
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_owned).collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Defaults => {
            print!("{}", ExperimentConfig::default().to_text());
            Ok(())
        }
        Command::Run {
            config,
            mode,
            seed,
            out,
            overrides,
            param,
            grid,
            alpha_grid,
        } => {
            let (mut cfg, manifest) = load(&config)?;
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            let mut opts = manifest.as_ref().map(|m| m.options.clone()).unwrap_or_default();
            if param.is_some() {
                opts.param = param;
            }
            if let Some(g) = grid {
                opts.grid = split_list(&g);
            }
            if let Some(a) = alpha_grid {
                opts.alpha_grid = split_list(&a)
                    .iter()
                    .map(|x| x.parse::<f64>().map_err(|e| Failure::Config(format!("--alpha-grid `{x}`: {e}"))))
                    .collect::<Result<_, _>>()?;
            }
            let mode = match (mode, &manifest) {
                (Some(m), _) => m.parse::<Mode>()?,
                (None, Some(m)) => m.mode,
                (None, None) => Mode::Single,
            };
            let out = cfg.output_dir.clone();
            let manifest = run_mode(mode, &cfg, &opts, &out)?;
            println!("wrote {} ({} variants) to {}", fedrec_core::experiment::summary_name(mode), manifest.variants.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
