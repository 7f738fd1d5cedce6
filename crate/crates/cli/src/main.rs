mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use aspvmunet::pipeline::SynthStyle;
use aspvmunet::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aspvmunet", version, about = "Atrous shifted parallel vision Mamba U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network. Any `--section.key value` pair overrides the config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds both weight initialization and the data order.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (same as `--output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Run self-check suites: scan, gradcheck, params, metrics, ssm-oracle.
    Verify {
        /// Suites to run; all when empty.
        suites: Vec<String>,
    },
    /// Write a scan plan as CSV, one sub-sequence per row, -1 for padding.
    EmitScanOrder {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        step: usize,
        #[arg(long, value_enum, default_value_t = Method::Atrous)]
        method: Method,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic lesion dataset in the images/ + masks/ layout.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Style::Textured)]
        style: Style,
    },
    /// Parameter and MAC accounting for a network configuration.
    Accounting {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parameter counts of the component ablation rows.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    Atrous,
    Vallian,
    Across,
    Efficient,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Textured,
    Flat,
}

pub enum Failure {
    Error(Error),
    /// Verification ran but some checks failed.
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Failure> {
    if !overrides.is_empty() && !matches!(cli.command, Command::Train { .. } | Command::Accounting { .. } | Command::Ablation { .. }) {
        return Err(Error::Usage("`--section.key` overrides apply to train, accounting and ablation only".into()).into());
    }
    match cli.command {
        Command::Train { config, epochs, seed, out, resume } => {
            let mut ov = overrides;
            if let Some(e) = epochs {
                ov.push(("train.epochs".into(), e.to_string()));
            }
            if let Some(s) = seed {
                ov.push(("train.seed".into(), s.to_string()));
                ov.push(("network.seed".into(), s.to_string()));
            }
            if let Some(o) = out {
                ov.push(("output.dir".into(), toml::Value::String(o.display().to_string()).to_string()));
            }
            commands::train(config.as_deref(), &ov, resume.as_deref())?
        }
        Command::Eval { checkpoint, data, batch_size } => commands::eval(&checkpoint, &data, batch_size)?,
        Command::Verify { suites } => {
            if !commands::verify(&suites)? {
                return Err(Failure::Verify);
            }
        }
        Command::EmitScanOrder { height, width, step, method, out } => {
            commands::emit_scan_order(height, width, step, method, out.as_deref())?
        }
        Command::SynthData { n, height, width, seed, out, style } => {
            let style = match style {
                Style::Textured => SynthStyle::Textured,
                Style::Flat => SynthStyle::Flat,
            };
            commands::synth_data(n, height, width, seed, style, &out)?
        }
        Command::Accounting { config } => commands::accounting(config.as_deref(), &overrides)?,
        Command::Ablation { config } => commands::ablation(config.as_deref(), &overrides)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match config::extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {}", e);
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(4),
        Err(Failure::Error(e)) => {
            eprintln!("error: {}", e);
            ExitCode::from(match e {
                Error::Numeric(_) => 3,
                _ => 2,
            })
        }
    }
}
