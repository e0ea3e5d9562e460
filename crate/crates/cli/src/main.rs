mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Command-line front end for similarity-kernel networks.
#[derive(Debug, Parser)]
#[command(name = "cosnorm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the run described by a JSON spec; writes metrics.csv and model.ckpt.
    Train { spec: PathBuf },
    /// Test error of a checkpoint on the spec's test set.
    Eval { checkpoint: PathBuf, spec: PathBuf },
    /// Finite-difference gradient check. TARGET is a kernel (dot, cosine, pcc,
    /// weightnorm), a layer (dense-<kernel>, conv-<kernel>, relu, layernorm,
    /// batchnorm, softmax-ce), a network (network-<kernel>, network-layernorm,
    /// network-batchnorm), a group (kernels, layers, networks, all) or
    /// negative-control.
    Gradcheck {
        target: String,
        /// Inclusive range of vector widths, `a,b`.
        #[arg(long, default_value = "2,64", value_parser = parse_dims)]
        dims: (usize, usize),
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every entry of the spec's `variants` and summarise them.
    Compare { spec: PathBuf },
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated integers, e.g. 2,64")?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if a < 2 || b < a {
        return Err(format!("need 2 <= a <= b, got {a},{b}"));
    }
    Ok((a, b))
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<cosnorm::Error> for Failure {
    fn from(e: cosnorm::Error) -> Self {
        use cosnorm::Error as E;
        match e {
            E::Config(_) => Failure::Usage(e.to_string()),
            E::NonFinite(_) | E::DegenerateVector(_) => Failure::Verification(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { spec } => commands::train(&spec),
        Command::Eval { checkpoint, spec } => commands::eval(&checkpoint, &spec),
        Command::Gradcheck {
            target,
            dims,
            trials,
            seed,
        } => commands::gradcheck(&target, dims, trials, seed),
        Command::Compare { spec } => commands::compare(&spec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Usage(m) => ("usage error", m),
                Failure::Data(m) => ("data error", m),
                Failure::Verification(m) => ("verification failure", m),
            };
            eprintln!("cosnorm: {kind}: {msg}");
            ExitCode::from(f.exit_code())
        }
    }
}
