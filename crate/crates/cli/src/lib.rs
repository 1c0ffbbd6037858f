//! `sika-link`: link CSV records held by several data providers through a
//! collector, revealing only the records every provider holds.

pub mod commands;
pub mod config;
pub mod csvio;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Error carrying the process exit code: 2 for usage and configuration
/// problems, 1 for protocol and session failures.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }

    pub fn failure(msg: impl Into<String>) -> Self {
        CliError { code: 1, msg: msg.into() }
    }

    pub fn from_core(e: sika_core::Error) -> Self {
        if e.is_usage() {
            Self::usage(e.to_string())
        } else {
            Self::failure(e.to_string())
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}

#[derive(Parser, Debug)]
#[command(name = "sika-link", version, about = "Privacy-preserving record linkage across data providers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a session configuration and list every problem found.
    Validate { config: PathBuf },
    /// Take part in a session as a data provider.
    Provider {
        config: PathBuf,
        input: PathBuf,
        #[arg(long)]
        index: u16,
    },
    /// Take part in a session as the collector.
    Collector {
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run every party of a session inside this process.
    Simulate {
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Hex seed for a reproducible run.
        #[arg(long)]
        seed: Option<String>,
    },
    /// Measure runtime and traffic over a grid of synthetic sessions.
    Bench {
        /// Comma-separated exponents: m = 2^e.
        #[arg(long, value_delimiter = ',', default_value = "10,12")]
        m: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        n: Vec<u16>,
        #[arg(long, default_value_t = 128)]
        kappa: u32,
        #[arg(long, default_value = "sika")]
        mode: String,
        #[arg(long, default_value_t = 3)]
        repeats: u32,
        /// Allow m above 2^20.
        #[arg(long = "unsafe")]
        allow_large: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { config } => commands::validate(&config),
        Command::Provider { config, input, index } => commands::provider(&config, &input, index),
        Command::Collector { config, output } => commands::collector(&config, &output),
        Command::Simulate {
            config,
            inputs,
            output,
            seed,
        } => commands::simulate(&config, &inputs, &output, seed.as_deref()),
        Command::Bench {
            m,
            n,
            kappa,
            mode,
            repeats,
            allow_large,
            json,
        } => commands::bench(&commands::BenchArgs {
            m_exponents: m,
            n,
            kappa,
            mode,
            repeats,
            allow_large,
            json,
        }),
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIKA_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
