use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::Failure;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Train and inspect small decoder-only language models.
#[derive(Parser, Debug)]
#[command(name = "xlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the binary counting corpus "0;1;10;11;..." as a token stream.
    GenBinary {
        /// Count from 0 to 2^bits - 1.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=32))]
        bits: u32,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoint.xlm, costs.csv and config.cfg to out_dir.
    Train {
        #[command(flatten)]
        source: ConfigArgs,
        /// Overwrite outputs of an earlier run.
        #[arg(long)]
        force: bool,
        /// Suppress progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Quartiles of training costs over non-overlapping windows.
    Stats {
        /// Cost CSV written by `train`.
        #[arg(long)]
        costs: PathBuf,
        #[arg(long, default_value_t = 1000)]
        window: usize,
        /// Also write the statistics as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Record one row of the running matrix after every sublayer.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated token ids.
        #[arg(long, conflicts_with = "text", required_unless_present = "text")]
        tokens: Option<String>,
        /// Binary corpus text such as "101;110;", mapped to token ids.
        #[arg(long)]
        text: Option<String>,
        /// Row to follow, counted from 0; defaults to the last.
        #[arg(long)]
        row: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Plane drawing of the trajectory (two-dimensional models only).
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Count trainable parameters.
    Params {
        #[command(flatten)]
        source: ConfigArgs,
    },
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: table1 or table2.
    #[arg(long)]
    preset: Option<String>,
    /// Settings that take precedence over the configuration, as key=value.
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenBinary { bits, out, force } => commands::gen_binary(bits, &out, force),
        Command::Train {
            source,
            force,
            quiet,
        } => source
            .load()
            .and_then(|raw| commands::train(&raw, force, quiet)),
        Command::Stats {
            costs,
            window,
            out,
            force,
        } => commands::stats(&costs, window, out.as_deref(), force),
        Command::Trace {
            checkpoint,
            tokens,
            text,
            row,
            out,
            svg,
            force,
        } => commands::trace(&commands::TraceArgs {
            checkpoint: &checkpoint,
            tokens: tokens.as_deref(),
            text: text.as_deref(),
            row,
            out: &out,
            svg: svg.as_deref(),
            force,
        }),
        Command::Params { source } => source.load().and_then(|raw| commands::params(&raw)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<config::RawConfig, Failure> {
        let mut raw = config::load_base(self.config.as_deref(), self.preset.as_deref())
            .map_err(Failure::Usage)?;
        raw.apply_overrides(&self.overrides).map_err(Failure::Usage)?;
        Ok(raw)
    }
}
