use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use update_cli::{cmd_curve, cmd_generate, cmd_report, cmd_run, CliError, Config, Overrides, RunOptions};
use update_core::strategies::Strategy;

#[derive(Parser)]
#[command(name = "parser-update", version, about = "Parser update experiments under conflicting data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus and one versioned dataset per update.
    Generate(Common),
    /// Train and evaluate the strategy grid.
    Run(Common),
    /// Sweep V2 size with and without conflicting V1 data.
    Curve(Common),
    /// Summarize the reports under an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    #[arg(long, value_delimiter = ',')]
    updates: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<Config, CliError> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.apply(&Overrides {
            strategies: self.strategies.clone(),
            updates: self.updates.clone(),
            seeds: self.seeds.clone(),
            sizes: self.sizes.clone(),
            workers: self.workers,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(c) => {
            let m = cmd_generate(&c.config()?, &c.out)?;
            for a in &m.artifacts {
                println!("wrote {}", c.out.join(a).display());
            }
        }
        Command::Run(c) => {
            let o = cmd_run(&c.config()?, &c.out, &RunOptions::default())?;
            println!("{} cells run, {} reused", o.ran.len(), o.skipped.len());
            for note in &o.manifest.fallback_notes {
                println!("note: {note}");
            }
            print!("{}", update_core::eval::render_summary(&o.summary));
        }
        Command::Curve(c) => {
            let o = cmd_curve(&c.config()?, &c.out)?;
            println!("{} cells run, {} reused", o.ran, o.skipped);
            print!("{}", o.table.render());
        }
        Command::Report { out } => print!("{}", cmd_report(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
