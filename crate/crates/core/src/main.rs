use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semifl::baselines::BaselineKind;
use semifl::harness::{emit_plot_data, load_config, run, split_assignment, toggle_override, HarnessError};

#[derive(Parser)]
#[command(name = "semifl", version, about = "Semi-supervised federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// fully_supervised, partially_supervised or vanilla_parallel.
        #[arg(long)]
        baseline: Option<BaselineKind>,
        /// `fine_tune=<bool>` or `pseudo_on_receipt=<bool>`; repeatable.
        #[arg(long = "toggle", value_name = "KEY=BOOL")]
        toggles: Vec<String>,
        /// Any dotted config key, e.g. `protocol.rounds=5`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Run directory; defaults to `<output root>/<run_name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a records.jsonl file into accuracy, pseudo-label and risk CSVs.
    PlotData {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            baseline,
            toggles,
            sets,
            out,
        } => {
            let mut overrides = sets
                .iter()
                .map(|s| split_assignment(s))
                .collect::<Result<Vec<_>, _>>()?;
            for t in &toggles {
                overrides.push(toggle_override(t)?);
            }
            if let Some(seed) = seed {
                overrides.push(("master_seed".into(), seed.to_string()));
            }
            if let Some(b) = baseline {
                overrides.push(("baseline".into(), serde_json::to_string(&b)?));
            }
            let cfg = load_config(&config, &overrides)?;
            let summary = run(&cfg, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::PlotData { records, out } => {
            let files = emit_plot_data(&records, &out)?;
            for p in [files.accuracy, files.pseudo, files.risk] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
