use std::path::PathBuf;
use std::process::ExitCode;

use aspire_core::experiment::{compare, execute, flatten, load_config, parse_overrides, ExperimentError};
use clap::{Parser, Subcommand};
use log::debug;

/// Asynchronous distributionally robust training over simulated workers.
#[derive(Debug, Parser)]
#[command(name = "aspire", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, trace.jsonl,
    /// resolved-config.json and summary.json.
    Run {
        /// JSON experiment config.
        config: PathBuf,
        /// Run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// aspire_ease, aspire_cp, sync, mix_even or centralized.
        #[arg(long)]
        mode: Option<String>,
        /// Budget of the ambiguity set.
        #[arg(long)]
        gamma: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Further overrides as --dotted.key=value, e.g. --run.schedules.eta_w=0.3.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Summarize two or more metrics.csv files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
        /// Stationarity threshold for T(eps).
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
}

fn run_command(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Run { config, seed, mode, gamma, out, overrides } => {
            let mut pairs = Vec::new();
            if let Some(s) = seed {
                pairs.push(("seed".to_string(), s.to_string()));
            }
            if let Some(m) = mode {
                pairs.push(("mode".to_string(), m));
            }
            if let Some(g) = gamma {
                pairs.push(("gamma".to_string(), g.to_string()));
            }
            if let Some(o) = out {
                pairs.push(("out".to_string(), o.display().to_string()));
            }
            pairs.extend(parse_overrides(&overrides)?);
            let (config, resolved) = load_config(&config, &pairs)?;
            for (k, v) in flatten(&resolved) {
                debug!("{k} = {v}");
            }
            let (_, summary) = execute(&config, &resolved)?;
            println!(
                "iterations {} vtime {} final gap {:.3e} worst loss {:.6} T(eps) {} peak planes {}",
                summary.iterations,
                summary.vtime,
                summary.final_gap,
                summary.final_worst_loss,
                summary.t_eps.map_or("-".to_string(), |t| t.to_string()),
                summary.peak_planes
            );
            if let Some(rate) = summary.attack_success_rate {
                println!("attack success rate {rate:.4}");
            }
            Ok(())
        }
        Command::Compare { files, eps } => {
            print!("{}", compare(&files, eps)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ASPIRE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
