use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relfed::netsim::{complexity_report, LedgerFile};
use relfed::orchestrator::{map_stats, run, synth, Algorithm, Dataset, RunConfig, SynthSpec};

#[derive(Parser)]
#[command(name = "rfl", version, about = "Federated learning over joins and unions of tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to a JSON run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured algorithm.
        #[arg(long)]
        algo: Option<Algorithm>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV path (default: from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic star schema with a config to train on it.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the join mapping and print N, n_i and duplication stats.
    Map {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare a run's ledger with the predicted communication complexity.
    Report {
        #[arg(long)]
        ledger: PathBuf,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cmd: Command) -> relfed::Result<ExitCode> {
    match cmd {
        Command::Run { config, algo, epochs, seed, out } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(a) = algo {
                cfg.train.algo = a;
            }
            if let Some(k) = epochs {
                cfg.train.epochs = k;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.train.validate()?;
            let result = run(&cfg, out.as_deref())?;
            if let Some(m) = result.metrics.last() {
                println!(
                    "{} epoch {}: train_loss {:.6} test_metric {:.6} rounds {} bytes {} sim_time {:.3}s",
                    cfg.train.algo, m.epoch, m.train_loss, m.test_metric, m.comm_rounds, m.comm_bytes, m.sim_time_s
                );
            }
            if let Some(s) = result.sigma {
                println!("feature noise multiplier sigma = {s:.4}");
            }
        }
        Command::Synth { spec, out_dir } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| relfed::Error::io(&spec, e))?;
            let spec: SynthSpec = serde_json::from_str(&text)?;
            let out = synth(&spec)?;
            let cfg = out.write(&out_dir)?;
            println!(
                "wrote {} tables ({} joined rows) and {}",
                spec.tables.len(),
                out.truth.joined_rows,
                cfg.display()
            );
        }
        Command::Map { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let ds = Dataset::load(&cfg)?;
            print!("{}", map_stats(&ds, cfg.train.hash_keys)?);
        }
        Command::Report { ledger } => {
            let file = LedgerFile::read(&ledger)?;
            let report = complexity_report(&file.to_ledger(), &file.meta);
            print!("{report}");
            if !report.rounds_match() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
