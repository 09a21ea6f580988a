use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tnbm::experiment::{compare, run_experiment, ExperimentConfig, RunSummary};
use tnbm::Error;

#[derive(Parser)]
#[command(name = "tnbm", version, about = "Train and compare MPS Born machine optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file and report every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every optimizer over every seed and write traces.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Align aggregate CSVs and rank optimizers by final mean NLL.
    Compare {
        /// `<optimizer>_aggregate.csv` files written by `run`.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

fn load(config: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(config).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(CONFIG_ERROR)
    })
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(CONFIG_ERROR),
        _ => ExitCode::from(RUNTIME_ERROR),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let problems = cfg.problems();
            if problems.is_empty() {
                println!("ok {}", cfg.hash());
                ExitCode::SUCCESS
            } else {
                for p in problems {
                    eprintln!("{p}");
                }
                ExitCode::from(CONFIG_ERROR)
            }
        }
        Command::Run { config, out, seeds, threads } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(dir) = out {
                cfg.run.output_dir = dir;
            }
            if let Some(s) = seeds {
                cfg.run.seeds = s;
            }
            if let Err(e) = cfg.validate() {
                return exit_for(&e);
            }
            if let Some(n) = threads {
                if n == 0 {
                    eprintln!("error: --threads must be >= 1");
                    return ExitCode::from(CONFIG_ERROR);
                }
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(RUNTIME_ERROR);
                }
            }
            match run_experiment(&cfg) {
                Ok(outcome) => {
                    for s in &outcome.summaries {
                        let finals: Vec<String> = s.final_nll.iter().map(|v| format!("{v:.6}")).collect();
                        println!("{:<18} final mean {:.6}  seeds [{}]", s.optimizer, s.final_mean(), finals.join(", "));
                    }
                    println!("wrote {} files to {}", outcome.files.len(), outcome.output_dir.display());
                    if outcome.failures.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for f in &outcome.failures {
                            eprintln!("failed: {} seed {}: {}", f.optimizer, f.seed, f.message);
                        }
                        ExitCode::from(RUNTIME_ERROR)
                    }
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::Compare { summaries, out } => {
            let mut loaded = Vec::new();
            for path in &summaries {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().trim_end_matches("_aggregate").to_string())
                    .unwrap_or_default();
                let parsed = fs::File::open(path).map_err(Error::from).and_then(|f| RunSummary::read_aggregate(&name, f));
                match parsed {
                    Ok(s) => loaded.push(s),
                    Err(e) => {
                        eprintln!("error: {}: {e}", path.display());
                        return ExitCode::from(CONFIG_ERROR);
                    }
                }
            }
            let table = match compare(&loaded) {
                Ok(t) => t,
                Err(e) => return exit_for(&e),
            };
            let result = match out {
                Some(p) => fs::File::create(&p).map_err(Error::from).and_then(|f| table.write_table(f)),
                None => table.write_table(std::io::stdout().lock()),
            };
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => exit_for(&e),
            }
        }
    }
}
