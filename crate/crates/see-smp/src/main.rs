use clap::{Parser, Subcommand};
use see_smp::config::ExperimentConfig;
use see_smp::error::SeeError;
use see_smp::experiment;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "see-smp", about = "Experiment runner for the see-smp toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file (key-value text or JSON)
    Run {
        config: PathBuf,
        /// Override the ensemble seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of Monte Carlo paths
        #[arg(long)]
        paths: Option<usize>,
        /// Output directory for CSV tables and the JSON report
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (1 guarantees bitwise-reproducible outputs)
        #[arg(long)]
        threads: Option<usize>,
        /// Escalate warnings (rank fallbacks, dropped pairs) into failures
        #[arg(long)]
        strict: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            paths,
            out,
            threads,
            strict,
        } => {
            let mut cfg = match ExperimentConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.raw.insert("seed".into(), s.to_string());
            }
            if let Some(p) = paths {
                cfg.n_paths = p;
                cfg.raw.insert("n_paths".into(), p.to_string());
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(t) = threads.or(Some(cfg.threads).filter(|t| *t > 0)) {
                if t > 0 {
                    if let Err(e) = rayon::ThreadPoolBuilder::new()
                        .num_threads(t)
                        .build_global()
                    {
                        eprintln!("thread pool: {e}");
                    }
                }
            }
            cfg.strict = cfg.strict || strict;
            match experiment::run(&cfg) {
                Ok(output) => {
                    experiment::print_report(&output.report);
                    println!(
                        "outputs written to {}",
                        cfg.out_dir.display()
                    );
                    ExitCode::from(output.status as u8)
                }
                Err(SeeError::Config(msg)) => {
                    eprintln!("config error: {msg}");
                    ExitCode::from(2)
                }
                Err(e) => {
                    eprintln!("numerical failure: {e}");
                    ExitCode::from(3)
                }
            }
        }
    }
}
