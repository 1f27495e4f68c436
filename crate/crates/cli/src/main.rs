use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbench_cli::{config, simulate, OUTPUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "fedbench", version, about = "Federated logistic regression benchmark")]
struct Cli {
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and print the models it would fit.
    Validate { config: PathBuf },
    /// Write simulated site data only.
    Simulate {
        config: PathBuf,
        /// Number of runs to export.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Run the experiment and write all artifacts.
    Run { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.output_dir.as_deref();
    let result = match &cli.command {
        Command::Validate { config } => config::load(config, out).map(|(cfg, _)| {
            println!("ok: {}", cfg.raw.name);
            for p in &cfg.protocols {
                println!("  {}", p.label);
            }
            println!("output: {}", cfg.output_dir.display());
            0
        }),
        Command::Simulate { config, runs } => simulate::simulate(config, out, *runs).map(|m| {
            println!("wrote {} files", m.artifacts.len());
            0
        }),
        Command::Run { config } => fedbench_cli::run(config, out).map(|s| {
            for (run, model, f) in s.results.failures() {
                eprintln!("run {run} {}: {} ({})", model.label, f.reason.code(), f.message);
            }
            println!("wrote {} artifacts", s.manifest.artifacts.len() + 1);
            if s.below_threshold.is_empty() {
                0
            } else {
                eprintln!(
                    "fewer than {:.0}% of runs succeeded for: {}",
                    fedbench_cli::MIN_SUCCESS_RATE * 100.0,
                    s.below_threshold.join(", ")
                );
                3
            }
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
