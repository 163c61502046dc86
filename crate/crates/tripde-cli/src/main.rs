use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tripde_cli::{emit, run, OutputFormat, RunConfig, Solver};

/// Benchmark harness for the trinomial monotone PDE solvers.
#[derive(Parser)]
#[command(name = "tripde", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured benchmark schedule and write the convergence table.
    Solve {
        /// Path to a `key = value` run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured solver (`tree` or `lsmc`).
        #[arg(long)]
        solver: Option<String>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the output format (`csv`, `json` or `plotdata`).
        #[arg(long)]
        format: Option<String>,
        /// Proceed even when the declared bounds rule out monotonicity.
        #[arg(long)]
        allow_nonmonotone: bool,
    },
    /// List the registered benchmark problems.
    List,
}

fn main() -> ExitCode {
    // Worker threads: TRIPDE_THREADS wins over the rayon default.
    if let Ok(threads) = std::env::var("TRIPDE_THREADS") {
        match threads.parse::<usize>() {
            Ok(k) if k > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => {
                eprintln!("error: TRIPDE_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::FAILURE;
            }
        }
    }
    match Cli::parse().command {
        Command::List => {
            for key in tripde::generator::REGISTRY_KEYS {
                match tripde::generator::lookup(key) {
                    Ok(entry) => println!(
                        "{key}: d={}, T={}, x0={:?}",
                        entry.problem.dim, entry.problem.horizon, entry.x0
                    ),
                    Err(e) => eprintln!("{key}: {e}"),
                }
            }
            ExitCode::SUCCESS
        }
        Command::Solve { config, seed, solver, out, format, allow_nonmonotone } => {
            let result = (|| -> tripde::Result<()> {
                let mut cfg = RunConfig::load(&config)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                if let Some(s) = solver {
                    cfg.solver = match s.as_str() {
                        "tree" => Solver::Tree,
                        "lsmc" => Solver::Lsmc,
                        other => {
                            return Err(tripde::Error::InvalidArgument(format!(
                                "unknown solver {other:?}"
                            )))
                        }
                    };
                }
                if let Some(dir) = out {
                    cfg.output = dir;
                }
                if let Some(f) = format {
                    cfg.format = OutputFormat::parse(&f)?;
                }
                cfg.allow_nonmonotone |= allow_nonmonotone;
                let table = run(&cfg)?;
                print!("{}", table.render());
                let files = emit(&table, cfg.format, &cfg.output)?;
                for f in files {
                    println!("wrote {}", f.display());
                }
                Ok(())
            })();
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
