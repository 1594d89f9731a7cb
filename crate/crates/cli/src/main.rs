use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eda_bench::{cmd_gen, cmd_mmd, cmd_run, CliError, Overrides};

#[derive(Parser)]
#[command(name = "eda-bench", version, about = "Evolving domain adaptation benchmark")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the config's global_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output_dir.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and write reports.
    Run { config: PathBuf },
    /// Write a synthetic stream as NDJSON records.
    Gen { profile: PathBuf, out: PathBuf },
    /// Export discrepancy matrices without training.
    Mmd { config: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let overrides = Overrides { seed: cli.seed, output_dir: cli.output_dir };
    match cli.command {
        Command::Run { config } => {
            let exp = cmd_run(&config, &overrides)?;
            print!("{}", exp.summary());
        }
        Command::Gen { profile, out } => {
            let n = cmd_gen(&profile, &out, cli.seed.unwrap_or(0))?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::Mmd { config } => {
            for path in cmd_mmd(&config, &overrides)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDA_BENCH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eda-bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
