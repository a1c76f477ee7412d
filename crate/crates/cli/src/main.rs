use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpvgp_cli::coverage::{coverage_report, read_snapshot_rows};
use lpvgp_cli::plot::{plot_dir, PlotOptions};
use lpvgp_cli::{artifacts, run, CliError};

#[derive(Parser)]
#[command(name = "lpvgp", version, about = "LPV-MPC with GP forward-error correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Render phase_space.svg and trajectories.svg from a run directory.
    Plot {
        dir: PathBuf,
        #[arg(long)]
        snapshot_k: Option<usize>,
        #[arg(long)]
        z: Option<f64>,
    },
    /// Print (and write) coverage of the predicted error intervals.
    Coverage {
        dir: PathBuf,
        #[arg(long, default_value_t = 2.576)]
        z: f64,
        #[arg(long, default_value_t = 0)]
        from_k: usize,
    },
}

fn coverage(dir: PathBuf, z: f64, from_k: usize) -> Result<(), CliError> {
    let path = dir.join(artifacts::SNAPSHOTS_CSV);
    if !path.is_file() {
        return Err(CliError::Input(format!("{} not found", path.display())));
    }
    let report = coverage_report(&read_snapshot_rows(&path)?, z, from_k);
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(dir.join(artifacts::COVERAGE_JSON), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => run(&config).map(|out| {
            println!("artifacts written to {}", out.directory.display());
            out.exit_code()
        }),
        Command::Plot { dir, snapshot_k, z } => plot_dir(&dir, &PlotOptions { snapshot_k, zscore: z }).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
            0
        }),
        Command::Coverage { dir, z, from_k } => coverage(dir, z, from_k).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
