use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use semslam_cli::{cmd_eval, cmd_export, cmd_simulate, cmd_solve, CliError, ExportFormat};
use semslam_core::pipeline::Mode;

/// Semantic SLAM back-end with point, plane and quadric landmarks.
#[derive(Parser)]
#[command(name = "semslam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the back-end over a dataset.
    Solve {
        #[arg(long)]
        dataset: PathBuf,
        /// P, PP, PP+M, PO or PPO+MS; overrides the config file.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the ATE record of a solution.
    Eval {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also append the record to this file.
        #[arg(long)]
        append: Option<PathBuf>,
    },
    /// Export the solved map.
    Export {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    MapMesh,
    Records,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: semslam_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { spec, out } => cmd_simulate(&spec, &out),
        Command::Solve { dataset, mode, config, out } => cmd_solve(&dataset, mode, config.as_deref(), &out),
        Command::Eval { solution, dataset, append } => {
            let rec = cmd_eval(&solution, &dataset, append.as_deref())?;
            println!("{}", rec.to_json_line());
            Ok(())
        }
        Command::Export { solution, format, out } => {
            let format = match format {
                Format::MapMesh => ExportFormat::MapMesh,
                Format::Records => ExportFormat::Records,
            };
            let path = cmd_export(&solution, format, out.as_deref())?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
