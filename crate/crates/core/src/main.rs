use ambiglab::cli::{self, EXIT_CONFIG, EXIT_OK};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ambiglab", version, about = "Active learning under task ambiguity on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file path or preset name
    #[arg(long)]
    config: String,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated master seeds, overriding the config
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads
    #[arg(long, env = "AMBIGLAB_JOBS")]
    jobs: Option<usize>,
}

impl Common {
    fn jobs(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the active-learning loop
    Run(Common),
    /// Sweep p_match and tabulate the dose-response
    Sweep(Common),
    /// Linear probes of backbone features
    Probe(Common),
    /// Check a config without running anything
    Validate {
        #[arg(long)]
        config: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => cli::cmd_run(&c.config, &c.out, c.seeds.as_deref(), c.jobs()),
        Command::Sweep(c) => cli::cmd_sweep(&c.config, &c.out, c.seeds.as_deref(), c.jobs()),
        Command::Probe(c) => cli::cmd_probe(&c.config, &c.out, c.jobs()),
        Command::Validate { config } => match cli::cmd_validate(config) {
            Ok(v) if v.is_empty() => {
                println!("ok");
                return ExitCode::from(EXIT_OK as u8);
            }
            Ok(v) => {
                for line in v {
                    eprintln!("{line}");
                }
                return ExitCode::from(EXIT_CONFIG as u8);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
