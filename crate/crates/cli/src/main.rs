use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dojo_cli::config::ScenarioConfig;
use dojo_cli::{classify, Outcome};

#[derive(Parser)]
#[command(name = "dojo-cli", version, about = "Contact simulation experiments and system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a config file.
    Run { config: PathBuf },
    /// Fit box geometry and friction to a triplet dataset.
    Sysid { dataset: PathBuf, config: PathBuf },
    /// Simulate box tosses and write a triplet dataset.
    GenData { config: PathBuf },
}

fn execute(cmd: &Command) -> anyhow::Result<Outcome> {
    let report = match cmd {
        Command::Run { config } => dojo_cli::run_scenario(&ScenarioConfig::load(config)?)?,
        Command::Sysid { dataset, config } => {
            let cfg = ScenarioConfig::load(config)?;
            let data = dojo_cli::load_dataset(dataset)?;
            dojo_cli::fit(&cfg, &data)?
        }
        Command::GenData { config } => {
            let cfg = ScenarioConfig::load(config)?;
            let data = dojo_cli::gen_data(&cfg)?;
            println!("wrote {} triplets to {}", data.len(), cfg.output_dir.join("dataset.csv").display());
            return Ok(Outcome::Success);
        }
    };
    print!("{report}");
    Ok(if report.passed() { Outcome::Success } else { Outcome::AssertionFailure })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = execute(&cli.command).unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        classify(&e)
    });
    ExitCode::from(outcome as u8)
}
