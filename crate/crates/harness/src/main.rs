use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use msbc_broker::Broker;
use msbc_harness::smart_home::{self, SmartHomeOptions};
use msbc_harness::{run_scenario, Scenario, Settings};

#[derive(Parser)]
#[command(
    name = "msbc-harness",
    about = "Run MSBC scenarios and the smart-home simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and print its metrics report.
    Run {
        scenario: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Seed for generated payloads.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Start a broker, the house and five providers, and run traffic.
    SmartHome {
        /// Seconds of traffic.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            report,
            seed,
        } => run(scenario, report, seed).await,
        Command::SmartHome { duration, seed } => smart(duration, seed).await,
    }
}

async fn run(path: PathBuf, report: Option<PathBuf>, seed: u64) -> ExitCode {
    let scenario = match Scenario::load(&path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let (text, ok) = match run_scenario(&scenario, seed).await {
        Ok(result) => (result.report.to_string(), true),
        Err(failed) => {
            eprint!("{failed}");
            (failed.report.to_string(), false)
        }
    };
    print!("{text}");
    if let Some(out) = report {
        if let Err(e) = std::fs::write(&out, &text) {
            eprintln!("{}: {e}", out.display());
            return ExitCode::from(2);
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

async fn smart(duration: f64, seed: u64) -> ExitCode {
    if !(duration.is_finite() && duration >= 0.0) {
        eprintln!("--duration must be a non-negative number of seconds");
        return ExitCode::from(2);
    }
    let broker = match Broker::start_with(Settings::default().broker, smart_home::directory()).await
    {
        Ok(b) => b,
        Err(e) => {
            eprintln!("cannot start broker: {e}");
            return ExitCode::FAILURE;
        }
    };
    let options = SmartHomeOptions {
        seed,
        ..Default::default()
    };
    let home = match smart_home::simulate_smart_home(&broker, options).await {
        Ok(h) => h,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    println!(
        "broker signaling={} payload={} wires={}",
        broker.signaling_addr(),
        broker.payload_addr(),
        home.wires()
    );
    let traffic = home.run(Duration::from_secs_f64(duration)).await;
    for line in home.summary(&traffic) {
        println!("{line}");
    }
    println!("delivered={} lost={}", traffic.delivered, traffic.lost);
    let problems = home.verify(&traffic);
    for p in &problems {
        eprintln!("{p}");
    }
    home.shutdown().await;
    broker.shutdown().await;
    if problems.is_empty() && traffic.lost == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
