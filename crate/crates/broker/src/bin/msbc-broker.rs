use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::{error, info, LevelFilter};
use msbc_broker::Broker;
use msbc_core::interconnect::BrokerConfig;

/// Runs an MSBC broker.
#[derive(Parser)]
#[command(name = "msbc-broker", version)]
struct Args {
    /// key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// error, warn, info (lifecycle events) or debug (every packet).
    #[arg(long, default_value = "info")]
    log_level: LevelFilter,
    /// Write the payload channel certificate (PEM) here for gateways to trust.
    #[arg(long)]
    write_cert: Option<PathBuf>,
}

fn init_logging(level: LevelFilter) {
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| {
            if record.target() == "msbc::event" {
                writeln!(buf, "{}", record.args())
            } else {
                writeln!(buf, "# {} {}", record.level(), record.args())
            }
        })
        .init();
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    init_logging(args.log_level);

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            error!("{}: {e}", args.config.display());
            return ExitCode::FAILURE;
        }
    };
    let config = match BrokerConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            error!("{}: {e}", args.config.display());
            return ExitCode::FAILURE;
        }
    };
    let broker = match Broker::start(config).await {
        Ok(b) => b,
        Err(e) => {
            error!("{e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(path) = &args.write_cert {
        if let Err(e) = std::fs::write(path, broker.certificate_pem()) {
            error!("{}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    }
    if let Err(e) = tokio::signal::ctrl_c().await {
        error!("{e}");
    }
    info!("shutting down");
    broker.shutdown().await;
    ExitCode::SUCCESS
}
