use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msbc_core::directory::SubscriptionDirectory;

/// Edits a subscription directory file.
#[derive(Parser)]
#[command(name = "msbc-admin", version)]
struct Args {
    /// Directory file; created by add-provider if missing.
    #[arg(long, short, default_value = "directory.msbc")]
    directory: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a service provider and the subscriber identity its ASGW uses.
    AddProvider { id: String, subscriber: String },
    /// Route CTIDs matching PATTERN (exact, or a prefix ending in '*').
    AddRule { pattern: String, provider: String },
    /// Print the normalized directory.
    List,
    /// Check the file and report the first error.
    Validate,
}

fn load(path: &Path, create: bool) -> Result<SubscriptionDirectory, String> {
    if create && !path.exists() {
        return Ok(SubscriptionDirectory::new());
    }
    SubscriptionDirectory::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(args: Args) -> Result<(), String> {
    let path = &args.directory;
    match args.command {
        Command::AddProvider { id, subscriber } => {
            let mut dir = load(path, true)?;
            dir.add_provider(&id, &subscriber)
                .map_err(|e| e.to_string())?;
            dir.save(path).map_err(|e| e.to_string())
        }
        Command::AddRule { pattern, provider } => {
            let mut dir = load(path, true)?;
            dir.add_rule(&pattern, &provider)
                .map_err(|e| e.to_string())?;
            dir.save(path).map_err(|e| e.to_string())
        }
        Command::List => {
            print!("{}", load(path, false)?.render());
            Ok(())
        }
        Command::Validate => {
            let dir = load(path, false)?;
            println!(
                "ok: {} providers, {} rules",
                dir.providers().count(),
                dir.rules().count()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msbc-admin: {e}");
            ExitCode::FAILURE
        }
    }
}
