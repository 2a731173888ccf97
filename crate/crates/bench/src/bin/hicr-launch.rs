use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use hicr_bench::launch::{launch, LaunchSpec};

/// Starts N instances of a program as one deployment on this machine.
#[derive(Parser)]
#[command(name = "hicr-launch", version)]
struct Args {
    /// Number of instances.
    #[arg(long, short = 'n', value_parser = clap::value_parser!(u64).range(1..))]
    instances: u64,
    /// Coordinator address (host:port); a free loopback port by default.
    #[arg(long)]
    coord: Option<String>,
    /// Seconds the remaining instances may run after one has failed.
    #[arg(long, default_value_t = 30)]
    grace_secs: u64,
    /// Program and its arguments.
    #[arg(last = true, required = true, num_args = 1..)]
    command: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let spec = LaunchSpec {
        instances: args.instances as usize,
        coord: args.coord,
        program: PathBuf::from(&args.command[0]),
        args: args.command[1..].to_vec(),
        grace: Duration::from_secs(args.grace_secs),
    };
    match launch(&spec) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code.clamp(1, 255) as u8),
        Err(e) => {
            eprintln!("hicr-launch: {e}");
            ExitCode::from(127)
        }
    }
}
