use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hicr_bench::jacobi::{self, parse_mesh, JacobiConfig, Stencil};
use hicr_bench::pingpong::PingpongConfig;
use hicr_bench::{examples, fib, mlp, pingpong, BenchError, ComputeKind, Context, Result};
use serde::Serialize;

/// Benchmarks and examples. Runs on the TCP backend when started by
/// hicr-launch and on the host backend otherwise; the root prints JSON.
#[derive(Parser)]
#[command(name = "hicr-bench", version)]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Round-trip goodput between two instances.
    Pingpong {
        #[arg(long, value_delimiter = ',', default_value = "1,1024,1048576")]
        sizes: Vec<u64>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// Make the echoing instance flip a bit of every echo.
        #[arg(long)]
        corrupt_echo: bool,
    },
    /// Fibonacci with one task per recursive call.
    Fib {
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 8)]
        workers: usize,
        #[arg(long, value_enum, default_value = "coroutines")]
        variant: ComputeKind,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Jacobi heat solver on a cubic grid.
    Jacobi {
        #[arg(long, default_value_t = 32)]
        grid: usize,
        #[arg(long, default_value = "1x1x1")]
        threads: String,
        #[arg(long, default_value = "1x1x1")]
        nodes: String,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        /// 7 or 13 points.
        #[arg(long, default_value_t = 7)]
        stencil: u32,
        #[arg(long, value_enum, default_value = "threads")]
        backend: ComputeKind,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Final field as little-endian f64 in x-fastest order (root only).
        #[arg(long)]
        field_out: Option<PathBuf>,
    },
    /// Inference of a seeded synthetic network.
    Mlp {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value = "threads")]
        backend: ComputeKind,
    },
    /// Copy a message into every memory space.
    Broadcast {
        #[arg(long, default_value = "Hello, world!")]
        message: String,
    },
    /// Run one execution unit on every compute resource.
    ParallelExec {
        #[arg(long, value_enum, default_value = "threads")]
        backend: ComputeKind,
    },
    /// Grow the deployment to the desired number of instances.
    Deploy {
        #[arg(long)]
        desired: usize,
    },
}

fn emit<T: Serialize>(report: Option<T>) -> Result<()> {
    if let Some(r) = report {
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}

fn run(ctx: &Context, cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pingpong { sizes, reps, corrupt_echo } => {
            emit(pingpong::run(ctx, &PingpongConfig { sizes, reps, corrupt_echo })?)
        }
        Cmd::Fib { n, workers, variant, trace_out } => {
            emit(fib::run(ctx, &fib::FibConfig { n, workers, variant }, trace_out.as_deref())?)
        }
        Cmd::Jacobi { grid, threads, nodes, iters, stencil, backend, trace_out, field_out } => {
            let cfg = JacobiConfig {
                grid,
                threads: parse_mesh(&threads)?,
                nodes: parse_mesh(&nodes)?,
                iterations: iters,
                stencil: Stencil::from_points(stencil)?,
                compute: backend,
            };
            let out = jacobi::run(ctx, &cfg)?;
            if let Some(path) = trace_out {
                hicr_bench::write_trace(&hicr_bench::rank_path(&path, ctx.rank), &out.trace)?;
            }
            if let (Some(path), Some(field)) = (field_out, &out.field) {
                jacobi::write_field(&path, field)?;
            }
            emit(out.report)
        }
        Cmd::Mlp { seed, backend } => emit(mlp::run(ctx, seed, backend)?),
        Cmd::Broadcast { message } => {
            let r = examples::broadcast(ctx, message.as_bytes())?;
            if !r.verified {
                return Err(BenchError::InconsistentResults("a broadcast copy differs".into()));
            }
            emit(ctx.is_root().then_some(r))
        }
        Cmd::ParallelExec { backend } => {
            let r = examples::parallel_exec(ctx, backend)?;
            emit(ctx.is_root().then_some(r))
        }
        Cmd::Deploy { desired } => emit(examples::deploy(ctx, desired)?),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let ctx = match Context::from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("hicr-bench: {e}");
            return ExitCode::from(2);
        }
    };
    let rank = ctx.rank;
    let outcome = run(&ctx, args.command);
    let finalized = ctx.finalize();
    match outcome.and(finalized) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hicr-bench[{rank}]: {e}");
            ExitCode::FAILURE
        }
    }
}
