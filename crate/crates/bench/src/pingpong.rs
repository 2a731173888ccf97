//! Round trips between two instances over two opposing single-producer
//! channels of capacity one.

use std::time::Instant;

use hicr_frontends::channels::{create_spsc, Backoff, ChannelConfig, ChannelResources, Role};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::error::{BenchError, Result};
use crate::stats::{median, stddev};

const TAG_BASE: u64 = 0x5050_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GoodputSample {
    pub message_size_bytes: u64,
    pub repetitions: usize,
    pub median_seconds_per_round_trip: f64,
    pub stddev_seconds_per_round_trip: f64,
    /// Two payload transfers per round trip over the median round-trip time.
    pub goodput_bytes_per_second: f64,
}

impl GoodputSample {
    pub fn from_round_trips(size: u64, seconds: &[f64]) -> Self {
        let med = median(seconds);
        Self {
            message_size_bytes: size,
            repetitions: seconds.len(),
            median_seconds_per_round_trip: med,
            stddev_seconds_per_round_trip: stddev(seconds),
            goodput_bytes_per_second: 2.0 * size as f64 / med,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PingpongReport {
    pub benchmark: String,
    pub backend: String,
    pub instances: usize,
    pub samples: Vec<GoodputSample>,
}

#[derive(Debug, Clone)]
pub struct PingpongConfig {
    pub sizes: Vec<u64>,
    pub reps: usize,
    /// Fault hook: the echoing side flips one bit of every echo.
    pub corrupt_echo: bool,
}

fn payload(size: u64, rep: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(size.rotate_left(20) ^ rep as u64);
    let mut v = vec![0u8; size as usize];
    rng.fill(&mut v[..]);
    v
}

/// Runs on both instances. Instance 0 pings and measures, instance 1 echoes.
/// Returns the report on instance 0. A mismatching echo does not stop the
/// exchange, so both sides finish; it is reported once all sizes are done.
pub fn run(ctx: &Context, cfg: &PingpongConfig) -> Result<Option<PingpongReport>> {
    if ctx.size != 2 {
        return Err(BenchError::InvalidConfig(format!("pingpong needs exactly 2 instances, found {}", ctx.size)));
    }
    if cfg.reps == 0 || cfg.sizes.is_empty() || cfg.sizes.contains(&0) {
        return Err(BenchError::InvalidConfig("pingpong needs at least one repetition and positive sizes".into()));
    }
    let res = ChannelResources::new(ctx.comm.clone(), ctx.mem.clone(), ctx.space.clone());
    let pinger = ctx.rank == 0;
    let backoff = Backoff::default();
    let mut samples = Vec::new();
    let mut failure = None;
    for (k, &size) in cfg.sizes.iter().enumerate() {
        let ping_cfg = ChannelConfig::new(1, size, TAG_BASE + 2 * k as u64);
        let pong_cfg = ChannelConfig::new(1, size, TAG_BASE + 2 * k as u64 + 1);
        let (out_role, in_role) =
            if pinger { (Role::Producer, Role::Consumer) } else { (Role::Consumer, Role::Producer) };
        let mut ping = create_spsc(&res, out_role, ping_cfg)?;
        let mut pong = create_spsc(&res, in_role, pong_cfg)?;
        let mut times = Vec::with_capacity(cfg.reps);
        for rep in 0..cfg.reps {
            if pinger {
                let msg = payload(size, rep);
                let start = Instant::now();
                ping.push_bytes_blocking(&msg, backoff)?;
                let echo = pong.pop_blocking(backoff)?;
                times.push(start.elapsed().as_secs_f64());
                if failure.is_none() {
                    if let Some(offset) = echo.iter().zip(&msg).position(|(a, b)| a != b) {
                        failure = Some(BenchError::VerificationFailure { size, rep, offset });
                    }
                }
            } else {
                let mut msg = ping.pop_blocking(backoff)?;
                if cfg.corrupt_echo {
                    msg[0] ^= 1;
                }
                pong.push_bytes_blocking(&msg, backoff)?;
            }
        }
        if pinger {
            samples.push(GoodputSample::from_round_trips(size, &times));
        }
        ctx.barrier()?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(pinger.then(|| PingpongReport {
        benchmark: "pingpong".into(),
        backend: ctx.backend_name().into(),
        instances: ctx.size,
        samples,
    }))
}
