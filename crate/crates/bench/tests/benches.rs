use std::sync::Arc;
use std::thread;

use hicr_bench::context::{worker_resources, ComputeKind, Context};
use hicr_bench::fib::{self, expected_task_count, FibConfig};
use hicr_bench::jacobi::{self, parse_mesh, JacobiConfig, Stencil};
use hicr_bench::mlp::{self, argmax, MlpSpec, LAYERS};
use hicr_bench::pingpong::{self, GoodputSample, PingpongConfig};
use hicr_bench::{examples, BenchError};
use hicr_net::{finalize_all, local_deployment};

/// Runs `f` on every instance of an in-process TCP deployment and returns the
/// per-rank results.
fn on_deployment<T: Send + 'static>(n: usize, f: impl Fn(&Context) -> T + Send + Sync + 'static) -> Vec<T> {
    let nodes = local_deployment(n).unwrap();
    let f = Arc::new(f);
    let handles: Vec<_> = nodes
        .iter()
        .map(|node| {
            let ctx = Context::net(node.clone()).unwrap();
            let f = f.clone();
            thread::spawn(move || f(&ctx))
        })
        .collect();
    let out = handles.into_iter().map(|h| h.join().unwrap()).collect();
    finalize_all(nodes).unwrap();
    out
}

fn fib_oracle(n: u64, calls: &mut u64) -> u64 {
    *calls += 1;
    if n < 2 {
        n
    } else {
        fib_oracle(n - 1, calls) + fib_oracle(n - 2, calls)
    }
}

#[test]
fn task_count_closed_form() {
    for n in 0..=20 {
        let mut calls = 0;
        fib_oracle(n, &mut calls);
        assert_eq!(expected_task_count(n), calls, "n = {n}");
    }
    assert_eq!(expected_task_count(24), 150_049);
}

#[test]
fn fib_small_cases_both_variants() {
    for variant in [ComputeKind::Threads, ComputeKind::Coroutines] {
        for (n, result, tasks) in [(0, 0, 1), (1, 1, 1), (2, 1, 3), (16, 987, 3193)] {
            let run = fib::run_local(&FibConfig { n, workers: 3, variant }).unwrap();
            assert_eq!((run.result, run.task_count), (result, tasks), "{variant:?} n = {n}");
        }
    }
}

#[test]
fn fib_rejects_zero_workers() {
    let r = fib::run_local(&FibConfig { n: 3, workers: 0, variant: ComputeKind::Threads });
    assert!(matches!(r, Err(BenchError::InvalidConfig(_))));
}

#[test]
fn fib_on_three_instances() {
    let reports = on_deployment(3, |ctx| {
        fib::run(ctx, &FibConfig { n: 12, workers: 2, variant: ComputeKind::Coroutines }, None).unwrap()
    });
    let root = reports[0].as_ref().unwrap();
    assert_eq!((root.result, root.task_count, root.instances), (144, 465, 3));
    assert!(reports[1..].iter().all(Option::is_none));
}

fn cfg(
    grid: usize,
    threads: &str,
    nodes: &str,
    iterations: usize,
    stencil: Stencil,
    compute: ComputeKind,
) -> JacobiConfig {
    JacobiConfig {
        grid,
        threads: parse_mesh(threads).unwrap(),
        nodes: parse_mesh(nodes).unwrap(),
        iterations,
        stencil,
        compute,
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The initial sine product is an eigenvector of the 7-point averaging sweep
/// with zero boundary: after k sweeps the field is the initial one scaled by
/// ((1 + 6 cos(pi / (n + 1))) / 7)^k.
#[test]
fn seven_point_matches_eigenvector_decay() {
    let n = 12;
    let iters = 40;
    let lambda = (1.0 + 6.0 * (std::f64::consts::PI / (n + 1) as f64).cos()) / 7.0;
    let (field, residuals) = jacobi::serial(n, iters, Stencil::SevenPoint);
    let scale = lambda.powi(iters as i32);
    let mut idx = 0;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let expect = scale * jacobi::initial_value(n, [i, j, k]);
                assert!((field[idx] - expect).abs() < 1e-13, "point ({i},{j},{k})");
                idx += 1;
            }
        }
    }
    // residual of sweep k is (1 - lambda) lambda^k |v|
    let norm: f64 =
        (0..n * n * n).map(|p| jacobi::initial_value(n, [p % n, (p / n) % n, p / (n * n)]).powi(2)).sum::<f64>().sqrt();
    for (k, r) in residuals.iter().enumerate() {
        let expect = (1.0 - lambda) * lambda.powi(k as i32) * norm;
        assert!((r - expect).abs() < 1e-12, "sweep {k}: {r} vs {expect}");
    }
}

#[test]
fn single_block_checksum_equals_serial_exactly() {
    let ctx = Context::host().unwrap();
    let out = jacobi::run(&ctx, &cfg(32, "1x1x1", "1x1x1", 10, Stencil::SevenPoint, ComputeKind::Threads)).unwrap();
    let (field, residuals) = jacobi::serial(32, 10, Stencil::SevenPoint);
    let report = out.report.unwrap();
    assert_eq!(report.checksum, jacobi::checksum(&field));
    assert_eq!(report.residual_history, residuals);
    assert_eq!(out.field.unwrap(), field);
}

#[test]
fn thread_mesh_matches_serial() {
    let ctx = Context::host().unwrap();
    for stencil in [Stencil::SevenPoint, Stencil::ThirteenPoint] {
        for compute in [ComputeKind::Threads, ComputeKind::Coroutines] {
            let out = jacobi::run(&ctx, &cfg(16, "1x2x2", "1x1x1", 30, stencil, compute)).unwrap();
            let (field, residuals) = jacobi::serial(16, 30, stencil);
            assert!(max_abs_diff(out.field.as_ref().unwrap(), &field) <= 1e-12);
            let report = out.report.unwrap();
            assert!(max_abs_diff(&report.residual_history, &residuals) <= 1e-12);
            assert!(report.residual_history.windows(2).all(|w| w[1] <= w[0]), "{stencil:?} residual grew");
            assert_eq!(out.trace.len(), 30 * 4 * 4);
            assert!(hicr_frontends::tasking::trace_is_monotonic(&out.trace));
        }
    }
}

#[test]
fn instance_mesh_matches_serial() {
    for (n, nodes, stencil) in [(2, "2x1x1", Stencil::SevenPoint), (4, "1x2x2", Stencil::ThirteenPoint)] {
        let c = cfg(16, "2x1x1", nodes, 25, stencil, ComputeKind::Threads);
        let outs = on_deployment(n, move |ctx| jacobi::run(ctx, &c).unwrap());
        let (field, _) = jacobi::serial(16, 25, stencil);
        assert!(max_abs_diff(outs[0].field.as_ref().unwrap(), &field) <= 1e-12, "{nodes}");
        assert!(outs[1..].iter().all(|o| o.report.is_none()));
    }
}

#[test]
fn mesh_validation() {
    let c = |g, t: &str, n: &str, s| cfg(g, t, n, 5, s, ComputeKind::Threads);
    assert!(c(32, "1x2x2", "1x1x1", Stencil::SevenPoint).validate(1).is_ok());
    assert!(matches!(c(32, "1x1x1", "2x1x1", Stencil::SevenPoint).validate(1), Err(BenchError::MeshMismatch(_))));
    assert!(matches!(c(30, "4x1x1", "1x1x1", Stencil::SevenPoint).validate(1), Err(BenchError::MeshMismatch(_))));
    assert!(matches!(c(4, "1x1x1", "4x1x1", Stencil::ThirteenPoint).validate(4), Err(BenchError::MeshMismatch(_))));
    assert!(matches!(c(32, "0x1x1", "1x1x1", Stencil::SevenPoint).validate(1), Err(BenchError::MeshMismatch(_))));
    assert!(parse_mesh("1x2").is_err());
    assert!(parse_mesh("1xax2").is_err());
    assert_eq!(parse_mesh("1x2x3").unwrap(), [1, 2, 3]);
    assert!(Stencil::from_points(9).is_err());
    assert_eq!(Stencil::ThirteenPoint.points(), 13);
}

/// Forward pass written independently of the library.
fn oracle_logits(spec: &MlpSpec, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    let last = spec.layers.len() - 1;
    for (li, l) in spec.layers.iter().enumerate() {
        let mut y = vec![0.0; l.outputs];
        for o in 0..l.outputs {
            let mut z = l.biases[o];
            for i in 0..l.inputs {
                z += l.weights[o * l.inputs + i] * x[i];
            }
            y[o] = if li < last && z < 0.0 { 0.0 } else { z };
        }
        x = y;
    }
    x
}

#[test]
fn zero_input_without_biases_picks_index_zero() {
    let spec = MlpSpec::from_seed(42, &LAYERS).without_biases();
    let logits = spec.forward(&[0.0; 64]);
    assert!(logits.iter().all(|v| *v == 0.0));
    assert_eq!(argmax(&logits), (0, 0.0));
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), (1, 3.0));
}

#[test]
fn weights_are_reproducible_from_the_seed() {
    assert_eq!(MlpSpec::from_seed(7, &LAYERS), MlpSpec::from_seed(7, &LAYERS));
    assert_ne!(MlpSpec::from_seed(7, &LAYERS), MlpSpec::from_seed(8, &LAYERS));
}

#[test]
fn dispatched_inference_matches_oracle() {
    let spec = Arc::new(MlpSpec::from_seed(42, &LAYERS));
    let inputs = mlp::inputs(42, 40, 64);
    for kind in [ComputeKind::Threads, ComputeKind::Coroutines] {
        let cm = kind.manager();
        let pus: Vec<_> = worker_resources(3)
            .iter()
            .map(|r| {
                let pu = cm.create_processing_unit(r).unwrap();
                cm.initialize(&pu).unwrap();
                pu
            })
            .collect();
        let got = mlp::infer(&*cm, &pus, &spec, &inputs).unwrap();
        for (x, (k, score)) in inputs.iter().zip(got) {
            let expect = argmax(&oracle_logits(&spec, x));
            assert_eq!(k, expect.0);
            assert!((score - expect.1).abs() < 1e-12);
        }
    }
}

#[test]
fn mlp_backends_agree_on_host_and_net() {
    let ctx = Context::host().unwrap();
    let a = mlp::run(&ctx, 42, ComputeKind::Threads).unwrap().unwrap();
    let b = mlp::run(&ctx, 42, ComputeKind::Coroutines).unwrap().unwrap();
    assert_eq!(a.predictions, b.predictions);
    let net = on_deployment(3, |ctx| mlp::run(ctx, 42, ComputeKind::Threads).unwrap());
    assert_eq!(net[0].as_ref().unwrap().predictions, a.predictions);
}

#[test]
fn goodput_sample_arithmetic() {
    let s = GoodputSample::from_round_trips(1000, &[0.004, 0.001, 0.002]);
    assert_eq!(s.median_seconds_per_round_trip, 0.002);
    assert_eq!(s.goodput_bytes_per_second, 1_000_000.0);
    assert_eq!(s.repetitions, 3);
    assert!(s.stddev_seconds_per_round_trip > 0.0);
}

#[test]
fn pingpong_needs_two_instances() {
    let ctx = Context::host().unwrap();
    let r = pingpong::run(&ctx, &PingpongConfig { sizes: vec![1], reps: 1, corrupt_echo: false });
    assert!(matches!(r, Err(BenchError::InvalidConfig(_))));
}

#[test]
fn pingpong_verifies_echoes() {
    let outs = on_deployment(2, |ctx| {
        pingpong::run(ctx, &PingpongConfig { sizes: vec![1, 4096], reps: 4, corrupt_echo: false }).unwrap()
    });
    let report = outs[0].as_ref().unwrap();
    assert_eq!(report.samples.len(), 2);
    assert!(report.samples.iter().all(|s| s.repetitions == 4 && s.goodput_bytes_per_second > 0.0));
    assert!(outs[1].is_none());

    let outs =
        on_deployment(2, |ctx| pingpong::run(ctx, &PingpongConfig { sizes: vec![8], reps: 2, corrupt_echo: true }));
    assert!(matches!(outs[0], Err(BenchError::VerificationFailure { size: 8, rep: 0, offset: 0 })));
    assert!(matches!(outs[1], Ok(None)));
}

#[test]
fn gather_collects_in_rank_order() {
    let outs = on_deployment(3, |ctx| ctx.gather(&vec![ctx.rank as u8; ctx.rank + 1]).unwrap());
    assert_eq!(outs[0].as_ref().unwrap(), &vec![vec![0], vec![1, 1], vec![2, 2, 2]]);
    assert!(outs[1].is_none() && outs[2].is_none());
}

#[test]
fn examples_on_host() {
    let ctx = Context::host().unwrap();
    let b = examples::broadcast(&ctx, b"hello").unwrap();
    assert!(b.verified && b.memory_spaces >= 1);
    let resources = ctx.topology.compute_resources().count();
    for kind in [ComputeKind::Threads, ComputeKind::Coroutines] {
        let p = examples::parallel_exec(&ctx, kind).unwrap();
        assert_eq!(p.executed_on.len(), resources);
    }
    let d = examples::deploy(&ctx, 1).unwrap().unwrap();
    assert_eq!((d.before, d.created, d.after), (1, 0, 1));
    assert!(examples::deploy(&ctx, 2).is_err());
}
