//! Forward inference through a small fully connected network with seeded
//! synthetic weights. Each input is one execution state; states are spread
//! over processing units built from every compute resource of the topology.

use std::sync::Arc;

use hicr_core::{Argument, ComputeManager, ExecutionUnit, ProcessingUnit};
use parking_lot::Mutex;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ComputeKind, Context};
use crate::error::{BenchError, Result};

pub const LAYERS: [usize; 4] = [64, 32, 32, 10];
pub const INPUTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, `outputs` rows of `inputs` weights.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layers: Vec<Layer>,
}

impl MlpSpec {
    /// Weights uniform in [-0.5, 0.5), biases in [-0.1, 0.1), drawn layer by
    /// layer from ChaCha8 seeded with `seed`.
    pub fn from_seed(seed: u64, sizes: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let weights = (0..w[0] * w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
                let biases = (0..w[1]).map(|_| rng.random_range(-0.1..0.1)).collect();
                Layer { inputs: w[0], outputs: w[1], weights, biases }
            })
            .collect();
        Self { layers }
    }

    pub fn without_biases(mut self) -> Self {
        for l in &mut self.layers {
            l.biases.iter_mut().for_each(|b| *b = 0.0);
        }
        self
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    /// Logits of the last layer. Hidden layers use the rectifier.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let last = li + 1 == self.layers.len();
            x = (0..l.outputs)
                .map(|o| {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    let z = row.iter().zip(&x).fold(l.biases[o], |acc, (w, v)| acc + w * v);
                    if last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
        }
        x
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Inputs in [-1, 1), drawn from a stream independent of the weights.
pub fn inputs(seed: u64, count: usize, size: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..count).map(|_| (0..size).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Prediction {
    pub input: usize,
    pub argmax: usize,
    pub top_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MlpReport {
    pub benchmark: String,
    pub backend: String,
    pub instances: usize,
    pub compute: ComputeKind,
    pub seed: u64,
    pub layers: Vec<usize>,
    pub processing_units: usize,
    pub predictions: Vec<Prediction>,
}

struct Job {
    spec: Arc<MlpSpec>,
    input: Vec<f64>,
    out: Mutex<Option<(usize, f64)>>,
}

/// Runs the forward passes of `inputs` as execution states of `cm`, round
/// robin over `pus`, at most one state in flight per unit.
pub fn infer(
    cm: &dyn ComputeManager,
    pus: &[ProcessingUnit],
    spec: &Arc<MlpSpec>,
    inputs: &[Vec<f64>],
) -> Result<Vec<(usize, f64)>> {
    let unit = ExecutionUnit::new(
        cm.unit_kind(),
        Arc::new(|arg: &Argument, _: &dyn hicr_core::Suspender| {
            let job = arg.get::<Arc<Job>>().expect("inference job argument");
            *job.out.lock() = Some(argmax(&job.spec.forward(&job.input)));
        }),
    );
    let jobs: Vec<Arc<Job>> =
        inputs.iter().map(|x| Arc::new(Job { spec: spec.clone(), input: x.clone(), out: Mutex::new(None) })).collect();
    for batch in jobs.chunks(pus.len()) {
        let states = batch
            .iter()
            .zip(pus)
            .map(|(job, pu)| {
                let st = cm.create_execution_state(&unit, Argument::new(job.clone()))?;
                cm.execute(pu, &st)?;
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()?;
        for (st, pu) in states.iter().zip(pus) {
            cm.await_completion(pu)?;
            if let Some(f) = st.failure() {
                return Err(BenchError::InvalidConfig(format!("inference failed: {f}")));
            }
        }
    }
    Ok(jobs.iter().map(|j| j.out.lock().expect("every job ran")).collect())
}

/// Inputs are dealt round robin over instances; the root collects all
/// predictions.
pub fn run(ctx: &Context, seed: u64, compute: ComputeKind) -> Result<Option<MlpReport>> {
    let spec = Arc::new(MlpSpec::from_seed(seed, &LAYERS));
    let all_inputs = inputs(seed, INPUTS, spec.input_size());
    let mine: Vec<usize> = (ctx.rank..INPUTS).step_by(ctx.size).collect();
    let cm = compute.manager();
    let pus: Vec<ProcessingUnit> = ctx
        .topology
        .compute_resources()
        .map(|r| {
            let pu = cm.create_processing_unit(r)?;
            cm.initialize(&pu)?;
            Ok(pu)
        })
        .collect::<Result<_>>()?;
    if pus.is_empty() {
        return Err(BenchError::InvalidConfig("topology has no compute resource".into()));
    }
    let local: Vec<Vec<f64>> = mine.iter().map(|i| all_inputs[*i].clone()).collect();
    let results = infer(&*cm, &pus, &spec, &local)?;
    for pu in &pus {
        cm.finalize(pu)?;
    }
    let bytes: Vec<u8> = mine
        .iter()
        .zip(&results)
        .flat_map(|(i, (k, s))| [(*i as u64).to_le_bytes(), (*k as u64).to_le_bytes(), s.to_le_bytes()].concat())
        .collect();
    let Some(parts) = ctx.gather(&bytes)? else {
        return Ok(None);
    };
    let mut predictions: Vec<Prediction> = parts
        .iter()
        .flat_map(|p| p.chunks_exact(24))
        .map(|c| Prediction {
            input: u64::from_le_bytes(c[0..8].try_into().expect("8 bytes")) as usize,
            argmax: u64::from_le_bytes(c[8..16].try_into().expect("8 bytes")) as usize,
            top_score: f64::from_le_bytes(c[16..24].try_into().expect("8 bytes")),
        })
        .collect();
    predictions.sort_by_key(|p| p.input);
    if predictions.len() != INPUTS {
        return Err(BenchError::InconsistentResults(format!(
            "collected {} of {INPUTS} predictions",
            predictions.len()
        )));
    }
    Ok(Some(MlpReport {
        benchmark: "mlp".into(),
        backend: ctx.backend_name().into(),
        instances: ctx.size,
        compute,
        seed,
        layers: LAYERS.to_vec(),
        processing_units: pus.len(),
        predictions,
    }))
}
