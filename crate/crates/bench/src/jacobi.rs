//! Jacobi sweeps of a 3D averaging stencil on an N³ grid with zero boundary.
//!
//! The grid is split into `nodes` blocks, one per instance, and each instance
//! block into `threads` sub-blocks computed as execution units. Instances
//! swap halo slabs every iteration by putting them into double-buffered
//! receive slots of their neighbours.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use hicr_core::{Argument, ExecutionUnit, GlobalMemorySlot, LocalMemorySlot, ProcessingUnit, SlotRef};
use hicr_frontends::tasking::{TraceEvent, TraceKind};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::context::{worker_resources, ComputeKind, Context};
use crate::error::{BenchError, Result};

const HALO_TAG: u64 = 0x4a41_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Stencil {
    SevenPoint,
    ThirteenPoint,
}

impl Stencil {
    pub fn from_points(points: u32) -> Result<Self> {
        match points {
            7 => Ok(Stencil::SevenPoint),
            13 => Ok(Stencil::ThirteenPoint),
            p => Err(BenchError::InvalidConfig(format!("unsupported stencil size {p}, expected 7 or 13"))),
        }
    }

    /// Width of the ghost layer the stencil reads.
    pub fn reach(self) -> usize {
        match self {
            Stencil::SevenPoint => 1,
            Stencil::ThirteenPoint => 2,
        }
    }

    pub fn points(self) -> usize {
        6 * self.reach() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobiConfig {
    pub grid: usize,
    pub threads: [usize; 3],
    pub nodes: [usize; 3],
    pub iterations: usize,
    pub stencil: Stencil,
    pub compute: ComputeKind,
}

impl JacobiConfig {
    pub fn workers(&self) -> usize {
        self.threads.iter().product()
    }

    /// Checks the meshes against the grid and the instance count.
    pub fn validate(&self, instances: usize) -> Result<()> {
        if self.grid == 0 || self.iterations == 0 {
            return Err(BenchError::InvalidConfig("grid and iterations must be positive".into()));
        }
        if self.threads.contains(&0) || self.nodes.contains(&0) {
            return Err(BenchError::MeshMismatch("mesh extents must be positive".into()));
        }
        let p: usize = self.nodes.iter().product();
        if p != instances {
            return Err(BenchError::MeshMismatch(format!(
                "node mesh {} has {p} parts but {instances} instances are running",
                mesh_string(self.nodes)
            )));
        }
        for a in 0..3 {
            let parts = self.nodes[a] * self.threads[a];
            if !self.grid.is_multiple_of(parts) {
                return Err(BenchError::MeshMismatch(format!(
                    "grid {} not divisible by {parts} parts along axis {a}",
                    self.grid
                )));
            }
            if self.nodes[a] > 1 && self.grid / self.nodes[a] < self.stencil.reach() {
                return Err(BenchError::MeshMismatch(format!("instance blocks along axis {a} thinner than the halo")));
            }
        }
        Ok(())
    }
}

/// Parses `AxBxC`.
pub fn parse_mesh(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| BenchError::InvalidConfig(format!("bad mesh {s:?}, expected AxBxC"))))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| BenchError::InvalidConfig(format!("bad mesh {s:?}, expected AxBxC")))
}

pub fn mesh_string(m: [usize; 3]) -> String {
    format!("{}x{}x{}", m[0], m[1], m[2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JacobiReport {
    pub benchmark: String,
    pub backend: String,
    pub instances: usize,
    pub grid: usize,
    pub threads: [usize; 3],
    pub nodes: [usize; 3],
    pub iterations: usize,
    pub stencil: Stencil,
    pub compute: ComputeKind,
    /// Sum of all grid values in global index order.
    pub checksum: f64,
    pub final_residual: f64,
    /// L2 norm of the update of each sweep.
    pub residual_history: Vec<f64>,
    pub seconds: f64,
}

/// Initial value at global point `g`: a product of half sine waves that vanish
/// on the boundary.
pub fn initial_value(n: usize, g: [usize; 3]) -> f64 {
    let s = |x: usize| (std::f64::consts::PI * (x + 1) as f64 / (n + 1) as f64).sin();
    s(g[0]) * s(g[1]) * s(g[2])
}

/// Padded block layout: `n` interior points per axis plus `h` ghosts each side.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: [usize; 3],
    h: usize,
}

impl Layout {
    fn dim(&self, a: usize) -> usize {
        self.n[a] + 2 * self.h
    }

    fn len(&self) -> usize {
        self.dim(0) * self.dim(1) * self.dim(2)
    }

    fn idx(&self, p: [usize; 3]) -> usize {
        p[0] + self.dim(0) * (p[1] + self.dim(1) * p[2])
    }

    fn strides(&self) -> [usize; 3] {
        [1, self.dim(0), self.dim(0) * self.dim(1)]
    }
}

/// New value of the point at flat index `c`. Shared by every execution path
/// so the summation order is always the same.
#[inline]
fn update(u: &[f64], c: usize, s: [usize; 3], stencil: Stencil) -> f64 {
    let mut acc = u[c];
    for r in 1..=stencil.reach() {
        for st in s {
            acc += u[c - r * st];
            acc += u[c + r * st];
        }
    }
    acc / stencil.points() as f64
}

/// Reference solver: one block, one flow of execution. Returns the field in
/// global index order (x fastest) and the residual of every sweep.
pub fn serial(grid: usize, iterations: usize, stencil: Stencil) -> (Vec<f64>, Vec<f64>) {
    let l = Layout { n: [grid; 3], h: stencil.reach() };
    let mut u = vec![0.0; l.len()];
    for k in 0..grid {
        for j in 0..grid {
            for i in 0..grid {
                u[l.idx([i + l.h, j + l.h, k + l.h])] = initial_value(grid, [i, j, k]);
            }
        }
    }
    let mut next = u.clone();
    let mut residuals = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut sq = 0.0;
        for k in l.h..l.h + grid {
            for j in l.h..l.h + grid {
                for i in l.h..l.h + grid {
                    let c = l.idx([i, j, k]);
                    let v = update(&u, c, l.strides(), stencil);
                    let d = v - u[c];
                    sq += d * d;
                    next[c] = v;
                }
            }
        }
        std::mem::swap(&mut u, &mut next);
        residuals.push(sq.sqrt());
    }
    let mut field = Vec::with_capacity(grid * grid * grid);
    for k in 0..grid {
        for j in 0..grid {
            for i in 0..grid {
                field.push(u[l.idx([i + l.h, j + l.h, k + l.h])]);
            }
        }
    }
    (field, residuals)
}

/// Sum in global index order.
pub fn checksum(field: &[f64]) -> f64 {
    field.iter().sum()
}

struct Job {
    cur: Arc<Vec<f64>>,
    layout: Layout,
    lo: [usize; 3],
    hi: [usize; 3],
    stencil: Stencil,
    epoch: Instant,
    out: Mutex<JobOutput>,
}

#[derive(Default)]
struct JobOutput {
    values: Vec<f64>,
    sq: f64,
    start_ns: u64,
    end_ns: u64,
}

fn sweep_block(job: &Job) {
    let start_ns = job.epoch.elapsed().as_nanos() as u64;
    let s = job.layout.strides();
    let mut values = Vec::with_capacity((0..3).map(|a| job.hi[a] - job.lo[a]).product());
    let mut sq = 0.0;
    for k in job.lo[2]..job.hi[2] {
        for j in job.lo[1]..job.hi[1] {
            for i in job.lo[0]..job.hi[0] {
                let c = job.layout.idx([i, j, k]);
                let v = update(&job.cur, c, s, job.stencil);
                let d = v - job.cur[c];
                sq += d * d;
                values.push(v);
            }
        }
    }
    *job.out.lock() = JobOutput { values, sq, start_ns, end_ns: job.epoch.elapsed().as_nanos() as u64 };
}

/// Ghost exchange with the neighbouring instances.
struct Halo {
    layout: Layout,
    /// Per direction `2 * axis + side`, neighbour rank if any.
    neighbours: [Option<usize>; 6],
    send: Vec<Option<LocalMemorySlot>>,
    /// `recv[dir][parity]`
    recv: Vec<Vec<LocalMemorySlot>>,
    remote: Vec<Vec<GlobalMemorySlot>>,
}

fn slot_key(rank: usize, dir: usize, parity: usize) -> u64 {
    (rank * 12 + dir * 2 + parity) as u64
}

impl Halo {
    fn new(ctx: &Context, layout: Layout, coords: [usize; 3], nodes: [usize; 3]) -> Result<Self> {
        let rank_of = |c: [usize; 3]| c[0] + nodes[0] * (c[1] + nodes[1] * c[2]);
        let mut neighbours = [None; 6];
        for a in 0..3 {
            if coords[a] > 0 {
                let mut c = coords;
                c[a] -= 1;
                neighbours[2 * a] = Some(rank_of(c));
            }
            if coords[a] + 1 < nodes[a] {
                let mut c = coords;
                c[a] += 1;
                neighbours[2 * a + 1] = Some(rank_of(c));
            }
        }
        let mut send = Vec::new();
        let mut recv = Vec::new();
        let mut contributions = Vec::new();
        for (d, nb) in neighbours.iter().enumerate() {
            let bytes = (Self::slab_len(&layout, d / 2) * 8) as u64;
            send.push(match nb {
                Some(_) => Some(ctx.mem.allocate(&ctx.space, bytes)?),
                None => None,
            });
            let mut pair = Vec::new();
            for parity in 0..2 {
                let s = ctx.mem.allocate(&ctx.space, bytes)?;
                if nb.is_some() {
                    contributions.push((slot_key(ctx.rank, d, parity), s.clone()));
                }
                pair.push(s);
            }
            recv.push(pair);
        }
        ctx.comm.exchange_global_slots(HALO_TAG, &contributions)?;
        let mut remote = Vec::new();
        for (d, nb) in neighbours.iter().enumerate() {
            let mut pair = Vec::new();
            if let Some(nb) = nb {
                // the neighbour receives our slab on its opposite side
                let opposite = d ^ 1;
                for parity in 0..2 {
                    pair.push(ctx.comm.get_global_slot(HALO_TAG, slot_key(*nb, opposite, parity))?);
                }
            }
            remote.push(pair);
        }
        Ok(Self { layout, neighbours, send, recv, remote })
    }

    fn slab_len(l: &Layout, axis: usize) -> usize {
        l.h * (0..3).filter(|b| *b != axis).map(|b| l.n[b]).product::<usize>()
    }

    /// Flat indices of `h` planes along `axis` starting at padded coordinate
    /// `from`, planes in increasing order.
    fn slab(&self, axis: usize, from: usize) -> Vec<usize> {
        let l = &self.layout;
        let (b, c) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut out = Vec::with_capacity(Self::slab_len(l, axis));
        for t in from..from + l.h {
            for y in l.h..l.h + l.n[c] {
                for x in l.h..l.h + l.n[b] {
                    let mut p = [0; 3];
                    p[axis] = t;
                    p[b] = x;
                    p[c] = y;
                    out.push(l.idx(p));
                }
            }
        }
        out
    }

    fn exchange(&self, ctx: &Context, u: &mut [f64], parity: usize) -> Result<()> {
        let l = self.layout;
        for d in 0..6 {
            if self.neighbours[d].is_none() {
                continue;
            }
            let axis = d / 2;
            let from = if d % 2 == 0 { l.h } else { l.n[axis] };
            let bytes: Vec<u8> = self.slab(axis, from).into_iter().flat_map(|i| u[i].to_le_bytes()).collect();
            let src = self.send[d].as_ref().expect("send slot for every neighbour");
            src.write(0, &bytes)?;
            let dst = &self.remote[d][parity];
            ctx.comm.memcpy(SlotRef::Global(dst), 0, SlotRef::Local(src), 0, bytes.len() as u64)?;
        }
        ctx.comm.fence(HALO_TAG)?;
        ctx.barrier()?;
        for d in 0..6 {
            if self.neighbours[d].is_none() {
                continue;
            }
            let axis = d / 2;
            let from = if d % 2 == 0 { 0 } else { l.n[axis] + l.h };
            let bytes = self.recv[d][parity].to_vec()?;
            for (i, chunk) in self.slab(axis, from).into_iter().zip(bytes.chunks_exact(8)) {
                u[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok(())
    }
}

/// Result of the local share of a run.
pub struct JacobiLocal {
    pub report: Option<JacobiReport>,
    /// Root only: the whole field in global index order.
    pub field: Option<Vec<f64>>,
    pub trace: Vec<TraceEvent>,
}

/// Collective over all instances of `ctx`.
pub fn run(ctx: &Context, cfg: &JacobiConfig) -> Result<JacobiLocal> {
    cfg.validate(ctx.size)?;
    let epoch = Instant::now();
    let h = cfg.stencil.reach();
    let nodes = cfg.nodes;
    let coords = [ctx.rank % nodes[0], (ctx.rank / nodes[0]) % nodes[1], ctx.rank / (nodes[0] * nodes[1])];
    let n = [cfg.grid / nodes[0], cfg.grid / nodes[1], cfg.grid / nodes[2]];
    let offset = [coords[0] * n[0], coords[1] * n[1], coords[2] * n[2]];
    let layout = Layout { n, h };

    let mut u = vec![0.0; layout.len()];
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let g = [offset[0] + i, offset[1] + j, offset[2] + k];
                u[layout.idx([i + h, j + h, k + h])] = initial_value(cfg.grid, g);
            }
        }
    }

    let halo = if ctx.size > 1 { Some(Halo::new(ctx, layout, coords, nodes)?) } else { None };

    let cm = cfg.compute.manager();
    let unit = ExecutionUnit::new(
        cm.unit_kind(),
        Arc::new(|arg: &Argument, _: &dyn hicr_core::Suspender| {
            sweep_block(arg.get::<Arc<Job>>().expect("jacobi job argument"));
        }),
    );
    let pus: Vec<ProcessingUnit> = worker_resources(cfg.workers())
        .iter()
        .map(|r| {
            let pu = cm.create_processing_unit(r)?;
            cm.initialize(&pu)?;
            Ok(pu)
        })
        .collect::<Result<_>>()?;

    let t = cfg.threads;
    let bn = [n[0] / t[0], n[1] / t[1], n[2] / t[2]];
    let blocks: Vec<([usize; 3], [usize; 3])> = (0..cfg.workers())
        .map(|b| {
            let bc = [b % t[0], (b / t[0]) % t[1], b / (t[0] * t[1])];
            let lo = [h + bc[0] * bn[0], h + bc[1] * bn[1], h + bc[2] * bn[2]];
            (lo, [lo[0] + bn[0], lo[1] + bn[1], lo[2] + bn[2]])
        })
        .collect();

    let mut partials = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::new();
    let start = Instant::now();
    for it in 0..cfg.iterations {
        if let Some(halo) = &halo {
            halo.exchange(ctx, &mut u, it % 2)?;
        }
        let cur = Arc::new(std::mem::take(&mut u));
        let jobs: Vec<Arc<Job>> = blocks
            .iter()
            .map(|(lo, hi)| {
                Arc::new(Job {
                    cur: cur.clone(),
                    layout,
                    lo: *lo,
                    hi: *hi,
                    stencil: cfg.stencil,
                    epoch,
                    out: Mutex::default(),
                })
            })
            .collect();
        let states = jobs
            .iter()
            .zip(&pus)
            .map(|(job, pu)| {
                let st = cm.create_execution_state(&unit, Argument::new(job.clone()))?;
                cm.execute(pu, &st)?;
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()?;
        for (pu, st) in pus.iter().zip(&states) {
            cm.await_completion(pu)?;
            if let Some(f) = st.failure() {
                return Err(BenchError::InvalidConfig(format!("jacobi block failed: {f}")));
            }
        }
        drop(states);
        let mut next = (*cur).clone();
        let mut sq = 0.0;
        for (b, job) in jobs.iter().enumerate() {
            let out = std::mem::take(&mut *job.out.lock());
            let mut vals = out.values.into_iter();
            for k in job.lo[2]..job.hi[2] {
                for j in job.lo[1]..job.hi[1] {
                    for i in job.lo[0]..job.hi[0] {
                        next[layout.idx([i, j, k])] = vals.next().expect("one value per block point");
                    }
                }
            }
            sq += out.sq;
            let task = Some((it * blocks.len() + b) as u64);
            let worker = b as u32;
            for (ts, task, event) in [
                (out.start_ns, None, TraceKind::WorkerBusy),
                (out.start_ns, task, TraceKind::TaskStart),
                (out.end_ns, task, TraceKind::TaskFinish),
                (out.end_ns, None, TraceKind::WorkerIdle),
            ] {
                trace.push(TraceEvent { ts, worker, task, event });
            }
        }
        partials.push(sq);
        u = next;
    }
    let seconds = start.elapsed().as_secs_f64();
    for pu in &pus {
        cm.finalize(pu)?;
    }

    let mut mine: Vec<u8> = partials.iter().flat_map(|x| x.to_le_bytes()).collect();
    for k in h..h + n[2] {
        for j in h..h + n[1] {
            for i in h..h + n[0] {
                mine.extend_from_slice(&u[layout.idx([i, j, k])].to_le_bytes());
            }
        }
    }
    let Some(all) = ctx.gather(&mine)? else {
        return Ok(JacobiLocal { report: None, field: None, trace });
    };
    let g = cfg.grid;
    let mut field = vec![0.0; g * g * g];
    let mut sums = vec![0.0; cfg.iterations];
    for (r, bytes) in all.iter().enumerate() {
        let vals: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (part, block) = vals.split_at(cfg.iterations);
        for (s, p) in sums.iter_mut().zip(part) {
            *s += p;
        }
        let rc = [r % nodes[0], (r / nodes[0]) % nodes[1], r / (nodes[0] * nodes[1])];
        let mut it = block.iter();
        for k in 0..n[2] {
            for j in 0..n[1] {
                for i in 0..n[0] {
                    let gp = [rc[0] * n[0] + i, rc[1] * n[1] + j, rc[2] * n[2] + k];
                    field[gp[0] + g * (gp[1] + g * gp[2])] = *it.next().expect("block value");
                }
            }
        }
    }
    let residual_history: Vec<f64> = sums.iter().map(|s| s.sqrt()).collect();
    let report = JacobiReport {
        benchmark: "jacobi".into(),
        backend: ctx.backend_name().into(),
        instances: ctx.size,
        grid: g,
        threads: cfg.threads,
        nodes,
        iterations: cfg.iterations,
        stencil: cfg.stencil,
        compute: cfg.compute,
        checksum: checksum(&field),
        final_residual: *residual_history.last().expect("at least one iteration"),
        residual_history,
        seconds,
    };
    Ok(JacobiLocal { report: Some(report), field: Some(field), trace })
}

/// Writes the field as little-endian f64 values in global index order.
pub fn write_field(path: &Path, field: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = field.iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}
