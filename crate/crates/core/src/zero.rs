//! Collaborative training loop: the NPU runs forward and backward passes,
//! gradients move to the CPU, the CPU runs Adam, weights move back.
//!
//! Two halves share the workload definition. [`zero_timeline`] times the
//! loop on the shared-resource flow engine; [`run_toy`] executes a small
//! instance functionally through the protected CPU and NPU models so final
//! weights can be compared across security modes.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baseline::CostReport;
use crate::config::{Config, SecurityMode};
use crate::cpu::CpuTee;
use crate::crypto::{Line, LINE_BYTES};
use crate::error::{Error, Result};
use crate::npu::{stream_cycles, NpuTee, VerifyMode};
use crate::sim::{FlowId, FlowSim, FlowSpec, Metrics, StageSpec};
use crate::transfer::{self, add_plan, plan_transfer, platform_ledger, Direction, Protocol, Session, CHUNK_BYTES};
use crate::workloads::{gen_adam_trace, AccessKind, AdamParams, Layout, Role, TraceRecord};

// ---------------------------------------------------------------------------
// Adam arithmetic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

const F32S: usize = (LINE_BYTES / 4) as usize;

fn get_f32(l: &Line, i: usize) -> f32 {
    f32::from_le_bytes(l[4 * i..4 * i + 4].try_into().unwrap())
}

fn put_f32(l: &mut Line, i: usize, x: f32) {
    l[4 * i..4 * i + 4].copy_from_slice(&x.to_le_bytes());
}

/// One Adam step over the 16 f32 lanes of a line. `step` starts at 1.
pub fn adam_line(w: &mut Line, g: &Line, m: &mut Line, v: &mut Line, step: u32, h: &AdamHyper) {
    let t = step.max(1) as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..F32S {
        let gi = get_f32(g, i);
        let mi = h.beta1 * get_f32(m, i) + (1.0 - h.beta1) * gi;
        let vi = h.beta2 * get_f32(v, i) + (1.0 - h.beta2) * gi * gi;
        let wi = get_f32(w, i) - h.lr * (mi / c1) / ((vi / c2).sqrt() + h.eps);
        put_f32(m, i, mi);
        put_f32(v, i, vi);
        put_f32(w, i, wi);
    }
}

/// Replays an Adam trace through a CPU memory path, computing real updates:
/// a line's new values are produced once its four operands were read and
/// written back when the trace evicts them. Returns the next step number.
pub fn execute_adam(
    cpu: &mut CpuTee,
    layout: &Layout,
    records: &[TraceRecord],
    first_step: u32,
    h: &AdamHyper,
) -> Result<u32> {
    let mut step = first_step;
    let mut operands: HashMap<(u32, u64), [Option<Line>; 4]> = HashMap::new();
    let mut dirty: HashMap<u64, Line> = HashMap::new();
    for r in records {
        match r.kind {
            AccessKind::R => {
                let line = cpu.read(r.va)?;
                let Some(id) = r.tensor_id else { continue };
                let reg = layout.region(id)?;
                let slot = match reg.role {
                    Role::Weight => 0,
                    Role::Grad => 1,
                    Role::Momentum => 2,
                    Role::Variance => 3,
                    _ => continue,
                };
                let j = id / 4;
                let l = (r.va - reg.base) / LINE_BYTES;
                let ops = operands.entry((j, l)).or_default();
                ops[slot] = Some(line);
                if let [Some(mut w), Some(g), Some(mut m), Some(mut v)] = *ops {
                    operands.remove(&(j, l));
                    adam_line(&mut w, &g, &mut m, &mut v, step, h);
                    let p = |role| layout.param(j as usize, role).addr(l);
                    dirty.insert(p(Role::Weight), w);
                    dirty.insert(p(Role::Momentum), m);
                    dirty.insert(p(Role::Variance), v);
                }
            }
            AccessKind::W => {
                let line = dirty.remove(&r.va).ok_or_else(|| Error::Trace {
                    line: 0,
                    msg: format!("write-back of {:#x} before its update", r.va),
                })?;
                cpu.write(r.va, &line)?;
            }
            AccessKind::Barrier => step += 1,
            AccessKind::CodeFetch | AccessKind::Xfer => {}
        }
    }
    if !dirty.is_empty() || !operands.is_empty() {
        return Err(Error::Trace { line: 0, msg: format!("{} lines left unfinished", dirty.len() + operands.len()) });
    }
    Ok(step)
}

// ---------------------------------------------------------------------------
// Measured optimizer cost
// ---------------------------------------------------------------------------

/// Off-chip and engine work of one steady-state optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AdamCost {
    pub weight_bytes: u64,
    pub reads: u64,
    pub writes: u64,
    pub cost: CostReport,
    pub hit_in: u64,
    pub hit_boundary: u64,
    pub mispredict: u64,
    pub miss: u64,
}

/// Replays two optimizer steps of the configured tensor set through the
/// mode's memory path and keeps the second.
pub fn measure_adam(cfg: &Config, mode: SecurityMode) -> Result<AdamCost> {
    let mut p = AdamParams::from_config(cfg);
    p.iterations = 2;
    p.grad_transfers = false;
    let (layout, trace) = gen_adam_trace(&p);
    let split = trace.iter().position(|r| r.kind == AccessKind::Barrier).map_or(trace.len(), |i| i + 1);
    let mut cpu = CpuTee::new(cfg, mode, layout.base, layout.span_lines());
    let h = AdamHyper::default();
    let step = execute_adam(&mut cpu, &layout, &trace[..split], 1, &h)?;
    cpu.reset_cost();
    let before = cpu.read_kind_stats();
    execute_adam(&mut cpu, &layout, &trace[split..], step, &h)?;
    let after = cpu.read_kind_stats();
    let (reads, writes) = cpu.accesses();
    Ok(AdamCost {
        weight_bytes: p.tensor_bytes.iter().map(|b| b.div_ceil(LINE_BYTES) * LINE_BYTES).sum(),
        reads,
        writes,
        cost: *cpu.cost(),
        hit_in: after.0 - before.0,
        hit_boundary: after.1 - before.1,
        mispredict: after.2 - before.2,
        miss: after.3 - before.3,
    })
}

// ---------------------------------------------------------------------------
// Timeline
// ---------------------------------------------------------------------------

pub fn transfer_protocol(mode: SecurityMode) -> Protocol {
    match mode {
        SecurityMode::NonSecure => Protocol::Plain,
        SecurityMode::SgxMgx => Protocol::Baseline,
        SecurityMode::TensorTee => Protocol::Direct,
    }
}

/// NPU verification used by a security mode; `None` is unprotected.
pub fn npu_verify(cfg: &Config, mode: SecurityMode) -> Result<Option<VerifyMode>> {
    Ok(match mode {
        SecurityMode::NonSecure => None,
        SecurityMode::SgxMgx => Some(VerifyMode::blocking(cfg.npu.mgx_mac_granularity)?),
        SecurityMode::TensorTee => Some(VerifyMode::parse(&cfg.mode.npu_verify)?),
    })
}

/// Operand streaming of `bytes` on the NPU. The PE stage is stretched by
/// the verification slowdown the stream pipeline model reports for a
/// tensor of that size.
fn npu_flow(cfg: &Config, name: String, bytes: u64, verify: Option<VerifyMode>) -> FlowSpec {
    let lines = bytes.div_ceil(LINE_BYTES).max(1);
    let (num, den) = match verify {
        None => (1, 1),
        Some(_) => {
            let plain = stream_cycles(&cfg.npu, &[lines], None).cycles.max(1);
            (stream_cycles(&cfg.npu, &[lines], verify).cycles.max(plain), plain)
        }
    };
    let mut stages = vec![StageSpec::new("npu.dram")];
    if verify.is_some() {
        stages.push(StageSpec::new("npu.aes"));
    }
    stages.push(StageSpec::scaled("npu.pe", num, den));
    FlowSpec::new(name, bytes, CHUNK_BYTES, stages)
}

fn adam_flow(name: String, bytes: u64, c: &AdamCost) -> FlowSpec {
    let wb = c.weight_bytes.max(1);
    let mut stages = vec![StageSpec::scaled("cpu.dram", c.cost.dram_bytes().max(1), wb)];
    if c.cost.aes_ops > 0 {
        stages.push(StageSpec::scaled("cpu.aes", c.cost.aes_ops * LINE_BYTES, wb));
    }
    if c.cost.mac_ops > 0 {
        stages.push(StageSpec::scaled("cpu.mac", c.cost.mac_ops * LINE_BYTES, wb));
    }
    stages.push(StageSpec::new("cpu.alu"));
    FlowSpec::new(name, bytes, CHUNK_BYTES, stages)
}

/// Total length of the union of `[start, finish)` intervals.
pub fn union_len(mut iv: Vec<(u64, u64)>) -> u64 {
    iv.retain(|(a, b)| b > a);
    iv.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(u64, u64)> = None;
    for (a, b) in iv {
        cur = match cur {
            Some((s, e)) if a <= e => Some((s, e.max(b))),
            Some((s, e)) => {
                total += e - s;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    total + cur.map_or(0, |(s, e)| e - s)
}

/// Where an iteration's time goes. `comm_exposed` is time in which neither
/// processor computes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PhaseBreakdown {
    pub total: u64,
    pub npu: u64,
    pub cpu: u64,
    pub comm: u64,
    pub comm_exposed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ZeroTimeline {
    pub mode: SecurityMode,
    pub protocol: Protocol,
    pub iterations: u32,
    pub cycles_total: u64,
    /// Completion cycle of each iteration's last weight upload.
    pub iteration_end: Vec<u64>,
    pub phases: PhaseBreakdown,
    pub bytes_link: u64,
    pub bytes_aes_transfer: u64,
    pub adam: AdamCost,
}

impl ZeroTimeline {
    pub fn metrics(&self) -> Metrics {
        let mut m = Metrics::default();
        m.set("iterations", u64::from(self.iterations));
        m.set("cycles_total", self.cycles_total);
        m.set("cycles_npu", self.phases.npu);
        m.set("cycles_cpu", self.phases.cpu);
        m.set("cycles_comm", self.phases.comm);
        m.set("cycles_comm_exposed", self.phases.comm_exposed);
        m.set("bytes_link", self.bytes_link);
        m.set("bytes_aes_transfer", self.bytes_aes_transfer);
        m.set("adam_dram_bytes", self.adam.cost.dram_bytes());
        m.set("adam_metadata_bytes", self.adam.cost.metadata_bytes());
        m.set("adam_reads", self.adam.reads);
        m.set("adam_hit_in", self.adam.hit_in);
        m.set("adam_hit_boundary", self.adam.hit_boundary);
        m
    }
}

/// Times `cfg.workload.iterations` training iterations under `mode`, using
/// a measured optimizer cost.
pub fn zero_timeline(cfg: &Config, mode: SecurityMode, adam: &AdamCost) -> Result<ZeroTimeline> {
    let layers: Vec<u64> = cfg.workload.tensor_bytes.iter().map(|b| b.div_ceil(LINE_BYTES) * LINE_BYTES).collect();
    let n = layers.len();
    let verify = npu_verify(cfg, mode)?;
    let protocol = transfer_protocol(mode);
    let reuse = cfg.workload.npu_reuse.max(1);
    let mut sim = FlowSim::new(platform_ledger(cfg));
    let mut npu_ids = Vec::new();
    let mut cpu_ids = Vec::new();
    let mut comm_ids = Vec::new();
    let mut ends = Vec::new();
    let mut bytes_link = 0;
    let mut bytes_aes = 0;
    let mut weights_ready: Vec<Option<FlowId>> = vec![None; n];
    let mut prev_npu: Option<FlowId> = None;
    for it in 0..cfg.workload.iterations {
        for (j, &wb) in layers.iter().enumerate() {
            let deps: Vec<FlowId> = prev_npu.into_iter().chain(weights_ready[j]).collect();
            let f = sim.add(npu_flow(cfg, format!("i{it}.fwd{j}"), wb * reuse, verify).after(&deps));
            npu_ids.push(f);
            prev_npu = Some(f);
        }
        let mut prev_adam: Option<FlowId> = None;
        for j in (0..n).rev() {
            let wb = layers[j];
            let deps: Vec<FlowId> = prev_npu.into_iter().collect();
            let b = sim.add(npu_flow(cfg, format!("i{it}.bwd{j}"), 2 * wb * reuse, verify).after(&deps));
            npu_ids.push(b);
            prev_npu = Some(b);
            let gp = plan_transfer(cfg, protocol, Direction::NpuToCpu, wb, &format!("i{it}.grad{j}"));
            let first = sim.len();
            let g = add_plan(&mut sim, &gp, 0, &[b]);
            comm_ids.extend((first..=g.0).map(FlowId));
            let adeps: Vec<FlowId> = std::iter::once(g).chain(prev_adam).collect();
            let a = sim.add(adam_flow(format!("i{it}.adam{j}"), wb, adam).after(&adeps));
            cpu_ids.push(a);
            prev_adam = Some(a);
            let wp = plan_transfer(cfg, protocol, Direction::CpuToNpu, wb, &format!("i{it}.weight{j}"));
            let first = sim.len();
            let w = add_plan(&mut sim, &wp, 0, &[a]);
            comm_ids.extend((first..=w.0).map(FlowId));
            weights_ready[j] = Some(w);
            bytes_link += gp.report.bytes_link + wp.report.bytes_link;
            bytes_aes += gp.report.bytes_aes + wp.report.bytes_aes;
        }
        ends.push(weights_ready.iter().flatten().copied().collect::<Vec<_>>());
    }
    sim.run()?;
    let span = |ids: &[FlowId]| union_len(ids.iter().map(|&i| (sim.result(i).start, sim.result(i).finish)).collect());
    let iteration_end: Vec<u64> =
        ends.iter().map(|ids| ids.iter().map(|&i| sim.result(i).finish).max().unwrap_or(0)).collect();
    let total = iteration_end.last().copied().unwrap_or(0);
    let compute: Vec<FlowId> = npu_ids.iter().chain(&cpu_ids).copied().collect();
    let phases = PhaseBreakdown {
        total,
        npu: span(&npu_ids),
        cpu: span(&cpu_ids),
        comm: span(&comm_ids),
        comm_exposed: total - span(&compute),
    };
    Ok(ZeroTimeline {
        mode,
        protocol,
        iterations: cfg.workload.iterations,
        cycles_total: total,
        iteration_end,
        phases,
        bytes_link,
        bytes_aes_transfer: bytes_aes,
        adam: adam.clone(),
    })
}

/// Measures the optimizer's memory cost under `mode`, then times the loop.
pub fn run_zero_offload(cfg: &Config, mode: SecurityMode) -> Result<ZeroTimeline> {
    let adam = measure_adam(cfg, mode)?;
    zero_timeline(cfg, mode, &adam)
}

/// Gradient offload during one backward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GradExchange {
    pub protocol: Protocol,
    /// Backward compute end when no transfer runs.
    pub compute_end: u64,
    pub last_arrival: u64,
    /// Transfer time not hidden behind backward compute.
    pub exposed: u64,
    pub bytes_link: u64,
    pub bytes_aes: u64,
}

/// Runs a protected backward pass on the NPU, sending each layer's gradient
/// as soon as it is produced.
pub fn gradient_exchange(cfg: &Config, protocol: Protocol) -> Result<GradExchange> {
    let verify = npu_verify(cfg, SecurityMode::TensorTee)?;
    let layers: Vec<u64> = cfg.workload.tensor_bytes.iter().map(|b| b.div_ceil(LINE_BYTES) * LINE_BYTES).collect();
    let reuse = cfg.workload.npu_reuse.max(1);
    let build = |with_transfers: bool| -> Result<(u64, u64, u64, u64)> {
        let mut sim = FlowSim::new(platform_ledger(cfg));
        let mut prev: Option<FlowId> = None;
        let mut arrivals = Vec::new();
        let (mut link, mut aes) = (0, 0);
        for j in (0..layers.len()).rev() {
            let deps: Vec<FlowId> = prev.into_iter().collect();
            let b = sim.add(npu_flow(cfg, format!("bwd{j}"), 2 * layers[j] * reuse, verify).after(&deps));
            prev = Some(b);
            if with_transfers {
                let p = plan_transfer(cfg, protocol, Direction::NpuToCpu, layers[j], &format!("grad{j}"));
                arrivals.push(add_plan(&mut sim, &p, 0, &[b]));
                link += p.report.bytes_link;
                aes += p.report.bytes_aes;
            }
        }
        sim.run()?;
        let compute_end = prev.map_or(0, |b| sim.result(b).finish);
        let last = arrivals.iter().map(|&a| sim.result(a).finish).max().unwrap_or(compute_end);
        Ok((compute_end, last, link, aes))
    };
    let (compute_end, _, _, _) = build(false)?;
    let (_, last_arrival, bytes_link, bytes_aes) = build(true)?;
    Ok(GradExchange {
        protocol,
        compute_end,
        last_arrival,
        exposed: last_arrival.saturating_sub(compute_end),
        bytes_link,
        bytes_aes,
    })
}

// ---------------------------------------------------------------------------
// Functional toy run
// ---------------------------------------------------------------------------

/// A one-layer instance small enough to execute functionally.
pub fn toy_config(cfg: &Config) -> Config {
    let mut c = cfg.clone();
    c.workload.tensor_bytes = vec![64 * 1024];
    c.workload.threads = cfg.workload.threads.clamp(1, 8);
    c.workload.iterations = 3;
    c
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToyRun {
    pub mode: SecurityMode,
    pub iterations: u32,
    /// Final plaintext weights of every layer, concatenated.
    #[serde(skip)]
    pub weights: Vec<u8>,
    pub cpu_cost: CostReport,
    pub npu_faults: u32,
    pub link_bytes: u64,
}

fn random_lines(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<Line> {
    (0..n)
        .map(|_| {
            let mut l = [0u8; 64];
            for i in 0..F32S {
                put_f32(&mut l, i, rng.gen_range(-scale..scale));
            }
            l
        })
        .collect()
}

/// NPU id of a layer's input batch; never leaves the NPU.
fn batch_id(j: usize) -> u32 {
    0x8000_0000 | j as u32
}

/// Gradient kernel: `g = (w - x) / 2` lane by lane.
fn grad_kernel(inputs: &[Vec<Line>]) -> Vec<Line> {
    inputs[0]
        .iter()
        .zip(&inputs[1])
        .map(|(w, x)| {
            let mut g = [0u8; 64];
            for i in 0..F32S {
                put_f32(&mut g, i, 0.5 * (get_f32(w, i) - get_f32(x, i)));
            }
            g
        })
        .collect()
}

fn to_lines(bytes: &[u8]) -> Vec<Line> {
    bytes.chunks(LINE_BYTES as usize).map(|c| c.try_into().expect("whole lines")).collect()
}

/// Executes `cfg.workload.iterations` training iterations with real data
/// through the mode's CPU memory path, NPU model and transfer protocol.
pub fn run_toy(cfg: &Config, mode: SecurityMode) -> Result<ToyRun> {
    let layout = Layout::adam(&cfg.workload.tensor_bytes);
    let mut session = Session::from_seed(cfg.crypto.seed)?;
    let cpu_key = match mode {
        SecurityMode::NonSecure => crate::crypto::KeyMaterial::from_seed(cfg.crypto.seed),
        _ => session.cpu_key()?.clone(),
    };
    let mut cpu = CpuTee::with_key(cfg, mode, cpu_key, layout.base, layout.span_lines());
    let npu_mode = npu_verify(cfg, mode)?.unwrap_or(VerifyMode::DelayedTensor);
    let mut npu = NpuTee::from_config(session.npu_key()?.clone(), &cfg.npu, npu_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.crypto.seed);
    for j in 0..layout.n_params() {
        let w = *layout.param(j, Role::Weight);
        let g = *layout.param(j, Role::Grad);
        let n = w.lines as usize;
        cpu.register_tensor(w.base, n, u64::from(w.id))?;
        cpu.register_tensor(g.base, n, u64::from(g.id))?;
        let init = random_lines(&mut rng, n, 0.05);
        cpu.write_bytes(w.base, &init.concat())?;
        npu.register_tensor(w.id, n)?;
        npu.register_tensor(g.id, n)?;
        npu.register_tensor(batch_id(j), n)?;
        npu.store_tensor(batch_id(j), &random_lines(&mut rng, n, 0.05), None)?;
    }
    cpu.reset_cost();
    let mut p = AdamParams::from_config(cfg);
    p.iterations = 1;
    p.grad_transfers = false;
    let (_, step_trace) = gen_adam_trace(&p);
    let h = AdamHyper::default();
    let mut step = 1;
    let mut link_bytes = 0u64;
    for _ in 0..cfg.workload.iterations {
        for j in 0..layout.n_params() {
            let w = *layout.param(j, Role::Weight);
            let n = w.lines as usize;
            link_bytes += w.bytes();
            match mode {
                SecurityMode::NonSecure => {
                    let bytes = cpu.read_bytes(w.base, n)?;
                    npu.store_tensor(w.id, &to_lines(&bytes), None)?;
                }
                SecurityMode::SgxMgx => {
                    let wire = transfer::staged_send_cpu(&mut session, &mut cpu, w.id, w.base, n)?;
                    transfer::staged_recv_npu(&mut session, &mut npu, &wire)?;
                }
                SecurityMode::TensorTee => {
                    let wire = transfer::direct_send_cpu(&mut session, &mut cpu, w.id, w.base, n)?;
                    transfer::direct_recv_npu(&mut session, &mut npu, &wire)?;
                }
            }
        }
        for j in (0..layout.n_params()).rev() {
            let w = *layout.param(j, Role::Weight);
            let g = *layout.param(j, Role::Grad);
            let faults = npu.run_kernel(&[w.id, batch_id(j)], g.id, grad_kernel)?;
            if let Some(f) = faults.into_iter().next() {
                return Err(f.into());
            }
            link_bytes += g.bytes();
            match mode {
                SecurityMode::NonSecure => {
                    let load = npu.load_tensor_stream(g.id)?;
                    cpu.write_bytes(g.base, &load.lines.concat())?;
                }
                SecurityMode::SgxMgx => {
                    let (wire, _) = transfer::staged_send_npu(&mut session, &mut npu, g.id)?;
                    transfer::staged_recv_cpu(&mut session, &mut cpu, &wire, g.base)?;
                }
                SecurityMode::TensorTee => {
                    let (wire, _) = transfer::direct_send_npu(&mut session, &mut npu, g.id)?;
                    transfer::direct_recv_cpu(&mut session, &mut cpu, &wire, g.base)?;
                }
            }
        }
        step = execute_adam(&mut cpu, &layout, &step_trace, step, &h)?;
    }
    let mut weights = Vec::new();
    for j in 0..layout.n_params() {
        let w = layout.param(j, Role::Weight);
        weights.extend(cpu.read_bytes(w.base, w.lines as usize)?);
    }
    Ok(ToyRun {
        mode,
        iterations: cfg.workload.iterations,
        weights,
        cpu_cost: *cpu.cost(),
        npu_faults: npu.faults().count,
        link_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_line_matches_scalar_reference() {
        let h = AdamHyper::default();
        let (mut w, mut m, mut v, mut g) = ([0u8; 64], [0u8; 64], [0u8; 64], [0u8; 64]);
        for i in 0..F32S {
            put_f32(&mut w, i, i as f32 * 0.1);
            put_f32(&mut g, i, 1.0 - i as f32 * 0.2);
        }
        adam_line(&mut w, &g, &mut m, &mut v, 1, &h);
        for i in 0..F32S {
            // First step: m_hat = g, v_hat = g^2, so w moves by lr * sign(g).
            let gi = 1.0 - i as f32 * 0.2;
            let want = i as f32 * 0.1 - 1e-3 * gi / (gi.abs() + 1e-8);
            assert!((get_f32(&w, i) - want).abs() < 1e-6, "lane {i}");
        }
    }

    #[test]
    fn union_len_merges_overlaps() {
        assert_eq!(union_len(vec![(0, 10), (5, 20), (30, 40), (40, 41), (7, 7)]), 31);
        assert_eq!(union_len(vec![]), 0);
    }

    #[test]
    fn toy_weights_agree_across_modes() {
        let cfg = toy_config(&Config::default());
        let runs: Vec<ToyRun> = SecurityMode::ALL.iter().map(|&m| run_toy(&cfg, m).unwrap()).collect();
        assert!(runs.iter().all(|r| r.weights == runs[0].weights));
        assert!(runs.iter().all(|r| r.npu_faults == 0));
        // Weights moved.
        let mut c2 = cfg.clone();
        c2.workload.iterations = 0;
        assert_ne!(run_toy(&c2, SecurityMode::NonSecure).unwrap().weights, runs[0].weights);
    }

    #[test]
    fn timeline_orders_modes() {
        let mut cfg = Config::default();
        cfg.workload.tensor_bytes = vec![256 << 10, 512 << 10];
        cfg.workload.iterations = 2;
        let t: Vec<ZeroTimeline> = SecurityMode::ALL
            .iter()
            .map(|&m| zero_timeline(&cfg, m, &measure_adam(&cfg, m).unwrap()).unwrap())
            .collect();
        assert!(t[0].cycles_total <= t[2].cycles_total);
        assert!(t[2].cycles_total < t[1].cycles_total);
        assert_eq!(t[2].bytes_aes_transfer, 0);
        assert_eq!(t[1].bytes_aes_transfer, 4 * t[1].bytes_link);
        assert_eq!(t[0].iteration_end.len(), 2);
    }

    #[test]
    fn direct_gradients_hide_behind_backward() {
        let cfg = Config::default();
        let d = gradient_exchange(&cfg, Protocol::Direct).unwrap();
        let b = gradient_exchange(&cfg, Protocol::Baseline).unwrap();
        assert!(d.exposed < b.exposed);
        assert_eq!(d.bytes_aes, 0);
    }
}
