//! NPU enclave: per-tensor VNs generated on chip, tensor-wise XOR MACs with
//! delayed verification, poison tracking and verification barriers, an
//! immediately verified code path, and a block-MAC baseline.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::NpuConfig;
use crate::crypto::{
    decrypt_block, encrypt_block, mac_block, mac_xor_aggregate, CipherBlock, CounterBinding, KeyMaterial, Line, MacTag,
    VersionNumber, LINE_BYTES,
};
use crate::error::{Error, IntegrityFault, Result};
use crate::sim::Resource;

/// Bytes of one stored MAC (56-bit tag).
pub const MAC_STORAGE_BYTES: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerifyMode {
    /// Stall compute on a block until its MAC verifies.
    Blocking(u64),
    /// Release lines immediately; verify once per tensor at stream end.
    DelayedTensor,
}

impl VerifyMode {
    pub const MIN_GRANULARITY: u64 = 64;
    pub const MAX_GRANULARITY: u64 = 4096;

    /// Accepts `delayed`, `<bytes>` or `blocking:<bytes>`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "delayed" || t == "delayed-tensor" {
            return Ok(VerifyMode::DelayedTensor);
        }
        let num = t.strip_prefix("blocking:").or_else(|| t.strip_prefix("blocking-")).unwrap_or(&t);
        let num = num.trim_end_matches('b');
        let g = match num.strip_suffix('k') {
            Some(k) => k.parse::<u64>().map(|v| v * 1024),
            None => num.parse::<u64>(),
        }
        .map_err(|_| Error::Config(format!("mode.npu_verify: cannot parse {s:?}")))?;
        Self::blocking(g)
    }

    pub fn blocking(g: u64) -> Result<Self> {
        if !g.is_power_of_two() || !(Self::MIN_GRANULARITY..=Self::MAX_GRANULARITY).contains(&g) {
            return Err(Error::Config(format!("mode.npu_verify: granularity {g} not a power of two in 64..=4096")));
        }
        Ok(VerifyMode::Blocking(g))
    }

    /// Every blocking granularity from 64 B to 4 KiB.
    pub fn all_blocking() -> Vec<VerifyMode> {
        (6..=12).map(|s| VerifyMode::Blocking(1 << s)).collect()
    }

    pub fn block_lines(&self) -> Option<u64> {
        match self {
            VerifyMode::Blocking(g) => Some(g / LINE_BYTES),
            VerifyMode::DelayedTensor => None,
        }
    }

    /// Off-chip MAC storage for tensors of the given sizes.
    pub fn mac_storage_bytes(&self, tensor_bytes: &[u64]) -> u64 {
        match self {
            VerifyMode::DelayedTensor => MAC_STORAGE_BYTES * tensor_bytes.len() as u64,
            VerifyMode::Blocking(g) => tensor_bytes.iter().map(|b| MAC_STORAGE_BYTES * b.div_ceil(*g)).sum(),
        }
    }
}

impl fmt::Display for VerifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyMode::DelayedTensor => write!(f, "delayed"),
            VerifyMode::Blocking(g) => write!(f, "blocking-{g}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Stream pipeline timing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TensorTiming {
    pub tensor: usize,
    pub lines: u64,
    /// Compute cycles lost waiting for verification beyond decrypted-data arrival.
    pub stall_cycles: u64,
    /// Last line fetched to tensor verification complete.
    pub verify_cycles: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StreamReport {
    /// NPU cycles until the last compute and the last verification finish.
    pub cycles: u64,
    pub compute_done: u64,
    pub stall_cycles: u64,
    pub data_bytes: u64,
    pub mac_bytes: u64,
    pub tensors: Vec<TensorTiming>,
}

impl StreamReport {
    pub fn overhead_vs(&self, plain: &StreamReport) -> f64 {
        self.cycles as f64 / plain.cycles as f64 - 1.0
    }
}

/// Streams tensors of `tensor_lines` lines through fetch, decrypt,
/// verification and the PE array. `mode == None` is the unprotected run.
pub fn stream_cycles(cfg: &NpuConfig, tensor_lines: &[u64], mode: Option<VerifyMode>) -> StreamReport {
    let mut dram = Resource::from_bandwidth("npu.dram", cfg.dram_mbps, cfg.freq_mhz, cfg.dram_latency);
    let mut aes: Vec<Resource> = (0..cfg.aes_engines.max(1))
        .map(|i| Resource::from_bandwidth(format!("npu.aes[{i}]"), cfg.aes_mbps, cfg.freq_mhz, cfg.aes_latency))
        .collect();
    let mut mac = Resource::from_bandwidth("npu.mac", cfg.aes_mbps, cfg.freq_mhz, cfg.mac_latency);
    let buffer_lines = cfg.stream_buffer_bytes / LINE_BYTES;
    let block = mode.and_then(|m| m.block_lines()).unwrap_or(1);
    let window = buffer_lines.max(block) as usize;

    let total: u64 = tensor_lines.iter().sum();
    let mut compute_start: Vec<u64> = Vec::with_capacity(total as usize);
    let mut compute_end = 0u64;
    let mut report = StreamReport::default();
    let mut last_verify = 0u64;
    let mut next_line = 0usize;

    for (t, &n) in tensor_lines.iter().enumerate() {
        let mut timing = TensorTiming { tensor: t, lines: n, ..Default::default() };
        let mut tensor_mac_ready = 0u64;
        let mut last_fetch = 0u64;
        let mut first = 0u64;
        while first < n {
            let len = block.min(n - first);
            let mut fetched = Vec::with_capacity(len as usize);
            let mut block_mac_ready = 0u64;
            for j in 0..len {
                let i = next_line + j as usize;
                let issue = if i >= window { compute_start[i - window] } else { 0 };
                let mut bytes = LINE_BYTES;
                if j == 0 && mode.is_some_and(|m| m.block_lines().is_some()) {
                    bytes += MAC_STORAGE_BYTES + 1;
                    report.mac_bytes += MAC_STORAGE_BYTES + 1;
                }
                report.data_bytes += LINE_BYTES;
                let fetch_done = dram.reserve(bytes, issue).ready;
                last_fetch = last_fetch.max(fetch_done);
                let data_ready = match mode {
                    None => fetch_done,
                    Some(_) => {
                        // On-chip VNs let the pad be generated as soon as the request issues.
                        let eng = aes.iter_mut().min_by_key(|r| r.busy_until()).unwrap();
                        let pad = eng.reserve(LINE_BYTES, issue).ready;
                        let ready = fetch_done.max(pad) + 1;
                        let m = mac.reserve(LINE_BYTES, fetch_done).ready;
                        block_mac_ready = block_mac_ready.max(m);
                        ready
                    }
                };
                fetched.push(data_ready);
            }
            tensor_mac_ready = tensor_mac_ready.max(block_mac_ready);
            let block_ready = block_mac_ready + cfg.compare_latency;
            for &data_ready in &fetched {
                let ready = match mode {
                    Some(VerifyMode::Blocking(_)) => block_ready.max(data_ready),
                    _ => data_ready,
                };
                let start = ready.max(compute_end);
                timing.stall_cycles += start.saturating_sub(data_ready.max(compute_end));
                compute_start.push(start);
                compute_end = start + cfg.compute_cycles_per_line;
            }
            next_line += len as usize;
            first += len;
        }
        if mode.is_some() {
            let verify_done = tensor_mac_ready + cfg.compare_latency;
            timing.verify_cycles = verify_done.saturating_sub(last_fetch);
            last_verify = last_verify.max(verify_done);
        }
        report.stall_cycles += timing.stall_cycles;
        report.tensors.push(timing);
    }
    report.compute_done = compute_end;
    report.cycles = compute_end.max(last_verify);
    report
}

// ---------------------------------------------------------------------------
// Functional model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub tensor_id: u32,
    pub base: u64,
    pub n_lines: usize,
    pub vn: VersionNumber,
    pub stored_mac: MacTag,
    pub poison: bool,
    /// Verdict of a load whose verification has not been published yet.
    pub pending: Option<bool>,
    pub running_xor: MacTag,
    /// Last verification failed; data must be re-transferred.
    pub failed: bool,
    inputs: Vec<u32>,
    has_data: bool,
    /// Ground-truth provenance: bytes derive from tampered ciphertext.
    tainted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FaultCounter {
    pub count: u32,
    pub threshold: u32,
}

/// Result of streaming one tensor into the PE array.
#[derive(Debug, Clone)]
pub struct StreamLoad {
    /// Lines released to compute (all of them in delayed mode).
    pub lines: Vec<Line>,
    pub fault: Option<IntegrityFault>,
}

/// A tensor leaving the NPU enclave.
#[derive(Debug, Clone)]
pub struct OutboundTensor {
    pub tensor_id: u32,
    pub cipher: Vec<Line>,
    pub vn: VersionNumber,
    pub mac: MacTag,
    /// Ground truth for escape-proofing checks.
    pub tainted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NpuStats {
    pub lines_loaded: u64,
    pub lines_stored: u64,
    pub delayed_verifications: u64,
    pub block_verifications: u64,
    pub code_fetches: u64,
    pub barrier_waits: u64,
    pub cancelled_sends: u64,
    pub sends: u64,
    pub escape_violations: u64,
    pub inst_in_delayed_queue: u64,
}

#[derive(Debug, Clone)]
pub struct NpuTee {
    key: KeyMaterial,
    mode: VerifyMode,
    device: Vec<Line>,
    block_macs: BTreeMap<(u32, u64), MacTag>,
    records: BTreeMap<u32, TensorRecord>,
    code_base: u64,
    code: Vec<Line>,
    code_macs: Vec<MacTag>,
    faults: FaultCounter,
    retransfer: Vec<u32>,
    /// Entries queued for delayed verification: (tensor id, is_inst).
    delayed_queue: Vec<(u32, bool)>,
    pub stats: NpuStats,
}

const CODE_BASE: u64 = 0xC0DE_0000;

impl NpuTee {
    pub fn new(key: KeyMaterial, mode: VerifyMode, fault_threshold: u32) -> Self {
        NpuTee {
            key,
            mode,
            device: Vec::new(),
            block_macs: BTreeMap::new(),
            records: BTreeMap::new(),
            code_base: CODE_BASE,
            code: Vec::new(),
            code_macs: Vec::new(),
            faults: FaultCounter { count: 0, threshold: fault_threshold },
            retransfer: Vec::new(),
            delayed_queue: Vec::new(),
            stats: NpuStats::default(),
        }
    }

    pub fn from_config(key: KeyMaterial, cfg: &NpuConfig, mode: VerifyMode) -> Self {
        Self::new(key, mode, cfg.fault_threshold)
    }

    pub fn mode(&self) -> VerifyMode {
        self.mode
    }

    pub fn faults(&self) -> FaultCounter {
        self.faults
    }

    pub fn record(&self, id: u32) -> Result<&TensorRecord> {
        self.records.get(&id).ok_or(Error::UnknownTensor(id))
    }

    fn record_mut(&mut self, id: u32) -> Result<&mut TensorRecord> {
        self.records.get_mut(&id).ok_or(Error::UnknownTensor(id))
    }

    /// Ground-truth provenance of a tensor's current bytes.
    pub fn is_tainted(&self, id: u32) -> Result<bool> {
        Ok(self.record(id)?.tainted)
    }

    /// Re-transfer requests emitted after verification failures.
    pub fn take_retransfer_requests(&mut self) -> Vec<u32> {
        std::mem::take(&mut self.retransfer)
    }

    /// Allocates device memory for a tensor known from the workload.
    pub fn register_tensor(&mut self, tensor_id: u32, n_lines: usize) -> Result<u64> {
        if n_lines == 0 {
            return Err(Error::EmptyTensor);
        }
        if self.records.contains_key(&tensor_id) {
            return Err(Error::Protocol(format!("tensor {tensor_id} already registered")));
        }
        let base = self.device.len() as u64 * LINE_BYTES;
        self.device.resize(self.device.len() + n_lines, [0; 64]);
        self.records.insert(
            tensor_id,
            TensorRecord {
                tensor_id,
                base,
                n_lines,
                vn: VersionNumber::ZERO,
                stored_mac: MacTag::ZERO,
                poison: false,
                pending: None,
                running_xor: MacTag::ZERO,
                failed: false,
                inputs: Vec::new(),
                has_data: false,
                tainted: false,
            },
        );
        Ok(base)
    }

    fn first_line(&self, id: u32) -> Result<usize> {
        Ok((self.record(id)?.base / LINE_BYTES) as usize)
    }

    fn binding(id: u32, line: usize) -> CounterBinding {
        CounterBinding::tensor(u64::from(id), line as u64 * LINE_BYTES)
    }

    fn refresh_block_macs(&mut self, id: u32, tags: &[MacTag]) {
        if let Some(b) = self.mode.block_lines() {
            for (k, chunk) in tags.chunks(b as usize).enumerate() {
                let agg = mac_xor_aggregate(chunk).expect("non-empty chunk");
                self.block_macs.insert((id, k as u64), agg);
            }
        }
    }

    /// Writes a tensor produced on the NPU: vn+1, re-encrypt, new aggregate MAC.
    /// `order` permutes the line write order (tile order); the result is
    /// order independent.
    pub fn store_tensor(&mut self, id: u32, plain: &[Line], order: Option<&[usize]>) -> Result<()> {
        let first = self.first_line(id)?;
        let rec = self.record(id)?;
        if plain.len() != rec.n_lines {
            return Err(Error::Protocol(format!("tensor {id}: {} lines stored into {}", plain.len(), rec.n_lines)));
        }
        let vn = rec.vn.next();
        let seq: Vec<usize> = match order {
            Some(o) => o.to_vec(),
            None => (0..plain.len()).collect(),
        };
        let mut tags = vec![MacTag::ZERO; plain.len()];
        let mut acc = MacTag::ZERO;
        for i in seq {
            let c = encrypt_block(&plain[i], Self::binding(id, i), vn, &self.key);
            let t = mac_block(&c, &self.key);
            acc ^= t;
            tags[i] = t;
            self.device[first + i] = c.bytes;
        }
        self.refresh_block_macs(id, &tags);
        self.stats.lines_stored += plain.len() as u64;
        let rec = self.record_mut(id)?;
        rec.vn = vn;
        rec.stored_mac = acc;
        rec.has_data = true;
        rec.failed = false;
        rec.poison = false;
        rec.pending = None;
        rec.tainted = false;
        rec.inputs.clear();
        Ok(())
    }

    /// Accepts ciphertext moved verbatim from the CPU enclave. Verification
    /// is lazy: the tensor stays poisoned until a load verifies it.
    pub fn receive_tensor(&mut self, id: u32, cipher: &[Line], vn: VersionNumber, mac: MacTag) -> Result<()> {
        let first = self.first_line(id)?;
        let rec = self.record(id)?;
        if cipher.len() != rec.n_lines {
            return Err(Error::Protocol(format!(
                "tensor {id}: received {} lines, expected {}",
                cipher.len(),
                rec.n_lines
            )));
        }
        if vn <= rec.vn && rec.has_data {
            return Err(Error::Protocol(format!("tensor {id}: stale VN {}", vn.get())));
        }
        self.device[first..first + cipher.len()].copy_from_slice(cipher);
        if self.mode.block_lines().is_some() {
            // Block MACs are derived from the ciphertext on arrival.
            let tags: Vec<MacTag> = cipher
                .iter()
                .enumerate()
                .map(|(i, b)| mac_block(&CipherBlock { bytes: *b, binding: Self::binding(id, i), vn }, &self.key))
                .collect();
            self.refresh_block_macs(id, &tags);
        }
        let rec = self.record_mut(id)?;
        rec.vn = vn;
        rec.stored_mac = mac;
        rec.has_data = true;
        rec.failed = false;
        rec.poison = true;
        rec.pending = None;
        rec.tainted = false;
        rec.inputs.clear();
        Ok(())
    }

    /// Streams a tensor into compute. In delayed mode every line is released
    /// and the verdict stays pending until [`Self::settle`]; in blocking mode
    /// a block is released only after its MAC verifies.
    pub fn load_tensor_stream(&mut self, id: u32) -> Result<StreamLoad> {
        let first = self.first_line(id)?;
        let rec = self.record(id)?.clone();
        if !rec.has_data || rec.failed {
            return Err(Error::Protocol(format!("tensor {id} has no valid data")));
        }
        self.stats.lines_loaded += rec.n_lines as u64;
        let block = self.mode.block_lines();
        let mut lines = Vec::with_capacity(rec.n_lines);
        let mut acc = MacTag::ZERO;
        let mut block_acc = MacTag::ZERO;
        let mut block_buf = Vec::new();
        for i in 0..rec.n_lines {
            let c = CipherBlock { bytes: self.device[first + i], binding: Self::binding(id, i), vn: rec.vn };
            let t = mac_block(&c, &self.key);
            acc ^= t;
            let p = decrypt_block(&c, &self.key);
            match block {
                None => lines.push(p),
                Some(b) => {
                    block_acc ^= t;
                    block_buf.push(p);
                    if block_buf.len() as u64 == b || i + 1 == rec.n_lines {
                        self.stats.block_verifications += 1;
                        let k = (i as u64) / b;
                        if self.block_macs.get(&(id, k)) != Some(&block_acc) {
                            let fault = IntegrityFault::TensorMac { tensor_id: id };
                            self.fail(id)?;
                            return Ok(StreamLoad { lines, fault: Some(fault) });
                        }
                        lines.append(&mut block_buf);
                        block_acc = MacTag::ZERO;
                    }
                }
            }
        }
        if block.is_some() {
            let r = self.record_mut(id)?;
            r.poison = false;
            r.running_xor = acc;
            self.recompute_dependents(id);
            return Ok(StreamLoad { lines, fault: None });
        }
        self.delayed_queue.push((id, false));
        self.stats.delayed_verifications += 1;
        let ok = acc == rec.stored_mac;
        let r = self.record_mut(id)?;
        r.running_xor = acc;
        r.poison = true;
        r.pending = Some(ok);
        let fault = (!ok).then_some(IntegrityFault::TensorMac { tensor_id: id });
        Ok(StreamLoad { lines, fault })
    }

    fn fail(&mut self, id: u32) -> Result<()> {
        self.faults.count += 1;
        self.retransfer.push(id);
        let r = self.record_mut(id)?;
        r.failed = true;
        r.poison = true;
        r.pending = None;
        if self.faults.count > self.faults.threshold {
            return Err(Error::Halted { faults: self.faults.count, threshold: self.faults.threshold });
        }
        Ok(())
    }

    /// Publishes pending verification verdicts (the final MAC compares).
    /// Returns the faults raised.
    pub fn settle(&mut self, ids: Option<&[u32]>) -> Result<Vec<IntegrityFault>> {
        let targets: Vec<u32> = match ids {
            Some(ids) => ids.to_vec(),
            None => self.records.keys().copied().collect(),
        };
        let mut faults = Vec::new();
        for id in targets {
            let pending = self.record(id)?.pending;
            match pending {
                Some(true) => {
                    let r = self.record_mut(id)?;
                    r.pending = None;
                    if r.inputs.is_empty() {
                        r.poison = false;
                    }
                    self.delayed_queue.retain(|(t, _)| *t != id);
                    self.recompute_poison(id);
                    self.recompute_dependents(id);
                }
                Some(false) => {
                    self.delayed_queue.retain(|(t, _)| *t != id);
                    faults.push(IntegrityFault::TensorMac { tensor_id: id });
                    self.fail(id)?;
                    self.recompute_dependents(id);
                }
                None => {}
            }
        }
        Ok(faults)
    }

    fn recompute_poison(&mut self, id: u32) {
        let Some(r) = self.records.get(&id) else { return };
        if r.pending.is_some() || r.failed {
            return;
        }
        if r.inputs.is_empty() {
            return;
        }
        let p = r.inputs.iter().any(|i| self.records.get(i).is_none_or(|x| x.poison));
        self.records.get_mut(&id).unwrap().poison = p;
    }

    /// Re-derives poison of every tensor depending on `id`, transitively.
    fn recompute_dependents(&mut self, id: u32) {
        let mut work = vec![id];
        while let Some(cur) = work.pop() {
            let deps: Vec<u32> =
                self.records.values().filter(|r| r.inputs.contains(&cur)).map(|r| r.tensor_id).collect();
            for d in deps {
                let before = self.records[&d].poison;
                self.recompute_poison(d);
                if self.records[&d].poison != before {
                    work.push(d);
                }
            }
        }
    }

    /// Output poison = OR of input poison bits.
    pub fn propagate_poison(&mut self, inputs: &[u32], output: u32) -> Result<()> {
        let mut p = false;
        let mut taint = false;
        for i in inputs {
            let r = self.record(*i)?;
            p |= r.poison;
            taint |= r.tainted;
        }
        let o = self.record_mut(output)?;
        o.inputs = inputs.to_vec();
        o.poison = p;
        o.tainted = taint;
        Ok(())
    }

    /// Loads inputs, applies `f`, stores the output and propagates poison.
    pub fn run_kernel(
        &mut self,
        inputs: &[u32],
        output: u32,
        f: impl FnOnce(&[Vec<Line>]) -> Vec<Line>,
    ) -> Result<Vec<IntegrityFault>> {
        let mut data = Vec::with_capacity(inputs.len());
        let mut faults = Vec::new();
        for &i in inputs {
            let load = self.load_tensor_stream(i)?;
            if let Some(fl) = load.fault.clone() {
                if self.mode.block_lines().is_some() {
                    // Blocking mode stops at the failing block; the kernel never runs.
                    faults.push(fl);
                    return Ok(faults);
                }
            }
            data.push(load.lines);
        }
        let out = f(&data);
        self.store_tensor(output, &out, None)?;
        self.propagate_poison(inputs, output)?;
        Ok(faults)
    }

    /// Blocks until every listed tensor's verification is published; fails
    /// if any of them (or anything they derive from) is poisoned.
    pub fn verification_barrier(&mut self, ids: &[u32]) -> Result<()> {
        let mut closure = Vec::new();
        let mut stack = ids.to_vec();
        while let Some(id) = stack.pop() {
            if closure.contains(&id) {
                continue;
            }
            closure.push(id);
            stack.extend(self.record(id)?.inputs.iter().copied());
        }
        if closure.iter().any(|id| self.records[id].pending.is_some()) {
            self.stats.barrier_waits += 1;
        }
        // Inputs first so dependents recompute against final verdicts.
        closure.reverse();
        let faults = self.settle(Some(&closure))?;
        if let Some(f) = faults.into_iter().next() {
            return Err(f.into());
        }
        for id in ids {
            let r = self.record(*id)?;
            if r.poison || r.failed {
                return Err(IntegrityFault::TensorMac { tensor_id: *id }.into());
            }
        }
        Ok(())
    }

    /// Sends a tensor out of the enclave behind a verification barrier.
    pub fn send_tensor(&mut self, id: u32) -> Result<OutboundTensor> {
        if let Err(e) = self.verification_barrier(&[id]) {
            self.stats.cancelled_sends += 1;
            return Err(e);
        }
        let first = self.first_line(id)?;
        let r = self.record(id)?;
        let out = OutboundTensor {
            tensor_id: id,
            cipher: self.device[first..first + r.n_lines].to_vec(),
            vn: r.vn,
            mac: r.stored_mac,
            tainted: r.tainted,
        };
        self.stats.sends += 1;
        if out.tainted {
            self.stats.escape_violations += 1;
        }
        Ok(out)
    }

    // ---- code path ----

    /// Places a program in protected device memory; returns its base address.
    pub fn install_code(&mut self, lines: &[Line]) -> u64 {
        self.code.clear();
        self.code_macs.clear();
        for (i, p) in lines.iter().enumerate() {
            let pa = self.code_base + i as u64 * LINE_BYTES;
            let c = encrypt_block(p, CounterBinding::physical(pa), VersionNumber::new(1), &self.key);
            self.code_macs.push(mac_block(&c, &self.key));
            self.code.push(c.bytes);
        }
        self.code_base
    }

    /// Instruction fetch: verified per line before use, never delayed.
    pub fn fetch_code_line(&mut self, pa: u64) -> Result<Line> {
        self.stats.code_fetches += 1;
        let idx = pa
            .checked_sub(self.code_base)
            .filter(|o| o % LINE_BYTES == 0)
            .map(|o| (o / LINE_BYTES) as usize)
            .filter(|&i| i < self.code.len())
            .ok_or(Error::BadAddress(pa))?;
        let c = CipherBlock { bytes: self.code[idx], binding: CounterBinding::physical(pa), vn: VersionNumber::new(1) };
        if mac_block(&c, &self.key) != self.code_macs[idx] {
            self.faults.count += 1;
            return Err(IntegrityFault::CodeMac { addr: pa }.into());
        }
        Ok(decrypt_block(&c, &self.key))
    }

    /// Number of is_inst requests that reached the delayed queue (always 0).
    pub fn inst_in_delayed_queue(&self) -> usize {
        self.delayed_queue.iter().filter(|(_, inst)| *inst).count()
    }

    pub fn delayed_queue_len(&self) -> usize {
        self.delayed_queue.len()
    }

    // ---- adversary ----

    /// Flips one ciphertext bit of a tensor in device memory.
    pub fn tamper_tensor(&mut self, id: u32, line: usize, bit: u32) -> Result<()> {
        let first = self.first_line(id)?;
        let r = self.record_mut(id)?;
        if line >= r.n_lines {
            return Err(Error::BadAddress(r.base + line as u64 * LINE_BYTES));
        }
        r.tainted = true;
        let b = bit as usize % 512;
        self.device[first + line][b / 8] ^= 1 << (b % 8);
        Ok(())
    }

    pub fn tamper_code(&mut self, line: usize, bit: u32) {
        let b = bit as usize % 512;
        self.code[line][b / 8] ^= 1 << (b % 8);
    }

    /// Per-tensor metrics rows: tensor_id, mode, lines, stall_cycles,
    /// verify_cycles, faults.
    pub fn metrics_csv(&self, timing: &StreamReport) -> String {
        let mut out = String::from("tensor_id,mode,lines,stall_cycles,verify_cycles,faults\n");
        for (rec, t) in self.records.values().zip(timing.tensors.iter()) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                rec.tensor_id,
                self.mode,
                rec.n_lines,
                t.stall_cycles,
                t.verify_cycles,
                u32::from(rec.failed)
            ));
        }
        out
    }
}
