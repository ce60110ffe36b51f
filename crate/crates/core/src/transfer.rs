//! Inter-enclave tensor transfer between the CPU and NPU enclaves.
//!
//! Two protocols are modeled. The relay protocol decrypts in the sender
//! enclave, re-encrypts under the session key into untrusted staging memory,
//! moves it, then decrypts and re-encrypts again on the receiver. The direct
//! protocol moves enclave ciphertext verbatim and sends the tensor's VN, MAC
//! and address over a separate authenticated channel.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::cpu::CpuTee;
use crate::crypto::{measure, open, seal, KeyMaterial, Line, MacTag, VersionNumber, LINE_BYTES, MASK56};
use crate::error::{Error, IntegrityFault, Result};
use crate::npu::NpuTee;
use crate::sim::{FlowId, FlowSim, FlowSpec, Resource, ResourceLedger, StageSpec};

// ---------------------------------------------------------------------------
// Attestation and key exchange
// ---------------------------------------------------------------------------

/// Mersenne prime 2^61 - 1; the group for the abstract exchange.
const DH_P: u64 = (1 << 61) - 1;
const DH_G: u64 = 3;

fn mulmod(a: u64, b: u64) -> u64 {
    ((u128::from(a) * u128::from(b)) % u128::from(DH_P)) as u64
}

fn powmod(mut b: u64, mut e: u64) -> u64 {
    let mut r = 1;
    b %= DH_P;
    while e > 0 {
        if e & 1 == 1 {
            r = mulmod(r, b);
        }
        b = mulmod(b, b);
        e >>= 1;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Unattested,
    Attested,
    KeyEstablished,
}

/// An enclave image and its private exchange secret.
#[derive(Debug, Clone)]
pub struct Enclave {
    pub code: Vec<u8>,
    pub data: Vec<u8>,
    secret: u64,
}

impl Enclave {
    pub fn new(code: &[u8], data: &[u8], secret_seed: u64) -> Self {
        let secret = crate::crypto::mix64(secret_seed ^ 0x6468_5f73_6563) % (DH_P - 2) + 1;
        Enclave { code: code.to_vec(), data: data.to_vec(), secret }
    }

    pub fn report(&self, platform_key: u128) -> EnclaveReport {
        EnclaveReport {
            measurement: measure(platform_key, &self.code, &self.data),
            dh_public: powmod(DH_G, self.secret),
        }
    }

    fn shared(&self, peer_public: u64) -> u64 {
        powmod(peer_public, self.secret)
    }
}

/// What an enclave publishes: a platform-keyed measurement and its public
/// exchange value. Neither reveals the session key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveReport {
    pub measurement: u64,
    pub dh_public: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    CpuToNpu,
    NpuToCpu,
}

impl Direction {
    fn bit(self) -> u64 {
        match self {
            Direction::CpuToNpu => 0,
            Direction::NpuToCpu => 1 << 63,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::CpuToNpu => "cpu->npu",
            Direction::NpuToCpu => "npu->cpu",
        }
    }
}

/// Authenticated session between the two enclaves.
#[derive(Debug, Clone)]
pub struct Session {
    phase: Phase,
    platform_key: u128,
    cpu_report: Option<EnclaveReport>,
    npu_report: Option<EnclaveReport>,
    cpu_key: Option<KeyMaterial>,
    npu_key: Option<KeyMaterial>,
    send_seq: [u64; 2],
    recv_seq: [u64; 2],
    stage_seq: [u64; 2],
}

impl Session {
    pub fn new(platform_key: u128) -> Self {
        Session {
            phase: Phase::Unattested,
            platform_key,
            cpu_report: None,
            npu_report: None,
            cpu_key: None,
            npu_key: None,
            send_seq: [0; 2],
            recv_seq: [0; 2],
            stage_seq: [0; 2],
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn reports(&self) -> (Option<EnclaveReport>, Option<EnclaveReport>) {
        (self.cpu_report, self.npu_report)
    }

    /// Mutual report check against the expected measurements.
    pub fn attest(&mut self, cpu: &Enclave, npu: &Enclave, expect_cpu: u64, expect_npu: u64) -> Result<()> {
        let rc = cpu.report(self.platform_key);
        let rn = npu.report(self.platform_key);
        if rc.measurement != expect_cpu {
            return Err(Error::Attestation(format!(
                "CPU measurement {:#x} != expected {expect_cpu:#x}",
                rc.measurement
            )));
        }
        if rn.measurement != expect_npu {
            return Err(Error::Attestation(format!(
                "NPU measurement {:#x} != expected {expect_npu:#x}",
                rn.measurement
            )));
        }
        self.cpu_report = Some(rc);
        self.npu_report = Some(rn);
        self.phase = Phase::Attested;
        Ok(())
    }

    /// Each side combines its own secret with the peer's public value.
    pub fn exchange(&mut self, cpu: &Enclave, npu: &Enclave) -> Result<()> {
        let (Some(rc), Some(rn)) = (self.cpu_report, self.npu_report) else {
            return Err(Error::Attestation("key exchange before attestation".into()));
        };
        let kc = KeyMaterial::from_seed(cpu.shared(rn.dh_public));
        let kn = KeyMaterial::from_seed(npu.shared(rc.dh_public));
        if kc != kn {
            return Err(Error::Attestation("exchange produced different keys".into()));
        }
        self.cpu_key = Some(kc);
        self.npu_key = Some(kn);
        self.phase = Phase::KeyEstablished;
        Ok(())
    }

    /// Attests both enclaves against their honest measurements and runs the
    /// exchange.
    pub fn establish(
        platform_key: u128,
        cpu: &Enclave,
        npu: &Enclave,
        expect_cpu: u64,
        expect_npu: u64,
    ) -> Result<Self> {
        let mut s = Session::new(platform_key);
        s.attest(cpu, npu, expect_cpu, expect_npu)?;
        s.exchange(cpu, npu)?;
        Ok(s)
    }

    /// Deterministic honest setup derived from a seed.
    pub fn from_seed(seed: u64) -> Result<Self> {
        let (platform, cpu, npu) = default_enclaves(seed);
        let ec = measure(platform, &cpu.code, &cpu.data);
        let en = measure(platform, &npu.code, &npu.data);
        Session::establish(platform, &cpu, &npu, ec, en)
    }

    fn gate(&self) -> Result<()> {
        if self.phase != Phase::KeyEstablished {
            return Err(Error::Protocol(format!("session is {:?}; key exchange required", self.phase)));
        }
        Ok(())
    }

    /// The CPU-side copy of the session key.
    pub fn cpu_key(&self) -> Result<&KeyMaterial> {
        self.gate()?;
        Ok(self.cpu_key.as_ref().expect("established"))
    }

    pub fn npu_key(&self) -> Result<&KeyMaterial> {
        self.gate()?;
        Ok(self.npu_key.as_ref().expect("established"))
    }

    fn sender_key(&self, dir: Direction) -> Result<&KeyMaterial> {
        match dir {
            Direction::CpuToNpu => self.cpu_key(),
            Direction::NpuToCpu => self.npu_key(),
        }
    }

    fn receiver_key(&self, dir: Direction) -> Result<&KeyMaterial> {
        match dir {
            Direction::CpuToNpu => self.npu_key(),
            Direction::NpuToCpu => self.cpu_key(),
        }
    }

    /// Encrypts and tags a metadata message with the next sequence number.
    pub fn seal_metadata(&mut self, dir: Direction, msg: &MetadataMessage) -> Result<SealedMessage> {
        let key = self.sender_key(dir)?.clone();
        let d = dir.bit() as usize >> 63;
        let seq = self.send_seq[d];
        self.send_seq[d] += 1;
        Ok(SealedMessage { seq, bytes: seal(&key, seq | dir.bit(), &msg.encode()) })
    }

    /// Authenticates, checks ordering and decodes. Replayed, reordered or
    /// modified messages fail with a channel fault.
    pub fn open_metadata(&mut self, dir: Direction, m: &SealedMessage) -> Result<MetadataMessage> {
        let key = self.receiver_key(dir)?.clone();
        let d = dir.bit() as usize >> 63;
        if m.seq != self.recv_seq[d] {
            return Err(IntegrityFault::ChannelTamper.into());
        }
        let plain = open(&key, m.seq | dir.bit(), &m.bytes)?;
        let msg = MetadataMessage::decode(&plain)?;
        self.recv_seq[d] += 1;
        Ok(msg)
    }

    fn staging_nonce(&mut self, dir: Direction) -> u64 {
        // Staging nonces live in a separate range from metadata sequence numbers.
        let d = dir.bit() as usize >> 63;
        let n = self.stage_seq[d];
        self.stage_seq[d] += 1;
        n | dir.bit() | (1 << 62)
    }
}

/// Platform key and the two honest enclave images for a seed.
pub fn default_enclaves(seed: u64) -> (u128, Enclave, Enclave) {
    let platform =
        (u128::from(crate::crypto::mix64(seed ^ 0x706c_6174)) << 64) | u128::from(crate::crypto::mix64(seed));
    let cpu = Enclave::new(b"cpu-optimizer-enclave", b"adam", seed ^ 0xc9);
    let npu = Enclave::new(b"npu-training-enclave", b"fwd-bwd", seed ^ 0x9e);
    (platform, cpu, npu)
}

// ---------------------------------------------------------------------------
// Metadata message
// ---------------------------------------------------------------------------

/// Everything the receiver needs to decrypt and verify a direct transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataMessage {
    pub tensor_id: u32,
    pub base: u64,
    pub n_lines: u32,
    /// Line stride in bytes.
    pub stride: u32,
    pub vn: u64,
    pub mac: u64,
}

impl MetadataMessage {
    pub const WIRE_BYTES: usize = 36;
    /// Wire size after sealing.
    pub const SEALED_BYTES: u64 = Self::WIRE_BYTES as u64 + 8;

    pub fn encode(&self) -> [u8; Self::WIRE_BYTES] {
        let mut b = [0u8; Self::WIRE_BYTES];
        b[0..4].copy_from_slice(&self.tensor_id.to_le_bytes());
        b[4..12].copy_from_slice(&self.base.to_le_bytes());
        b[12..16].copy_from_slice(&self.n_lines.to_le_bytes());
        b[16..20].copy_from_slice(&self.stride.to_le_bytes());
        b[20..28].copy_from_slice(&self.vn.to_le_bytes());
        b[28..36].copy_from_slice(&self.mac.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() != Self::WIRE_BYTES {
            return Err(Error::Protocol(format!("metadata message of {} bytes", b.len())));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"));
        let m = MetadataMessage {
            tensor_id: u32_at(0),
            base: u64_at(4),
            n_lines: u32_at(12),
            stride: u32_at(16),
            vn: u64_at(20),
            mac: u64_at(28),
        };
        if m.vn > MASK56 || m.mac > MASK56 {
            return Err(Error::Protocol("VN or MAC exceeds 56 bits".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMessage {
    pub seq: u64,
    pub bytes: Vec<u8>,
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Unprotected copy, for the non-secure reference system.
    Plain,
    Baseline,
    Direct,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Plain => "plain",
            Protocol::Baseline => "baseline",
            Protocol::Direct => "direct",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub protocol: Protocol,
    /// Payload bytes on the direct (untrusted) link.
    pub bytes_link: u64,
    /// Bytes on the trusted metadata channel.
    pub bytes_meta: u64,
    /// Payload bytes processed by AES engines, both sides.
    pub bytes_aes: u64,
    /// Completion time alone on an idle platform (CPU cycles).
    pub cycles_total: u64,
    /// Completion time measured inside a contended schedule, if any.
    pub cycles_overlapped: u64,
    pub faults: u32,
}

impl TransferReport {
    pub const CSV_HEADER: &'static str = "protocol,bytes_link,bytes_aes,cycles_total,cycles_overlapped,faults";

    pub fn empty(protocol: Protocol) -> Self {
        TransferReport {
            protocol,
            bytes_link: 0,
            bytes_meta: 0,
            bytes_aes: 0,
            cycles_total: 0,
            cycles_overlapped: 0,
            faults: 0,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.protocol, self.bytes_link, self.bytes_aes, self.cycles_total, self.cycles_overlapped, self.faults
        )
    }
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

pub const CHUNK_BYTES: u64 = 4096;

/// Resource groups (all in CPU cycles): `cpu.dram`, `cpu.aes`, `cpu.mac`
/// (one per channel), `npu.dram`, `npu.aes` (per engine), `npu.pe`, `link`
/// and `meta`.
pub fn platform_ledger(cfg: &Config) -> ResourceLedger {
    let f = cfg.cpu.freq_mhz;
    let ch = cfg.cpu.dram_channels as usize;
    let mut l = ResourceLedger::new();
    l.add_group(
        "cpu.dram",
        ch,
        Resource::from_bandwidth("cpu.dram", cfg.cpu.dram_channel_mbps, f, cfg.cpu.dram_latency),
    );
    l.add_group("cpu.aes", ch, Resource::from_bandwidth("cpu.aes", cfg.cpu.aes_mbps, f, cfg.cpu.aes_latency));
    l.add_group("cpu.mac", ch, Resource::from_bandwidth("cpu.mac", cfg.cpu.aes_mbps, f, cfg.cpu.mac_latency));
    l.add_group(
        "npu.dram",
        1,
        Resource::from_bandwidth("npu.dram", cfg.npu.dram_mbps, f, cfg.npu_to_cpu(cfg.npu.dram_latency)),
    );
    l.add_group(
        "npu.aes",
        cfg.npu.aes_engines as usize,
        Resource::from_bandwidth("npu.aes", cfg.npu.aes_mbps, f, cfg.npu_to_cpu(cfg.npu.aes_latency)),
    );
    // PE array consumes one line per `compute_cycles_per_line` NPU cycles.
    let pe_mbps = LINE_BYTES * cfg.npu.freq_mhz / cfg.npu.compute_cycles_per_line.max(1);
    l.add_group("npu.pe", 1, Resource::from_bandwidth("npu.pe", pe_mbps, f, 0));
    l.add_group("link", 1, Resource::from_bandwidth("link", cfg.link.mbps, f, cfg.link.latency));
    l.add_group("meta", 1, Resource::from_bandwidth("meta", cfg.link.mbps, f, cfg.link.latency));
    let alu_mbps = u64::from(cfg.cpu.cores) * LINE_BYTES * f / cfg.cpu.adam_cycles_per_line.max(1);
    l.add_group("cpu.alu", 1, Resource::from_bandwidth("cpu.alu", alu_mbps, f, 0));
    l
}

struct Side {
    dram: &'static str,
    aes: &'static str,
    mac: &'static str,
    /// Metadata bytes per data byte, as (num, den) of total traffic.
    meta: (u64, u64),
}

fn sides(cfg: &Config, dir: Direction) -> (Side, Side) {
    // SGX-like CPU side: one MAC line and one VN line per 8 data lines.
    let cpu = Side { dram: "cpu.dram", aes: "cpu.aes", mac: "cpu.mac", meta: (10, 8) };
    let g = cfg.npu.mgx_mac_granularity.max(64);
    let npu = Side { dram: "npu.dram", aes: "npu.aes", mac: "npu.aes", meta: (g + crate::npu::MAC_STORAGE_BYTES, g) };
    match dir {
        Direction::CpuToNpu => (cpu, npu),
        Direction::NpuToCpu => (npu, cpu),
    }
}

/// Flow plan of one transfer; the last returned flow completes when the
/// transfer is usable by the receiver.
#[derive(Debug, Clone)]
pub struct TransferPlan {
    pub protocol: Protocol,
    pub flows: Vec<FlowSpec>,
    pub report: TransferReport,
}

/// Builds the flows of one transfer of `bytes` released at `release` after
/// `after`. Flow dependencies inside the plan are relative; [`add_plan`]
/// rebases them.
pub fn plan_transfer(cfg: &Config, protocol: Protocol, dir: Direction, bytes: u64, name: &str) -> TransferPlan {
    let (s, r) = sides(cfg, dir);
    let mut report = TransferReport::empty(protocol);
    if bytes == 0 {
        return TransferPlan { protocol, flows: vec![FlowSpec::join(name.to_string(), vec![])], report };
    }
    match protocol {
        Protocol::Plain => {
            let stages = vec![StageSpec::new(s.dram), StageSpec::new("link"), StageSpec::new(r.dram)];
            report.bytes_link = bytes;
            TransferPlan { protocol, flows: vec![FlowSpec::new(name.to_string(), bytes, CHUNK_BYTES, stages)], report }
        }
        Protocol::Baseline => {
            let stages = vec![
                StageSpec::scaled(s.dram, s.meta.0, s.meta.1),
                StageSpec::new(s.aes),
                StageSpec::new(s.aes),
                StageSpec::new(s.dram),
                StageSpec::new("link"),
                StageSpec::new(r.dram),
                StageSpec::new(r.aes),
                StageSpec::new(r.aes),
                StageSpec::scaled(r.dram, r.meta.0, r.meta.1),
            ];
            report.bytes_link = bytes;
            report.bytes_aes = 4 * bytes;
            TransferPlan { protocol, flows: vec![FlowSpec::new(name.to_string(), bytes, CHUNK_BYTES, stages)], report }
        }
        Protocol::Direct => {
            let mut stages = vec![StageSpec::new(s.dram), StageSpec::new("link"), StageSpec::new(r.dram)];
            if dir == Direction::NpuToCpu {
                // Eager receiver-side tensor MAC on the CPU.
                stages.push(StageSpec::new(r.mac));
            }
            report.bytes_link = bytes;
            report.bytes_meta = MetadataMessage::SEALED_BYTES;
            let payload = FlowSpec::new(format!("{name}.payload"), bytes, CHUNK_BYTES, stages);
            let meta = FlowSpec::new(
                format!("{name}.meta"),
                MetadataMessage::SEALED_BYTES,
                CHUNK_BYTES,
                vec![StageSpec::new("meta")],
            );
            let join = FlowSpec::join(name.to_string(), vec![FlowId(0), FlowId(1)]);
            TransferPlan { protocol, flows: vec![payload, meta, join], report }
        }
    }
}

/// Adds a plan to a simulation, releasing its entry flows at `release`
/// after `after`. Returns the completion flow.
pub fn add_plan(sim: &mut FlowSim, plan: &TransferPlan, release: u64, after: &[FlowId]) -> FlowId {
    let mut ids: Vec<FlowId> = Vec::with_capacity(plan.flows.len());
    for f in &plan.flows {
        let mut f = f.clone();
        let internal: Vec<FlowId> = f.after.iter().map(|d| ids[d.0]).collect();
        if internal.is_empty() {
            f.after = after.to_vec();
            f.release = f.release.max(release);
        } else {
            f.after = internal;
        }
        ids.push(sim.add(f));
    }
    *ids.last().expect("plan has flows")
}

/// Times one transfer alone on an idle platform.
pub fn transfer_report(cfg: &Config, protocol: Protocol, dir: Direction, bytes: u64) -> Result<TransferReport> {
    let plan = plan_transfer(cfg, protocol, dir, bytes, "xfer");
    let mut sim = FlowSim::new(platform_ledger(cfg));
    let done = add_plan(&mut sim, &plan, 0, &[]);
    sim.run()?;
    let mut r = plan.report;
    r.cycles_total = sim.result(done).finish;
    r.cycles_overlapped = r.cycles_total;
    Ok(r)
}

/// Streams `bytes` of encrypted operands through the NPU: fetch, decrypt,
/// compute.
pub fn npu_compute_flow(name: &str, bytes: u64, secure: bool) -> FlowSpec {
    let mut stages = vec![StageSpec::new("npu.dram")];
    if secure {
        stages.push(StageSpec::new("npu.aes"));
    }
    stages.push(StageSpec::new("npu.pe"));
    FlowSpec::new(name.to_string(), bytes, CHUNK_BYTES, stages)
}

// ---------------------------------------------------------------------------
// Functional transfers
// ---------------------------------------------------------------------------

/// What crosses the untrusted boundary in a direct transfer.
#[derive(Debug, Clone)]
pub struct DirectWire {
    pub meta: SealedMessage,
    pub cipher: Vec<Line>,
}

/// What crosses the untrusted boundary in a relay transfer: session
/// ciphertext in staging memory.
#[derive(Debug, Clone)]
pub struct StagedWire {
    pub tensor_id: u32,
    pub nonce: u64,
    pub staged: Vec<u8>,
}

fn lines_from_bytes(b: &[u8]) -> Vec<Line> {
    b.chunks(LINE_BYTES as usize)
        .map(|c| {
            let mut l = [0u8; 64];
            l[..c.len()].copy_from_slice(c);
            l
        })
        .collect()
}

/// CPU side of a direct CPU-to-NPU transfer of the registered tensor region
/// at `base`.
pub fn direct_send_cpu(
    s: &mut Session,
    cpu: &mut CpuTee,
    tensor_id: u32,
    base: u64,
    n_lines: usize,
) -> Result<DirectWire> {
    s.cpu_key()?;
    let t = cpu.export_tensor(base, n_lines)?;
    let msg = MetadataMessage {
        tensor_id,
        base,
        n_lines: n_lines as u32,
        stride: LINE_BYTES as u32,
        vn: t.vn.get(),
        mac: t.mac.get(),
    };
    Ok(DirectWire { meta: s.seal_metadata(Direction::CpuToNpu, &msg)?, cipher: t.cipher })
}

/// NPU side: registers the ciphertext; verification happens lazily on load.
pub fn direct_recv_npu(s: &mut Session, npu: &mut NpuTee, wire: &DirectWire) -> Result<MetadataMessage> {
    let m = s.open_metadata(Direction::CpuToNpu, &wire.meta)?;
    if m.n_lines as usize != wire.cipher.len() {
        return Err(Error::Protocol(format!(
            "tensor {}: {} lines announced, {} received",
            m.tensor_id,
            m.n_lines,
            wire.cipher.len()
        )));
    }
    npu.receive_tensor(m.tensor_id, &wire.cipher, VersionNumber::new(m.vn), MacTag::new(m.mac))?;
    Ok(m)
}

/// NPU side of a direct NPU-to-CPU transfer; gated by the verification
/// barrier inside [`NpuTee::send_tensor`]. The returned flag is the taint
/// ground truth of the outgoing bytes.
pub fn direct_send_npu(s: &mut Session, npu: &mut NpuTee, tensor_id: u32) -> Result<(DirectWire, bool)> {
    s.npu_key()?;
    let out = npu.send_tensor(tensor_id)?;
    let base = npu.record(tensor_id)?.base;
    let msg = MetadataMessage {
        tensor_id,
        base,
        n_lines: out.cipher.len() as u32,
        stride: LINE_BYTES as u32,
        vn: out.vn.get(),
        mac: out.mac.get(),
    };
    Ok((DirectWire { meta: s.seal_metadata(Direction::NpuToCpu, &msg)?, cipher: out.cipher }, out.tainted))
}

/// CPU side: verifies eagerly, stores, and installs a structure hint at
/// `dest_base`, which must be a region registered under the same tensor id.
pub fn direct_recv_cpu(
    s: &mut Session,
    cpu: &mut CpuTee,
    wire: &DirectWire,
    dest_base: u64,
) -> Result<MetadataMessage> {
    let m = s.open_metadata(Direction::NpuToCpu, &wire.meta)?;
    if m.n_lines as usize != wire.cipher.len() {
        return Err(Error::Protocol(format!(
            "tensor {}: {} lines announced, {} received",
            m.tensor_id,
            m.n_lines,
            wire.cipher.len()
        )));
    }
    cpu.install_tensor(dest_base, &wire.cipher, VersionNumber::new(m.vn), MacTag::new(m.mac))?;
    Ok(m)
}

/// Relay sender on the CPU: enclave decrypt, then session encrypt.
pub fn staged_send_cpu(
    s: &mut Session,
    cpu: &mut CpuTee,
    tensor_id: u32,
    base: u64,
    n_lines: usize,
) -> Result<StagedWire> {
    let key = s.cpu_key()?.clone();
    let plain = cpu.read_bytes(base, n_lines)?;
    let nonce = s.staging_nonce(Direction::CpuToNpu);
    Ok(StagedWire { tensor_id, nonce, staged: seal(&key, nonce, &plain) })
}

/// Relay receiver on the NPU: session decrypt, then store under the NPU
/// enclave key as a freshly produced tensor.
pub fn staged_recv_npu(s: &mut Session, npu: &mut NpuTee, wire: &StagedWire) -> Result<()> {
    let key = s.npu_key()?.clone();
    let plain = open(&key, wire.nonce, &wire.staged)?;
    npu.store_tensor(wire.tensor_id, &lines_from_bytes(&plain), None)
}

/// Relay sender on the NPU. Plaintext leaves the compute pipeline only
/// after the tensor passes the verification barrier.
pub fn staged_send_npu(s: &mut Session, npu: &mut NpuTee, tensor_id: u32) -> Result<(StagedWire, bool)> {
    let key = s.npu_key()?.clone();
    let load = npu.load_tensor_stream(tensor_id)?;
    if let Err(e) = npu.verification_barrier(&[tensor_id]) {
        npu.stats.cancelled_sends += 1;
        return Err(e);
    }
    if let Some(f) = load.fault {
        return Err(f.into());
    }
    let tainted = npu.is_tainted(tensor_id)?;
    npu.stats.sends += 1;
    if tainted {
        npu.stats.escape_violations += 1;
    }
    let plain: Vec<u8> = load.lines.concat();
    let nonce = s.staging_nonce(Direction::NpuToCpu);
    Ok((StagedWire { tensor_id, nonce, staged: seal(&key, nonce, &plain) }, tainted))
}

/// Relay receiver on the CPU: session decrypt, then enclave writes.
pub fn staged_recv_cpu(s: &mut Session, cpu: &mut CpuTee, wire: &StagedWire, dest_base: u64) -> Result<()> {
    let key = s.cpu_key()?.clone();
    let plain = open(&key, wire.nonce, &wire.staged)?;
    cpu.write_bytes(dest_base, &plain)
}
