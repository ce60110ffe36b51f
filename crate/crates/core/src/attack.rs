//! Randomized adversary campaigns against the protected memories and the
//! transfer paths. Every trial starts from known-good state, applies one
//! attack and records whether the defended system reported it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{AttackKind, Latencies, OffChipRegion, ProtectedMemory};
use crate::config::Config;
use crate::crypto::{KeyMaterial, Line, LINE_BYTES};
use crate::error::{Error, Result};
use crate::npu::{NpuTee, VerifyMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CampaignKind {
    Bitflip,
    Replay,
    Escape,
}

impl CampaignKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bitflip" => Ok(CampaignKind::Bitflip),
            "replay" => Ok(CampaignKind::Replay),
            "escape" => Ok(CampaignKind::Escape),
            _ => Err(Error::Config(format!("attack: unknown campaign {s:?} (bitflip, replay, escape)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetTally {
    pub trials: u64,
    pub detected: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub kind: CampaignKind,
    pub trials: u64,
    pub detected: u64,
    pub by_target: BTreeMap<String, TargetTally>,
    /// Sends whose bytes derive from tampered data.
    pub escaped_sends: u64,
    pub escaped_bytes: u64,
    /// Instruction requests that entered the delayed-verification queue.
    pub inst_delayed: u64,
}

impl CampaignReport {
    fn new(kind: CampaignKind) -> Self {
        CampaignReport {
            kind,
            trials: 0,
            detected: 0,
            by_target: BTreeMap::new(),
            escaped_sends: 0,
            escaped_bytes: 0,
            inst_delayed: 0,
        }
    }

    fn tally(&mut self, target: &str, detected: bool) {
        self.trials += 1;
        self.detected += u64::from(detected);
        let t = self.by_target.entry(target.to_string()).or_default();
        t.trials += 1;
        t.detected += u64::from(detected);
    }

    pub fn detection_rate(&self) -> f64 {
        if self.trials == 0 {
            1.0
        } else {
            self.detected as f64 / self.trials as f64
        }
    }

    pub const CSV_HEADER: &'static str = "campaign,target,trials,detected";

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (t, v) in &self.by_target {
            s.push_str(&format!("{:?},{t},{},{}\n", self.kind, v.trials, v.detected).to_lowercase());
        }
        s
    }
}

const CPU_LINES: usize = 2048;
const NPU_LINES: usize = 64;
const CPU_BASE: u64 = 0x4000_0000;

fn random_line(rng: &mut ChaCha8Rng) -> Line {
    let mut l = [0u8; 64];
    rng.fill(&mut l[..]);
    l
}

/// A CPU memory whose lines carry assorted VNs.
fn cpu_memory(cfg: &Config, rng: &mut ChaCha8Rng) -> Result<ProtectedMemory> {
    let lat = Latencies {
        dram: cfg.cpu.dram_latency,
        aes: cfg.cpu.aes_latency,
        mac: cfg.cpu.mac_latency,
        hash: cfg.cpu.hash_latency,
    };
    let key = KeyMaterial::from_seed(cfg.crypto.seed);
    let mut m = ProtectedMemory::new(key, CPU_BASE, CPU_LINES, cfg.cpu.metadata_cache_bytes, lat);
    for _ in 0..2 * CPU_LINES {
        let line = rng.gen_range(0..CPU_LINES);
        m.write_line(CPU_BASE + line as u64 * LINE_BYTES, &random_line(rng))?;
    }
    Ok(m)
}

fn detected(r: Result<impl Sized>) -> Result<bool> {
    match r {
        Ok(_) => Ok(false),
        Err(Error::Integrity(_)) => Ok(true),
        Err(e) => Err(e),
    }
}

/// Single-bit flips spread over CPU ciphertext, VN and MAC storage and over
/// NPU tensor ciphertext under delayed verification.
pub fn bitflip_campaign(cfg: &Config, trials: u64, seed: u64) -> Result<CampaignReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CampaignReport::new(CampaignKind::Bitflip);
    let mut mem = cpu_memory(cfg, &mut rng)?;
    for _ in 0..trials {
        let target = rng.gen_range(0..4);
        if target == 3 {
            let hit = npu_flip_trial(cfg, &mut rng)?;
            report.tally("npu.data", hit);
            continue;
        }
        let (region, name) = match target {
            0 => (OffChipRegion::Data, "cpu.data"),
            1 => (OffChipRegion::Vn, "cpu.vn"),
            _ => (OffChipRegion::Mac, "cpu.mac"),
        };
        let pa = CPU_BASE + rng.gen_range(0..CPU_LINES) as u64 * LINE_BYTES;
        let bit = match region {
            OffChipRegion::Data => rng.gen_range(0..512),
            _ => rng.gen_range(0..56),
        };
        let good = mem.snapshot_triple(pa)?;
        mem.inject_attack(AttackKind::BitFlip { region, bit }, pa)?;
        // The attacker waits for the victim's metadata to leave the chip.
        mem.flush_metadata_cache();
        let hit = detected(mem.read_line(pa))?;
        report.tally(name, hit);
        mem.replay_triple(&good);
        mem.flush_metadata_cache();
    }
    Ok(report)
}

/// Flips one bit of an NPU tensor, streams it into compute and tries to
/// send the result. Detected when the verification fails no later than the
/// barrier and the send is refused.
fn npu_flip_trial(cfg: &Config, rng: &mut ChaCha8Rng) -> Result<bool> {
    let mut npu = NpuTee::new(KeyMaterial::from_seed(cfg.crypto.seed), VerifyMode::DelayedTensor, u32::MAX);
    npu.register_tensor(1, NPU_LINES)?;
    npu.register_tensor(2, NPU_LINES)?;
    let data: Vec<Line> = (0..NPU_LINES).map(|_| random_line(rng)).collect();
    npu.store_tensor(1, &data, None)?;
    npu.tamper_tensor(1, rng.gen_range(0..NPU_LINES), rng.gen_range(0..512))?;
    let stream_fault = npu.run_kernel(&[1], 2, |d| d[0].clone())?;
    let stream_end = npu.settle(Some(&[1]))?;
    let refused = npu.send_tensor(2).is_err();
    Ok((!stream_fault.is_empty() || !stream_end.is_empty()) && refused && npu.stats.escape_violations == 0)
}

/// Writes a line twice and puts the first version's full off-chip state
/// (ciphertext, VN line, MAC) back.
pub fn replay_campaign(cfg: &Config, trials: u64, seed: u64) -> Result<CampaignReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CampaignReport::new(CampaignKind::Replay);
    let mut mem = cpu_memory(cfg, &mut rng)?;
    for _ in 0..trials {
        let pa = CPU_BASE + rng.gen_range(0..CPU_LINES) as u64 * LINE_BYTES;
        let old = mem.snapshot_triple(pa)?;
        mem.write_line(pa, &random_line(&mut rng))?;
        let fresh = mem.snapshot_triple(pa)?;
        mem.replay_triple(&old);
        mem.flush_metadata_cache();
        let hit = detected(mem.read_line(pa))?;
        report.tally("cpu.triple", hit);
        mem.replay_triple(&fresh);
        mem.flush_metadata_cache();
    }
    Ok(report)
}

/// Random producer/consumer graphs on the NPU with a random subset of
/// inputs tampered, followed by send attempts and instruction fetches.
/// Counts any tainted byte that leaves and any instruction that takes the
/// delayed path.
pub fn escape_campaign(cfg: &Config, trials: u64, seed: u64) -> Result<CampaignReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CampaignReport::new(CampaignKind::Escape);
    for _ in 0..trials {
        let mut npu = NpuTee::new(KeyMaterial::from_seed(cfg.crypto.seed), VerifyMode::DelayedTensor, u32::MAX);
        let n_inputs = rng.gen_range(1..4u32);
        for id in 0..n_inputs {
            npu.register_tensor(id, NPU_LINES)?;
            let d: Vec<Line> = (0..NPU_LINES).map(|_| random_line(&mut rng)).collect();
            npu.store_tensor(id, &d, None)?;
        }
        let tampered = rng.gen_bool(0.5);
        if tampered {
            let victim = rng.gen_range(0..n_inputs);
            npu.tamper_tensor(victim, rng.gen_range(0..NPU_LINES), rng.gen_range(0..512))?;
        }
        // Two dependent kernels: mid = f(inputs), out = g(mid, input 0).
        let inputs: Vec<u32> = (0..n_inputs).collect();
        npu.register_tensor(100, NPU_LINES)?;
        npu.register_tensor(101, NPU_LINES)?;
        npu.run_kernel(&inputs, 100, xor_all)?;
        npu.run_kernel(&[100, 0], 101, xor_all)?;
        let mut any_refused = false;
        for id in [101, 100] {
            match npu.send_tensor(id) {
                Ok(out) if out.tainted => {
                    report.escaped_sends += 1;
                    report.escaped_bytes += out.cipher.len() as u64 * LINE_BYTES;
                }
                Ok(_) => {}
                Err(Error::Integrity(_)) => any_refused = true,
                Err(e) => return Err(e),
            }
        }
        let code: Vec<Line> = (0..8).map(|_| random_line(&mut rng)).collect();
        let base = npu.install_code(&code);
        let code_tampered = rng.gen_bool(0.5);
        if code_tampered {
            npu.tamper_code(rng.gen_range(0..code.len()), rng.gen_range(0..512));
        }
        let mut code_fault = false;
        for i in 0..code.len() {
            code_fault |= detected(npu.fetch_code_line(base + i as u64 * LINE_BYTES))?;
        }
        report.inst_delayed += npu.inst_in_delayed_queue() as u64;
        if tampered {
            report.tally("npu.tensor", any_refused);
        }
        if code_tampered {
            report.tally("npu.code", code_fault);
        }
    }
    Ok(report)
}

fn xor_all(inputs: &[Vec<Line>]) -> Vec<Line> {
    let mut out = inputs[0].clone();
    for d in &inputs[1..] {
        for (o, l) in out.iter_mut().zip(d) {
            for (a, b) in o.iter_mut().zip(l) {
                *a ^= b;
            }
        }
    }
    out
}

pub fn run_campaign(cfg: &Config, kind: CampaignKind, trials: u64, seed: u64) -> Result<CampaignReport> {
    match kind {
        CampaignKind::Bitflip => bitflip_campaign(cfg, trials, seed),
        CampaignKind::Replay => replay_campaign(cfg, trials, seed),
        CampaignKind::Escape => escape_campaign(cfg, trials, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_campaigns_detect_everything() {
        let cfg = Config::default();
        let b = bitflip_campaign(&cfg, 80, 7).unwrap();
        assert_eq!(b.trials, 80);
        assert_eq!(b.detected, 80, "{:?}", b.by_target);
        assert_eq!(b.by_target.len(), 4);
        let r = replay_campaign(&cfg, 20, 7).unwrap();
        assert_eq!(r.detected, 20);
        let e = escape_campaign(&cfg, 20, 7).unwrap();
        assert_eq!((e.escaped_sends, e.inst_delayed), (0, 0));
        assert_eq!(e.detected, e.trials);
    }

    #[test]
    fn campaigns_are_deterministic() {
        let cfg = Config::default();
        assert_eq!(bitflip_campaign(&cfg, 30, 1).unwrap(), bitflip_campaign(&cfg, 30, 1).unwrap());
    }

    #[test]
    fn csv_lists_targets() {
        let r = replay_campaign(&Config::default(), 3, 2).unwrap();
        assert_eq!(r.csv(), "campaign,target,trials,detected\nreplay,cpu.triple,3,3\n");
    }
}
