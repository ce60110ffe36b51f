//! CPU enclave memory path under one security mode.

use crate::baseline::{CostReport, Latencies, ProtectedMemory};
use crate::config::{Config, SecurityMode};
use crate::crypto::{mac_xor_aggregate, KeyMaterial, Line, MacTag, VersionNumber, LINE_BYTES};
use crate::error::{Error, Result};
use crate::tenanalyzer::{HintOutcome, ReadKind, Shape, TenAnalyzer, TenAnalyzerConfig, WriteOutcome};

#[derive(Debug, Clone)]
enum Backing {
    Plain { base: u64, lines: Vec<Line> },
    Protected(Box<ProtectedMemory>),
}

/// A tensor leaving the CPU enclave as ciphertext.
#[derive(Debug, Clone)]
pub struct ExportedTensor {
    pub base: u64,
    pub cipher: Vec<Line>,
    pub vn: VersionNumber,
    pub mac: MacTag,
}

#[derive(Debug, Clone)]
pub struct CpuTee {
    mode: SecurityMode,
    backing: Backing,
    ta: TenAnalyzer,
    lat: Latencies,
    cost: CostReport,
    reads: u64,
    writes: u64,
    log: Option<Vec<(&'static str, u64, CostReport)>>,
}

impl CpuTee {
    pub fn new(cfg: &Config, mode: SecurityMode, base: u64, n_lines: usize) -> Self {
        Self::with_key(cfg, mode, KeyMaterial::from_seed(cfg.crypto.seed), base, n_lines)
    }

    pub fn with_key(cfg: &Config, mode: SecurityMode, key: KeyMaterial, base: u64, n_lines: usize) -> Self {
        let lat = Latencies {
            dram: cfg.cpu.dram_latency,
            aes: cfg.cpu.aes_latency,
            mac: cfg.cpu.mac_latency,
            hash: cfg.cpu.hash_latency,
        };
        let backing = match mode {
            SecurityMode::NonSecure => Backing::Plain { base, lines: vec![[0; 64]; n_lines] },
            _ => {
                let mut m = ProtectedMemory::new(key, base, n_lines, cfg.cpu.metadata_cache_bytes, lat);
                m.set_cache_mac_lines(mode == SecurityMode::TensorTee);
                Backing::Protected(Box::new(m))
            }
        };
        let mut ta = TenAnalyzer::new(TenAnalyzerConfig::from(&cfg.cpu));
        ta.set_en_tmf(mode == SecurityMode::TensorTee && cfg.mode.en_tmf);
        CpuTee { mode, backing, ta, lat, cost: CostReport::default(), reads: 0, writes: 0, log: None }
    }

    pub fn mode(&self) -> SecurityMode {
        self.mode
    }

    pub fn analyzer(&self) -> &TenAnalyzer {
        &self.ta
    }

    pub fn analyzer_mut(&mut self) -> &mut TenAnalyzer {
        &mut self.ta
    }

    pub fn memory(&self) -> Option<&ProtectedMemory> {
        match &self.backing {
            Backing::Protected(m) => Some(m),
            Backing::Plain { .. } => None,
        }
    }

    /// Off-chip state, for attack injection.
    pub fn memory_mut(&mut self) -> Option<&mut ProtectedMemory> {
        match &mut self.backing {
            Backing::Protected(m) => Some(m),
            Backing::Plain { .. } => None,
        }
    }

    pub fn cost(&self) -> &CostReport {
        &self.cost
    }

    pub fn reset_cost(&mut self) {
        self.cost = CostReport::default();
        self.reads = 0;
        self.writes = 0;
    }

    pub fn accesses(&self) -> (u64, u64) {
        (self.reads, self.writes)
    }

    pub fn enable_log(&mut self) {
        self.log = Some(Vec::new());
    }

    /// Per-access cost rows in `CostReport::CSV_HEADER` format.
    pub fn log_csv(&self) -> String {
        let mut out = String::from(CostReport::CSV_HEADER);
        out.push('\n');
        for (op, pa, c) in self.log.iter().flatten() {
            out.push_str(&c.csv_row(op, *pa));
            out.push('\n');
        }
        out
    }

    fn account(&mut self, op: &'static str, pa: u64, c: CostReport) {
        self.cost += c;
        if let Some(log) = &mut self.log {
            log.push((op, pa, c));
        }
    }

    pub fn register_tensor(&mut self, base: u64, n_lines: usize, tensor_id: u64) -> Result<()> {
        match &mut self.backing {
            Backing::Protected(m) => m.register_tensor_region(base, n_lines, tensor_id),
            Backing::Plain { .. } => Ok(()),
        }
    }

    fn plain_index(base: u64, lines: &[Line], va: u64) -> Result<usize> {
        let i = va.checked_sub(base).filter(|o| o % LINE_BYTES == 0).map(|o| (o / LINE_BYTES) as usize);
        i.filter(|&i| i < lines.len()).ok_or(Error::BadAddress(va))
    }

    pub fn read(&mut self, va: u64) -> Result<Line> {
        self.reads += 1;
        let (line, c) = match &mut self.backing {
            Backing::Plain { base, lines } => {
                let i = Self::plain_index(*base, lines, va)?;
                let c = CostReport { data_bytes: LINE_BYTES, cycles: self.lat.dram, ..Default::default() };
                (lines[i], c)
            }
            Backing::Protected(m) if self.mode == SecurityMode::SgxMgx || !self.ta.en_tmf() => m.read_line(va)?,
            Backing::Protected(m) => {
                let mut c = CostReport::default();
                let idx = m.line_index(va)?;
                let (vn, kind) = self.ta.read(va, &mut c, |_, c| m.resolve_vn(idx, c))?;
                let line = m.read_line_with_vn(va, vn, &mut c)?;
                c.cycles = tracked_read_cycles(&self.lat, &c, kind);
                (line, c)
            }
        };
        self.account("read", va, c);
        Ok(line)
    }

    pub fn write(&mut self, va: u64, plain: &Line) -> Result<()> {
        self.writes += 1;
        let c = match &mut self.backing {
            Backing::Plain { base, lines } => {
                let i = Self::plain_index(*base, lines, va)?;
                lines[i] = *plain;
                CostReport { data_bytes: LINE_BYTES, ..Default::default() }
            }
            Backing::Protected(m) => {
                let mut c = CostReport::default();
                m.line_index(va)?;
                let out = self.ta.on_write(va, &mut c);
                match out.tracked_vn() {
                    Some(vn) => {
                        m.write_line_with_vn(va, plain, vn, &mut c)?;
                        c.cycles = self.lat.aes + self.lat.mac;
                        if let WriteOutcome::HitEdgeFinish { base, shape, .. } = out {
                            let lines = shape.addrs(base).map(|a| ((a - m.base()) / LINE_BYTES) as usize);
                            c += m.bulk_vn_update_cost(lines.collect::<Vec<_>>());
                            if self.ta.deferred_hints() > 0 {
                                let mm = &mut **m;
                                self.ta.retry_deferred_hints(&mut c, |a, c| {
                                    let i = mm.line_index(a)?;
                                    mm.resolve_vn(i, c)
                                })?;
                            }
                        }
                    }
                    None => c += m.write_line(va, plain)?,
                }
                c
            }
        };
        self.account("write", va, c);
        Ok(())
    }

    /// Reads `n` consecutive lines starting at `va` as bytes.
    pub fn read_bytes(&mut self, va: u64, n_lines: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(n_lines * 64);
        for i in 0..n_lines {
            out.extend_from_slice(&self.read(va + i as u64 * LINE_BYTES)?);
        }
        Ok(out)
    }

    pub fn write_bytes(&mut self, va: u64, bytes: &[u8]) -> Result<()> {
        for (i, chunk) in bytes.chunks(64).enumerate() {
            let mut line = [0u8; 64];
            line[..chunk.len()].copy_from_slice(chunk);
            self.write(va + i as u64 * LINE_BYTES, &line)?;
        }
        Ok(())
    }

    /// Receives a tensor as ciphertext under tensor-logical counters: verify
    /// the tensor MAC, store, and install a structure hint.
    pub fn install_tensor(&mut self, base: u64, cipher: &[Line], vn: VersionNumber, mac: MacTag) -> Result<CostReport> {
        let Backing::Protected(m) = &mut self.backing else {
            return Err(Error::Protocol("ciphertext install into non-secure memory".into()));
        };
        let hi = base + (cipher.len() as u64).saturating_sub(1) * LINE_BYTES;
        if !self.ta.invalidate_range(base, hi) {
            return Err(Error::Protocol(format!("tensor at {base:#x} is mid-update")));
        }
        let mut c = m.install_tensor(base, cipher, vn, mac)?;
        let mm = &mut **m;
        let hint = self.ta.install_hint(base, Shape::linear(cipher.len() as u64), Some(mac), &mut c, |a, c| {
            let i = mm.line_index(a)?;
            mm.resolve_vn(i, c)
        })?;
        debug_assert_ne!(hint, HintOutcome::Deferred);
        self.account("install", base, c);
        Ok(c)
    }

    /// Produces the ciphertext, uniform VN and tensor MAC of a registered
    /// tensor region. Lines with diverging VNs are first re-encrypted at a
    /// common fresh VN.
    pub fn export_tensor(&mut self, base: u64, n_lines: usize) -> Result<ExportedTensor> {
        let Backing::Protected(m) = &mut self.backing else {
            return Err(Error::Protocol("ciphertext export from non-secure memory".into()));
        };
        let first = m.line_index(base)?;
        let mut c = CostReport::default();
        let entry = self
            .ta
            .entry_containing(base)
            .filter(|e| e.base == base && e.shape == Shape::linear(n_lines as u64) && !e.uf)
            .map(|e| (e.vn, e.mac));
        let (vn, known_mac) = match entry {
            Some(x) => x,
            None => {
                let mut vns = Vec::with_capacity(n_lines);
                for i in 0..n_lines {
                    vns.push(m.resolve_vn(first + i, &mut c)?);
                }
                let vmax = *vns.iter().max().ok_or(Error::EmptyTensor)?;
                if vns.iter().any(|v| *v != vmax) {
                    let fresh = vmax.next();
                    for (i, v) in vns.iter().enumerate() {
                        let pa = base + i as u64 * LINE_BYTES;
                        let p = m.read_line_with_vn(pa, *v, &mut c)?;
                        m.write_line_with_vn(pa, &p, fresh, &mut c)?;
                    }
                    c += m.bulk_vn_update_cost(first..first + n_lines);
                    self.ta.invalidate_range(base, base + (n_lines as u64 - 1) * LINE_BYTES);
                    (fresh, None)
                } else {
                    (vmax, None)
                }
            }
        };
        let (cipher, tags) = m.export_lines(base, n_lines)?;
        c.data_bytes += n_lines as u64 * LINE_BYTES;
        let mac = match known_mac {
            Some(t) => t,
            None => {
                c.mac_bytes += (n_lines as u64).div_ceil(8) * LINE_BYTES;
                mac_xor_aggregate(&tags)?
            }
        };
        self.account("export", base, c);
        Ok(ExportedTensor { base, cipher, vn, mac })
    }

    pub fn read_kind_stats(&self) -> (u64, u64, u64, u64) {
        let s = &self.ta.stats;
        (s.hit_in, s.hit_boundary, s.mispredict, s.miss)
    }
}

/// Critical-path latency of a read whose VN came through the analyzer.
fn tracked_read_cycles(l: &Latencies, c: &CostReport, kind: ReadKind) -> u64 {
    let data = l.dram;
    let mac_line = if c.mac_bytes > 0 { l.dram } else { 0 };
    let bitmap = if c.bitmap_bytes > 0 { l.dram } else { 0 };
    let fetched_vn = if c.vn_bytes > 0 { l.dram + c.hashes * l.hash } else { 0 };
    let (vn_ready, pad_ready) = match kind {
        ReadKind::HitIn => (bitmap, bitmap + l.aes),
        // Decryption proceeds with the speculative VN while the fetch confirms it.
        ReadKind::HitBoundary => (fetched_vn, l.aes),
        ReadKind::Mispredict | ReadKind::Miss => (fetched_vn, fetched_vn + l.aes),
    };
    let plain = data.max(pad_ready);
    let verified = data.max(mac_line).max(vn_ready) + l.mac;
    plain.max(verified)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpu(mode: SecurityMode) -> CpuTee {
        CpuTee::new(&Config::default(), mode, 0, 4096)
    }

    #[test]
    fn all_modes_round_trip() {
        for mode in SecurityMode::ALL {
            let mut c = cpu(mode);
            c.write(0x40, &[7; 64]).unwrap();
            assert_eq!(c.read(0x40).unwrap(), [7; 64], "{mode:?}");
        }
    }

    #[test]
    fn streaming_reads_become_metadata_free() {
        let mut c = cpu(SecurityMode::TensorTee);
        for _ in 0..2 {
            for l in 0..256u64 {
                c.read(l * 64).unwrap();
            }
        }
        c.reset_cost();
        c.analyzer_mut().stats = Default::default();
        for l in 0..256u64 {
            c.read(l * 64).unwrap();
        }
        assert_eq!(c.analyzer().stats.hit_in, 256);
        assert_eq!(c.cost().vn_bytes + c.cost().tree_bytes, 0);
    }

    #[test]
    fn tracked_tensor_update_round_trips() {
        let mut c = cpu(SecurityMode::TensorTee);
        for round in 0..4u8 {
            for l in 0..64u64 {
                let v = c.read(l * 64).unwrap();
                assert_eq!(v, [round; 64]);
            }
            for l in 0..64u64 {
                c.write(l * 64, &[round + 1; 64]).unwrap();
            }
        }
        let m = c.memory().unwrap();
        assert!(c.analyzer().check_consistency(|a| m.offchip_vn((a / 64) as usize)).is_ok());
        assert!(c.analyzer().stats.w_finish > 0);
    }

    #[test]
    fn export_install_between_enclaves() {
        let cfg = Config::default();
        let key = KeyMaterial::from_seed(99);
        let mut a = CpuTee::with_key(&cfg, SecurityMode::TensorTee, key.clone(), 0, 1024);
        let mut b = CpuTee::with_key(&cfg, SecurityMode::TensorTee, key, 0, 1024);
        a.register_tensor(0x1000, 16, 5).unwrap();
        b.register_tensor(0x2000, 16, 5).unwrap();
        for l in 0..16u64 {
            a.write(0x1000 + l * 64, &[l as u8; 64]).unwrap();
        }
        let t = a.export_tensor(0x1000, 16).unwrap();
        b.install_tensor(0x2000, &t.cipher, t.vn, t.mac).unwrap();
        for l in 0..16u64 {
            assert_eq!(b.read(0x2000 + l * 64).unwrap(), [l as u8; 64]);
        }
        assert_eq!(b.analyzer().stats.hit_in, 16);
    }
}
