//! Simulator configuration. Every value has a default taken from the
//! evaluated system (3.5 GHz 8-core CPU with DDR4-2400 x2, 1 GHz NPU with
//! 128 GB/s GDDR5, PCIe 4.0 x16); JSON files override any subset.
//! Bandwidths are integer MB/s and latencies integer cycles of the owning
//! clock, so no floating point enters the timing path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct Config {
    pub cpu: CpuConfig,
    pub npu: NpuConfig,
    pub link: LinkConfig,
    pub crypto: CryptoConfig,
    pub workload: WorkloadConfig,
    pub mode: ModeConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpuConfig {
    pub freq_mhz: u64,
    pub cores: u32,
    pub dram_channels: u32,
    /// DDR4-2400: 2400 MT/s x 8 B.
    pub dram_channel_mbps: u64,
    pub dram_latency: u64,
    /// One pipelined AES engine per channel (16 B/cycle at 3.5 GHz).
    pub aes_mbps: u64,
    pub aes_latency: u64,
    pub mac_latency: u64,
    pub hash_latency: u64,
    pub metadata_cache_bytes: u64,
    /// Shared last-level cache; bounds how long dirty lines stay on chip.
    pub llc_bytes: u64,
    /// Adam arithmetic per 64 B line per core.
    pub adam_cycles_per_line: u64,
    pub meta_table_entries: usize,
    pub filter_entries: usize,
    pub filter_collect: usize,
    pub merge_window: usize,
    pub bitmap_cache_bytes: u64,
}

impl Default for CpuConfig {
    fn default() -> Self {
        CpuConfig {
            freq_mhz: 3500,
            cores: 8,
            dram_channels: 2,
            dram_channel_mbps: 19_200,
            dram_latency: 150,
            aes_mbps: 56_000,
            aes_latency: 40,
            mac_latency: 40,
            hash_latency: 40,
            metadata_cache_bytes: 32 * 1024,
            llc_bytes: 9 * 1024 * 1024,
            adam_cycles_per_line: 8,
            meta_table_entries: 512,
            filter_entries: 10,
            filter_collect: 4,
            merge_window: 8,
            bitmap_cache_bytes: 6 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpuConfig {
    pub freq_mhz: u64,
    pub pe_rows: u32,
    pub pe_cols: u32,
    pub dram_mbps: u64,
    /// NPU cycles.
    pub dram_latency: u64,
    pub aes_engines: u32,
    pub aes_mbps: u64,
    pub aes_latency: u64,
    pub mac_latency: u64,
    /// Cycles for the MAC comparison at the end of a verification.
    pub compare_latency: u64,
    /// PE-array time to consume one 64 B line of operand data.
    pub compute_cycles_per_line: u64,
    /// On-chip staging buffer per operand stream; bounds fetch lookahead.
    pub stream_buffer_bytes: u64,
    pub fault_threshold: u32,
    /// MAC granularity of the MGX-like baseline NPU protection.
    pub mgx_mac_granularity: u64,
}

impl Default for NpuConfig {
    fn default() -> Self {
        NpuConfig {
            freq_mhz: 1000,
            pe_rows: 512,
            pe_cols: 512,
            dram_mbps: 128_000,
            dram_latency: 100,
            aes_engines: 1,
            aes_mbps: 8_000,
            aes_latency: 40,
            mac_latency: 40,
            compare_latency: 1,
            compute_cycles_per_line: 16,
            stream_buffer_bytes: 4096,
            fault_threshold: 3,
            mgx_mac_granularity: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    /// PCIe 4.0 x16 effective.
    pub mbps: u64,
    /// CPU cycles.
    pub latency: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig { mbps: 32_000, latency: 1750 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CryptoConfig {
    pub seed: u64,
}

impl Default for CryptoConfig {
    fn default() -> Self {
        CryptoConfig { seed: 0x5EED }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Adam,
    Gemm,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    /// Parameter tensor sizes in bytes.
    pub tensor_bytes: Vec<u64>,
    pub threads: u32,
    pub iterations: u32,
    /// Lines a thread issues before the next thread is interleaved.
    pub burst_lines: u64,
    pub gemm_m: u64,
    pub gemm_n: u64,
    pub gemm_k: u64,
    pub gemm_tile: u64,
    /// NPU operand lines streamed per weight line in forward/backward.
    pub npu_reuse: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            kind: WorkloadKind::Adam,
            tensor_bytes: desk_scale_tensors(),
            threads: 8,
            iterations: 20,
            burst_lines: 16,
            gemm_m: 256,
            gemm_n: 256,
            gemm_k: 256,
            gemm_tile: 64,
            npu_reuse: 4,
        }
    }
}

/// 16 tensors between 256 KiB and 4 MiB.
pub fn desk_scale_tensors() -> Vec<u64> {
    const KIB: u64 = 1024;
    [256, 512, 1024, 2048, 4096, 256, 512, 1024, 256, 512, 2048, 256, 1024, 512, 256, 4096]
        .iter()
        .map(|k| k * KIB)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum SecurityMode {
    NonSecure,
    SgxMgx,
    TensorTee,
}

impl SecurityMode {
    pub const ALL: [SecurityMode; 3] = [SecurityMode::NonSecure, SecurityMode::SgxMgx, SecurityMode::TensorTee];

    pub fn label(self) -> &'static str {
        match self {
            SecurityMode::NonSecure => "NonSecure",
            SecurityMode::SgxMgx => "SGX+MGX",
            SecurityMode::TensorTee => "TensorTEE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '+'], "-").as_str() {
            "nonsecure" | "non-secure" => Ok(SecurityMode::NonSecure),
            "sgx-mgx" | "sgxmgx" | "baseline" => Ok(SecurityMode::SgxMgx),
            "tensortee" | "tensor-tee" => Ok(SecurityMode::TensorTee),
            other => Err(Error::Config(format!("mode: unknown security mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeConfig {
    pub security: SecurityMode,
    /// NPU verification: "delayed" or a blocking MAC granularity in bytes.
    pub npu_verify: String,
    pub en_tmf: bool,
}

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig { security: SecurityMode::TensorTee, npu_verify: "delayed".into(), en_tmf: true }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {}", e.line(), e.column(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.cpu.freq_mhz == 0 || self.npu.freq_mhz == 0 {
            return bad("cpu.freq_mhz/npu.freq_mhz", "must be positive");
        }
        if self.cpu.dram_channels == 0 || self.cpu.dram_channel_mbps == 0 || self.cpu.aes_mbps == 0 {
            return bad("cpu", "channel count and bandwidths must be positive");
        }
        if self.npu.dram_mbps == 0 || self.npu.aes_mbps == 0 || self.npu.aes_engines == 0 || self.link.mbps == 0 {
            return bad("npu/link", "bandwidths must be positive");
        }
        if self.cpu.filter_collect < 2 || self.cpu.filter_entries == 0 || self.cpu.meta_table_entries == 0 {
            return bad("cpu", "filter_collect >= 2 and non-empty tables required");
        }
        if self.workload.threads == 0 || self.workload.burst_lines == 0 {
            return bad("workload", "threads and burst_lines must be positive");
        }
        if self.workload.tensor_bytes.iter().any(|b| *b == 0 || b % 64 != 0) {
            return bad("workload.tensor_bytes", "sizes must be positive multiples of 64");
        }
        if self.npu.stream_buffer_bytes < 64 || !self.npu.stream_buffer_bytes.is_multiple_of(64) {
            return bad("npu.stream_buffer_bytes", "must be a positive multiple of 64");
        }
        crate::npu::VerifyMode::parse(&self.mode.npu_verify)?;
        crate::npu::VerifyMode::blocking(self.npu.mgx_mac_granularity)?;
        Ok(())
    }

    /// CPU cycles per NPU cycle count, rounded up.
    pub fn npu_to_cpu(&self, npu_cycles: u64) -> u64 {
        (npu_cycles * self.cpu.freq_mhz).div_ceil(self.npu.freq_mhz)
    }

    pub fn cpu_hz(&self) -> u64 {
        self.cpu.freq_mhz * 1_000_000
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        assert_eq!(desk_scale_tensors().len(), 16);
    }

    #[test]
    fn partial_override() {
        let c = Config::from_json(r#"{"cpu": {"cores": 4}, "mode": {"security": "sgx-mgx"}}"#).unwrap();
        assert_eq!(c.cpu.cores, 4);
        assert_eq!(c.cpu.dram_channels, 2);
        assert_eq!(c.mode.security, SecurityMode::SgxMgx);
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let e = Config::from_json("{\n \"cpu\": {\"corez\": 4}}").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("corez") && msg.contains("line 2"), "{msg}");
        assert!(Config::from_json(r#"{"gpu": {}}"#).is_err());
    }

    #[test]
    fn npu_cycle_scaling() {
        let c = Config::default();
        assert_eq!(c.npu_to_cpu(2), 7);
        assert_eq!(c.npu_to_cpu(1), 4);
    }
}
