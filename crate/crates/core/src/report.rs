//! Experiment runner and figure-style tables.
//!
//! `run_experiment` expands sweep axes into independent points, runs each,
//! and writes `metrics.json` plus CSVs. `build_report` derives every table
//! from `metrics.json` alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{run_campaign, CampaignKind, CampaignReport};
use crate::config::{Config, SecurityMode, WorkloadKind};
use crate::crypto::LINE_BYTES;
use crate::error::{Error, Result};
use crate::npu::{stream_cycles, VerifyMode};
use crate::sim::Metrics;
use crate::tenanalyzer::{TenAnalyzer, TenAnalyzerConfig};
use crate::transfer::TransferReport;
use crate::workloads::{gen_adam_trace, gen_gemm_trace, AdamParams, Replayer, SegmentStats};
use crate::zero::{gradient_exchange, measure_adam, transfer_protocol, zero_timeline};

/// What a run point exercises: a full system under a security mode, or the
/// NPU stream pipeline under one verification scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    System(SecurityMode),
    NpuBlocking,
    NpuDelayed,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blocking" => Ok(RunMode::NpuBlocking),
            "delayed" => Ok(RunMode::NpuDelayed),
            _ => SecurityMode::parse(s).map(RunMode::System),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RunMode::System(m) => m.label(),
            RunMode::NpuBlocking => "blocking",
            RunMode::NpuDelayed => "delayed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("sweep {s:?}: expected key=v1,v2,...")))?;
        let values: Vec<String> = v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("sweep {k}: no values")));
        }
        Ok(SweepAxis { key: k.trim().to_string(), values })
    }
}

fn parse_num(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("sweep {key}: {v:?} is not an unsigned integer")))
}

/// Sets one named configuration knob.
pub fn apply_setting(cfg: &mut Config, key: &str, value: &str) -> Result<()> {
    match key {
        "mac_granularity" => cfg.npu.mgx_mac_granularity = parse_num(key, value)?,
        "threads" => cfg.workload.threads = parse_num(key, value)? as u32,
        "iterations" => cfg.workload.iterations = parse_num(key, value)? as u32,
        "burst_lines" => cfg.workload.burst_lines = parse_num(key, value)?,
        "npu_reuse" => cfg.workload.npu_reuse = parse_num(key, value)?,
        "link_mbps" => cfg.link.mbps = parse_num(key, value)?,
        "llc_bytes" => cfg.cpu.llc_bytes = parse_num(key, value)?,
        "seed" => cfg.crypto.seed = parse_num(key, value)?,
        "npu_verify" => cfg.mode.npu_verify = value.to_string(),
        "en_tmf" => {
            cfg.mode.en_tmf =
                value.parse().map_err(|_| Error::Config(format!("sweep en_tmf: {value:?} is not a bool")))?
        }
        "tensor_kib" => cfg.workload.tensor_bytes = vec![parse_num(key, value)? * 1024],
        _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub config: Config,
    pub modes: Vec<RunMode>,
    pub sweep: Vec<SweepAxis>,
    pub attack: Option<(CampaignKind, u64)>,
    pub out_dir: PathBuf,
}

/// Cartesian product of the sweep axes applied to `base`.
pub fn sweep_points(base: &Config, sweep: &[SweepAxis]) -> Result<Vec<(String, Config)>> {
    let mut points = vec![(String::new(), base.clone())];
    for axis in sweep {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for (label, cfg) in &points {
            for v in &axis.values {
                let mut c = cfg.clone();
                apply_setting(&mut c, &axis.key, v)?;
                c.validate()?;
                let l =
                    if label.is_empty() { format!("{}={v}", axis.key) } else { format!("{label};{}={v}", axis.key) };
                next.push((l, c));
            }
        }
        points = next;
    }
    if points.len() == 1 && points[0].0.is_empty() {
        points[0].0 = "default".into();
    }
    Ok(points)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub label: String,
    pub mode: String,
    pub workload: String,
    pub metrics: Metrics,
    #[serde(default)]
    pub series: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub experiment: String,
    pub points: Vec<PointResult>,
    #[serde(default)]
    pub attacks: Vec<CampaignReport>,
}

/// A named CSV table.
pub type Table = (String, String);

fn segment_csv(unit: &str, segs: &[SegmentStats]) -> String {
    let mut s = format!("{unit},reads,hit_in,hit_boundary,mispredict,miss,writes,invalidations,vn_bytes\n");
    for (i, g) in segs.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            i + 1,
            g.reads,
            g.hit_in,
            g.hit_boundary,
            g.mispredict,
            g.miss,
            g.writes,
            g.invalidations,
            g.vn_bytes
        );
    }
    s
}

fn segment_metrics(m: &mut Metrics, series: &mut BTreeMap<String, Vec<f64>>, segs: &[SegmentStats]) {
    for g in segs {
        m.add("reads", g.reads);
        m.add("hit_in", g.hit_in);
        m.add("hit_boundary", g.hit_boundary);
        m.add("mispredict", g.mispredict);
        m.add("miss", g.miss);
        m.add("writes", g.writes);
        m.add("vn_bytes", g.vn_bytes);
    }
    series.insert("hit_in_rate".into(), segs.iter().map(SegmentStats::hit_in_rate).collect());
    series.insert("hit_all_rate".into(), segs.iter().map(SegmentStats::hit_all_rate).collect());
}

fn analyzer(cfg: &Config, mode: SecurityMode) -> TenAnalyzer {
    let mut ta = TenAnalyzer::new(TenAnalyzerConfig::from(&cfg.cpu));
    ta.set_en_tmf(mode == SecurityMode::TensorTee && cfg.mode.en_tmf);
    ta
}

fn stream_point(cfg: &Config, mode: RunMode) -> Result<(Metrics, Vec<Table>)> {
    let lines: Vec<u64> =
        cfg.workload.tensor_bytes.iter().map(|b| b.div_ceil(LINE_BYTES) * cfg.workload.npu_reuse.max(1)).collect();
    let verify = match mode {
        RunMode::NpuBlocking => VerifyMode::blocking(cfg.npu.mgx_mac_granularity)?,
        _ => VerifyMode::DelayedTensor,
    };
    let plain = stream_cycles(&cfg.npu, &lines, None);
    let r = stream_cycles(&cfg.npu, &lines, Some(verify));
    let mut m = Metrics::default();
    m.set("cycles", r.cycles);
    m.set("cycles_plain", plain.cycles);
    m.set("overhead_ppm", (r.overhead_vs(&plain) * 1e6).round().max(0.0) as u64);
    m.set("stall_cycles", r.stall_cycles);
    m.set("mac_bytes_fetched", r.mac_bytes);
    m.set("mac_storage_bytes", verify.mac_storage_bytes(&cfg.workload.tensor_bytes));
    m.set("granularity", verify.block_lines().map_or(0, |b| b * LINE_BYTES));
    let mut csv = String::from("tensor,lines,stall_cycles,verify_cycles\n");
    for t in &r.tensors {
        let _ = writeln!(csv, "{},{},{},{}", t.tensor, t.lines, t.stall_cycles, t.verify_cycles);
    }
    Ok((m, vec![("npu_stream.csv".into(), csv)]))
}

/// Runs one sweep point under one mode.
pub fn run_point(cfg: &Config, mode: RunMode) -> Result<PointResult> {
    Ok(run_point_full(cfg, mode)?.0)
}

fn run_point_full(cfg: &Config, mode: RunMode) -> Result<(PointResult, Vec<Table>)> {
    let mut series = BTreeMap::new();
    let (metrics, tables, workload) = match mode {
        RunMode::NpuBlocking | RunMode::NpuDelayed => {
            let (m, t) = stream_point(cfg, mode)?;
            (m, t, "stream")
        }
        RunMode::System(sec) => match cfg.workload.kind {
            WorkloadKind::Adam => {
                let p = AdamParams::from_config(cfg);
                let (layout, trace) = gen_adam_trace(&p);
                let mut r = Replayer::new(analyzer(cfg, sec), layout);
                let segs = r.replay(&trace)?;
                let mut m = Metrics::default();
                segment_metrics(&mut m, &mut series, &segs);
                let cost = measure_adam(cfg, sec)?;
                m.set("metadata_bytes", cost.cost.metadata_bytes());
                m.set("dram_bytes", cost.cost.dram_bytes());
                m.set("table_entries", r.ta.valid_entries() as u64);
                (m, vec![("adam_iterations.csv".into(), segment_csv("iteration", &segs))], "adam")
            }
            WorkloadKind::Gemm => {
                let w = &cfg.workload;
                let passes = w.iterations.clamp(1, 4);
                let (layout, trace) = gen_gemm_trace(w.gemm_m, w.gemm_n, w.gemm_k, w.gemm_tile, passes)?;
                let mut r = Replayer::new(analyzer(cfg, sec), layout);
                let segs = r.replay(&trace)?;
                let mut m = Metrics::default();
                segment_metrics(&mut m, &mut series, &segs);
                m.set("table_entries", r.ta.valid_entries() as u64);
                (m, vec![("gemm_passes.csv".into(), segment_csv("pass", &segs))], "gemm")
            }
            WorkloadKind::Zero => {
                let adam = measure_adam(cfg, sec)?;
                let t = zero_timeline(cfg, sec, &adam)?;
                let g = gradient_exchange(cfg, transfer_protocol(sec))?;
                let mut m = t.metrics();
                m.set("grad_exposed_cycles", g.exposed);
                m.set("grad_compute_end", g.compute_end);
                series.insert("iteration_end".into(), t.iteration_end.iter().map(|&c| c as f64).collect());
                let p = &t.phases;
                let phases = format!(
                    "total,npu,cpu,comm,comm_exposed\n{},{},{},{},{}\n",
                    p.total, p.npu, p.cpu, p.comm, p.comm_exposed
                );
                let xfer = TransferReport {
                    protocol: g.protocol,
                    bytes_link: g.bytes_link,
                    bytes_meta: 0,
                    bytes_aes: g.bytes_aes,
                    cycles_total: g.last_arrival,
                    cycles_overlapped: g.exposed,
                    faults: 0,
                };
                let tables = vec![
                    ("zero_phases.csv".into(), phases),
                    ("transfer.csv".into(), format!("{}\n{}\n", TransferReport::CSV_HEADER, xfer.csv_row())),
                ];
                (m, tables, "zero")
            }
        },
    };
    let p = PointResult { label: String::new(), mode: mode.label().into(), workload: workload.into(), metrics, series };
    Ok((p, tables))
}

fn write_csv_with_prefix(acc: &mut BTreeMap<String, String>, name: &str, label: &str, mode: &str, csv: &str) {
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    let out = acc.entry(name.to_string()).or_insert_with(|| format!("point,mode,{header}\n"));
    for l in lines {
        let _ = writeln!(out, "{label},{mode},{l}");
    }
}

/// Runs every point and mode, writes `metrics.json`, `points.csv` and the
/// per-module CSVs into `spec.out_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricsFile> {
    let mut file = MetricsFile { experiment: spec.name.clone(), ..Default::default() };
    let mut csvs: BTreeMap<String, String> = BTreeMap::new();
    if let Some((kind, trials)) = spec.attack {
        let r = run_campaign(&spec.config, kind, trials, spec.config.crypto.seed)?;
        csvs.insert("attack.csv".into(), r.csv());
        file.attacks.push(r);
    } else {
        for (label, cfg) in sweep_points(&spec.config, &spec.sweep)? {
            for &mode in &spec.modes {
                log::info!("running {label} / {}", mode.label());
                let (mut p, tables) = run_point_full(&cfg, mode)?;
                for (name, csv) in tables {
                    write_csv_with_prefix(&mut csvs, &name, &label, mode.label(), &csv);
                }
                p.label = label.clone();
                file.points.push(p);
            }
        }
        csvs.insert("points.csv".into(), points_csv(&file.points));
    }
    std::fs::create_dir_all(&spec.out_dir)?;
    std::fs::write(spec.out_dir.join("metrics.json"), serde_json::to_string_pretty(&file)?)?;
    for (name, body) in csvs {
        std::fs::write(spec.out_dir.join(name), body)?;
    }
    Ok(file)
}

fn points_csv(points: &[PointResult]) -> String {
    let keys: BTreeSet<&String> = points.iter().flat_map(|p| p.metrics.0.keys()).collect();
    let mut s = String::from("point,mode,workload");
    for k in &keys {
        s.push(',');
        s.push_str(k);
    }
    s.push('\n');
    for p in points {
        let _ = write!(s, "{},{},{}", p.label, p.mode, p.workload);
        for k in &keys {
            let _ = write!(s, ",{}", p.metrics.get(k));
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

pub const REPORT_INPUTS: [&str; 1] = ["metrics.json"];

pub fn load_metrics(dir: &Path) -> Result<MetricsFile> {
    let missing: Vec<&str> = REPORT_INPUTS.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("{}: missing inputs: {}", dir.display(), missing.join(", "))));
    }
    let text = std::fs::read_to_string(dir.join("metrics.json"))?;
    Ok(serde_json::from_str(&text)?)
}

fn cycles_of(p: &PointResult) -> u64 {
    ["cycles_total", "cycles"].iter().map(|k| p.metrics.get(k)).find(|&c| c > 0).unwrap_or(0)
}

/// Builds the report tables from a metrics file. Pure.
pub fn build_report(file: &MetricsFile) -> Vec<Table> {
    let mut out = Vec::new();
    let system = [SecurityMode::NonSecure, SecurityMode::SgxMgx, SecurityMode::TensorTee].map(|m| m.label());
    let mut labels: Vec<&str> = Vec::new();
    for p in &file.points {
        if !labels.contains(&p.label.as_str()) {
            labels.push(&p.label);
        }
    }
    let find = |label: &str, mode: &str| file.points.iter().find(|p| p.label == label && p.mode == mode);

    // Normalized performance, SGX+MGX = 1.0.
    if file.points.iter().any(|p| system.contains(&p.mode.as_str()) && cycles_of(p) > 0) {
        let mut s = format!("point,{}\n", system.join(","));
        for l in &labels {
            let base = find(l, SecurityMode::SgxMgx.label()).map(cycles_of).filter(|&c| c > 0);
            let _ = write!(s, "{l}");
            for m in system {
                match (base, find(l, m).map(cycles_of).filter(|&c| c > 0)) {
                    (Some(b), Some(c)) => {
                        let _ = write!(s, ",{:.4}", b as f64 / c as f64);
                    }
                    _ => s.push(','),
                }
            }
            s.push('\n');
        }
        out.push(("performance.csv".to_string(), s));
    }

    // Time breakdown per mode.
    let zero: Vec<&PointResult> = file.points.iter().filter(|p| p.workload == "zero").collect();
    if !zero.is_empty() {
        let mut s = String::from("point,mode,npu_share,cpu_share,comm_exposed_share,comm_busy_share\n");
        for p in zero {
            let t = p.metrics.get("cycles_total").max(1) as f64;
            let share = |k: &str| p.metrics.get(k) as f64 / t;
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{:.4}",
                p.label,
                p.mode,
                share("cycles_npu"),
                share("cycles_cpu"),
                share("cycles_comm_exposed"),
                share("cycles_comm")
            );
        }
        out.push(("breakdown.csv".to_string(), s));
    }

    // Hit rate against iteration.
    let rated: Vec<&PointResult> = file.points.iter().filter(|p| p.series.contains_key("hit_in_rate")).collect();
    if !rated.is_empty() {
        let n = rated.iter().map(|p| p.series["hit_in_rate"].len()).max().unwrap_or(0);
        let mut s = String::from("iteration");
        for p in &rated {
            let _ = write!(s, ",{}/{}/hit_in,{}/{}/hit_all", p.label, p.mode, p.label, p.mode);
        }
        s.push('\n');
        for i in 0..n {
            let _ = write!(s, "{}", i + 1);
            for p in &rated {
                let get =
                    |k: &str| p.series.get(k).and_then(|v| v.get(i)).map(|x| format!("{x:.4}")).unwrap_or_default();
                let _ = write!(s, ",{},{}", get("hit_in_rate"), get("hit_all_rate"));
            }
            s.push('\n');
        }
        out.push(("hit_rate.csv".to_string(), s));
    }

    // Verification scheme trade-off.
    let stream: Vec<&PointResult> = file.points.iter().filter(|p| p.workload == "stream").collect();
    if !stream.is_empty() {
        let mut s = String::from("point,mode,granularity,overhead,mac_storage_bytes\n");
        for p in stream {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{}",
                p.label,
                p.mode,
                p.metrics.get("granularity"),
                p.metrics.get("overhead_ppm") as f64 / 1e6,
                p.metrics.get("mac_storage_bytes")
            );
        }
        out.push(("verify_tradeoff.csv".to_string(), s));
    }

    if !file.attacks.is_empty() {
        let mut s = format!("{}\n", CampaignReport::CSV_HEADER);
        for a in &file.attacks {
            s.extend(a.csv().lines().skip(1).map(|l| format!("{l}\n")));
        }
        out.push(("attacks.csv".to_string(), s));
    }
    out
}

/// Loads `dir/metrics.json` and writes the tables into `dir/report/`.
pub fn cmd_report(dir: &Path) -> Result<Vec<Table>> {
    let file = load_metrics(dir)?;
    let tables = build_report(&file);
    let out = dir.join("report");
    std::fs::create_dir_all(&out)?;
    for (name, body) in &tables {
        std::fs::write(out.join(name), body)?;
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut c = Config::default();
        c.workload.tensor_bytes = vec![64 << 10, 128 << 10];
        c.workload.iterations = 3;
        c
    }

    #[test]
    fn sweep_axes_expand_as_a_product() {
        let axes = vec!["threads=1,2".parse().unwrap(), "mac_granularity=64,512,4096".parse().unwrap()];
        let pts = sweep_points(&small(), &axes).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[5].0, "threads=2;mac_granularity=4096");
        assert_eq!(pts[5].1.npu.mgx_mac_granularity, 4096);
        assert!("threads".parse::<SweepAxis>().is_err());
        assert!(sweep_points(&small(), &["bogus=1".parse().unwrap()]).is_err());
    }

    #[test]
    fn run_modes_parse() {
        assert_eq!(RunMode::parse("blocking").unwrap(), RunMode::NpuBlocking);
        assert_eq!(RunMode::parse("tensortee").unwrap(), RunMode::System(SecurityMode::TensorTee));
        assert!(RunMode::parse("fast").is_err());
    }

    #[test]
    fn experiment_writes_metrics_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.workload.kind = WorkloadKind::Zero;
        cfg.workload.iterations = 1;
        let spec = ExperimentSpec {
            name: "t".into(),
            config: cfg,
            modes: SecurityMode::ALL.iter().map(|&m| RunMode::System(m)).collect(),
            sweep: vec![],
            attack: None,
            out_dir: dir.path().to_path_buf(),
        };
        let f = run_experiment(&spec).unwrap();
        assert_eq!(f.points.len(), 3);
        assert!(dir.path().join("zero_phases.csv").is_file());
        let tables = cmd_report(dir.path()).unwrap();
        let perf = &tables.iter().find(|t| t.0 == "performance.csv").unwrap().1;
        assert!(perf.starts_with("point,NonSecure,SGX+MGX,TensorTEE\ndefault,"));
        assert!(perf.contains(",1.0000,"));
        assert!(tables.iter().any(|t| t.0 == "breakdown.csv"));
        // Pure function of the metrics file.
        assert_eq!(build_report(&load_metrics(dir.path()).unwrap()), tables);
    }

    #[test]
    fn blocking_sweep_rows() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            name: "g".into(),
            config: small(),
            modes: vec![RunMode::NpuBlocking],
            sweep: vec!["mac_granularity=64,256,1024,4096".parse().unwrap()],
            attack: None,
            out_dir: dir.path().to_path_buf(),
        };
        let f = run_experiment(&spec).unwrap();
        let ov: Vec<u64> = f.points.iter().map(|p| p.metrics.get("overhead_ppm")).collect();
        let st: Vec<u64> = f.points.iter().map(|p| p.metrics.get("mac_storage_bytes")).collect();
        assert_eq!(ov.len(), 4);
        assert!(st.windows(2).all(|w| w[0] > w[1]), "{st:?}");
        assert!(ov[3] > ov[0], "{ov:?}");
        let t = build_report(&f);
        assert_eq!(t.iter().find(|t| t.0 == "verify_tradeoff.csv").unwrap().1.lines().count(), 5);
    }

    #[test]
    fn empty_dir_lists_expected_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let e = cmd_report(dir.path()).unwrap_err().to_string();
        assert!(e.contains("metrics.json"), "{e}");
    }

    #[test]
    fn adam_points_carry_hit_series() {
        let p = run_point(&small(), RunMode::System(SecurityMode::TensorTee)).unwrap();
        assert_eq!(p.series["hit_in_rate"].len(), 3);
        assert!(p.metrics.get("hit_in") > 0);
        let off = run_point(&small(), RunMode::System(SecurityMode::SgxMgx)).unwrap();
        assert_eq!(off.metrics.get("hit_in"), 0);
    }
}
