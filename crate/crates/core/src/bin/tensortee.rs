use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tensortee::attack::{run_campaign, CampaignKind};
use tensortee::config::{Config, SecurityMode, WorkloadKind};
use tensortee::crypto::{
    decrypt_block, encrypt_block, mac_block, mac_xor_aggregate, CounterBinding, KeyMaterial, VersionNumber,
};
use tensortee::error::{Error, Result};
use tensortee::report::{cmd_report, run_experiment, ExperimentSpec, RunMode, SweepAxis};
use tensortee::transfer::{default_enclaves, Session};
use tensortee::workloads::{
    gen_adam_trace, gen_gemm_trace, load_trace, save_trace, write_trace, AccessKind, AdamParams, TraceRecord,
};
use tensortee::zero::{run_toy, toy_config};

#[derive(Parser)]
#[command(name = "tensortee", version, about = "Secure CPU-NPU collaborative training simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment, a sweep or an attack campaign.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated: nonsecure, sgx+mgx, tensortee, blocking, delayed.
        #[arg(long, default_value = "nonsecure,sgx+mgx,tensortee")]
        mode: String,
        #[arg(long, value_parser = parse_workload)]
        workload: Option<WorkloadKind>,
        /// key=v1,v2,... ; repeat for a product sweep.
        #[arg(long)]
        sweep: Vec<SweepAxis>,
        #[arg(long, value_parser = CampaignKind::parse)]
        attack: Option<CampaignKind>,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "run")]
        name: String,
        /// Treat an integrity fault as the expected outcome.
        #[arg(long)]
        expect_fault: bool,
    },
    /// Build normalized tables from a run directory.
    Report { dir: PathBuf },
    /// Write a generated trace, or summarize an existing one.
    TraceDump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_workload)]
        workload: Option<WorkloadKind>,
        /// Existing trace to summarize instead of generating.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output path; `.gz` compresses. Stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Records printed when summarizing.
        #[arg(long, default_value_t = 10)]
        head: usize,
    },
    /// Quick end-to-end sanity checks.
    Selftest,
}

fn parse_workload(s: &str) -> std::result::Result<WorkloadKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown workload {s:?} (adam, gemm, zero)"))
}

fn parse_seed(s: &str) -> Result<u64> {
    let t = s.trim();
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16),
        None => t.parse(),
    };
    r.map_err(|_| Error::Config(format!("TENSORTEE_SEED: {s:?} is not an integer")))
}

fn load_config(path: Option<&Path>, workload: Option<WorkloadKind>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(w) = workload {
        cfg.workload.kind = w;
    }
    if let Ok(s) = std::env::var("TENSORTEE_SEED") {
        cfg.crypto.seed = parse_seed(&s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config: Option<&Path>,
    mode: &str,
    workload: Option<WorkloadKind>,
    sweep: Vec<SweepAxis>,
    attack: Option<CampaignKind>,
    trials: u64,
    out: PathBuf,
    name: String,
    expect_fault: bool,
) -> Result<i32> {
    let cfg = load_config(config, workload)?;
    let modes = mode.split(',').filter(|m| !m.trim().is_empty()).map(RunMode::parse).collect::<Result<Vec<_>>>()?;
    let spec = ExperimentSpec { name, config: cfg, modes, sweep, attack: attack.map(|k| (k, trials)), out_dir: out };
    let file = match run_experiment(&spec) {
        Ok(f) => f,
        Err(e) if expect_fault && e.integrity().is_some() => {
            println!("expected fault: {e}");
            return Ok(0);
        }
        Err(e) => return Err(e),
    };
    for p in &file.points {
        println!(
            "{:<32} {:<10} {:<7} cycles={}",
            p.label,
            p.mode,
            p.workload,
            p.metrics.get("cycles_total").max(p.metrics.get("cycles"))
        );
    }
    let mut code = 0;
    for a in &file.attacks {
        println!(
            "{:?}: {}/{} detected ({:.2}%), escaped sends {}",
            a.kind,
            a.detected,
            a.trials,
            a.detection_rate() * 100.0,
            a.escaped_sends
        );
        if a.detected < a.trials || a.escaped_sends > 0 {
            code = 3;
        }
    }
    if expect_fault && file.attacks.is_empty() {
        eprintln!("--expect-fault given but no integrity fault occurred");
        code = 3;
    }
    println!("wrote {}", spec.out_dir.join("metrics.json").display());
    Ok(code)
}

fn cmd_trace_dump(
    config: Option<&Path>,
    workload: Option<WorkloadKind>,
    input: Option<&Path>,
    out: Option<&Path>,
    head: usize,
) -> Result<i32> {
    let records: Vec<TraceRecord> = match input {
        Some(p) => load_trace(p)?,
        None => {
            let cfg = load_config(config, workload)?;
            match cfg.workload.kind {
                WorkloadKind::Gemm => {
                    let w = &cfg.workload;
                    gen_gemm_trace(w.gemm_m, w.gemm_n, w.gemm_k, w.gemm_tile, w.iterations.clamp(1, 4))?.1
                }
                _ => gen_adam_trace(&AdamParams::from_config(&cfg)).1,
            }
        }
    };
    match (input, out) {
        (_, Some(o)) => {
            save_trace(o, &records)?;
            eprintln!("{} records -> {}", records.len(), o.display());
        }
        (Some(_), None) => {
            let (mut r, mut w, mut b) = (0u64, 0u64, 0u64);
            for rec in &records {
                match rec.kind {
                    AccessKind::R => r += 1,
                    AccessKind::W => w += 1,
                    _ => b += 1,
                }
            }
            println!("records={} reads={r} writes={w} other={b}", records.len());
            write_trace(&mut std::io::stdout().lock(), &records[..head.min(records.len())])?;
        }
        (None, None) => write_trace(&mut std::io::stdout().lock(), &records)?,
    }
    Ok(0)
}

fn check(name: &str, ok: bool, failures: &mut u32) {
    println!("{} {name}", if ok { "ok  " } else { "FAIL" });
    if !ok {
        *failures += 1;
    }
}

fn cmd_selftest() -> Result<i32> {
    let mut failures = 0;
    let cfg = load_config(None, None)?;
    let key = KeyMaterial::from_seed(cfg.crypto.seed);

    let plain = [0xA5u8; 64];
    let c = encrypt_block(&plain, CounterBinding::physical(0x1000), VersionNumber::new(1), &key);
    check("counter-mode round trip", decrypt_block(&c, &key) == plain, &mut failures);

    let tags: Vec<_> = (0..8u64)
        .map(|i| {
            mac_block(&encrypt_block(&[i as u8; 64], CounterBinding::tensor(7, i * 64), VersionNumber::new(1), &key), &key)
        })
        .collect();
    let fwd = mac_xor_aggregate(&tags)?;
    let rev = mac_xor_aggregate(tags.iter().rev())?;
    check("tensor MAC order independence", fwd == rev, &mut failures);

    let (platform, cpu, npu) = default_enclaves(cfg.crypto.seed);
    let good = cpu.report(platform).measurement;
    let bad = Session::establish(platform, &cpu, &npu, good, good ^ 1);
    check("attestation rejects a wrong measurement", matches!(bad, Err(Error::Attestation(_))), &mut failures);

    for kind in [CampaignKind::Bitflip, CampaignKind::Replay, CampaignKind::Escape] {
        let r = run_campaign(&cfg, kind, 40, cfg.crypto.seed)?;
        check(
            &format!("{kind:?} campaign fully detected"),
            r.detected == r.trials && r.escaped_sends == 0,
            &mut failures,
        );
    }

    let toy = toy_config(&cfg);
    let runs = SecurityMode::ALL.iter().map(|&m| run_toy(&toy, m)).collect::<Result<Vec<_>>>()?;
    check("toy weights identical across modes", runs.windows(2).all(|w| w[0].weights == w[1].weights), &mut failures);

    Ok(if failures == 0 { 0 } else { 3 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config, mode, workload, sweep, attack, trials, out, name, expect_fault } => {
            cmd_run(config.as_deref(), &mode, workload, sweep, attack, trials, out, name, expect_fault)
        }
        Cmd::Report { dir } => cmd_report(&dir).map(|tables| {
            for (name, _) in &tables {
                println!("{}", dir.join("report").join(name).display());
            }
            0
        }),
        Cmd::TraceDump { config, workload, input, out, head } => {
            cmd_trace_dump(config.as_deref(), workload, input.as_deref(), out.as_deref(), head)
        }
        Cmd::Selftest => cmd_selftest(),
    };
    match res {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
