//! Acceptance criteria 1 to 10. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tensortee::attack::{bitflip_campaign, escape_campaign, replay_campaign};
use tensortee::baseline::CostReport;
use tensortee::config::{Config, SecurityMode};
use tensortee::cpu::CpuTee;
use tensortee::crypto::{
    encrypt_block, mac_block, mac_xor_aggregate, CounterBinding, KeyMaterial, Line, MacTag, VersionNumber, LINE_BYTES,
};
use tensortee::npu::{stream_cycles, NpuTee, VerifyMode};
use tensortee::tenanalyzer::{InvalidateReason, TenAnalyzer, TenAnalyzerConfig, VnOracle, WriteOutcome};
use tensortee::transfer::{transfer_report, Direction, Protocol};
use tensortee::workloads::{gen_adam_trace, gen_gemm_trace, AdamParams, Replayer};
use tensortee::zero::{gradient_exchange, run_toy, run_zero_offload, toy_config};

struct Verdict {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Verdict);

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn analyzer(cfg: &Config) -> TenAnalyzer {
    TenAnalyzer::new(TenAnalyzerConfig::from(&cfg.cpu))
}

fn c1_tamper() -> Verdict {
    let cfg = Config::default();
    let t0 = Instant::now();
    let flips = bitflip_campaign(&cfg, 1000, 0xA11CE).unwrap();
    let replays = replay_campaign(&cfg, 100, 0xB0B).unwrap();
    let dt = t0.elapsed();
    let targets: Vec<String> =
        flips.by_target.iter().map(|(k, t)| format!("{k} {}/{}", t.detected, t.trials)).collect();
    let ok = flips.trials == 1000
        && flips.detected == 1000
        && flips.by_target.len() == 4
        && replays.trials == 100
        && replays.detected == 100
        && dt < Duration::from_secs(30);
    verdict(
        ok,
        format!(
            "bitflips {}/{} [{}], replays {}/{}, {:.2}s (need 100%, 100%, < 30 s)",
            flips.detected,
            flips.trials,
            targets.join(", "),
            replays.detected,
            replays.trials,
            dt.as_secs_f64()
        ),
    )
}

fn random_line(rng: &mut ChaCha8Rng) -> Line {
    let mut l = [0u8; 64];
    rng.fill(&mut l[..]);
    l
}

fn c2_xor_mac() -> Verdict {
    let key = KeyMaterial::from_seed(0x5EED);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut perm_bad = 0;
    let mut single_bad = 0;
    for t in 0..10_000u64 {
        let n = rng.gen_range(1..=32usize);
        let vn = VersionNumber::new(rng.gen_range(0..1 << 20));
        let tags: Vec<MacTag> = (0..n as u64)
            .map(|i| {
                mac_block(
                    &encrypt_block(&random_line(&mut rng), CounterBinding::tensor(t, i * LINE_BYTES), vn, &key),
                    &key,
                )
            })
            .collect();
        let mut shuffled = tags.clone();
        shuffled.shuffle(&mut rng);
        if mac_xor_aggregate(&tags).unwrap() != mac_xor_aggregate(&shuffled).unwrap() {
            perm_bad += 1;
        }
        if mac_xor_aggregate(&tags[..1]).unwrap() != tags[0] {
            single_bad += 1;
        }
    }

    // Tile-permuted stores on the NPU against an in-order store.
    let mut order_bad = 0;
    let mut oracle_bad = 0;
    for t in 0..200u32 {
        let tiles = rng.gen_range(1..=8usize);
        let tile = rng.gen_range(1..=8usize);
        let n = tiles * tile;
        let plain: Vec<Line> = (0..n).map(|_| random_line(&mut rng)).collect();
        let mut tile_order: Vec<usize> = (0..tiles).collect();
        tile_order.shuffle(&mut rng);
        let order: Vec<usize> = tile_order.iter().flat_map(|&k| k * tile..(k + 1) * tile).collect();
        let mut a = NpuTee::new(key.clone(), VerifyMode::DelayedTensor, 4);
        let mut b = NpuTee::new(key.clone(), VerifyMode::DelayedTensor, 4);
        a.register_tensor(t, n).unwrap();
        b.register_tensor(t, n).unwrap();
        a.store_tensor(t, &plain, None).unwrap();
        b.store_tensor(t, &plain, Some(&order)).unwrap();
        let (ra, rb) = (a.record(t).unwrap(), b.record(t).unwrap());
        if ra.stored_mac != rb.stored_mac {
            order_bad += 1;
        }
        let expect = (0..n).fold(MacTag::ZERO, |acc, i| {
            acc ^ mac_block(
                &encrypt_block(&plain[i], CounterBinding::tensor(u64::from(t), i as u64 * LINE_BYTES), ra.vn, &key),
                &key,
            )
        });
        if expect != ra.stored_mac {
            oracle_bad += 1;
        }
    }
    verdict(
        perm_bad + single_bad + order_bad + oracle_bad == 0,
        format!(
            "10000 tensors: permutation mismatches {perm_bad}, single-element mismatches {single_bad}; 200 tiled stores: order mismatches {order_bad}, fold mismatches {oracle_bad} (need all 0)"
        ),
    )
}

fn c3_gemm() -> Verdict {
    let cfg = Config::default();
    let t0 = Instant::now();
    let (layout, trace) = gen_gemm_trace(256, 256, 256, 64, 2).unwrap();
    let mut r = Replayer::new(analyzer(&cfg), layout);
    let segs = r.replay(&trace).unwrap();
    let dt = t0.elapsed();
    let h = segs[1].hit_in_rate();
    verdict(
        h >= 0.97 && dt < Duration::from_secs(120),
        format!(
            "hit_in on pass 2 = {:.2}% (pass 1 {:.2}%), {:.2}s (need >= 97%, < 120 s)",
            h * 100.0,
            segs[0].hit_in_rate() * 100.0,
            dt.as_secs_f64()
        ),
    )
}

fn c4_adam() -> Verdict {
    let cfg = Config::default();
    let p = AdamParams::from_config(&cfg);
    let (layout, trace) = gen_adam_trace(&p);
    let mut r = Replayer::new(analyzer(&cfg), layout);
    let segs = r.replay(&trace).unwrap();
    let hin: Vec<f64> = segs.iter().map(|s| s.hit_in_rate()).collect();
    let hall: Vec<f64> = segs.iter().map(|s| s.hit_all_rate()).collect();
    let n = hin.len();
    let min_all_after_1 = hall[1..].iter().cloned().fold(1.0, f64::min);
    let monotone = hin.windows(2).all(|w| w[1] >= w[0]);
    let ok = n == 20 && min_all_after_1 >= 0.99 && monotone && hin[19] >= hin[4] && hin[4] >= hin[0] && hin[19] >= 0.90;
    verdict(
        ok,
        format!(
            "{n} iterations: min hit_all(2..) {:.2}%, hit_in(1/5/20) {:.2}/{:.2}/{:.2}%, non-decreasing {monotone} (need >= 99%, ordered, hit_in(20) >= 90%)",
            min_all_after_1 * 100.0,
            hin[0] * 100.0,
            hin[4] * 100.0,
            hin[19] * 100.0
        ),
    )
}

/// Distinct VN and tree lines a cold sequential read of lines `0..n` touches
/// in an 8-ary tree over `total` lines. The single top node is off chip;
/// only its hash is on chip.
fn baseline_meta_lines(n: u64, total: u64) -> u64 {
    let mut covered = n.div_ceil(8);
    let mut width = total.div_ceil(8);
    let mut lines = covered;
    loop {
        covered = covered.div_ceil(8);
        width = width.div_ceil(8);
        lines += covered;
        if width == 1 {
            return lines;
        }
    }
}

fn c5_metadata() -> Verdict {
    let cfg = Config::default();
    let n: usize = 4096;
    let base = 0x4000_0000u64;
    let mut tee = CpuTee::new(&cfg, SecurityMode::TensorTee, base, n);
    let mut passes = 0;
    loop {
        passes += 1;
        tee.reset_cost();
        tee.analyzer_mut().stats = Default::default();
        for i in 0..n as u64 {
            tee.read(base + i * LINE_BYTES).unwrap();
        }
        let (hit_in, ..) = tee.read_kind_stats();
        if hit_in == n as u64 || passes == 8 {
            break;
        }
    }
    let (hit_in, ..) = tee.read_kind_stats();
    let tracked: CostReport = *tee.cost();

    let mut sgx = CpuTee::new(&cfg, SecurityMode::SgxMgx, base, n);
    for i in 0..n as u64 {
        sgx.read(base + i * LINE_BYTES).unwrap();
    }
    let b = *sgx.cost();
    let oracle_vn_tree = baseline_meta_lines(n as u64, n as u64) * LINE_BYTES;
    let oracle_min = n as u64 * LINE_BYTES + oracle_vn_tree;
    let tracked_vn_tree = tracked.vn_bytes + tracked.tree_bytes;
    let ok = hit_in == n as u64
        && tracked_vn_tree == 0
        && b.mac_bytes >= n as u64 * LINE_BYTES
        && b.vn_bytes + b.tree_bytes == oracle_vn_tree
        && b.metadata_bytes() >= oracle_min;
    verdict(
        ok,
        format!(
            "after {passes} passes hit_in {hit_in}/{n}; TensorTEE VN+tree bytes {tracked_vn_tree} (need 0); baseline MAC {} + VN/tree {} bytes vs analytic {} + {}",
            b.mac_bytes,
            b.vn_bytes + b.tree_bytes,
            n as u64 * LINE_BYTES,
            oracle_vn_tree
        ),
    )
}

fn c6_blocking() -> Verdict {
    let cfg = Config::default();
    let lines: Vec<u64> = cfg.workload.tensor_bytes.iter().map(|b| b / LINE_BYTES * cfg.workload.npu_reuse).collect();
    let plain = stream_cycles(&cfg.npu, &lines, None);
    let delayed = stream_cycles(&cfg.npu, &lines, Some(VerifyMode::DelayedTensor));
    let mut rows = Vec::new();
    let mut ordered = true;
    let mut g = VerifyMode::MIN_GRANULARITY;
    let mut ov4k = 0.0;
    while g <= VerifyMode::MAX_GRANULARITY {
        let b = stream_cycles(&cfg.npu, &lines, Some(VerifyMode::blocking(g).unwrap()));
        ordered &= delayed.cycles <= b.cycles;
        let ov = b.overhead_vs(&plain);
        if g == VerifyMode::MAX_GRANULARITY {
            ov4k = ov;
        }
        rows.push(format!("{g}B {:.3}%", ov * 100.0));
        g *= 2;
    }
    let ovd = delayed.overhead_vs(&plain);
    verdict(
        ordered && ov4k >= 4.0 * ovd,
        format!(
            "delayed {:.5}%, blocking [{}]; delayed <= blocking for all G: {ordered} (need ordering and 4 KiB >= 4x delayed)",
            ovd * 100.0,
            rows.join(", ")
        ),
    )
}

fn c7_transfer() -> Verdict {
    let cfg = Config::default();
    let bytes = 4 << 20;
    let d = transfer_report(&cfg, Protocol::Direct, Direction::NpuToCpu, bytes).unwrap();
    let b = transfer_report(&cfg, Protocol::Baseline, Direction::NpuToCpu, bytes).unwrap();
    let gb = gradient_exchange(&cfg, Protocol::Baseline).unwrap();
    let gd = gradient_exchange(&cfg, Protocol::Direct).unwrap();
    let ratio = gb.exposed as f64 / gd.exposed.max(1) as f64;
    let ok = d.bytes_aes == 0 && d.bytes_link == bytes && b.bytes_aes == 4 * bytes && ratio >= 5.0;
    verdict(
        ok,
        format!(
            "direct aes {} link {} / {bytes}; baseline aes {} (= {}x); gradient exposed {} vs {} cycles = {ratio:.1}x (need 0, exact, 4x, >= 5x)",
            d.bytes_aes,
            d.bytes_link,
            b.bytes_aes,
            b.bytes_aes / bytes,
            gb.exposed,
            gd.exposed
        ),
    )
}

fn c8_transparency() -> Verdict {
    let cfg = toy_config(&Config::default());
    let runs: Vec<_> = SecurityMode::ALL.iter().map(|&m| run_toy(&cfg, m).unwrap()).collect();
    let same = runs.windows(2).all(|w| w[0].weights == w[1].weights) && !runs[0].weights.is_empty();
    let ns = run_zero_offload(&cfg, SecurityMode::NonSecure).unwrap().cycles_total;
    let tt = run_zero_offload(&cfg, SecurityMode::TensorTee).unwrap().cycles_total;
    let over = tt as f64 / ns as f64 - 1.0;
    verdict(
        same && over <= 0.10,
        format!("weights identical across 3 modes: {same}; TensorTEE {tt} vs NonSecure {ns} cycles = {:+.2}% (need identical, <= 10%)", over * 100.0),
    )
}

/// Reference model of the update guard: which outcome a write must produce
/// given the entry covering it and the lines already written in its update.
#[derive(Debug, PartialEq, Eq)]
enum Expect {
    Miss,
    Tracked,
    Invalidate(InvalidateReason),
}

fn c9_vn_fuzz() -> Verdict {
    const LINES: u64 = 1024;
    let cfg = Config::default();
    let mut ta = TenAnalyzer::new(TenAnalyzerConfig { table_entries: 16, ..TenAnalyzerConfig::from(&cfg.cpu) });
    let mut oracle = VnOracle::new(0, LINES * LINE_BYTES);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Fixed tensor footprints in lines: (first, count, stride).
    let tensors: Vec<(u64, u64, u64)> =
        vec![(0, 64, 1), (64, 200, 1), (300, 32, 2), (400, 96, 1), (512, 16, 4), (600, 300, 1), (920, 100, 1)];
    let mut written: HashMap<(u64, u64), BTreeSet<u64>> = HashMap::new();
    let (mut ops, mut violations, mut invalidations, mut mismatch, mut tracked) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut first_error = None;

    let write =
        |ta: &mut TenAnalyzer, oracle: &mut VnOracle, va: u64, written: &mut HashMap<(u64, u64), BTreeSet<u64>>| {
            let snap = ta.entry_containing(va).map(|e| (e.base, e.last_addr(), e.uf, e.shape.lines()));
            let expect = match snap {
                None => Expect::Miss,
                Some((base, last, uf, n)) => {
                    let set = written.entry((base, last)).or_default();
                    if !uf {
                        set.clear();
                    }
                    if !uf && va != base {
                        Expect::Invalidate(InvalidateReason::NotStarted)
                    } else if uf && set.contains(&va) {
                        Expect::Invalidate(InvalidateReason::DoubleUpdate)
                    } else if uf && va == last && set.len() as u64 + 1 != n {
                        Expect::Invalidate(InvalidateReason::Incomplete)
                    } else {
                        set.insert(va);
                        Expect::Tracked
                    }
                }
            };
            let out = oracle.write(ta, va);
            let got = match out {
                WriteOutcome::Miss => Expect::Miss,
                WriteOutcome::Invalidate(r) => Expect::Invalidate(r),
                _ => Expect::Tracked,
            };
            if matches!(out, WriteOutcome::HitEdgeFinish { .. } | WriteOutcome::Invalidate(_)) {
                if let Some((base, last, ..)) = snap {
                    written.remove(&(base, last));
                }
            }
            (expect, got)
        };

    while ops < 100_000 {
        let &(first, count, stride) = tensors.choose(&mut rng).unwrap();
        let addrs: Vec<u64> = (0..count).map(|i| (first + i * stride) * LINE_BYTES).collect();
        let mut seq: Vec<(bool, u64)> = Vec::new();
        match rng.gen_range(0..100) {
            0..=34 => seq.extend(addrs.iter().map(|&a| (false, a))),
            35..=64 => seq.extend(addrs.iter().map(|&a| (true, a))),
            65..=74 => {
                let cut = rng.gen_range(1..addrs.len());
                seq.extend(addrs[..cut].iter().map(|&a| (true, a)));
            }
            75..=84 => {
                let mut s = addrs.clone();
                let i = rng.gen_range(0..s.len());
                let j = rng.gen_range(0..s.len());
                s.swap(i, j);
                s.insert(rng.gen_range(0..s.len()), s[rng.gen_range(0..s.len())]);
                seq.extend(s.into_iter().map(|a| (true, a)));
            }
            85..=92 => seq.extend((0..8).map(|_| (true, rng.gen_range(0..LINES) * LINE_BYTES))),
            _ => seq.extend((0..8).map(|_| (false, rng.gen_range(0..LINES) * LINE_BYTES))),
        }
        for (is_write, va) in seq {
            ops += 1;
            if is_write {
                let (expect, got) = write(&mut ta, &mut oracle, va, &mut written);
                if let Expect::Invalidate(_) = expect {
                    violations += 1;
                }
                if got == Expect::Tracked {
                    tracked += 1;
                }
                if let Expect::Invalidate(_) = got {
                    invalidations += 1;
                    if ta.entry_containing(va).is_some() {
                        mismatch += 1;
                    }
                }
                if expect != got {
                    mismatch += 1;
                    first_error.get_or_insert(format!("write {va:#x}: expected {expect:?}, got {got:?}"));
                }
            } else {
                oracle.read(&mut ta, va);
            }
            if let Err(e) = ta.check_consistency(|a| oracle.get(a)) {
                mismatch += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    verdict(
        mismatch == 0 && violations > 0 && tracked > 0,
        format!(
            "{ops} ops, {tracked} tracked writes, {violations} guard-violating writes, {invalidations} invalidations, {mismatch} desyncs or wrong outcomes{} (need 0)",
            first_error.map(|e| format!(" [first: {e}]")).unwrap_or_default()
        ),
    )
}

fn c10_escape() -> Verdict {
    let cfg = Config::default();
    let r = escape_campaign(&cfg, 500, 0xE5C).unwrap();
    verdict(
        r.escaped_sends == 0 && r.escaped_bytes == 0 && r.inst_delayed == 0 && r.detected == r.trials,
        format!(
            "{} trials: tampered bytes sent {}, instruction fetches on delayed path {}, detected {}/{} (need 0, 0, all)",
            r.trials, r.escaped_bytes, r.inst_delayed, r.detected, r.trials
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("crypto/tamper detection", c1_tamper),
        ("XOR-MAC algebra", c2_xor_mac),
        ("GEMM structure detection", c3_gemm),
        ("Adam hit-rate convergence", c4_adam),
        ("metadata traffic elimination", c5_metadata),
        ("blocking vs delayed verification", c6_blocking),
        ("transfer protocol accounting", c7_transfer),
        ("functional transparency", c8_transparency),
        ("VN consistency fuzz", c9_vn_fuzz),
        ("escape proofing", c10_escape),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {} [{:.1}s]",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
