//! C ABI over the simulator.
//!
//! Every fallible call returns a [`TtStatus`]. On failure the message is kept
//! per thread and can be read with [`tt_last_error`]. Handles are opaque and
//! must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tensortee::attack::{run_campaign, CampaignKind};
use tensortee::baseline::{AttackKind, OffChipRegion};
use tensortee::config::{Config, SecurityMode};
use tensortee::cpu::CpuTee;
use tensortee::crypto::{Line, LINE_BYTES};
use tensortee::error::Error;
use tensortee::report::{apply_setting, run_experiment, ExperimentSpec, RunMode};

/// Status codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Integrity = 3,
    Attestation = 4,
    InvalidArgument = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtMode {
    NonSecure = 0,
    SgxMgx = 1,
    TensorTee = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtRegion {
    Data = 0,
    Vn = 1,
    Mac = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtCampaign {
    Bitflip = 0,
    Replay = 1,
    Escape = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TtCampaignResult {
    pub trials: u64,
    pub detected: u64,
    pub escaped_sends: u64,
    pub escaped_bytes: u64,
}

/// Opaque configuration handle.
pub struct TtConfig(Config);

/// Opaque CPU-side protected memory handle.
pub struct TtCpu(CpuTee);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TtStatus {
    match e.exit_code() {
        2 => TtStatus::Config,
        3 => TtStatus::Integrity,
        4 => TtStatus::Attestation,
        _ => TtStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (TtStatus, String)>) -> TtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TtStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside tensortee".into());
            TtStatus::Panic
        }
    }
}

fn lib(e: Error) -> (TtStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (TtStatus, String) {
    (TtStatus::InvalidArgument, msg.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (TtStatus, String)> {
    if p.is_null() {
        return Err(invalid(&format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{name} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (TtStatus, String)> {
    p.as_mut().ok_or_else(|| invalid(&format!("{name} is null")))
}

fn mode_of(m: TtMode) -> SecurityMode {
    match m {
        TtMode::NonSecure => SecurityMode::NonSecure,
        TtMode::SgxMgx => SecurityMode::SgxMgx,
        TtMode::TensorTee => SecurityMode::TensorTee,
    }
}

/// Last error message on this thread, or null. Valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn tt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tt_config_default(out: *mut *mut TtConfig) -> TtStatus {
    guard(|| {
        let out = handle(out, "out")?;
        *out = Box::into_raw(Box::new(TtConfig(Config::default())));
        Ok(())
    })
}

/// Parses a JSON configuration. Unset fields take defaults.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tt_config_from_json(json: *const c_char, out: *mut *mut TtConfig) -> TtStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let out = handle(out, "out")?;
        let cfg = Config::from_json(text).map_err(lib)?;
        *out = Box::into_raw(Box::new(TtConfig(cfg)));
        Ok(())
    })
}

/// Sets a named knob, for example `mac_granularity` or `seed`.
///
/// # Safety
/// `cfg` must come from this library; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tt_config_set(cfg: *mut TtConfig, key: *const c_char, value: *const c_char) -> TtStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let (k, v) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.0.clone();
        apply_setting(&mut next, k, v).map_err(lib)?;
        next.validate().map_err(lib)?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tt_config_free(cfg: *mut TtConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Creates protected memory of `n_lines` 64-byte lines starting at `base`.
///
/// # Safety
/// `cfg` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tt_cpu_new(
    cfg: *const TtConfig,
    mode: TtMode,
    base: u64,
    n_lines: usize,
    out: *mut *mut TtCpu,
) -> TtStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| invalid("cfg is null"))?;
        let out = handle(out, "out")?;
        if n_lines == 0 || !base.is_multiple_of(LINE_BYTES) {
            return Err(invalid("n_lines must be positive and base line aligned"));
        }
        *out = Box::into_raw(Box::new(TtCpu(CpuTee::new(&cfg.0, mode_of(mode), base, n_lines))));
        Ok(())
    })
}

/// # Safety
/// `cpu` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tt_cpu_free(cpu: *mut TtCpu) {
    if !cpu.is_null() {
        drop(Box::from_raw(cpu));
    }
}

/// Writes one 64-byte line.
///
/// # Safety
/// `line` must point to 64 readable bytes.
#[no_mangle]
pub unsafe extern "C" fn tt_cpu_write(cpu: *mut TtCpu, va: u64, line: *const u8) -> TtStatus {
    guard(|| {
        let cpu = handle(cpu, "cpu")?;
        if line.is_null() {
            return Err(invalid("line is null"));
        }
        let mut l: Line = [0; LINE_BYTES as usize];
        l.copy_from_slice(std::slice::from_raw_parts(line, LINE_BYTES as usize));
        cpu.0.write(va, &l).map_err(lib)
    })
}

/// Reads and verifies one 64-byte line into `out`.
///
/// # Safety
/// `out` must point to 64 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tt_cpu_read(cpu: *mut TtCpu, va: u64, out: *mut u8) -> TtStatus {
    guard(|| {
        let cpu = handle(cpu, "cpu")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let l = cpu.0.read(va).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, l.len()).copy_from_slice(&l);
        Ok(())
    })
}

/// Flips one stored bit of the line at `va` and drops cached metadata so the
/// next read goes off chip. Fails in non-secure mode.
///
/// # Safety
/// `cpu` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn tt_cpu_flip_bit(cpu: *mut TtCpu, region: TtRegion, va: u64, bit: u32) -> TtStatus {
    guard(|| {
        let cpu = handle(cpu, "cpu")?;
        let mem = cpu.0.memory_mut().ok_or_else(|| invalid("memory is unprotected"))?;
        let region = match region {
            TtRegion::Data => OffChipRegion::Data,
            TtRegion::Vn => OffChipRegion::Vn,
            TtRegion::Mac => OffChipRegion::Mac,
        };
        mem.inject_attack(AttackKind::BitFlip { region, bit }, va).map_err(lib)?;
        mem.flush_metadata_cache();
        Ok(())
    })
}

/// Runs a randomized attack campaign.
///
/// # Safety
/// `cfg` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tt_run_campaign(
    cfg: *const TtConfig,
    kind: TtCampaign,
    trials: u64,
    seed: u64,
    out: *mut TtCampaignResult,
) -> TtStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| invalid("cfg is null"))?;
        let out = handle(out, "out")?;
        let kind = match kind {
            TtCampaign::Bitflip => CampaignKind::Bitflip,
            TtCampaign::Replay => CampaignKind::Replay,
            TtCampaign::Escape => CampaignKind::Escape,
        };
        let r = run_campaign(&cfg.0, kind, trials, seed).map_err(lib)?;
        *out = TtCampaignResult {
            trials: r.trials,
            detected: r.detected,
            escaped_sends: r.escaped_sends,
            escaped_bytes: r.escaped_bytes,
        };
        Ok(())
    })
}

/// Runs the configured workload under a comma-separated mode list and writes
/// metrics into `out_dir`.
///
/// # Safety
/// `cfg` must come from this library; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tt_run_experiment(
    cfg: *const TtConfig,
    modes: *const c_char,
    out_dir: *const c_char,
) -> TtStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| invalid("cfg is null"))?;
        let modes =
            str_arg(modes, "modes")?.split(',').map(RunMode::parse).collect::<Result<Vec<_>, _>>().map_err(lib)?;
        let spec = ExperimentSpec {
            name: "ffi".into(),
            config: cfg.0.clone(),
            modes,
            sweep: Vec::new(),
            attack: None,
            out_dir: PathBuf::from(str_arg(out_dir, "out_dir")?),
        };
        run_experiment(&spec).map(drop).map_err(lib)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> *mut TtConfig {
        let mut c = ptr::null_mut();
        assert_eq!(unsafe { tt_config_default(&mut c) }, TtStatus::Ok);
        c
    }

    #[test]
    fn round_trip_and_tamper() {
        let c = cfg();
        let mut cpu = ptr::null_mut();
        unsafe {
            assert_eq!(tt_cpu_new(c, TtMode::SgxMgx, 0x10000, 64, &mut cpu), TtStatus::Ok);
            let line = [7u8; 64];
            let mut back = [0u8; 64];
            assert_eq!(tt_cpu_write(cpu, 0x10040, line.as_ptr()), TtStatus::Ok);
            assert_eq!(tt_cpu_read(cpu, 0x10040, back.as_mut_ptr()), TtStatus::Ok);
            assert_eq!(back, line);
            assert_eq!(tt_cpu_flip_bit(cpu, TtRegion::Data, 0x10040, 9), TtStatus::Ok);
            assert_eq!(tt_cpu_read(cpu, 0x10040, back.as_mut_ptr()), TtStatus::Integrity);
            assert!(!tt_last_error().is_null());
            assert_eq!(tt_cpu_read(cpu, 0x20000, back.as_mut_ptr()), TtStatus::Config);
            tt_cpu_free(cpu);
            tt_config_free(c);
        }
    }

    #[test]
    fn bad_inputs_are_reported() {
        let c = cfg();
        unsafe {
            let k = CString::new("mac_granularity").unwrap();
            let v = CString::new("100").unwrap();
            assert_eq!(tt_config_set(c, k.as_ptr(), v.as_ptr()), TtStatus::Config);
            let v = CString::new("256").unwrap();
            assert_eq!(tt_config_set(c, k.as_ptr(), v.as_ptr()), TtStatus::Ok);
            assert_eq!(tt_config_set(ptr::null_mut(), k.as_ptr(), v.as_ptr()), TtStatus::InvalidArgument);
            let mut out = ptr::null_mut();
            let bad = CString::new("{\"cpu\": {\"cores\": \"x\"}}").unwrap();
            assert_eq!(tt_config_from_json(bad.as_ptr(), &mut out), TtStatus::Config);
            let msg = CStr::from_ptr(tt_last_error()).to_str().unwrap();
            assert!(msg.contains("line 1"), "{msg}");
            tt_config_free(c);
        }
    }

    #[test]
    fn campaign_through_abi() {
        let c = cfg();
        let mut r = TtCampaignResult::default();
        assert_eq!(unsafe { tt_run_campaign(c, TtCampaign::Bitflip, 50, 1, &mut r) }, TtStatus::Ok);
        assert_eq!((r.trials, r.detected, r.escaped_sends), (50, 50, 0));
        unsafe { tt_config_free(c) };
    }
}
