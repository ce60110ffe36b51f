//! Functional and timing simulator of tensor-granularity trusted-execution
//! memory protection for CPU+NPU collaborative training.

pub mod attack;
pub mod baseline;
pub mod config;
pub mod cpu;
pub mod crypto;
pub mod error;
pub mod npu;
pub mod report;
pub mod sim;
pub mod tenanalyzer;
pub mod transfer;
pub mod workloads;
pub mod zero;

pub use error::{Error, IntegrityFault, Result};
