use thiserror::Error;

/// A detected violation of confidentiality-independent integrity: the data,
/// counters or tree state read from untrusted memory do not authenticate.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IntegrityFault {
    #[error("MAC mismatch on cacheline {addr:#x}")]
    MacMismatch { addr: u64 },
    #[error("hash tree mismatch at level {level} for VN leaf {leaf} (replay or tamper)")]
    ReplayOrTamper { leaf: usize, level: usize },
    #[error("tensor {tensor_id} failed tensor-wise MAC verification")]
    TensorMac { tensor_id: u32 },
    #[error("code line {addr:#x} failed MAC verification")]
    CodeMac { addr: u64 },
    #[error("metadata channel message failed authentication")]
    ChannelTamper,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Integrity(#[from] IntegrityFault),
    #[error("attestation failed: {0}")]
    Attestation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty tensor")]
    EmptyTensor,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("address {0:#x} is outside the protected region or misaligned")]
    BadAddress(u64),
    #[error("unknown tensor {0}")]
    UnknownTensor(u32),
    #[error("execution halted after {faults} verification failures (threshold {threshold})")]
    Halted { faults: u32, threshold: u32 },
    #[error("event scheduled in the past: fire cycle {fire} < now {now}")]
    EventInPast { fire: u64, now: u64 },
    #[error("unknown resource {0}")]
    UnknownResource(String),
    #[error("trace parse error at line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn integrity(&self) -> Option<&IntegrityFault> {
        match self {
            Error::Integrity(f) => Some(f),
            _ => None,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Integrity(_) | Error::Halted { .. } => 3,
            Error::Attestation(_) => 4,
            Error::EventInPast { .. } | Error::UnknownResource(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
