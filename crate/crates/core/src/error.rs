use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed {what} at record {record}{}: {reason}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Malformed {
        what: &'static str,
        record: usize,
        line: Option<usize>,
        reason: String,
    },

    #[error("non-monotonic timestamp at record {record}: {t} < previous {prev}")]
    NonMonotonic { record: usize, t: u32, prev: u32 },

    #[error("channel {ch} out of range at record {record} (num_channels = {num_channels})")]
    ChannelOutOfRange {
        record: usize,
        ch: u32,
        num_channels: u32,
    },

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("positional delta ({d_ch}, {d_t}) outside radius window (r_ch = {r_ch}, r_t = {r_t})")]
    OutsideRadius {
        d_ch: i64,
        d_t: i64,
        r_ch: u32,
        r_t: u32,
    },

    #[error("missing quantization parameters for {0}")]
    MissingQuant(String),

    #[error("empty sample: no events accumulated")]
    EmptySample,

    #[error("window {got} out of order (expected {expected})")]
    WindowOrder { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("weights file: {0}")]
    Weights(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
