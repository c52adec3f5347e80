//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Dimension mismatch in a linear-algebra operation.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A configuration value violates a structural constraint.
    Config(String),
    /// Malformed input data (CSV row, token id out of range, ...).
    Data(String),
    /// A metric is undefined on the given inputs (e.g. single-class AUC).
    UndefinedMetric(&'static str),
    /// Attention was requested against a cache that holds no tokens.
    EmptyCache,
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, step: usize },
    /// No closed-form MAC count exists for this policy; use the meter.
    UnsupportedFormula(&'static str),
    /// Predicted cache allocation exceeds the configured byte ceiling.
    CacheCeiling { needed: u64, ceiling: u64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "shape mismatch in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Data(msg) => write!(f, "invalid data: {msg}"),
            Error::UndefinedMetric(what) => write!(f, "metric undefined: {what}"),
            Error::EmptyCache => write!(f, "attention over an empty cache"),
            Error::Diverged { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
            Error::UnsupportedFormula(policy) => {
                write!(f, "no closed-form MAC count for policy {policy}; use measured counts")
            }
            Error::CacheCeiling { needed, ceiling } => write!(
                f,
                "cache allocation of {needed} bytes exceeds ceiling of {ceiling} bytes"
            ),
        }
    }
}

impl core::error::Error for Error {}
