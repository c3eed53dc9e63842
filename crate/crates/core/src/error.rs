use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the accelerator model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// An Inf or NaN reached a datapath that has no special-value handling.
    NonFiniteInput,
    /// More operands than the configured lane count.
    LaneCount { given: usize, lanes: usize },
    /// INT4 weight outside the symmetric range.
    Int4Range(i32),
    InvalidConfig(String),
    /// (level, encoding) pair with no packing column.
    UnsupportedFormat(String),
    /// A window holds more nonzeros than the sparsity level allows.
    SparsityViolation { window: usize, nonzeros: usize, limit: usize },
    Malformed(String),
    ShapeMismatch(String),
    CapacityExceeded(String),
    TokenOutOfRange { token: u32, max_token: u32 },
    /// A lowered field does not fit its slot for some token in range.
    FieldOverflow { instruction: usize, field: &'static str, value: i64 },
    MissingStepPower(String),
    MemoryFault(String),
    Register(String),
    Expr(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFiniteInput => write!(f, "Inf/NaN input rejected"),
            Error::LaneCount { given, lanes } => {
                write!(f, "{given} operands exceed the {lanes} available lanes")
            }
            Error::Int4Range(v) => write!(f, "INT4 weight {v} outside [-7, 7]"),
            Error::InvalidConfig(m) => write!(f, "invalid configuration: {m}"),
            Error::UnsupportedFormat(m) => write!(f, "unsupported packing format: {m}"),
            Error::SparsityViolation { window, nonzeros, limit } => write!(
                f,
                "window {window} holds {nonzeros} nonzeros, at most {limit} allowed"
            ),
            Error::Malformed(m) => write!(f, "malformed data: {m}"),
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::CapacityExceeded(m) => write!(f, "capacity exceeded: {m}"),
            Error::TokenOutOfRange { token, max_token } => {
                write!(f, "token {token} outside [1, {max_token}]")
            }
            Error::FieldOverflow { instruction, field, value } => write!(
                f,
                "instruction {instruction}: field {field} value {value} does not fit its slot"
            ),
            Error::MissingStepPower(s) => write!(f, "no power entry for step {s}"),
            Error::MemoryFault(m) => write!(f, "memory fault: {m}"),
            Error::Register(m) => write!(f, "register access: {m}"),
            Error::Expr(m) => write!(f, "expression error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
