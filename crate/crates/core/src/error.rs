use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bit width {0}: expected 1..=64")]
    InvalidWidth(u32),

    #[error("input word {input} out of range for {bits} input bits")]
    InputOutOfRange { input: u64, bits: u32 },

    #[error("invalid conditional probability table: {0}")]
    InvalidCpt(String),

    #[error("cannot compose gates: first emits {out_bits} bits, second expects {in_bits}")]
    Composition { out_bits: u32, in_bits: u32 },

    #[error("dense table of {entries} entries exceeds the limit of {limit}")]
    TableTooLarge { entries: u128, limit: u128 },

    #[error("probability {0} outside (0, 1]")]
    ProbabilityDomain(f64),

    #[error("invalid energy format ({total_bits}, {frac_bits})")]
    InvalidFormat { total_bits: u32, frac_bits: u32 },

    #[error("no support: every outcome is saturated")]
    NoSupport,

    #[error("variable `{variable}` has a zero-support conditional")]
    ZeroSupport { variable: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("relative entropy diverges: q is zero where p is positive (index {index})")]
    DivergentKl { index: usize },

    #[error("schedule violates the update discipline: {pairs:?}")]
    ScheduleViolation { pairs: Vec<(String, String)> },

    #[error("model JSON is malformed at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("factor `{factor}` references unknown variable `{variable}`")]
    UnknownVariable { factor: String, variable: String },

    #[error("factor `{factor}` has a table of length {actual}, expected {expected}")]
    TableLength {
        factor: String,
        expected: usize,
        actual: usize,
    },

    #[error("factor `{factor}` has invalid weight {value} at index {index}")]
    NegativeWeight {
        factor: String,
        index: usize,
        value: f64,
    },

    #[error("duplicate name `{0}`")]
    DuplicateName(String),

    #[error("variable `{variable}` has arity {arity}; value {value} is out of range")]
    ValueOutOfRange {
        variable: String,
        value: usize,
        arity: usize,
    },

    #[error("no joint configuration has positive weight under the evidence")]
    NoPositiveConfiguration,

    #[error("bayes net contains a cycle through `{0}`")]
    Cycle(String),

    #[error("joint state space has {states} states, above the limit of {limit}")]
    StateSpaceTooLarge { states: u128, limit: u128 },

    #[error("unknown name `{0}`")]
    UnknownName(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error kind. Stable across releases.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Json { .. }
            | Error::UnknownVariable { .. }
            | Error::TableLength { .. }
            | Error::NegativeWeight { .. }
            | Error::DuplicateName(_)
            | Error::ValueOutOfRange { .. }
            | Error::NoPositiveConfiguration
            | Error::Cycle(_)
            | Error::InvalidCpt(_)
            | Error::Image(_) => 4,
            Error::Config(_)
            | Error::InvalidFormat { .. }
            | Error::InvalidWidth(_)
            | Error::Composition { .. }
            | Error::UnknownName(_)
            | Error::Shape { .. }
            | Error::LengthMismatch { .. } => 5,
            Error::NoSupport | Error::ZeroSupport { .. } => 6,
            Error::ScheduleViolation { .. } => 7,
            Error::StateSpaceTooLarge { .. } | Error::TableTooLarge { .. } => 8,
            Error::InputOutOfRange { .. } | Error::ProbabilityDomain(_) | Error::DivergentKl { .. } => 10,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
