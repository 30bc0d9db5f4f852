//! Error type shared across the crate.

use std::fmt;

/// Everything that can go wrong building graphs, running adaptation, or
/// driving the harness.
#[derive(Debug)]
pub enum Error {
    /// Two operands with incompatible shapes were passed to an operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand violated an operation's shape requirements.
    InvalidOperand {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// `backward` was called twice on the same graph.
    GraphConsumed,
    /// A configuration field violated its constraint.
    InvalidConfig { field: &'static str, message: String },
    /// Snapshot restore onto a model with a different parameter-name set.
    NameSetMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    /// Gradient map keys do not line up with optimizer state keys.
    GradientKeyMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    /// CLS attention mass collapsed onto the special tokens, leaving
    /// nothing to renormalize over.
    DegenerateAttention { head: usize, retained_mass: f64 },
    /// Adaptation was started while the model did not match its snapshot.
    ModelNotAtSnapshot { parameter: String },
    /// Corruption name not present in the registry.
    UnknownCorruption { name: String, registry: Vec<String> },
    /// Hyperparameter search over an empty grid.
    EmptyGrid,
    /// More bins requested than records available.
    BinCount { bins: usize, records: usize },
    /// A malformed checkpoint, snapshot, or dataset file.
    Format { path: String, message: String },
    /// Config file parse problem.
    ConfigParse { line: usize, message: String },
    /// Config key that no component understands.
    UnknownConfigKey { key: String },
    /// Bad argument to an API or CLI call.
    InvalidArgument { message: String },
    Io {
        context: String,
        source: std::io::Error,
    },
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidOperand { .. } => "invalid_operand",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::GraphConsumed => "graph_consumed",
            Error::InvalidConfig { .. } => "invalid_config",
            Error::NameSetMismatch { .. } => "name_set_mismatch",
            Error::GradientKeyMismatch { .. } => "gradient_key_mismatch",
            Error::DegenerateAttention { .. } => "degenerate_attention",
            Error::ModelNotAtSnapshot { .. } => "model_not_at_snapshot",
            Error::UnknownCorruption { .. } => "unknown_corruption",
            Error::EmptyGrid => "empty_grid",
            Error::BinCount { .. } => "bin_count",
            Error::Format { .. } => "format",
            Error::ConfigParse { .. } => "config_parse",
            Error::UnknownConfigKey { .. } => "unknown_config_key",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidOperand { op, shape, reason } => {
                write!(f, "{op}: invalid operand of shape {shape:?}: {reason}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::GraphConsumed => {
                write!(f, "backward already ran on this graph; graphs are single-use")
            }
            Error::InvalidConfig { field, message } => {
                write!(f, "invalid config: {field}: {message}")
            }
            Error::NameSetMismatch { missing, extra } => write!(
                f,
                "parameter name sets differ: missing {missing:?}, extra {extra:?}"
            ),
            Error::GradientKeyMismatch { missing, extra } => write!(
                f,
                "gradient keys do not match optimizer state: missing {missing:?}, extra {extra:?}"
            ),
            Error::DegenerateAttention {
                head,
                retained_mass,
            } => write!(
                f,
                "head {head}: CLS attention mass on patch tokens is {retained_mass:.3e}; \
                 attention collapsed onto special tokens"
            ),
            Error::ModelNotAtSnapshot { parameter } => write!(
                f,
                "model parameter {parameter} differs from the episode snapshot"
            ),
            Error::UnknownCorruption { name, registry } => {
                write!(f, "unknown corruption {name:?}; registry: {registry:?}")
            }
            Error::EmptyGrid => write!(f, "hyperparameter grid is empty"),
            Error::BinCount { bins, records } => {
                write!(f, "cannot split {records} records into {bins} bins")
            }
            Error::Format { path, message } => write!(f, "{path}: {message}"),
            Error::ConfigParse { line, message } => {
                write!(f, "config line {line}: {message}")
            }
            Error::UnknownConfigKey { key } => write!(f, "unknown config key {key:?}"),
            Error::InvalidArgument { message } => write!(f, "{message}"),
            Error::Io { context, source } => write!(f, "{context}: {source}"),
            Error::Json(e) => write!(f, "json: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
