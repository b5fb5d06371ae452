use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, missing parameters or invalid settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied values outside their valid range.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed corpus or checkpoint contents.
    #[error("data error{}: {message}", location(*.line, .field.as_deref()))]
    Data {
        line: Option<usize>,
        field: Option<String>,
        message: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("property violation: {0}")]
    Property(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn location(line: Option<usize>, field: Option<&str>) -> String {
    match (line, field) {
        (Some(l), Some(f)) => format!(" at line {l}, field `{f}`"),
        (Some(l), None) => format!(" at line {l}"),
        (None, Some(f)) => format!(" in field `{f}`"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn data(message: impl Into<String>) -> Self {
        Error::Data {
            line: None,
            field: None,
            message: message.into(),
        }
    }

    pub fn data_at(line: usize, field: &str, message: impl Into<String>) -> Self {
        Error::Data {
            line: Some(line),
            field: Some(field.to_string()),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Input(_) | Error::Data { .. } | Error::Io(_) => 2,
            Error::Divergence(_) => 3,
            Error::Property(_) => 4,
        }
    }
}

pub(crate) fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Config(format!("{op}: shape mismatch {a:?} vs {b:?}"))
}
