use std::fmt;

/// A failure reported as one JSON line on stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            "usage" | "config" => 2,
            "io" => 3,
            _ => 1,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<wsiseg::Error> for CliError {
    fn from(e: wsiseg::Error) -> Self {
        use wsiseg::Error;
        let kind = match &e {
            Error::Io(_) => "io",
            Error::Json(_) | Error::Format(_) => "format",
            Error::Infeasible(_) | Error::InvalidArgument(_) | Error::EmptyClass(_) => "config",
            Error::Worker(_) => "worker",
            _ => "runtime",
        };
        CliError::new(kind, e.to_string())
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}
