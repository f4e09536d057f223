use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// An upstream stage has not produced its artifact yet.
    #[error("missing {what}: {detail}")]
    Dependency { what: String, detail: String },

    #[error("i/o error at {path}: {message}")]
    Io { path: String, message: String },

    #[error("plot error: {0}")]
    Plot(String),

    #[error(transparent)]
    Core(geoshift::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Dependency { .. } => 3,
            _ => 1,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let (kind, extra) = match self {
            CliError::Config { path, .. } => ("config", json!({ "path": path })),
            CliError::Dependency { what, .. } => ("missing_dependency", json!({ "missing": what })),
            CliError::Io { path, .. } => ("io", json!({ "path": path })),
            CliError::Plot(_) => ("plot", json!({})),
            CliError::Core(_) => ("runtime", json!({})),
        };
        let mut body = json!({ "kind": kind, "message": self.to_string() });
        if let (Some(b), Some(e)) = (body.as_object_mut(), extra.as_object()) {
            b.extend(e.clone());
        }
        json!({ "error": body })
    }
}

impl From<geoshift::Error> for CliError {
    fn from(e: geoshift::Error) -> Self {
        match e {
            geoshift::Error::Missing { what, detail } => CliError::Dependency { what, detail },
            geoshift::Error::Config(message) => CliError::Config {
                path: String::new(),
                message,
            },
            other => CliError::Core(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
