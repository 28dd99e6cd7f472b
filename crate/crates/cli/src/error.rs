use serde_json::json;
use thiserror::Error;

use panel_dml::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

/// Broad failure class; the process exit code is part of the interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn kind(&self) -> Kind {
        match self {
            CliError::Config(_) => Kind::Config,
            CliError::Output(_) => Kind::Data,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Lag { .. } | CoreError::SelfDemean(_) => {
                    Kind::Config
                }
                CoreError::Balance { .. }
                | CoreError::Parse { .. }
                | CoreError::Duplicate(_)
                | CoreError::Domain(_)
                | CoreError::Io(_)
                | CoreError::Csv(_) => Kind::Data,
                CoreError::Shape { .. }
                | CoreError::Numeric(_)
                | CoreError::NotConverged { .. } => Kind::Numeric,
            },
        }
    }

    /// Machine-readable form printed on standard error.
    pub fn to_json(&self) -> String {
        let kind = self.kind();
        json!({
            "error": {
                "kind": kind.name(),
                "exit_code": kind.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}
