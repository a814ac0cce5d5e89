// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use serde::Serialize;
use stylesteer::corpus::CorpusError;
use stylesteer::experiments::ExperimentError;
use stylesteer::localization::LocalizationError;
use stylesteer::shallow::ShallowError;
use stylesteer::steering::SteeringError;
use stylesteer::tinylm::TinyLmError;

/// Error reported by the command line as one JSON object on stderr.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    /// Module that raised the error.
    pub source: &'static str,
    /// Error variant, e.g. `UnknownStyle`.
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(source: &'static str, kind: &str, message: impl Into<String>) -> Self {
        CliError {
            source,
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError::new("io", "IoFailure", message)
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new("cli", "Usage", message)
    }

    pub fn missing(artifact: &str, producer: &str) -> Self {
        CliError::new(
            "cli",
            "MissingArtifact",
            format!("{artifact} not found; run `stylesteer {producer}` first"),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}: {}", self.source, self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

/// Variant name from a derived `Debug` representation.
fn variant<E: fmt::Debug>(e: &E) -> String {
    let debug = format!("{e:?}");
    debug
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or("Unknown")
        .to_string()
}

macro_rules! from_lib {
    ($ty:ty, $source:literal) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($source, &variant(&e), e.to_string())
            }
        }
    };
}

from_lib!(CorpusError, "corpus");
from_lib!(TinyLmError, "tinylm");
from_lib!(LocalizationError, "localization");
from_lib!(ShallowError, "shallow");
from_lib!(SteeringError, "steering");
from_lib!(ExperimentError, "experiments");

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}
