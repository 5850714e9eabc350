//! Versioned JSON configuration documents for the command-line tools.
//!
//! Every top-level file carries a `schema_version`; unknown keys are hard
//! errors rather than warnings, so silent config drift cannot change what a
//! run means. The documents written back next to results (`manifest.json`)
//! use these same types — re-running a manifest reproduces the run.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::GenConfig;
use crate::sensitivity::{ConvergenceConfig, ImportanceStudyConfig, NoiseStudyConfig, OvbStudyConfig};
use crate::simulation::ScenarioConfig;
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config `{path}` is invalid: {message}")]
    Parse { path: String, message: String },
    #[error("config `{path}` has schema_version {got}, this build expects {expected}")]
    Version { path: String, got: u32, expected: u32 },
}

pub trait Versioned {
    fn schema_version(&self) -> u32;
}

macro_rules! versioned_file {
    ($(#[$doc:meta])* $name:ident { $($(#[$fdoc:meta])* $field:ident : $ty:ty),+ $(,)? }) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            pub schema_version: u32,
            $($(#[$fdoc])* pub $field: $ty,)+
        }

        impl Versioned for $name {
            fn schema_version(&self) -> u32 {
                self.schema_version
            }
        }
    };
}

versioned_file!(
    /// Synthetic-cohort generation document.
    GenFile { generate: GenConfig }
);

versioned_file!(
    /// Scenario document; `k_values` is only consulted by the sweep command
    /// (and stamped into sweep manifests).
    ScenarioFile {
        scenario: ScenarioConfig,
        #[serde(default)]
        k_values: Vec<usize>,
    }
);

versioned_file!(
    /// Effect-noise robustness study document.
    NoiseFile { noise: NoiseStudyConfig }
);

versioned_file!(
    /// Training-size convergence study document.
    ConvergenceFile { convergence: ConvergenceConfig }
);

versioned_file!(
    /// Omitted-variable-bias study document.
    OvbFile { ovb: OvbStudyConfig }
);

versioned_file!(
    /// Feature-importance study document.
    ImportanceFile { importance: ImportanceStudyConfig }
);

/// Load and version-check a config document.
pub fn load_config<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let doc: T = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: path.display().to_string(), message: e.to_string() })?;
    if doc.schema_version() != SCHEMA_VERSION {
        return Err(ConfigError::Version {
            path: path.display().to_string(),
            got: doc.schema_version(),
            expected: SCHEMA_VERSION,
        });
    }
    Ok(doc)
}

/// Write a config document (pretty-printed, trailing newline).
pub fn save_config<T: Serialize>(doc: &T, path: &Path) -> Result<(), ConfigError> {
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|e| ConfigError::Parse { path: path.display().to_string(), message: e.to_string() })?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
}
