//! Experiment harness: configuration, orchestration, reports and plots.

pub mod config;
pub mod experiment;
pub mod plot;
pub mod report;

use advpoison_core::Error;

/// A core error, optionally tagged with the trial or stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{}{source}", context.as_ref().map(|c| format!("{c}: ")).unwrap_or_default())]
pub struct HarnessError {
    pub context: Option<String>,
    #[source]
    pub source: Error,
}

impl HarnessError {
    pub fn in_trial(id: &str, source: Error) -> Self {
        Self {
            context: Some(id.to_string()),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        if self.source.is_config() {
            2
        } else if self.source.is_numeric() {
            3
        } else {
            1
        }
    }
}

impl From<Error> for HarnessError {
    fn from(source: Error) -> Self {
        Self { context: None, source }
    }
}
