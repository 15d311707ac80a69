//! Operator commands: demonstration generation, training, evaluation and
//! experiment reproduction on top of `ofa-core`.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;

use std::fmt;

use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INFRA: i32 = 4;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: message.into() }
    }

    pub fn infra(message: impl Into<String>) -> Self {
        CliError { code: EXIT_INFRA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ofa::Error> for CliError {
    fn from(e: ofa::Error) -> Self {
        use ofa::Error as E;
        let code = match &e {
            E::Config(_) | E::UnknownTask(_) | E::LimitViolation { .. } => EXIT_CONFIG,
            E::Parse { .. } | E::Format { .. } | E::Io { .. } | E::Shape(_) | E::Untrained | E::EmptySamples | E::DemoRejected(_) => EXIT_DATA,
            _ => EXIT_INFRA,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::infra(e.to_string())
    }
}

/// Stable 64-bit seed from a master seed and a path of labels.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    // keep seeds inside the signed range so they survive structured-text round trips
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) >> 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_label_sensitive() {
        assert_eq!(derive_seed(1, &["a", "b"]), derive_seed(1, &["a", "b"]));
        assert_ne!(derive_seed(1, &["a", "b"]), derive_seed(2, &["a", "b"]));
        assert_ne!(derive_seed(1, &["ab"]), derive_seed(1, &["a", "b"]));
        assert!(derive_seed(7, &["x"]) <= i64::MAX as u64);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(ofa::Error::UnknownTask("x".into())).code, EXIT_CONFIG);
        assert_eq!(CliError::from(ofa::Error::format("f", 3, "bad")).code, EXIT_DATA);
        assert_eq!(CliError::from(ofa::Error::NonFinite { step: 1, loss: f64::NAN, grad_norm: 0.0 }).code, EXIT_INFRA);
    }
}
