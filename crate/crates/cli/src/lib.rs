//! Library half of the `lcap` command-line tool.
//!
//! Every subcommand is a plain function returning [`Failure`] on error, so
//! the binary only parses arguments and maps failures to exit codes.

pub mod commands;
pub mod config;
pub mod sweep;

use std::fmt;

pub use config::RunConfig;

/// Why a command failed; each variant has a fixed exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    /// Invalid configuration or input, one message per problem.
    Config(Vec<String>),
    Divergence(String),
    Gradcheck(String),
    Io(String),
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Divergence(_) => 3,
            Failure::Gradcheck(_) => 4,
            Failure::Io(_) | Failure::Internal(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Failure {
        Failure::Config(vec![msg.into()])
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(msgs) => {
                writeln!(f, "invalid configuration:")?;
                for m in msgs {
                    writeln!(f, "  - {m}")?;
                }
                Ok(())
            }
            Failure::Divergence(m) => write!(f, "training diverged: {m}"),
            Failure::Gradcheck(m) => write!(f, "gradient check failed: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<lcap_core::Error> for Failure {
    fn from(e: lcap_core::Error) -> Self {
        use lcap_core::Error as E;
        match e {
            E::Config(m) => Failure::Config(m.split("; ").map(str::to_string).collect()),
            E::Length { .. } | E::Checkpoint(_) | E::Contract(_) => Failure::config(e.to_string()),
            E::Divergence { .. } | E::NonFinite(_) => Failure::Divergence(e.to_string()),
            E::Io(io) => Failure::Io(io.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}
