//! Error taxonomy shared by every module in the crate.
//!
//! Variants are grouped by what the caller can do about them: shape/domain
//! errors indicate bad arguments, usage/protocol errors indicate calls made
//! out of contract, format errors carry the byte offset and section of a
//! malformed file, and numeric errors flag non-finite values escaping an
//! operation.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum DdpError {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An input is degenerate (e.g. a zero-norm vector fed to cosine).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An API was called out of contract (wrong order, duplicate id, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An incremental schedule cannot be built from the given arguments.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// The incremental-learning protocol was violated (out-of-order task,
    /// label access outside the current task's class set, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Average precision is undefined because a class has no positive labels;
    /// callers exclude the class and record the exclusion.
    #[error("average precision undefined: {0}")]
    UndefinedAveragePrecision(String),

    /// A serialized artifact is malformed; reports where parsing failed.
    #[error("format error in {section} at byte {offset}: {message}")]
    Format {
        section: String,
        offset: u64,
        message: String,
    },

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An underlying I/O operation failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DdpError>;

impl DdpError {
    /// Process exit code for the CLI: 2 for configuration/usage problems,
    /// 3 for numeric failures, 4 for I/O and file-format failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            DdpError::Shape(_)
            | DdpError::Domain(_)
            | DdpError::Degenerate(_)
            | DdpError::Usage(_)
            | DdpError::Config(_)
            | DdpError::Schedule(_)
            | DdpError::Protocol(_)
            | DdpError::UndefinedAveragePrecision(_) => 2,
            DdpError::Numeric(_) => 3,
            DdpError::Format { .. } | DdpError::Io(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_group_by_failure_class() {
        assert_eq!(DdpError::Config("x".into()).exit_code(), 2);
        assert_eq!(DdpError::Schedule("x".into()).exit_code(), 2);
        assert_eq!(DdpError::Numeric("x".into()).exit_code(), 3);
        assert_eq!(
            DdpError::Format {
                section: "header".into(),
                offset: 8,
                message: "truncated".into()
            }
            .exit_code(),
            4
        );
    }

    #[test]
    fn format_error_reports_section_and_offset() {
        let e = DdpError::Format {
            section: "magic".into(),
            offset: 0,
            message: "bad magic bytes".into(),
        };
        let msg = e.to_string();
        assert!(msg.contains("magic"));
        assert!(msg.contains("byte 0"));
    }
}
