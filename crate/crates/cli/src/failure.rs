//! Exit-code classification of command failures.

use std::fmt;

use ifsl_core::Error as CoreError;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;

/// A failure already known to be a configuration problem.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Configuration errors exit 2, malformed files 3, everything else 1.
/// Invalid arguments from the library count as configuration errors: they
/// are requests the inputs cannot satisfy.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::InvalidArgument(_) => EXIT_CONFIG,
                CoreError::Format { .. } => EXIT_FORMAT,
                CoreError::DegenerateInstrument(_) | CoreError::Io(_) => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classification() {
        let format: anyhow::Error = CoreError::Format {
            offset: 3,
            message: "x".into(),
        }
        .into();
        assert_eq!(exit_code(&format), EXIT_FORMAT);
        let wrapped = Err::<(), _>(format).context("loading").unwrap_err();
        assert_eq!(exit_code(&wrapped), EXIT_FORMAT);
        assert_eq!(exit_code(&config("bad flag")), EXIT_CONFIG);
        assert_eq!(exit_code(&CoreError::InvalidArgument("n".into()).into()), EXIT_CONFIG);
        assert_eq!(exit_code(&CoreError::DegenerateInstrument(0.0).into()), EXIT_RUNTIME);
        assert_eq!(exit_code(&anyhow::anyhow!("boom")), EXIT_RUNTIME);
    }
}
