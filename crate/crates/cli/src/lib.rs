//! Experiment orchestration for the `modrank` command-line tool.

pub mod config;
pub mod experiment;
pub mod synth;

/// Process exit code for a failed command: 2 for I/O failures, 1 for
/// every other (contract) error.
pub fn exit_code(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<modrank::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}
