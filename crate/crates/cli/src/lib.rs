//! Command-line front end: one function per subcommand, each returning data
//! so the binary only formats and maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod report;

use fixformer_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Usage and contract errors → 1, data and I/O → 2, numerical failures → 3.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) | Error::Dimension { .. } => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::EmptyInput(_) | Error::EmptyResult(_) => EXIT_DATA,
        Error::NonFinite(_) | Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

/// Caps the global rayon pool at `FIXFORMER_THREADS` when set.
pub fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("FIXFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Contract(format!("FIXFORMER_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Contract(format!("cannot size thread pool: {e}")))
}
