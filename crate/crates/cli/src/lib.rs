//! Subcommand dispatch for the `ac3d` binary. Every command is a thin
//! adapter over the library: argument parsing, file I/O, and CSV/key-value
//! formatting live here; all numerics live behind the library operations.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. A global `--seed`
//! governs all randomness; each subcommand derives its own sub-seed by
//! stage-name hashing. `AC3D_THREADS` caps internal parallelism.

mod commands;

use clap::error::ErrorKind;
use clap::Parser;

pub use commands::{Cli, Command};

/// Fixed default seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 20_101;

/// Parses and runs an argv (first element is the program name).
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("AC3D_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
