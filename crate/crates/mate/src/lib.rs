//! File formats, experiment commands and the `mate` command-line tool built
//! on `mate-core`.

use std::fmt;
use std::time::Instant;

use mate_core::ttt::Clock;

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod lock;
pub mod manifest;
pub mod pcb;
pub mod report;
pub mod svg;

/// An error in how a command was invoked rather than in running it; the
/// binary exits with status 2 for these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Microseconds since construction.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_micros(&self) -> u64 {
        self.0.elapsed().as_micros() as u64
    }
}
