//! Crash reporting for diversified binaries: a synthetic layout engine,
//! diversification with replayable decisions, symbol-file replication and
//! patching, and CFI-based stack unwinding.

pub mod cfi;
pub mod collector;
pub mod deltadata;
pub mod diversify;
pub mod progmodel;
pub mod replicate;
pub mod symfile;
