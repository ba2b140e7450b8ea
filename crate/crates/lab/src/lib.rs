//! Experiment harness for the gradient inversion laboratory: configuration,
//! seeded sweeps with CSV and image output, the trend suite, and the
//! client-side validation entry point.

pub mod config;
pub mod experiments;
pub mod harness;
pub mod image;
pub mod refspec;
pub mod trends;

/// Process exit codes shared by every subcommand.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const CASE_FAILURES: i32 = 2;
    pub const ACCEPTANCE: i32 = 3;
}
