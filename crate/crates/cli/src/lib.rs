//! Library surface of the `radlabel` binary, exposed so integration tests can
//! exercise run-directory, manifest, and argument plumbing directly.

pub mod args;
pub mod ensemble_run;
pub mod errors;
pub mod eval;
pub mod label;
pub mod manifest;
pub mod rundir;
pub mod select_shots;
pub mod shots;
