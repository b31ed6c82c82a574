//! Library surface of the experiment runner, kept separate from the binary
//! so integration and acceptance tests can drive runs in-process.

pub mod args;
pub mod config;
pub mod runner;
