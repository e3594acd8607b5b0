//! File formats, configuration and the command line around `itsr-core`.

// `as Float` is a no-op in the default precision build.
#![allow(clippy::unnecessary_cast)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradref;
pub mod manifest;
pub mod output;
pub mod tsre;
