//! Filesystem side of pinlab: the checkpoint codec, TOML run config, CSV
//! tables, PPM/PGM exports and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod image;
pub mod report;
