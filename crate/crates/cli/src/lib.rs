//! IO companion to `endodepth-core`: file formats and run configuration used
//! by the `endodepth` binary.

pub mod config;
pub mod formats;
