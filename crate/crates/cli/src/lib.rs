//! Standard-library companion to `gdds-core`: on-disk formats, corpus
//! ingestion, run configuration, the kernel latency benchmark, and the
//! `gdds` command line interface.
//!
//! The core crate holds the numerics and never touches the filesystem;
//! everything here is plumbing around it.  All binary formats are
//! little-endian with four-byte ASCII magics, all text outputs are
//! JSON-lines, and every randomized entry point takes an explicit seed so
//! results are bit-reproducible regardless of worker count.

pub mod bench;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod formats;
pub mod synth;
