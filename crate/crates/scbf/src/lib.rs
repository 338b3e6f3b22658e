//! File formats, parallel campaigns and the `scbf` command line on top of
//! [`scbf_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod campaign;
pub mod cli;
pub mod config;
pub mod error;
pub mod qp_io;
pub mod stats;
pub mod trace_io;

pub use error::{CliError, ExitCode};
