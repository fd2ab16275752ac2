//! Multimodal pathology/genomics learning with prototype cross-attention,
//! modularity-based prototype alignment, and register-token unified decoding.

pub mod assignment;
pub mod attention;
pub mod cli;
pub mod datakit;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numkit;
pub mod verify;

pub use error::{Error, Result};
