// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal interventions on padding-token representations in
//! text-to-image pipelines.
//!
//! Two intervention methods are provided:
//!
//! * [`ite`]: replace rows of the text-encoder output with clean-pad rows
//!   before generation.
//! * [`idp`]: run a clean stream in lockstep with the prompt stream and
//!   overwrite dropped text rows before every attention block.
//!
//! Both run against any [`backends::Backend`]; the bundled toy backends
//! are deterministic and small enough for exhaustive checks.

pub mod attnprobe;
pub mod backends;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod idp;
pub mod ite;
pub mod matrix;
pub mod metrics;
pub mod repfile;
pub mod reptypes;
pub mod rng;
pub mod runner;

pub use backends::{BackendConfig, BackendHandle, BackendKind, GenerationResult};
pub use error::{Error, Result};
pub use reptypes::{make_keep_mask, Condition, EncodedRep, KeepMask, Method, PaddedPrompt};

/// Toolkit version string.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
