//! Closed-form dynamics of multi-round self-distillation for linear probing.
//!
//! The crate is organised bottom-up:
//!
//! * [`gram`] — structured Gram matrices, their analytic spectra and
//!   empirical correlation statistics.
//! * [`noise`] — corruption matrices, balanced label realisation, the
//!   constants `p`, `q`, `r_s` and every accuracy condition derived from them.
//! * [`distill`] — the label-averaging operator, output trajectories,
//!   per-sample closed forms and the top-2 partial-label student.
//! * [`oracle`] — an exact softmax fixed-point solver used to measure how far
//!   the linearised dynamics are from the real ones.
//! * [`experiment`] — the configuration-driven harness behind the CLI.

pub mod distill;
pub mod error;
pub mod experiment;
pub mod format;
pub mod gram;
pub mod noise;
pub mod oracle;

pub use error::{Error, Result};
