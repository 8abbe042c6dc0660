//! Legendre pseudospectral transcription of Bolza optimal-control problems
//! in feedback-linearizable normal form.
//!
//! The pipeline is: [`problem`] definition, [`quadrature`] grid,
//! [`transcribe`] into an NLP, [`nlp`] solve, [`verify`] against the
//! continuous dynamics, and [`report`] for node sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN
#![allow(clippy::needless_range_loop)] // index loops follow the node numbering

pub mod driver;
pub mod error;
pub mod interpolant;
pub mod nlp;
pub mod numeric;
pub mod problem;
pub mod quadrature;
pub mod report;
pub mod spectral;
pub mod transcribe;
pub mod verify;

pub use error::{OcpError, Result};
