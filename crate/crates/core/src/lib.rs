//! Personalisation-via-enrolment for emotion classifiers, plus speaker-level
//! fairness evaluation of any classifier's predictions.
//!
//! The crate is split into:
//!
//! - [`corpus`]: utterance data model, the text corpus format, synthetic
//!   corpus generation and enrolment-set construction.
//! - [`numerics`]: a small dense kernel (linear layers, softmax, scaled
//!   dot-product attention, cross-entropy, Adam) with hand-written backward
//!   passes and a finite-difference gradient checker.
//! - [`model`]: shared encoder, enrolment attention with residual, MLP
//!   classifier, end-to-end training and prediction.
//! - [`fairness`]: UAR, per-speaker utilities, Gini coefficient, isoelastic
//!   welfare functions, bootstrap intervals and the report format.
//! - [`exec`]: sequential or rayon-backed ordered maps used by prediction and
//!   bootstrap.

pub mod corpus;
pub mod error;
pub mod exec;
pub mod fairness;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use exec::Exec;
