//! Episodic meta-learning viewed as supervised learning over tasks.
//!
//! Each task `(D_tr, D_val)` is one meta labeled example; meta models map a
//! support set to a base classifier and are trained by empirical risk
//! minimization of the validation loss over sampled tasks. The crate provides
//! the numeric substrate ([`autodiff`]), synthetic task distributions
//! ([`taskgen`]), three meta models ([`metamodels`]), the meta-ERM engine
//! ([`metatrain`]), task-level versions of classic supervised techniques
//! ([`techniques`]) and the experiment harness ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod metamodels;
pub mod metatrain;
pub mod taskgen;
pub mod techniques;

pub use error::{Error, Result};
