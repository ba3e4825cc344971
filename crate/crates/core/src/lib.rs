//! Small-area estimation of under-five mortality with a spatio-temporal
//! age-period-cohort model fitted to household-survey birth histories.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod aggregate;
pub mod data;
pub mod direct;
pub mod error;
pub mod inference;
pub mod interaction;
pub mod linalg;
pub mod model;
pub mod spatial;
pub mod special;
pub mod synth;
pub mod temporal;
pub mod validate;

pub use error::{Error, Result};
