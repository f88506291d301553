//! Continual Barlow Twins at desk scale.
//!
//! A Barlow Twins redundancy-reduction objective trained sequentially over
//! synthetic image domains, with an elastic-weight-consolidation penalty whose
//! Fisher diagonal is estimated from minibatch loss gradients. The crate also
//! carries the synthetic task generator and the downstream segmentation probe
//! used to measure forgetting.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod augment;
pub mod container;
pub mod continual;
pub mod eval;
pub mod kvtext;
pub mod model;
pub mod ssl_bt;
pub mod taskgen;
