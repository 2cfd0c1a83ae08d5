//! Self-supervised monocular depth training with per-pixel uncertainty
//! estimation, plus the depth metrics and sparsification evaluation used to
//! compare uncertainty strategies.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// small fixed-size matrix loops read better indexed
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod models;
pub mod photometric;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
