//! Joint frailty model for hospitalizations and death.

// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod fit;
pub mod hazards;
pub mod io;
pub mod likelihood;
pub mod predict;
pub mod quadrature;
pub mod recurrent;
pub mod simulate;
pub mod wald;

pub use error::{Error, Result};
