//! Conditional transformation models.
//!
//! Distribution-free regressions of the form F_{Y|X}(y) = F_Z(h(y|x))
//! for continuous, count, ordinal/binary and censored responses, with
//! structured (linear, spline, factor), neural-network and autoregressive
//! predictors, fitted by censored maximum likelihood with Adam.
//!
//! The numeric core is generic over the scalar type (f32 or f64) through
//! [`Scalar`]; concrete f64 aliases live at the crate root.

pub mod bases;
pub mod data;
pub mod error;
pub mod formula;
pub mod graph;
pub mod latent;
pub mod scalar;
pub mod terms;

pub use error::{FormulaError, Result, TrafoError};
pub use latent::LatentDistribution;
pub use scalar::Scalar;
