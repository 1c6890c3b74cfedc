//! Basis decomposition of low-rank matrices and a BD form of multi-head
//! attention that is exact up to floating-point rounding.
//!
//! Modules build bottom-up: [`tensor`] is the dense substrate, [`bd`] the
//! decomposition, [`linear`] and [`attention`] its two applications, and
//! [`verify`] the numerical checks.

pub mod attention;
pub mod bd;
pub mod error;
pub mod linear;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use attention::{
    bda_forward, bda_prepare, bda_prepare_with, fused_kv_proj, mha_forward, BdaWeights, Geometry,
    MhaWeights, PrepareOptions, Product,
};
pub use bd::{Axis, BasisTag, BdFactors, CostReport};
pub use error::{Error, Result};
pub use rng::{rand_gaussian, Rng};
pub use tensor::{Data, Precision, Tensor2D};
