//! Simulation and verification toolkit for Hilbert-space-valued ambit fields.
//!
//! A field `X(t) = ∫₀ᵗ Γ(t,s)(σ(s)) dL(s)` is computed three ways: by direct
//! left-point quadrature ([`simulate::hambit_direct`]), by the truncated
//! series of real-valued Volterra components ([`simulate::vmv_series`]), and
//! as the boundary value of an upwind finite difference scheme for the
//! transport SPDE `dY = ∂ξ Y dt + β(t) dL(t)` ([`fdscheme`]). The remaining
//! modules check isometries, covariance operators, characteristic
//! functionals and convergence bounds against these routes.
//!
//! All spaces are finite coordinate truncations; see [`hilbert`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod fdscheme;
pub mod hilbert;
pub mod kernels;
pub mod linalg;
pub mod noise;
pub mod report;
pub mod rng;
pub mod simulate;

pub use error::{HambitError, Result};
