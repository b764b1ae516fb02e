//! Path-wise feedback control of nonlinear stochastic differential equations.
//!
//! The crate provides, for single-input single-output systems of the form
//!
//! ```text
//! dx = (f(x) + g(x) u) dt + l(x) dW,      y = h(x),
//! ```
//!
//! the numerical machinery to
//!
//! * differentiate the output along the dynamics (nested forward-mode
//!   autodiff, [`autodiff`]),
//! * compute stochastic Lie derivatives and the stochastic relative degree
//!   ([`operators`]),
//! * build the coordinate change into the stochastic normal form and extract
//!   the zero dynamics ([`transform`]),
//! * simulate the hybrid (flow + jump) closed loop over seedable Brownian
//!   paths ([`simulate`]),
//! * estimate Brownian increments from state samples ([`estimator`]),
//! * run idealistic, zero-noise and hybrid compensating controllers
//!   ([`control`]),
//! * reproduce the reference experiments and emit CSV trajectories
//!   ([`experiments`]), and
//! * probe almost-sure stability empirically ([`stability`]).
//!
//! All numeric core types are generic over the scalar through the [`Real`]
//! trait (`f32` or `f64`); the aliases at the crate root fix the
//! double-precision instantiation used by the CLI and the test suites.

pub mod autodiff;
pub mod control;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod models;
pub mod operators;
pub(crate) mod sampling;
pub mod simulate;
pub mod stability;
pub mod transform;

pub use error::{Error, Result};

use num_traits::{Float, FromPrimitive};

/// Scalar type the whole crate is generic over.
///
/// `nalgebra::RealField` is required for the small dense linear algebra
/// (Newton solves, singular values); `num_traits::Float` for the autodiff
/// arithmetic. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + nalgebra::RealField
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("f64 literal must be representable in the scalar type")
}

/// Double-precision aliases for the main crate types.
pub type Ad64 = autodiff::Ad<f64>;
pub type ScalarField64 = autodiff::ScalarField<f64>;
pub type VectorField64 = autodiff::VectorField<f64>;
// pub type SystemDef64 = models::SystemDef<f64>;
// pub type NormalFormDef64 = models::NormalFormDef<f64>;
// pub type ReferenceSignal64 = models::ReferenceSignal<f64>;
// pub type BrownianPath64 = simulate::BrownianPath<f64>;
// pub type Scenario64 = simulate::Scenario<f64>;
// pub type HybridTrajectory64 = simulate::HybridTrajectory<f64>;
