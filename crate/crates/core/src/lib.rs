//! Verification toolkit for robust singular stochastic optimal control of
//! Galerkin-truncated stochastic evolution equations.
//!
//! The space layer ([`spaces`]) is generic over the scalar type; simulators,
//! adjoint solvers and condition checks work in `f64`.

pub mod error;
pub mod paths;
pub mod scenario;
pub mod spaces;
pub mod forward;
pub mod adjoint;
pub mod robust;
pub mod malliavin;
pub mod conditions;
pub mod harness;

pub use error::{Error, Result};

pub type Vector = spaces::HVector<f64>;
pub type Operator = spaces::HOperator<f64>;
pub type Semigroup = spaces::SemigroupSpec<f64>;
pub type Registry = spaces::SpaceRegistry<f64>;

pub type Vector32 = spaces::HVector<f32>;
pub type Operator32 = spaces::HOperator<f32>;
pub type Semigroup32 = spaces::SemigroupSpec<f32>;
pub type Registry32 = spaces::SpaceRegistry<f32>;
