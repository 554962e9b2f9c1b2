//! Three-field Biot consolidation on structured triangulations, reduced by a dual-primal
//! substructuring to a symmetric positive definite interface problem and solved by
//! conjugate gradients with a block BDDC/FETI-DP preconditioner.

pub mod error;
pub mod decomposition;
pub mod fem;
pub mod harness;
pub mod krylov;
pub mod linalg;
pub mod material;
pub mod mesh;
pub mod precond;
pub mod reduced;

pub use error::{Error, Result};
