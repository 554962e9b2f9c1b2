use thiserror::Error;

/// Errors produced while building or solving the decomposed Biot system.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh size {cells} along {axis} is not divisible by subdomain count {parts}")]
    Divisibility {
        axis: char,
        cells: usize,
        parts: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid material parameters: {0}")]
    Material(String),

    #[error("assembly error in field `{field}`: {msg}")]
    Assembly { field: &'static str, msg: String },

    #[error("subdomain {id} is floating: no Dirichlet boundary and no primal displacement constraint")]
    FloatingSubdomain { id: usize },

    #[error("singular saddle block on subdomain {id}: insufficient primal constraints ({detail})")]
    SingularSubdomain { id: usize, detail: String },

    #[error("singular local block on subdomain {id} in {block}")]
    SingularLocal { id: usize, block: &'static str },

    #[error("coarse primal problem is singular")]
    SingularCoarse,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("operator is not symmetric positive definite: {0}")]
    SpdViolation(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dense oracle refused: {dofs} dofs exceeds limit {limit}")]
    OracleLimit { dofs: usize, limit: usize },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
