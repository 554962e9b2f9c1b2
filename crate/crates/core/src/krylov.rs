//! Preconditioned conjugate gradients with Lanczos extreme-eigenvalue estimates.

use std::io::Write;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A symmetric linear map on `R^n`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()>;
}

impl LinearOperator for crate::reduced::ReducedOperator {
    fn dim(&self) -> usize {
        ReducedOperator::dim(self)
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        ReducedOperator::apply(self, x, y)
    }
}

impl LinearOperator for crate::precond::BlockPreconditioner {
    fn dim(&self) -> usize {
        BlockPreconditioner::dim(self)
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        BlockPreconditioner::apply(self, x, y)
    }
}

use crate::precond::BlockPreconditioner;
use crate::reduced::ReducedOperator;

/// Identity map, for unpreconditioned runs.
#[derive(Debug, Clone, Copy)]
pub struct Identity(pub usize);

impl LinearOperator for Identity {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        y.copy_from_slice(x);
        Ok(())
    }
}

/// Dense matrix as an operator.
pub struct DenseOperator(pub Mat<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        y.iter_mut().for_each(|v| *v = 0.0);
        linalg::dense_matvec(self.0.as_ref(), x, y);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcgConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Smallest-to-second-smallest Ritz ratio below which the smallest value is discarded.
    pub ritz_threshold: f64,
    /// Full reorthogonalization of the preconditioned residuals.
    pub reorthogonalize: bool,
}

impl Default for PcgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            ritz_threshold: 0.2,
            reorthogonalize: false,
        }
    }
}

impl PcgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("tolerance must lie in (0, 1), got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.ritz_threshold >= 0.0 && self.ritz_threshold < 1.0) {
            return Err(Error::Config(format!(
                "ritz_threshold must lie in [0, 1), got {}",
                self.ritz_threshold
            )));
        }
        Ok(())
    }
}

/// Smallest Ritz value after discarding an isolated near-zero outlier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidMin {
    pub value: f64,
    /// The smallest value was discarded.
    pub excluded: bool,
    /// Degeneracy suspected but no second value available.
    pub warning: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PcgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖r_k‖` for `k = 0..=iterations`.
    pub residuals: Vec<f64>,
    pub b_norm: f64,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub ritz: Vec<f64>,
    pub eig_min: f64,
    pub eig_max: f64,
    pub valid_min: ValidMin,
}

impl PcgResult {
    pub fn relative_residual(&self) -> f64 {
        if self.b_norm == 0.0 {
            0.0
        } else {
            self.residuals.last().copied().unwrap_or(0.0) / self.b_norm
        }
    }

    /// CSV with columns `iteration,residual,relative_residual`.
    pub fn write_residual_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,residual,relative_residual")?;
        for (k, r) in self.residuals.iter().enumerate() {
            let rel = if self.b_norm == 0.0 { 0.0 } else { r / self.b_norm };
            writeln!(w, "{k},{r:.16e},{rel:.16e}")?;
        }
        Ok(())
    }
}

/// Eigenvalues of the Lanczos tridiagonal built from CG step lengths `α_j` and
/// residual ratios `β_j = ρ_{j+1}/ρ_j`, ascending.
pub fn ritz_values(alphas: &[f64], betas: &[f64]) -> Result<Vec<f64>> {
    let m = alphas.len();
    if m == 0 {
        return Err(Error::Config("empty coefficient history".into()));
    }
    if betas.len() + 1 < m {
        return Err(Error::Dimension {
            expected: m - 1,
            got: betas.len(),
        });
    }
    let mut t = Mat::<f64>::zeros(m, m);
    for j in 0..m {
        let mut d = 1.0 / alphas[j];
        if j > 0 {
            d += betas[j - 1] / alphas[j - 1];
        }
        t[(j, j)] = d;
        if j + 1 < m {
            let off = betas[j].sqrt() / alphas[j];
            t[(j, j + 1)] = off;
            t[(j + 1, j)] = off;
        }
    }
    linalg::sym_eigenvalues(t.as_ref())
}

pub fn valid_min(ritz: &[f64], threshold: f64) -> ValidMin {
    match ritz {
        [] => ValidMin {
            value: f64::NAN,
            excluded: false,
            warning: true,
        },
        [only] => ValidMin {
            value: *only,
            excluded: false,
            warning: *only <= 0.0,
        },
        [a, b, ..] => {
            if *b > 0.0 && a / b < threshold {
                ValidMin {
                    value: *b,
                    excluded: true,
                    warning: false,
                }
            } else {
                ValidMin {
                    value: *a,
                    excluded: false,
                    warning: false,
                }
            }
        }
    }
}

/// Solves `A x = b` from a zero initial guess, stopping once `‖b - A x‖ ≤ tol ‖b‖`.
pub fn pcg<A: LinearOperator + ?Sized, M: LinearOperator + ?Sized>(
    a: &A,
    m: &M,
    b: &[f64],
    cfg: &PcgConfig,
) -> Result<PcgResult> {
    cfg.validate()?;
    let n = a.dim();
    if b.len() != n || m.dim() != n {
        return Err(Error::Dimension {
            expected: n,
            got: if b.len() != n { b.len() } else { m.dim() },
        });
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("right-hand side is not finite".into()));
    }
    let b_norm = linalg::norm(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut residuals = vec![b_norm];
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    if b_norm == 0.0 {
        return Ok(PcgResult {
            x,
            iterations: 0,
            converged: true,
            residuals,
            b_norm,
            alphas,
            betas,
            ritz: Vec::new(),
            eig_min: f64::NAN,
            eig_max: f64::NAN,
            valid_min: valid_min(&[], cfg.ritz_threshold),
        });
    }
    let mut z = vec![0.0; n];
    m.apply(&r, &mut z)?;
    let mut rho = linalg::dot(&r, &z);
    if !(rho > 0.0) {
        return Err(Error::SpdViolation(format!("preconditioned inner product {rho:.3e}")));
    }
    // normalized preconditioned residuals M^{1/2}-orthogonal basis for reorthogonalization
    let mut basis: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    if cfg.reorthogonalize {
        let s = rho.sqrt();
        basis.push((r.iter().map(|v| v / s).collect(), z.iter().map(|v| v / s).collect()));
    }
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        a.apply(&p, &mut q)?;
        let pq = linalg::dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::SpdViolation(format!("curvature pᵀAp = {pq:.3e} at iteration {iterations}")));
        }
        let alpha = rho / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        alphas.push(alpha);
        iterations += 1;
        let rn = linalg::norm(&r);
        residuals.push(rn);
        if rn <= cfg.tol * b_norm {
            converged = true;
            break;
        }
        m.apply(&r, &mut z)?;
        if cfg.reorthogonalize {
            // z ← z - Σ (r̂ᵀ z) ẑ with r̂, ẑ = M r̂ scaled so that r̂ᵀẑ = 1
            for (rb, zb) in &basis {
                let c = linalg::dot(&r, zb);
                for i in 0..n {
                    z[i] -= c * zb[i];
                    r[i] -= c * rb[i];
                }
            }
        }
        let rho_new = linalg::dot(&r, &z);
        if !(rho_new > 0.0) {
            return Err(Error::SpdViolation(format!(
                "preconditioned inner product {rho_new:.3e} at iteration {iterations}"
            )));
        }
        if cfg.reorthogonalize {
            let s = rho_new.sqrt();
            basis.push((r.iter().map(|v| v / s).collect(), z.iter().map(|v| v / s).collect()));
        }
        let beta = rho_new / rho;
        betas.push(beta);
        rho = rho_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let ritz = ritz_values(&alphas, &betas)?;
    let eig_min = ritz[0];
    let eig_max = *ritz.last().unwrap();
    let vm = valid_min(&ritz, cfg.ritz_threshold);
    Ok(PcgResult {
        x,
        iterations,
        converged,
        residuals,
        b_norm,
        alphas,
        betas,
        ritz,
        eig_min,
        eig_max,
        valid_min: vm,
    })
}
