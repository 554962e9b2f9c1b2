use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lamé parameters `(λ, μ)` from Young's modulus and Poisson ratio.
pub fn derive_lame(e: f64, nu: f64) -> Result<(f64, f64)> {
    if !(e > 0.0) || !e.is_finite() {
        return Err(Error::Material(format!("Young's modulus must be positive, got {e}")));
    }
    if !(nu > 0.0 && nu < 0.5) {
        return Err(Error::Material(format!(
            "Poisson ratio must lie in (0, 0.5), got {nu}"
        )));
    }
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    Ok((lambda, mu))
}

/// Physical inputs of one subdomain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    #[serde(rename = "E")]
    pub e: f64,
    pub nu: f64,
    pub alpha: f64,
    pub kappa: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self {
            e: 1e6,
            nu: 0.499,
            alpha: 1.0,
            kappa: 1.0,
        }
    }
}

/// Coefficients entering the bilinear forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficients {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub kappa: f64,
}

impl Coefficients {
    pub fn from_material(m: &Material) -> Result<Self> {
        let (lambda, mu) = derive_lame(m.e, m.nu)?;
        if !(m.alpha > 0.0) || !m.alpha.is_finite() {
            return Err(Error::Material(format!("alpha must be positive, got {}", m.alpha)));
        }
        if !(m.kappa > 0.0) || !m.kappa.is_finite() {
            return Err(Error::Material(format!("kappa must be positive, got {}", m.kappa)));
        }
        Ok(Self {
            lambda,
            mu,
            alpha: m.alpha,
            kappa: m.kappa,
        })
    }

    /// Storage coefficient `c₀ = α²/λ`.
    pub fn c0(&self) -> f64 {
        self.alpha * self.alpha / self.lambda
    }
}

/// Subdomain-wise constant coefficients, indexed by subdomain id.
#[derive(Debug, Clone, Serialize)]
pub struct MaterialField {
    pub coeffs: Vec<Coefficients>,
}

impl MaterialField {
    pub fn uniform(m: &Material, num_subdomains: usize) -> Result<Self> {
        let c = Coefficients::from_material(m)?;
        Ok(Self {
            coeffs: vec![c; num_subdomains],
        })
    }

    /// Subdomain `(sx, sy)` takes `black` when `sx + sy` is even and `white` otherwise.
    pub fn checkerboard(white: &Material, black: &Material, grid: (usize, usize)) -> Result<Self> {
        let w = Coefficients::from_material(white)?;
        let b = Coefficients::from_material(black)?;
        let mut coeffs = Vec::with_capacity(grid.0 * grid.1);
        for sy in 0..grid.1 {
            for sx in 0..grid.0 {
                coeffs.push(if (sx + sy) % 2 == 0 { b } else { w });
            }
        }
        Ok(Self { coeffs })
    }

    pub fn get(&self, sub: usize) -> &Coefficients {
        &self.coeffs[sub]
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        let (l, m) = derive_lame(1.0, 0.25).unwrap();
        assert!((l - 0.4).abs() < 1e-15 && (m - 0.4).abs() < 1e-15);
    }

    #[test]
    fn nearly_incompressible_values() {
        // 1e6 * 0.499 / (1.499 * 0.002) and 1e6 / 2.998
        let (l, m) = derive_lame(1e6, 0.499).unwrap();
        assert!((l / 1.664_442_961_974_649_8e8 - 1.0).abs() < 1e-12);
        assert!((m / 3.335_557_038_025_35e5 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_ratios() {
        assert!(derive_lame(2.0, 0.0).is_err());
        assert!(derive_lame(2.0, 0.5).is_err());
        assert!(derive_lame(-1.0, 0.3).is_err());
    }

    #[test]
    fn checkerboard_colors() {
        let w = Material::default();
        let b = Material { kappa: 1e-3, ..w };
        let f = MaterialField::checkerboard(&w, &b, (2, 2)).unwrap();
        let k: Vec<f64> = f.coeffs.iter().map(|c| c.kappa).collect();
        assert_eq!(k, vec![1e-3, 1.0, 1.0, 1e-3]);
    }
}
