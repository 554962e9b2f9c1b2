//! Experiment configuration, end-to-end runs, sweeps, fits and result export.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decomposition::{
    build_jump, build_restrictions, build_scalings, classify_dofs, partition, ClassifyOptions, PrimalVariant,
};
use crate::error::{Error, Result};
use crate::fem::{assemble_blocks, BlockSystem, BoundarySpec, FeSpaceSet, LoadSpec, XiElement};
use crate::krylov::{pcg, PcgConfig, PcgResult};
use crate::linalg::{self, EquilibratedLu, SparseFactor};
use crate::material::{Material, MaterialField};
use crate::mesh::build_mesh;
use crate::precond::{BlockPreconditioner, LambdaVariant};
use crate::reduced::{ReducedOperator, Solution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    #[default]
    Uniform,
    Checkerboard,
}

impl Pattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pattern::Uniform => "uniform",
            Pattern::Checkerboard => "checkerboard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BcMode {
    #[default]
    #[serde(rename = "neumann-left")]
    NeumannLeft,
    #[serde(rename = "dirichlet", alias = "all-dirichlet")]
    Dirichlet,
}

impl BcMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BcMode::NeumannLeft => "neumann-left",
            BcMode::Dirichlet => "dirichlet",
        }
    }

    pub fn spec(&self) -> BoundarySpec {
        match self {
            BcMode::NeumannLeft => BoundarySpec::neumann_left(),
            BcMode::Dirichlet => BoundarySpec::all_dirichlet(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// Values overriding the uniform material on black checkerboard subdomains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BlackCell {
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

impl BlackCell {
    pub fn apply(&self, white: &Material) -> Material {
        Material {
            e: self.e.unwrap_or(white.e),
            nu: self.nu.unwrap_or(white.nu),
            alpha: self.alpha.unwrap_or(white.alpha),
            kappa: self.kappa.unwrap_or(white.kappa),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    #[default]
    Cartesian,
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    /// Dotted configuration key, e.g. `nu`, `black.kappa`, `pcg.tol`.
    pub key: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepSpec {
    #[serde(default)]
    pub mode: SweepMode,
    pub axes: Vec<SweepAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub nx: usize,
    pub sub: [usize; 2],
    pub elem: XiElement,
    pub primal: PrimalVariant,
    pub lambda_pc: LambdaVariant,
    pub pattern: Pattern,
    #[serde(rename = "E")]
    pub e: f64,
    pub nu: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub black: BlackCell,
    pub bc: BcMode,
    pub pcg: PcgConfig,
    pub oracle: OracleMode,
    /// Largest total dof count for which the direct oracle is run.
    pub oracle_limit: usize,
    pub out: Option<String>,
    pub format: OutputFormat,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = Material::default();
        Self {
            nx: 16,
            sub: [2, 2],
            elem: XiElement::P1,
            primal: PrimalVariant::Vertex,
            lambda_pc: LambdaVariant::Dirichlet,
            pattern: Pattern::Uniform,
            e: m.e,
            nu: m.nu,
            alpha: m.alpha,
            kappa: m.kappa,
            black: BlackCell::default(),
            bc: BcMode::NeumannLeft,
            pcg: PcgConfig::default(),
            oracle: OracleMode::Auto,
            oracle_limit: 5000,
            out: None,
            format: OutputFormat::Csv,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn material(&self) -> Material {
        Material {
            e: self.e,
            nu: self.nu,
            alpha: self.alpha,
            kappa: self.kappa,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.sub[0], self.sub[1])
    }

    pub fn h_ratio(&self) -> usize {
        if self.sub[0] == 0 {
            0
        } else {
            self.nx / self.sub[0]
        }
    }

    pub fn materials(&self) -> Result<MaterialField> {
        let white = self.material();
        match self.pattern {
            Pattern::Uniform => MaterialField::uniform(&white, self.sub[0] * self.sub[1]),
            Pattern::Checkerboard => MaterialField::checkerboard(&white, &self.black.apply(&white), self.grid()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pattern == Pattern::Checkerboard && (self.sub[0] < 2 || self.sub[1] < 2) {
            return Err(Error::Config("checkerboard pattern needs at least 2×2 subdomains".into()));
        }
        self.pcg.validate()?;
        self.materials()?;
        self.black.apply(&self.material());
        Ok(())
    }

    /// Sets a dotted key, e.g. `black.kappa`, from a JSON value.
    pub fn set_key(&self, key: &str, value: Value) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a configuration field")))?;
            if i + 1 == parts.len() {
                obj.insert((*part).to_string(), value.clone());
                break;
            }
            node = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
        }
        let known = serde_json::to_value(Self::default())?;
        if parts.len() == 1 && known.get(parts[0]).is_none() {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid value for `{key}`: {e}")))
    }

    /// Expands the sweep into single-case configurations, first axis outermost.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        let Some(sweep) = &self.sweep else {
            let mut c = self.clone();
            c.sweep = None;
            return Ok(vec![c]);
        };
        if sweep.axes.is_empty() || sweep.axes.len() > 2 {
            return Err(Error::Config(format!(
                "a sweep needs one or two axes, got {}",
                sweep.axes.len()
            )));
        }
        if let Some(a) = sweep.axes.iter().find(|a| a.values.is_empty()) {
            return Err(Error::Config(format!("sweep axis `{}` has no values", a.key)));
        }
        let mut base = self.clone();
        base.sweep = None;
        let mut out = Vec::new();
        match (sweep.mode, sweep.axes.as_slice()) {
            (_, [a]) => {
                for v in &a.values {
                    out.push(base.set_key(&a.key, v.clone())?);
                }
            }
            (SweepMode::Cartesian, [a, b]) => {
                for va in &a.values {
                    let ca = base.set_key(&a.key, va.clone())?;
                    for vb in &b.values {
                        out.push(ca.set_key(&b.key, vb.clone())?);
                    }
                }
            }
            (SweepMode::Paired, [a, b]) => {
                if a.values.len() != b.values.len() {
                    return Err(Error::Config(format!(
                        "paired sweep axes `{}` and `{}` differ in length",
                        a.key, b.key
                    )));
                }
                for (va, vb) in a.values.iter().zip(&b.values) {
                    out.push(base.set_key(&a.key, va.clone())?.set_key(&b.key, vb.clone())?);
                }
            }
            _ => unreachable!(),
        }
        for c in &out {
            c.validate()?;
        }
        Ok(out)
    }
}

/// Relative errors of the decomposed solution against the direct solve, per field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleErrors {
    pub u: f64,
    pub xi: f64,
    pub p: f64,
}

impl OracleErrors {
    pub fn max(&self) -> f64 {
        self.u.max(self.xi).max(self.p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub config: ExperimentConfig,
    pub nx: usize,
    pub sub_x: usize,
    pub sub_y: usize,
    #[serde(rename = "H_over_h")]
    pub h_over_h: usize,
    pub num_subdomains: usize,
    pub total_dofs: usize,
    pub interface_dofs: usize,
    pub iter: usize,
    pub converged: bool,
    pub relative_residual: f64,
    pub eig_min: f64,
    pub valid_eig_min: f64,
    pub valid_min_excluded: bool,
    pub eig_max: f64,
    pub g_applies: usize,
    pub m_applies: usize,
    pub jump_ratio: f64,
    pub oracle: Option<OracleErrors>,
    /// Why the oracle was skipped, if it was.
    pub oracle_note: Option<String>,
    /// Measured constant of the a-priori energy bound, when the oracle ran.
    pub apriori_constant: Option<f64>,
    pub wall_s: f64,
}

impl ResultRow {
    pub fn csv_header() -> &'static [&'static str] {
        &[
            "nx",
            "sub_x",
            "sub_y",
            "H_over_h",
            "elem",
            "primal",
            "lambda_pc",
            "pattern",
            "E",
            "nu",
            "alpha",
            "kappa",
            "bc",
            "iter",
            "eig_min",
            "valid_eig_min",
            "eig_max",
            "oracle_err_u",
            "oracle_err_xi",
            "oracle_err_p",
            "wall_s",
        ]
    }

    pub fn csv_record(&self) -> Vec<String> {
        let c = &self.config;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        // the varied parameter of a checkerboard run is the black-cell value
        let black = c.black.apply(&c.material());
        let (e, nu, alpha, kappa) = match c.pattern {
            Pattern::Uniform => (c.e, c.nu, c.alpha, c.kappa),
            Pattern::Checkerboard => (black.e, black.nu, black.alpha, black.kappa),
        };
        vec![
            self.nx.to_string(),
            self.sub_x.to_string(),
            self.sub_y.to_string(),
            self.h_over_h.to_string(),
            c.elem.as_str().into(),
            c.primal.as_str().into(),
            c.lambda_pc.as_str().into(),
            c.pattern.as_str().into(),
            format!("{e:e}"),
            format!("{nu}"),
            format!("{alpha:e}"),
            format!("{kappa:e}"),
            c.bc.as_str().into(),
            self.iter.to_string(),
            format!("{:.6e}", self.eig_min),
            format!("{:.6e}", self.valid_eig_min),
            format!("{:.6e}", self.eig_max),
            opt(self.oracle.map(|o| o.u)),
            opt(self.oracle.map(|o| o.xi)),
            opt(self.oracle.map(|o| o.p)),
            format!("{:.3}", self.wall_s),
        ]
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Config(format!("csv output failed: {e}"));
    wr.write_record(ResultRow::csv_header()).map_err(csv_err)?;
    for r in rows {
        wr.write_record(r.csv_record()).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, rows)?;
    Ok(())
}

/// Everything produced by one end-to-end run.
#[derive(Debug)]
pub struct CaseOutcome {
    pub row: ResultRow,
    pub solution: Solution,
    pub pcg: Option<PcgResult>,
}

/// Assembled problem and decomposition, kept for diagnostics that need operator access.
pub struct Pipeline {
    pub sys: BlockSystem,
    pub op: ReducedOperator,
    pub precond: BlockPreconditioner,
}

pub fn build_pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    cfg.validate()?;
    let mesh = build_mesh(cfg.nx, cfg.nx, cfg.grid())?;
    let part = partition(&mesh);
    let spaces = FeSpaceSet::build(&mesh, cfg.elem, cfg.bc.spec())?;
    let mats = cfg.materials()?;
    let sys = assemble_blocks(&mesh, &spaces, &mats, &LoadSpec::default())?;
    let cls = classify_dofs(&mesh, &part, &spaces, ClassifyOptions::new(cfg.primal))?;
    let w = build_scalings(&mats);
    let jump = build_jump(&cls, &w)?;
    let restr = build_restrictions(&part, &spaces, &cls, &w)?;
    let op = ReducedOperator::new(&sys, &cls, jump)?;
    let precond = BlockPreconditioner::build(&sys, &cls, &restr, &op, cfg.lambda_pc)?;
    Ok(Pipeline { sys, op, precond })
}

pub fn run_case(cfg: &ExperimentConfig) -> Result<CaseOutcome> {
    let start = Instant::now();
    let pipe = build_pipeline(cfg)?;
    let b = pipe.op.rhs()?;
    let (y, res) = if pipe.op.dim() == 0 {
        (Vec::new(), None)
    } else {
        let r = pcg(&pipe.op, &pipe.precond, &b, &cfg.pcg)?;
        if !r.converged {
            log::warn!(
                "PCG stopped after {} iterations at relative residual {:.3e}",
                r.iterations,
                r.relative_residual()
            );
        }
        (r.x.clone(), Some(r))
    };
    let solution = pipe.op.recover(&y)?;
    let total = pipe.sys.total_dofs();
    let run_oracle = match cfg.oracle {
        OracleMode::Off => false,
        OracleMode::On => true,
        OracleMode::Auto => total <= cfg.oracle_limit,
    };
    let (oracle, oracle_note, apriori) = if run_oracle {
        let direct = oracle_solve(&pipe.sys, cfg.oracle_limit)?;
        let errs = oracle_errors(&solution, &direct);
        let c = apriori_constant(&pipe.sys, &direct)?;
        (Some(errs), None, Some(c))
    } else {
        let note = match cfg.oracle {
            OracleMode::Off => "disabled".to_string(),
            _ => format!("{total} dofs exceeds limit {}", cfg.oracle_limit),
        };
        (None, Some(note), None)
    };
    let (iter, converged, rel, eig_min, vmin, excluded, eig_max) = match &res {
        Some(r) => (
            r.iterations,
            r.converged,
            r.relative_residual(),
            r.eig_min,
            r.valid_min.value,
            r.valid_min.excluded,
            r.eig_max,
        ),
        None => (0, true, 0.0, f64::NAN, f64::NAN, false, f64::NAN),
    };
    let row = ResultRow {
        config: cfg.clone(),
        nx: cfg.nx,
        sub_x: cfg.sub[0],
        sub_y: cfg.sub[1],
        h_over_h: cfg.h_ratio(),
        num_subdomains: cfg.sub[0] * cfg.sub[1],
        total_dofs: total,
        interface_dofs: pipe.op.dim(),
        iter,
        converged,
        relative_residual: rel,
        eig_min,
        valid_eig_min: vmin,
        valid_min_excluded: excluded,
        eig_max,
        g_applies: pipe.op.apply_count(),
        m_applies: pipe.precond.apply_count(),
        jump_ratio: solution.jump_ratio,
        oracle,
        oracle_note,
        apriori_constant: apriori,
        wall_s: start.elapsed().as_secs_f64(),
    };
    Ok(CaseOutcome {
        row,
        solution,
        pcg: res,
    })
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let cases = cfg.expand()?;
    let mut rows = Vec::with_capacity(cases.len());
    for (k, c) in cases.iter().enumerate() {
        log::info!("case {}/{}: nx={} sub={:?}", k + 1, cases.len(), c.nx, c.sub);
        rows.push(run_case(c)?.row);
    }
    Ok(rows)
}

/// Sparse direct solve of the full block system, split into `(u, ξ, p)`.
pub fn oracle_solve(sys: &BlockSystem, limit: usize) -> Result<Solution> {
    let n = sys.total_dofs();
    if n > limit {
        return Err(Error::OracleLimit { dofs: n, limit });
    }
    let (k, mut x) = sys.full_system();
    let f = EquilibratedLu::new(&k, 3)?;
    f.solve_in_place(&mut x);
    let (nu, nxi) = (sys.n_u(), sys.n_xi());
    Ok(Solution {
        u: x[..nu].to_vec(),
        xi: x[nu..nu + nxi].to_vec(),
        p: x[nu + nxi..].to_vec(),
        jump_ratio: 0.0,
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nb = linalg::norm(b);
    let nd = linalg::norm(&d);
    if nb == 0.0 {
        nd
    } else {
        nd / nb
    }
}

pub fn oracle_errors(dd: &Solution, direct: &Solution) -> OracleErrors {
    OracleErrors {
        u: rel_err(&dd.u, &direct.u),
        xi: rel_err(&dd.xi, &direct.xi),
        p: rel_err(&dd.p, &direct.p),
    }
}

/// Ratio `(uᵀAu + [ξ; p]ᵀ[C -Dᵀ; -D E][ξ; p]) / (fᵀA⁻¹f + gᵀE⁻¹g)` for a solution.
pub fn apriori_constant(sys: &BlockSystem, sol: &Solution) -> Result<f64> {
    let au = linalg::spmv(&sys.a, &sol.u);
    let lhs = linalg::dot(&sol.u, &au) + sys.pressure_form(&sol.xi, &sol.p);
    let mut ainv_f = sys.f.clone();
    SparseFactor::cholesky(&sys.a)?.solve_in_place(&mut ainv_f);
    let mut einv_g = sys.g.clone();
    SparseFactor::cholesky(&sys.e)?.solve_in_place(&mut einv_g);
    let rhs = linalg::dot(&sys.f, &ainv_f) + linalg::dot(&sys.g, &einv_g);
    Ok(if rhs == 0.0 { 0.0 } else { lhs / rhs })
}

/// Least-squares fit `eig_max ≈ C₁ + C₂ (1 + log(H/h))²`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    /// `(H/h, eig_max)` pairs used.
    pub points: Vec<(f64, f64)>,
}

pub fn fit_polylog(points: &[(f64, f64)]) -> Result<FitResult> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Config(format!(
            "a polylog fit needs at least 3 distinct H/h values, got {}",
            distinct.len()
        )));
    }
    if points.iter().any(|p| !(p.0 > 0.0) || !p.1.is_finite()) {
        return Err(Error::Config("fit points need positive H/h and finite values".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| (1.0 + p.0.ln()).powi(2)).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let c2 = sxy / sxx;
    let c1 = my - c2 * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - c1 - c2 * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot <= f64::EPSILON * my * my * n {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(FitResult {
        c1,
        c2,
        r2,
        points: points.to_vec(),
    })
}

/// Fit over rows that differ only in `H/h`.
pub fn fit_rows(rows: &[ResultRow]) -> Result<FitResult> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.h_over_h as f64, r.eig_max)).collect();
    fit_polylog(&pts)
}

/// Short description of the discretization choices behind every reported number.
pub fn discretization_fingerprint(cfg: &ExperimentConfig) -> String {
    format!(
        "u: P1 on the once-refined mesh; xi: {} on the base mesh; p: P1 on the base mesh; \
         right-angle triangles split along the SW-NE diagonal; exact element integrals; \
         f = (0, -1), g = 1; bc = {}",
        match cfg.elem {
            XiElement::P1 => "P1",
            XiElement::P0 => "P0",
        },
        cfg.bc.as_str()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn exact_polylog_fit() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&h: &f64| (h, 2.0 + 0.5 * (1.0 + h.ln()).powi(2)))
            .collect();
        let f = fit_polylog(&pts).unwrap();
        assert!((f.c1 - 2.0).abs() < 1e-12 && (f.c2 - 0.5).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_fit_has_no_slope() {
        let f = fit_polylog(&[(2.0, 3.0), (4.0, 3.0), (8.0, 3.0)]).unwrap();
        assert!(f.c2.abs() < 1e-12 && (f.c1 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fit_needs_three_points() {
        assert!(fit_polylog(&[(2.0, 1.0), (4.0, 2.0)]).is_err());
        assert!(fit_polylog(&[(2.0, 1.0), (2.0, 2.0), (4.0, 2.0)]).is_err());
    }

    #[test]
    fn dotted_keys_and_sweep_expansion() {
        let mut cfg = ExperimentConfig::default();
        cfg.pattern = Pattern::Checkerboard;
        cfg.sweep = Some(SweepSpec {
            mode: SweepMode::Cartesian,
            axes: vec![
                SweepAxis {
                    key: "black.kappa".into(),
                    values: vec![json!(0.1), json!(1e-5)],
                },
                SweepAxis {
                    key: "nx".into(),
                    values: vec![json!(4), json!(8), json!(16)],
                },
            ],
        });
        let cases = cfg.expand().unwrap();
        assert_eq!(cases.len(), 6);
        assert_eq!(cases[0].black.kappa, Some(0.1));
        assert_eq!(cases[2].nx, 16);
        assert_eq!(cases[5].black.kappa, Some(1e-5));
        assert!(cases.iter().all(|c| c.sweep.is_none()));

        let mut paired = cfg.clone();
        paired.sweep.as_mut().unwrap().mode = SweepMode::Paired;
        assert!(paired.expand().is_err());
        paired.sweep.as_mut().unwrap().axes[1].values.pop();
        assert_eq!(paired.expand().unwrap().len(), 2);
    }

    #[test]
    fn empty_sweep_list_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep = Some(SweepSpec {
            mode: SweepMode::Cartesian,
            axes: vec![SweepAxis {
                key: "nu".into(),
                values: vec![],
            }],
        });
        assert!(matches!(cfg.expand(), Err(Error::Config(_))));
        assert!(cfg.set_key("no_such_key", json!(1)).is_err());
    }

    #[test]
    fn checkerboard_needs_two_by_two() {
        let cfg = ExperimentConfig {
            sub: [1, 1],
            nx: 4,
            pattern: Pattern::Checkerboard,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let text = r#"{"nx": 8, "sub": [2, 2], "elem": "p0", "primal": "vertex-edge",
                       "lambda_pc": "lumped", "bc": "all-dirichlet", "E": 1e5,
                       "pcg": {"tol": 1e-10}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.elem, XiElement::P0);
        assert_eq!(cfg.bc, BcMode::Dirichlet);
        assert_eq!(cfg.pcg.max_iter, PcgConfig::default().max_iter);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn single_subdomain_run_is_a_direct_solve() {
        let cfg = ExperimentConfig {
            nx: 4,
            sub: [1, 1],
            ..Default::default()
        };
        let out = run_case(&cfg).unwrap();
        assert_eq!(out.row.interface_dofs, 0);
        assert_eq!(out.row.iter, 0);
        assert!(out.row.oracle.unwrap().max() < 1e-10);
    }

    #[test]
    fn small_run_matches_oracle() {
        let cfg = ExperimentConfig {
            nx: 8,
            sub: [2, 2],
            pcg: PcgConfig {
                tol: 1e-12,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run_case(&cfg).unwrap();
        let o = out.row.oracle.unwrap();
        assert!(o.max() < 1e-7, "{o:?}");
        assert!(out.row.eig_min > 0.0 && out.row.eig_max >= out.row.eig_min);
        assert!(out.row.apriori_constant.unwrap() > 0.0);
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&out.row), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("nx,sub_x,sub_y,H_over_h,elem,primal,lambda_pc,pattern,E,nu,alpha,kappa,bc,iter,"));
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config { cases: 64, failure_persistence: None, ..Default::default() })]

        #[test]
        fn polylog_fit_recovers_coefficients(
            c1 in -5.0f64..5.0,
            c2 in 0.01f64..5.0,
            ratios in proptest::collection::btree_set(2usize..64, 3..8),
        ) {
            let pts: Vec<(f64, f64)> = ratios
                .iter()
                .map(|&h| (h as f64, c1 + c2 * (1.0 + (h as f64).ln()).powi(2)))
                .collect();
            let f = fit_polylog(&pts).unwrap();
            proptest::prop_assert!((f.c1 - c1).abs() <= 1e-9 * (1.0 + c1.abs() + c2));
            proptest::prop_assert!((f.c2 - c2).abs() <= 1e-9 * (1.0 + c2));
            proptest::prop_assert!(f.r2 > 1.0 - 1e-9);
        }
    }
}
