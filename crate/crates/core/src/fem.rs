//! Finite element spaces and block assembly for the three-field system
//!
//! ```text
//! [ A  Bᵀ  0  ] [u]   [f]
//! [ B  -C  Dᵀ ] [ξ] = [0]
//! [ 0   D  -E ] [p]   [g]
//! ```
//!
//! Displacement is P1 on the refined mesh (P1-iso-P2), total pressure is P1 or P0 on
//! the base mesh and pressure is P1 on the base mesh. Every block is assembled per
//! subdomain first; the global blocks are sums of the retained local contributions.

use std::io::Write;

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseFactor, SpMat, SparseFactor, TripletBuilder};
use crate::material::MaterialField;
use crate::mesh::StructuredMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XiElement {
    /// Continuous piecewise linear on the base mesh.
    P1,
    /// Piecewise constant per base triangle.
    P0,
}

impl XiElement {
    pub fn as_str(&self) -> &'static str {
        match self {
            XiElement::P1 => "p1",
            XiElement::P0 => "p0",
        }
    }
}

/// Sides of the unit square.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sides {
    pub left: bool,
    pub right: bool,
    pub bottom: bool,
    pub top: bool,
}

impl Sides {
    pub const ALL: Sides = Sides {
        left: true,
        right: true,
        bottom: true,
        top: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.left || self.right || self.bottom || self.top)
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (self.left && x[0] == 0.0)
            || (self.right && x[0] == 1.0)
            || (self.bottom && x[1] == 0.0)
            || (self.top && x[1] == 1.0)
    }
}

/// Dirichlet sides per field; remaining sides carry homogeneous Neumann data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub displacement: Sides,
    pub pressure: Sides,
}

impl BoundarySpec {
    /// Neumann on `x = 0`, homogeneous Dirichlet elsewhere, for both fields.
    pub fn neumann_left() -> Self {
        let s = Sides {
            left: false,
            ..Sides::ALL
        };
        Self {
            displacement: s,
            pressure: s,
        }
    }

    pub fn all_dirichlet() -> Self {
        Self {
            displacement: Sides::ALL,
            pressure: Sides::ALL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.displacement.is_empty() || self.pressure.is_empty() {
            return Err(Error::Config(
                "both displacement and pressure need a nonempty Dirichlet boundary".into(),
            ));
        }
        Ok(())
    }
}

/// Body force and volumetric source, both constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub body_force: [f64; 2],
    pub source: f64,
}

impl Default for LoadSpec {
    fn default() -> Self {
        Self {
            body_force: [0.0, -1.0],
            source: 1.0,
        }
    }
}

impl LoadSpec {
    pub fn zero() -> Self {
        Self {
            body_force: [0.0, 0.0],
            source: 0.0,
        }
    }
}

/// Degree-of-freedom maps of the three fields.
///
/// Displacement dofs are `2k + c` for the `k`-th free refined node and component `c`.
/// Total-pressure dofs are base node ids (P1) or base triangle ids (P0).
#[derive(Debug, Clone, Serialize)]
pub struct FeSpaceSet {
    pub xi_element: XiElement,
    pub u_node_of_refined: Vec<Option<usize>>,
    pub u_nodes: Vec<usize>,
    pub xi_count: usize,
    pub p_node_of_base: Vec<Option<usize>>,
    pub p_nodes: Vec<usize>,
    pub bc: BoundarySpec,
}

impl FeSpaceSet {
    pub fn build(mesh: &StructuredMesh, xi_element: XiElement, bc: BoundarySpec) -> Result<Self> {
        bc.validate()?;
        let (u_node_of_refined, u_nodes) = compress(&mesh.refined.vertices, &bc.displacement);
        let (p_node_of_base, p_nodes) = compress(&mesh.base.vertices, &bc.pressure);
        let xi_count = match xi_element {
            XiElement::P1 => mesh.base.num_nodes(),
            XiElement::P0 => mesh.base.triangles.len(),
        };
        Ok(Self {
            xi_element,
            u_node_of_refined,
            u_nodes,
            xi_count,
            p_node_of_base,
            p_nodes,
            bc,
        })
    }

    pub fn n_u(&self) -> usize {
        2 * self.u_nodes.len()
    }

    pub fn n_xi(&self) -> usize {
        self.xi_count
    }

    pub fn n_p(&self) -> usize {
        self.p_nodes.len()
    }

    pub fn total(&self) -> usize {
        self.n_u() + self.n_xi() + self.n_p()
    }
}

fn compress(vertices: &[[f64; 2]], dirichlet: &Sides) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut map = vec![None; vertices.len()];
    let mut nodes = Vec::new();
    for (n, &x) in vertices.iter().enumerate() {
        if !dirichlet.contains(x) {
            map[n] = Some(nodes.len());
            nodes.push(n);
        }
    }
    (map, nodes)
}

/// Unassembled contribution of one subdomain, in local numbering.
///
/// Local dof lists are sorted global ids; `a` is `n_u × n_u`, `b` is `n_ξ × n_u`,
/// `c` is `n_ξ × n_ξ`, `d` is `n_p × n_ξ`, `e` is `n_p × n_p`.
#[derive(Debug, Clone)]
pub struct LocalBlocks {
    pub sub: usize,
    pub u_dofs: Vec<usize>,
    pub xi_dofs: Vec<usize>,
    pub p_dofs: Vec<usize>,
    pub a: SpMat,
    pub b: SpMat,
    pub c: SpMat,
    pub d: SpMat,
    pub e: SpMat,
    /// The `(2α²/λ)` mass part of `e`.
    pub e_reaction: SpMat,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub spaces: FeSpaceSet,
    pub materials: MaterialField,
    pub a: SpMat,
    pub b: SpMat,
    pub c: SpMat,
    pub d: SpMat,
    pub e: SpMat,
    pub e_reaction: SpMat,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub locals: Vec<LocalBlocks>,
}

fn local_index(sorted: &[usize], global: usize) -> usize {
    sorted.binary_search(&global).expect("dof belongs to the subdomain")
}

fn p1_mass(area: f64) -> [[f64; 3]; 3] {
    let mut m = [[area / 12.0; 3]; 3];
    for (k, row) in m.iter_mut().enumerate() {
        row[k] = area / 6.0;
    }
    m
}

fn assemble_local(
    mesh: &StructuredMesh,
    spaces: &FeSpaceSet,
    materials: &MaterialField,
    load: &LoadSpec,
    sub: usize,
    triangles: &[usize],
) -> LocalBlocks {
    let coef = materials.get(sub);
    let (lambda, mu, alpha, kappa) = (coef.lambda, coef.mu, coef.alpha, coef.kappa);

    let u_dof = |rn: usize| spaces.u_node_of_refined[rn].map(|k| 2 * k);
    let xi_dof = |t: usize, k: usize| match spaces.xi_element {
        XiElement::P1 => mesh.base.triangles[t][k],
        XiElement::P0 => t,
    };
    let p_dof = |n: usize| spaces.p_node_of_base[n];

    let mut u_dofs = Vec::new();
    let mut xi_dofs = Vec::new();
    let mut p_dofs = Vec::new();
    for &t in triangles {
        for child in 4 * t..4 * t + 4 {
            for &rn in &mesh.refined.triangles[child] {
                if let Some(d) = u_dof(rn) {
                    u_dofs.extend_from_slice(&[d, d + 1]);
                }
            }
        }
        for k in 0..3 {
            xi_dofs.push(xi_dof(t, k));
            if let Some(d) = p_dof(mesh.base.triangles[t][k]) {
                p_dofs.push(d);
            }
        }
    }
    for v in [&mut u_dofs, &mut xi_dofs, &mut p_dofs] {
        v.sort_unstable();
        v.dedup();
    }
    let (nu, nxi, np) = (u_dofs.len(), xi_dofs.len(), p_dofs.len());

    let mut ta = TripletBuilder::with_capacity(nu, nu, 36 * 4 * triangles.len());
    let mut tb = TripletBuilder::new(nxi, nu);
    let mut tc = TripletBuilder::new(nxi, nxi);
    let mut td = TripletBuilder::new(np, nxi);
    let mut te = TripletBuilder::new(np, np);
    let mut tr = TripletBuilder::new(np, np);
    let mut f = vec![0.0; nu];
    let mut g = vec![0.0; np];

    for &t in triangles {
        let base_tri = mesh.base.triangles[t];
        let (area_t, grad_t) = mesh.base.p1_gradients(t);

        // Local positions of the total-pressure and pressure basis functions on `t`.
        let xi_loc: Vec<usize> = match spaces.xi_element {
            XiElement::P1 => (0..3).map(|k| local_index(&xi_dofs, xi_dof(t, k))).collect(),
            XiElement::P0 => vec![local_index(&xi_dofs, t)],
        };
        let p_loc: [Option<usize>; 3] =
            base_tri.map(|n| p_dof(n).map(|d| local_index(&p_dofs, d)));

        for child in 4 * t..4 * t + 4 {
            let rtri = mesh.refined.triangles[child];
            let (area, grad) = mesh.refined.p1_gradients(child);
            let loc: [Option<usize>; 3] =
                rtri.map(|rn| u_dof(rn).map(|d| local_index(&u_dofs, d)));

            // 2μ ε(φ_a e_c) : ε(φ_b e_d) = μ (δ_cd ∇φ_a·∇φ_b + ∂_d φ_a ∂_c φ_b)
            for a in 0..3 {
                let Some(la) = loc[a] else { continue };
                for b in 0..3 {
                    let Some(lb) = loc[b] else { continue };
                    let gg = grad[a][0] * grad[b][0] + grad[a][1] * grad[b][1];
                    for c in 0..2 {
                        for d in 0..2 {
                            let delta = if c == d { gg } else { 0.0 };
                            let v = mu * area * (delta + grad[a][d] * grad[b][c]);
                            ta.push(la + c, lb + d, v);
                        }
                    }
                }
            }

            // ∫_child ψ_k for the total-pressure basis; exact for linear ψ via the centroid.
            let weights: Vec<f64> = match spaces.xi_element {
                XiElement::P1 => {
                    let bary = mesh.base.barycentric(t, mesh.refined.centroid(child));
                    bary.iter().map(|l| area * l).collect()
                }
                XiElement::P0 => vec![area],
            };
            for a in 0..3 {
                let Some(la) = loc[a] else { continue };
                for (k, &lk) in xi_loc.iter().enumerate() {
                    for c in 0..2 {
                        tb.push(lk, la + c, -grad[a][c] * weights[k]);
                    }
                }
                f[la] += load.body_force[0] * area / 3.0;
                f[la + 1] += load.body_force[1] * area / 3.0;
            }
        }

        let mass = p1_mass(area_t);
        match spaces.xi_element {
            XiElement::P1 => {
                for a in 0..3 {
                    for b in 0..3 {
                        tc.push(xi_loc[a], xi_loc[b], mass[a][b] / lambda);
                    }
                }
                for a in 0..3 {
                    let Some(pa) = p_loc[a] else { continue };
                    for b in 0..3 {
                        td.push(pa, xi_loc[b], alpha / lambda * mass[a][b]);
                    }
                }
            }
            XiElement::P0 => {
                tc.push(xi_loc[0], xi_loc[0], area_t / lambda);
                for a in 0..3 {
                    let Some(pa) = p_loc[a] else { continue };
                    td.push(pa, xi_loc[0], alpha / lambda * area_t / 3.0);
                }
            }
        }
        let react = 2.0 * alpha * alpha / lambda;
        for a in 0..3 {
            let Some(pa) = p_loc[a] else { continue };
            for b in 0..3 {
                let Some(pb) = p_loc[b] else { continue };
                let stiff = kappa * area_t * (grad_t[a][0] * grad_t[b][0] + grad_t[a][1] * grad_t[b][1]);
                te.push(pa, pb, stiff + react * mass[a][b]);
                tr.push(pa, pb, react * mass[a][b]);
            }
            g[pa] += load.source * area_t / 3.0;
        }
    }

    LocalBlocks {
        sub,
        u_dofs,
        xi_dofs,
        p_dofs,
        a: ta.build(),
        b: tb.build(),
        c: tc.build(),
        d: td.build(),
        e: te.build(),
        e_reaction: tr.build(),
        f,
        g,
    }
}

fn scatter(blocks: &[(&SpMat, &[usize], &[usize])], nrows: usize, ncols: usize) -> SpMat {
    let mut t = TripletBuilder::new(nrows, ncols);
    for (m, rows, cols) in blocks {
        for (i, j, v) in linalg::entries(m) {
            t.push(rows[i], cols[j], v);
        }
    }
    t.build()
}

/// Assembles all blocks and right-hand sides, keeping the per-subdomain contributions.
pub fn assemble_blocks(
    mesh: &StructuredMesh,
    spaces: &FeSpaceSet,
    materials: &MaterialField,
    load: &LoadSpec,
) -> Result<BlockSystem> {
    let nsub = mesh.num_subdomains();
    if materials.len() != nsub {
        return Err(Error::Assembly {
            field: "material",
            msg: format!("{} coefficient sets for {} subdomains", materials.len(), nsub),
        });
    }
    if spaces.u_node_of_refined.len() != mesh.refined.num_nodes() {
        return Err(Error::Assembly {
            field: "displacement",
            msg: "dof map does not match the refined mesh".into(),
        });
    }
    if spaces.p_node_of_base.len() != mesh.base.num_nodes() {
        return Err(Error::Assembly {
            field: "pressure",
            msg: "dof map does not match the base mesh".into(),
        });
    }
    let mut tris = vec![Vec::new(); nsub];
    for t in 0..mesh.base.triangles.len() {
        tris[mesh.subdomain_of_triangle(t)].push(t);
    }
    let locals: Vec<LocalBlocks> = (0..nsub)
        .map(|s| assemble_local(mesh, spaces, materials, load, s, &tris[s]))
        .collect();

    let (nu, nxi, np) = (spaces.n_u(), spaces.n_xi(), spaces.n_p());
    let pick = |sel: fn(&LocalBlocks) -> (&SpMat, &[usize], &[usize])| -> Vec<(&SpMat, &[usize], &[usize])> {
        locals.iter().map(sel).collect()
    };
    let a = scatter(&pick(|l| (&l.a, &l.u_dofs, &l.u_dofs)), nu, nu);
    let b = scatter(&pick(|l| (&l.b, &l.xi_dofs, &l.u_dofs)), nxi, nu);
    let c = scatter(&pick(|l| (&l.c, &l.xi_dofs, &l.xi_dofs)), nxi, nxi);
    let d = scatter(&pick(|l| (&l.d, &l.p_dofs, &l.xi_dofs)), np, nxi);
    let e = scatter(&pick(|l| (&l.e, &l.p_dofs, &l.p_dofs)), np, np);
    let e_reaction = scatter(&pick(|l| (&l.e_reaction, &l.p_dofs, &l.p_dofs)), np, np);
    let mut f = vec![0.0; nu];
    let mut g = vec![0.0; np];
    for l in &locals {
        for (k, &d) in l.u_dofs.iter().enumerate() {
            f[d] += l.f[k];
        }
        for (k, &d) in l.p_dofs.iter().enumerate() {
            g[d] += l.g[k];
        }
    }
    Ok(BlockSystem {
        spaces: spaces.clone(),
        materials: materials.clone(),
        a,
        b,
        c,
        d,
        e,
        e_reaction,
        f,
        g,
        locals,
    })
}

impl BlockSystem {
    pub fn n_u(&self) -> usize {
        self.spaces.n_u()
    }

    pub fn n_xi(&self) -> usize {
        self.spaces.n_xi()
    }

    pub fn n_p(&self) -> usize {
        self.spaces.n_p()
    }

    pub fn total_dofs(&self) -> usize {
        self.spaces.total()
    }

    /// The monolithic saddle matrix and right-hand side `[f; 0; g]`.
    pub fn full_system(&self) -> (SpMat, Vec<f64>) {
        let (nu, nxi, np) = (self.n_u(), self.n_xi(), self.n_p());
        let n = nu + nxi + np;
        let mut t = TripletBuilder::new(n, n);
        let (ox, op) = (nu, nu + nxi);
        for (i, j, v) in linalg::entries(&self.a) {
            t.push(i, j, v);
        }
        for (i, j, v) in linalg::entries(&self.b) {
            t.push(ox + i, j, v);
            t.push(j, ox + i, v);
        }
        for (i, j, v) in linalg::entries(&self.c) {
            t.push(ox + i, ox + j, -v);
        }
        for (i, j, v) in linalg::entries(&self.d) {
            t.push(op + i, ox + j, v);
            t.push(ox + j, op + i, v);
        }
        for (i, j, v) in linalg::entries(&self.e) {
            t.push(op + i, op + j, -v);
        }
        let mut rhs = vec![0.0; n];
        rhs[..nu].copy_from_slice(&self.f);
        rhs[op..].copy_from_slice(&self.g);
        (t.build(), rhs)
    }

    /// Quadratic form `[η; q]ᵀ [C -Dᵀ; -D E] [η; q]`.
    pub fn pressure_form(&self, eta: &[f64], q: &[f64]) -> f64 {
        let ce = linalg::spmv(&self.c, eta);
        let dq = linalg::spmv_t(&self.d, q);
        let eq = linalg::spmv(&self.e, q);
        linalg::dot(eta, &ce) - 2.0 * linalg::dot(eta, &dq) + linalg::dot(q, &eq)
    }
}

/// Outcome of the random check of the pressure-block coercivity bound.
#[derive(Debug, Clone, Serialize)]
pub struct SaddleReport {
    pub trials: usize,
    /// Minimum of the form over `c(ηᵀCη + (α²/λ)‖q‖²) + κ|q|₁²` with `c = (3-√5)/2`.
    pub min_ratio: f64,
    /// Minimum of the form over `c(ηᵀCη + qᵀEq)`.
    pub min_ratio_full_e: f64,
    pub violations: usize,
}

/// Evaluates the coercivity bound of `[C -Dᵀ; -D E]` on `trials` Gaussian vectors.
pub fn check_saddle_inequalities(sys: &BlockSystem, trials: usize, seed: u64) -> SaddleReport {
    let c = (3.0 - 5f64.sqrt()) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_ratio = f64::INFINITY;
    let mut min_full = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..trials {
        let eta: Vec<f64> = (0..sys.n_xi()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q: Vec<f64> = (0..sys.n_p()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let form = sys.pressure_form(&eta, &q);
        let ctc = linalg::dot(&eta, &linalg::spmv(&sys.c, &eta));
        let qeq = linalg::dot(&q, &linalg::spmv(&sys.e, &q));
        let qrq = linalg::dot(&q, &linalg::spmv(&sys.e_reaction, &q));
        let bound = c * (ctc + 0.5 * qrq) + (qeq - qrq);
        if bound > 0.0 {
            let r = form / bound;
            min_ratio = min_ratio.min(r);
            if r < 1.0 - 1e-12 {
                violations += 1;
            }
        }
        let full = c * (ctc + qeq);
        if full > 0.0 {
            min_full = min_full.min(form / full);
        }
    }
    SaddleReport {
        trials,
        min_ratio,
        min_ratio_full_e: min_full,
        violations,
    }
}

/// Writes `(row, col, value)` lines, one per stored entry.
pub fn write_coo<W: Write>(m: &SpMat, mut w: W) -> Result<()> {
    writeln!(w, "% {} {} {}", m.nrows(), m.ncols(), m.compute_nnz())?;
    for (i, j, v) in linalg::entries(m) {
        writeln!(w, "{i} {j} {v:.17e}")?;
    }
    Ok(())
}

/// Discrete inf-sup constant of the displacement/total-pressure pair, measured as the
/// square root of the smallest nonzero eigenvalue of `M⁻¹ B A₁⁻¹ Bᵀ`, where `A₁` is the
/// elasticity block at unit `2μ` and `M` the total-pressure mass matrix. Dense; small
/// meshes only.
pub fn inf_sup_estimate(sys: &BlockSystem) -> Result<f64> {
    let (nu, nxi) = (sys.n_u(), sys.n_xi());
    if nxi > 2000 || nu > 8000 {
        return Err(Error::OracleLimit {
            dofs: nu + nxi,
            limit: 10000,
        });
    }
    let mut a1 = TripletBuilder::new(nu, nu);
    let mut mass = TripletBuilder::new(nxi, nxi);
    for l in &sys.locals {
        let coef = sys.materials.get(l.sub);
        for (i, j, v) in linalg::entries(&l.a) {
            a1.push(l.u_dofs[i], l.u_dofs[j], v / (2.0 * coef.mu));
        }
        for (i, j, v) in linalg::entries(&l.c) {
            mass.push(l.xi_dofs[i], l.xi_dofs[j], v * coef.lambda);
        }
    }
    let fa = SparseFactor::cholesky(&a1.build())?;
    let mut x = linalg::to_dense(&sys.b).transpose().to_owned();
    fa.solve_mat_in_place(x.as_mut());
    let mut s = linalg::to_dense(&sys.b) * &x;
    linalg::symmetrize(&mut s);
    let mdense = linalg::to_dense(&mass.build());
    let fm = DenseFactor::cholesky(mdense.as_ref())?;
    let mut minv = Mat::<f64>::identity(nxi, nxi);
    fm.solve_mat_in_place(minv.as_mut());
    linalg::symmetrize(&mut minv);
    let ev = linalg::preconditioned_spectrum(s.as_ref(), minv.as_ref())?;
    let top = ev.last().copied().unwrap_or(0.0);
    ev.into_iter()
        .find(|&v| v > 1e-10 * top)
        .map(f64::sqrt)
        .ok_or_else(|| Error::Invariant("no positive eigenvalue in the inf-sup problem".into()))
}
