//! Dual-primal reduction to the interface system
//!
//! ```text
//! G = B̃ Ã⁻¹ B̃ᵀ + [C  -Dᵀ  0; -D  E  0; 0  0  0]_ΓΓ,    b = B̃ Ã⁻¹ f̃ - [0; g_Γ; 0]
//! ```
//!
//! acting on `(ξ_Γ, p_Γ, λ_Δ)`. `Ã` is the partially assembled saddle matrix over the
//! subdomain unknowns `r = (u_I, ξ_I, p_I, u_Δ)` and the assembled primal displacements.

use std::sync::atomic::{AtomicUsize, Ordering};

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decomposition::{DofClassification, HatId, JumpOperator};
use crate::error::{Error, Result};
use crate::fem::{BlockSystem, LocalBlocks};
use crate::linalg::{self, DenseFactor, EquilibratedLu, SpMat, TripletBuilder};

/// Position of a local total-pressure or pressure dof.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Interior(usize),
    Interface(usize),
}

/// Subdomain index bookkeeping shared by the reduced operator and the preconditioner.
#[derive(Debug, Clone)]
pub struct LocalMaps {
    pub n_ui: usize,
    pub n_xii: usize,
    pub n_pi: usize,
    pub n_delta: usize,
    pub n_primal: usize,
    pub n_xig: usize,
    pub n_pg: usize,
    /// Hat expansion of every local displacement dof into `[r | Π]` positions.
    pub u_exp: Vec<Vec<(usize, f64)>>,
    pub xi_slot: Vec<Slot>,
    pub p_slot: Vec<Slot>,
    /// Global primal displacement ids, in local Π order.
    pub primal_ids: Vec<usize>,
    /// Positions in the assembled total-pressure interface, in local order.
    pub xi_gamma: Vec<usize>,
    /// Positions in the assembled pressure interface, in local order.
    pub p_gamma: Vec<usize>,
}

impl LocalMaps {
    pub fn n_r(&self) -> usize {
        self.n_ui + self.n_xii + self.n_pi + self.n_delta
    }

    pub fn n_gamma(&self) -> usize {
        self.n_xig + self.n_pg
    }

    pub fn xi_offset(&self) -> usize {
        self.n_ui
    }

    pub fn p_offset(&self) -> usize {
        self.n_ui + self.n_xii
    }

    pub fn delta_offset(&self) -> usize {
        self.n_ui + self.n_xii + self.n_pi
    }

    pub fn build(lb: &LocalBlocks, cls: &DofClassification) -> Result<Self> {
        let s = lb.sub;
        let u = &cls.u;
        let n_ui = u.interior[s].len();
        let n_delta = u.sub_dual[s].len();
        let n_primal = u.sub_primal[s].len();
        let n_xii = cls.xi.interior[s].len();
        let n_pi = cls.p.interior[s].len();
        let n_xig = cls.xi.sub_interface[s].len();
        let n_pg = cls.p.sub_interface[s].len();
        let delta_off = n_ui + n_xii + n_pi;
        let n_r = delta_off + n_delta;

        let mut u_exp = Vec::with_capacity(lb.u_dofs.len());
        for &d in &lb.u_dofs {
            if let Ok(k) = u.interior[s].binary_search(&d) {
                u_exp.push(vec![(k, 1.0)]);
                continue;
            }
            let pos = u.interface_position(d).ok_or(Error::Assembly {
                field: "displacement",
                msg: format!("dof {d} of subdomain {s} is neither interior nor interface"),
            })?;
            let mut e = Vec::with_capacity(u.expansion[pos].len());
            for &(h, c) in &u.expansion[pos] {
                let idx = match h {
                    HatId::Primal(id) => n_r + u.sub_primal[s].binary_search(&id).expect("primal id of subdomain"),
                    HatId::Dual(id) => delta_off + u.sub_dual[s].binary_search(&id).expect("dual id of subdomain"),
                };
                e.push((idx, c));
            }
            u_exp.push(e);
        }
        let slot = |interior: &[usize], interface: &[usize], d: usize, field: &'static str| -> Result<Slot> {
            if let Ok(k) = interior.binary_search(&d) {
                Ok(Slot::Interior(k))
            } else if let Ok(k) = interface.binary_search(&d) {
                Ok(Slot::Interface(k))
            } else {
                Err(Error::Assembly {
                    field,
                    msg: format!("dof {d} of subdomain {s} is unclassified"),
                })
            }
        };
        let xi_slot = lb
            .xi_dofs
            .iter()
            .map(|&d| slot(&cls.xi.interior[s], &cls.xi.sub_interface[s], d, "total pressure"))
            .collect::<Result<Vec<_>>>()?;
        let p_slot = lb
            .p_dofs
            .iter()
            .map(|&d| slot(&cls.p.interior[s], &cls.p.sub_interface[s], d, "pressure"))
            .collect::<Result<Vec<_>>>()?;
        let xi_gamma = cls.xi.sub_interface[s]
            .iter()
            .map(|&d| cls.xi.interface_position(d).unwrap())
            .collect();
        let p_gamma = cls.p.sub_interface[s]
            .iter()
            .map(|&d| cls.p.interface_position(d).unwrap())
            .collect();
        Ok(Self {
            n_ui,
            n_xii,
            n_pi,
            n_delta,
            n_primal,
            n_xig,
            n_pg,
            u_exp,
            xi_slot,
            p_slot,
            primal_ids: u.sub_primal[s].clone(),
            xi_gamma,
            p_gamma,
        })
    }

    fn xi_index(&self, slot: Slot) -> usize {
        match slot {
            Slot::Interior(k) => self.xi_offset() + k,
            Slot::Interface(k) => self.n_r() + self.n_primal + k,
        }
    }

    fn p_index(&self, slot: Slot) -> usize {
        match slot {
            Slot::Interior(k) => self.p_offset() + k,
            Slot::Interface(k) => self.n_r() + self.n_primal + self.n_xig + k,
        }
    }
}

/// Local saddle matrix `K̂ = Tᵀ K T` ordered as `[r | Π | Γ]`, with its local load.
fn local_saddle(lb: &LocalBlocks, maps: &LocalMaps) -> (SpMat, Vec<f64>) {
    let n = maps.n_r() + maps.n_primal + maps.n_gamma();
    let mut t = TripletBuilder::with_capacity(n, n, 2 * lb.a.compute_nnz() + 4 * lb.b.compute_nnz());
    for (i, j, v) in linalg::entries(&lb.a) {
        for &(a, ca) in &maps.u_exp[i] {
            for &(b, cb) in &maps.u_exp[j] {
                t.push(a, b, ca * cb * v);
            }
        }
    }
    for (i, j, v) in linalg::entries(&lb.b) {
        let xi = maps.xi_index(maps.xi_slot[i]);
        for &(a, ca) in &maps.u_exp[j] {
            t.push(xi, a, ca * v);
            t.push(a, xi, ca * v);
        }
    }
    for (i, j, v) in linalg::entries(&lb.c) {
        t.push(maps.xi_index(maps.xi_slot[i]), maps.xi_index(maps.xi_slot[j]), -v);
    }
    for (i, j, v) in linalg::entries(&lb.d) {
        let p = maps.p_index(maps.p_slot[i]);
        let xi = maps.xi_index(maps.xi_slot[j]);
        t.push(p, xi, v);
        t.push(xi, p, v);
    }
    for (i, j, v) in linalg::entries(&lb.e) {
        t.push(maps.p_index(maps.p_slot[i]), maps.p_index(maps.p_slot[j]), -v);
    }
    let mut rhs = vec![0.0; n];
    for (i, &fi) in lb.f.iter().enumerate() {
        for &(a, ca) in &maps.u_exp[i] {
            rhs[a] += ca * fi;
        }
    }
    for (i, &gi) in lb.g.iter().enumerate() {
        rhs[maps.p_index(maps.p_slot[i])] += gi;
    }
    (t.build(), rhs)
}

/// Factored subdomain saddle block `A_rr` with its couplings.
#[derive(Debug)]
pub struct SubdomainOperator {
    pub sub: usize,
    pub maps: LocalMaps,
    pub k_rr: SpMat,
    pub k_rpi: SpMat,
    pub k_pipi: Mat<f64>,
    pub k_gr: SpMat,
    pub k_gpi: SpMat,
    pub k_gg: SpMat,
    pub factor: EquilibratedLu,
    /// `Φ = A_rr⁻¹ A_rΠ`
    pub phi: Mat<f64>,
    /// `A_ΠΠ - A_Πr Φ` before assembly.
    pub s_pipi: Mat<f64>,
    /// Local `[r | Π]` part of the load.
    pub rhs: Vec<f64>,
}

impl SubdomainOperator {
    pub fn build(lb: &LocalBlocks, cls: &DofClassification) -> Result<Self> {
        let s = lb.sub;
        let maps = LocalMaps::build(lb, cls)?;
        if !cls.anchored[s] && maps.n_primal < 3 {
            return Err(Error::SingularSubdomain {
                id: s,
                detail: format!(
                    "no Dirichlet support and only {} primal displacement dofs",
                    maps.n_primal
                ),
            });
        }
        let (k, rhs_full) = local_saddle(lb, &maps);
        let n_r = maps.n_r();
        let n_pi = maps.n_primal;
        let r: Vec<usize> = (0..n_r).collect();
        let pi: Vec<usize> = (n_r..n_r + n_pi).collect();
        let g: Vec<usize> = (n_r + n_pi..n_r + n_pi + maps.n_gamma()).collect();
        let k_rr = linalg::submatrix(&k, &r, &r);
        let k_rpi = linalg::submatrix(&k, &r, &pi);
        let k_pipi = linalg::to_dense(&linalg::submatrix(&k, &pi, &pi));
        let k_gr = linalg::submatrix(&k, &g, &r);
        let k_gpi = linalg::submatrix(&k, &g, &pi);
        let k_gg = linalg::submatrix(&k, &g, &g);

        let factor = EquilibratedLu::new(&k_rr, 2).map_err(|_| Error::SingularSubdomain {
            id: s,
            detail: "symbolically singular A_rr".into(),
        })?;
        check_factor(s, &k_rr, &factor)?;

        let mut phi = linalg::to_dense(&k_rpi);
        factor.solve_mat_in_place(phi.as_mut());
        let mut s_pipi = k_pipi.clone();
        for a in 0..n_pi {
            let mut col = vec![0.0; n_pi];
            let phi_col: Vec<f64> = (0..n_r).map(|i| phi[(i, a)]).collect();
            linalg::spmv_t_add(&k_rpi, &phi_col, &mut col, 1.0);
            for b in 0..n_pi {
                s_pipi[(b, a)] -= col[b];
            }
        }
        let rhs = rhs_full[..n_r + n_pi].to_vec();
        Ok(Self {
            sub: s,
            maps,
            k_rr,
            k_rpi,
            k_pipi,
            k_gr,
            k_gpi,
            k_gg,
            factor,
            phi,
            s_pipi,
            rhs,
        })
    }

    fn gather_gamma(&self, xi: &[f64], p: &[f64]) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.maps.n_gamma());
        y.extend(self.maps.xi_gamma.iter().map(|&k| xi[k]));
        y.extend(self.maps.p_gamma.iter().map(|&k| p[k]));
        y
    }

    fn scatter_gamma(&self, y: &[f64], xi: &mut [f64], p: &mut [f64]) {
        let nx = self.maps.n_xig;
        for (k, &pos) in self.maps.xi_gamma.iter().enumerate() {
            xi[pos] += y[k];
        }
        for (k, &pos) in self.maps.p_gamma.iter().enumerate() {
            p[pos] += y[nx + k];
        }
    }
}

fn equilibrated_residual(k: &SpMat, f: &EquilibratedLu, seed: u64) -> f64 {
    let n = k.nrows();
    if n == 0 {
        return 0.0;
    }
    // random solve in equilibrated coordinates, where the residual is scale-free
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = f.scale();
    let bh: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut x: Vec<f64> = bh.iter().zip(d).map(|(v, s)| v / s).collect();
    let mut r = x.clone();
    f.solve_in_place(&mut x);
    if x.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    linalg::spmv_add(k, &x, &mut r, -1.0);
    r.iter_mut().zip(d).for_each(|(v, s)| *v *= s);
    linalg::norm(&r) / linalg::norm(&bh)
}

fn check_factor(id: usize, k: &SpMat, f: &EquilibratedLu) -> Result<()> {
    let rel = equilibrated_residual(k, f, 0x5eed ^ id as u64);
    log::debug!("subdomain {id}: A_rr equilibrated residual {rel:.3e}");
    if !(rel <= 1e-10) {
        return Err(Error::SingularSubdomain {
            id,
            detail: format!("A_rr solve residual {rel:.3e}"),
        });
    }
    Ok(())
}

/// Factors every subdomain block; the first failure aborts with its subdomain id.
pub fn factor_subdomains(sys: &BlockSystem, cls: &DofClassification) -> Result<Vec<SubdomainOperator>> {
    sys.locals.iter().map(|lb| SubdomainOperator::build(lb, cls)).collect()
}

/// Relative residual of a random `A_rr` solve, measured in equilibrated coordinates.
pub fn factor_residual(op: &SubdomainOperator, seed: u64) -> f64 {
    equilibrated_residual(&op.k_rr, &op.factor, seed)
}

/// Assembled primal Schur complement `S_ΠΠ`.
#[derive(Debug)]
pub struct CoarseProblem {
    pub s: Mat<f64>,
    pub factor: DenseFactor,
    pub asymmetry: f64,
}

pub fn assemble_coarse(subs: &[SubdomainOperator], n_primal: usize) -> Result<CoarseProblem> {
    let mut s = Mat::<f64>::zeros(n_primal, n_primal);
    for op in subs {
        let ids = &op.maps.primal_ids;
        for (a, &ga) in ids.iter().enumerate() {
            for (b, &gb) in ids.iter().enumerate() {
                s[(ga, gb)] += op.s_pipi[(a, b)];
            }
        }
    }
    let scale = if n_primal > 0 { s.norm_max() } else { 1.0 };
    let asymmetry = linalg::symmetrize(&mut s) / scale;
    let factor = DenseFactor::cholesky(s.as_ref()).map_err(|_| Error::SingularCoarse)?;
    Ok(CoarseProblem { s, factor, asymmetry })
}

/// Interface unknowns `(ξ_Γ, p_Γ, λ_Δ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceVector {
    pub xi: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl InterfaceVector {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.xi.len() + self.p.len() + self.lambda.len());
        v.extend_from_slice(&self.xi);
        v.extend_from_slice(&self.p);
        v.extend_from_slice(&self.lambda);
        v
    }
}

/// Segment lengths of the flat interface layout `[ξ_Γ | p_Γ | λ_Δ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterfaceLayout {
    pub n_xi: usize,
    pub n_p: usize,
    pub n_lambda: usize,
}

impl InterfaceLayout {
    pub fn dim(&self) -> usize {
        self.n_xi + self.n_p + self.n_lambda
    }

    pub fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (xi, rest) = x.split_at(self.n_xi);
        let (p, lambda) = rest.split_at(self.n_p);
        (xi, p, lambda)
    }

    pub fn split_mut<'a>(&self, x: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64]) {
        let (xi, rest) = x.split_at_mut(self.n_xi);
        let (p, lambda) = rest.split_at_mut(self.n_p);
        (xi, p, lambda)
    }

    pub fn unflatten(&self, x: &[f64]) -> Result<InterfaceVector> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let (xi, p, lambda) = self.split(x);
        Ok(InterfaceVector {
            xi: xi.to_vec(),
            p: p.to_vec(),
            lambda: lambda.to_vec(),
        })
    }
}

/// Full-field solution in global numbering.
#[derive(Debug, Clone)]
pub struct Solution {
    pub u: Vec<f64>,
    pub xi: Vec<f64>,
    pub p: Vec<f64>,
    /// `‖B_Δ u_Δ‖ / ‖u_Δ‖` of the recovered dual displacements.
    pub jump_ratio: f64,
}

/// Matrix-free `G` with its building blocks.
#[derive(Debug)]
pub struct ReducedOperator {
    pub subs: Vec<SubdomainOperator>,
    pub coarse: CoarseProblem,
    pub jump: JumpOperator,
    pub layout: InterfaceLayout,
    pub n_primal: usize,
    /// Offsets of each subdomain's `r` block in the flat `(r, Π)` layout.
    pub r_offsets: Vec<usize>,
    /// Assembled interface pressure load `g_Γ`.
    pub g_gamma: Vec<f64>,
    u_owner_count: Vec<usize>,
    n_u: usize,
    n_xi: usize,
    n_p: usize,
    sub_u_dofs: Vec<Vec<usize>>,
    sub_xi_interior: Vec<Vec<usize>>,
    sub_p_interior: Vec<Vec<usize>>,
    xi_interface: Vec<usize>,
    p_interface: Vec<usize>,
    applies: AtomicUsize,
}

impl ReducedOperator {
    pub fn new(sys: &BlockSystem, cls: &DofClassification, jump: JumpOperator) -> Result<Self> {
        let subs = factor_subdomains(sys, cls)?;
        let n_primal = cls.u.n_primal();
        let coarse = assemble_coarse(&subs, n_primal)?;
        let layout = InterfaceLayout {
            n_xi: cls.xi.interface_dofs.len(),
            n_p: cls.p.interface_dofs.len(),
            n_lambda: jump.rows,
        };
        let mut r_offsets = vec![0];
        for op in &subs {
            r_offsets.push(r_offsets.last().unwrap() + op.maps.n_r());
        }
        let g_gamma = cls.p.interface_dofs.iter().map(|&d| sys.g[d]).collect();
        let mut u_owner_count = vec![0; sys.n_u()];
        for lb in &sys.locals {
            for &d in &lb.u_dofs {
                u_owner_count[d] += 1;
            }
        }
        Ok(Self {
            subs,
            coarse,
            jump,
            layout,
            n_primal,
            r_offsets,
            g_gamma,
            u_owner_count,
            n_u: sys.n_u(),
            n_xi: sys.n_xi(),
            n_p: sys.n_p(),
            sub_u_dofs: sys.locals.iter().map(|l| l.u_dofs.clone()).collect(),
            sub_xi_interior: cls.xi.interior.clone(),
            sub_p_interior: cls.p.interior.clone(),
            xi_interface: cls.xi.interface_dofs.clone(),
            p_interface: cls.p.interface_dofs.clone(),
            applies: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Length of the flat `(r, Π)` vector `Ã` acts on.
    pub fn atilde_dim(&self) -> usize {
        self.r_offsets.last().unwrap() + self.n_primal
    }

    pub fn apply_count(&self) -> usize {
        self.applies.load(Ordering::Relaxed)
    }

    /// `x = Ã⁻¹ z` on the flat `(r, Π)` layout.
    pub fn apply_atilde_inv(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.atilde_dim() {
            return Err(Error::Dimension {
                expected: self.atilde_dim(),
                got: z.len(),
            });
        }
        let nr = *self.r_offsets.last().unwrap();
        let mut x = vec![0.0; z.len()];
        let mut t = z[nr..].to_vec();
        for (s, op) in self.subs.iter().enumerate() {
            let range = self.r_offsets[s]..self.r_offsets[s + 1];
            let w = &mut x[range.clone()];
            w.copy_from_slice(&z[range]);
            op.factor.solve_in_place(w);
            let mut loc = vec![0.0; op.maps.n_primal];
            linalg::spmv_t_add(&op.k_rpi, w, &mut loc, 1.0);
            for (k, &g) in op.maps.primal_ids.iter().enumerate() {
                t[g] -= loc[k];
            }
        }
        self.coarse.factor.solve_in_place(&mut t);
        for (s, op) in self.subs.iter().enumerate() {
            let y: Vec<f64> = op.maps.primal_ids.iter().map(|&g| t[g]).collect();
            let w = &mut x[self.r_offsets[s]..self.r_offsets[s + 1]];
            for (k, &yk) in y.iter().enumerate() {
                for i in 0..w.len() {
                    w[i] -= op.phi[(i, k)] * yk;
                }
            }
        }
        x[nr..].copy_from_slice(&t);
        Ok(x)
    }

    /// `z = B̃ᵀ y` on the flat `(r, Π)` layout.
    fn b_tilde_t(&self, y: &[f64]) -> Vec<f64> {
        let nr = *self.r_offsets.last().unwrap();
        let mut z = vec![0.0; self.atilde_dim()];
        let (xi, p, lambda) = self.layout.split(y);
        for (s, op) in self.subs.iter().enumerate() {
            let yg = op.gather_gamma(xi, p);
            let zr = &mut z[self.r_offsets[s]..self.r_offsets[s + 1]];
            linalg::spmv_t_add(&op.k_gr, &yg, zr, 1.0);
            let off = op.maps.delta_offset();
            self.jump.apply_local_t(s, lambda, &mut zr[off..], false);
            let mut zp = vec![0.0; op.maps.n_primal];
            linalg::spmv_t_add(&op.k_gpi, &yg, &mut zp, 1.0);
            for (k, &g) in op.maps.primal_ids.iter().enumerate() {
                z[nr + g] += zp[k];
            }
        }
        z
    }

    /// `out += B̃ x`
    fn b_tilde_add(&self, x: &[f64], out: &mut [f64]) {
        let nr = *self.r_offsets.last().unwrap();
        let layout = self.layout;
        let (xi, p, lambda) = layout.split_mut(out);
        for (s, op) in self.subs.iter().enumerate() {
            let xr = &x[self.r_offsets[s]..self.r_offsets[s + 1]];
            let xp: Vec<f64> = op.maps.primal_ids.iter().map(|&g| x[nr + g]).collect();
            let mut w = vec![0.0; op.maps.n_gamma()];
            linalg::spmv_add(&op.k_gr, xr, &mut w, 1.0);
            linalg::spmv_add(&op.k_gpi, &xp, &mut w, 1.0);
            op.scatter_gamma(&w, xi, p);
            self.jump.apply_local(s, &xr[op.maps.delta_offset()..], lambda, false);
        }
    }

    /// `y = G x`
    pub fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if x.len() != n || y.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: if x.len() != n { x.len() } else { y.len() },
            });
        }
        self.applies.fetch_add(1, Ordering::Relaxed);
        y.iter_mut().for_each(|v| *v = 0.0);
        if n == 0 {
            return Ok(());
        }
        let z = self.b_tilde_t(x);
        let w = self.apply_atilde_inv(&z)?;
        self.b_tilde_add(&w, y);
        let (xi, p, _) = self.layout.split(x);
        let (oxi, op_, _) = self.layout.split_mut(y);
        for sub in &self.subs {
            let yg = sub.gather_gamma(xi, p);
            let mut c = vec![0.0; yg.len()];
            linalg::spmv_add(&sub.k_gg, &yg, &mut c, -1.0);
            sub.scatter_gamma(&c, oxi, op_);
        }
        Ok(())
    }

    /// Partially assembled load `f̃` on the flat `(r, Π)` layout.
    pub fn f_tilde(&self) -> Vec<f64> {
        let nr = *self.r_offsets.last().unwrap();
        let mut f = vec![0.0; self.atilde_dim()];
        for (s, op) in self.subs.iter().enumerate() {
            let n_r = op.maps.n_r();
            f[self.r_offsets[s]..self.r_offsets[s + 1]].copy_from_slice(&op.rhs[..n_r]);
            for (k, &g) in op.maps.primal_ids.iter().enumerate() {
                f[nr + g] += op.rhs[n_r + k];
            }
        }
        f
    }

    /// Right-hand side `B̃ Ã⁻¹ f̃ - [0; g_Γ; 0]` of the interface system.
    pub fn rhs(&self) -> Result<Vec<f64>> {
        let mut b = vec![0.0; self.dim()];
        if self.dim() == 0 {
            return Ok(b);
        }
        let w = self.apply_atilde_inv(&self.f_tilde())?;
        self.b_tilde_add(&w, &mut b);
        let (_, p, _) = self.layout.split_mut(&mut b);
        for (k, v) in p.iter_mut().enumerate() {
            *v -= self.g_gamma[k];
        }
        Ok(b)
    }

    /// Back-substitutes `Ã x = f̃ - B̃ᵀ y` and assembles the global fields.
    pub fn recover(&self, y: &[f64]) -> Result<Solution> {
        if y.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: y.len(),
            });
        }
        let mut z = self.f_tilde();
        let bt = self.b_tilde_t(y);
        for (zi, bi) in z.iter_mut().zip(&bt) {
            *zi -= bi;
        }
        let x = self.apply_atilde_inv(&z)?;
        let nr = *self.r_offsets.last().unwrap();
        let mut u = vec![0.0; self.n_u];
        let mut xi = vec![0.0; self.n_xi];
        let mut p = vec![0.0; self.n_p];
        let mut jump = vec![0.0; self.layout.n_lambda];
        let mut delta_sq = 0.0;
        for (s, op) in self.subs.iter().enumerate() {
            let xr = &x[self.r_offsets[s]..self.r_offsets[s + 1]];
            let m = &op.maps;
            let local = |idx: usize| {
                if idx < m.n_r() {
                    xr[idx]
                } else {
                    x[nr + m.primal_ids[idx - m.n_r()]]
                }
            };
            for (l, &d) in self.sub_u_dofs[s].iter().enumerate() {
                let v: f64 = m.u_exp[l].iter().map(|&(idx, c)| c * local(idx)).sum();
                u[d] += v / self.u_owner_count[d] as f64;
            }
            for (k, &d) in self.sub_xi_interior[s].iter().enumerate() {
                xi[d] = xr[m.xi_offset() + k];
            }
            for (k, &d) in self.sub_p_interior[s].iter().enumerate() {
                p[d] = xr[m.p_offset() + k];
            }
            let xd = &xr[m.delta_offset()..];
            delta_sq += linalg::dot(xd, xd);
            self.jump.apply_local(s, xd, &mut jump, false);
        }
        let (yxi, yp, _) = self.layout.split(y);
        for (k, &d) in self.xi_interface.iter().enumerate() {
            xi[d] = yxi[k];
        }
        for (k, &d) in self.p_interface.iter().enumerate() {
            p[d] = yp[k];
        }
        let jump_ratio = if delta_sq > 0.0 {
            linalg::norm(&jump) / delta_sq.sqrt()
        } else {
            0.0
        };
        Ok(Solution { u, xi, p, jump_ratio })
    }

    /// Dense `G` by unit-vector probing.
    pub fn probe(&self) -> Result<Mat<f64>> {
        let mut err = None;
        let m = linalg::probe(self.dim(), |x, y| {
            if let Err(e) = self.apply(x, y) {
                err = Some(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(m),
        }
    }

    /// Dense partially assembled `Ã` on the flat `(r, Π)` layout.
    pub fn atilde_dense(&self) -> Mat<f64> {
        let n = self.atilde_dim();
        let nr = *self.r_offsets.last().unwrap();
        let mut a = Mat::<f64>::zeros(n, n);
        for (s, op) in self.subs.iter().enumerate() {
            let o = self.r_offsets[s];
            for (i, j, v) in linalg::entries(&op.k_rr) {
                a[(o + i, o + j)] += v;
            }
            for (i, k, v) in linalg::entries(&op.k_rpi) {
                let g = nr + op.maps.primal_ids[k];
                a[(o + i, g)] += v;
                a[(g, o + i)] += v;
            }
            for (k, &gk) in op.maps.primal_ids.iter().enumerate() {
                for (l, &gl) in op.maps.primal_ids.iter().enumerate() {
                    a[(nr + gk, nr + gl)] += op.k_pipi[(k, l)];
                }
            }
        }
        a
    }
}
