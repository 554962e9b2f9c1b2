//! Block-diagonal preconditioner `M⁻¹ = diag(M_ξ⁻¹, M_p⁻¹, M_λ⁻¹)` for the interface system.

use std::sync::atomic::{AtomicUsize, Ordering};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::decomposition::{DofClassification, HatId, RestrictionSet};
use crate::error::{Error, Result};
use crate::fem::BlockSystem;
use crate::linalg::{self, DenseFactor, SpMat, SparseFactor, TripletBuilder};
use crate::reduced::{InterfaceLayout, LocalMaps, ReducedOperator, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LambdaVariant {
    #[default]
    Dirichlet,
    Lumped,
}

impl LambdaVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LambdaVariant::Dirichlet => "dirichlet",
            LambdaVariant::Lumped => "lumped",
        }
    }
}

/// Splits a local square block into interior/interface parts by slot.
fn split_by_slots(m: &SpMat, slots: &[Slot], n_int: usize, n_gam: usize) -> (SpMat, SpMat, SpMat) {
    let mut ii = TripletBuilder::new(n_int, n_int);
    let mut ib = TripletBuilder::new(n_int, n_gam);
    let mut bb = TripletBuilder::new(n_gam, n_gam);
    for (i, j, v) in linalg::entries(m) {
        match (slots[i], slots[j]) {
            (Slot::Interior(a), Slot::Interior(b)) => ii.push(a, b, v),
            (Slot::Interior(a), Slot::Interface(b)) => ib.push(a, b, v),
            (Slot::Interface(a), Slot::Interface(b)) => bb.push(a, b, v),
            (Slot::Interface(_), Slot::Interior(_)) => {}
        }
    }
    (ii.build(), ib.build(), bb.build())
}

/// Local interface Schur complement of a symmetric positive definite block.
fn local_schur(m: &SpMat, slots: &[Slot], n_int: usize, n_gam: usize, id: usize, block: &'static str) -> Result<Mat<f64>> {
    let (ii, ib, bb) = split_by_slots(m, slots, n_int, n_gam);
    let f = SparseFactor::cholesky(&ii).map_err(|_| Error::SingularLocal { id, block })?;
    let mut s = linalg::dense_schur(&f, &ib, &bb);
    linalg::symmetrize(&mut s);
    Ok(s)
}

/// `M_ξ⁻¹ = R_{ξ,D}ᵀ ((λ/μ) S_ξ)⁻¹ R_{ξ,D}` without coarse correction.
#[derive(Debug)]
pub struct TotalPressureSolver {
    /// `(λᵢ/μᵢ) S_ξ^{(i)}` in local interface order.
    pub schur: Vec<Mat<f64>>,
    factors: Vec<DenseFactor>,
    offsets: Vec<usize>,
    r_d: SpMat,
    r: SpMat,
}

impl TotalPressureSolver {
    pub fn build(sys: &BlockSystem, maps: &[&LocalMaps], restr: &RestrictionSet) -> Result<Self> {
        let mut schur = Vec::with_capacity(maps.len());
        let mut factors = Vec::with_capacity(maps.len());
        for (lb, m) in sys.locals.iter().zip(maps) {
            let c = sys.materials.get(lb.sub);
            let mut s = local_schur(&lb.c, &m.xi_slot, m.n_xii, m.n_xig, lb.sub, "C_II")?;
            s *= faer::Scale(c.lambda / c.mu);
            let f = DenseFactor::cholesky(s.as_ref()).map_err(|_| Error::SingularLocal {
                id: lb.sub,
                block: "S_ξ",
            })?;
            schur.push(s);
            factors.push(f);
        }
        Ok(Self {
            schur,
            factors,
            offsets: restr.xi_offsets.clone(),
            r_d: restr.r_xi_d.clone(),
            r: restr.r_xi.clone(),
        })
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut z = linalg::spmv(&self.r_d, x);
        for (s, f) in self.factors.iter().enumerate() {
            f.solve_in_place(&mut z[self.offsets[s]..self.offsets[s + 1]]);
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        linalg::spmv_t_add(&self.r_d, &z, y, 1.0);
    }

    /// Assembled `(λ/μ) Ŝ_ξ = R_ξᵀ ((λ/μ) S_ξ) R_ξ`, dense.
    pub fn assembled(&self) -> Mat<f64> {
        assemble_blocks(&self.r, &self.offsets, &self.schur)
    }
}

fn assemble_blocks(r: &SpMat, offsets: &[usize], blocks: &[Mat<f64>]) -> Mat<f64> {
    let n = r.ncols();
    let mut out = Mat::<f64>::zeros(n, n);
    let mut col_of = vec![0usize; r.nrows()];
    for (i, j, _) in linalg::entries(r) {
        col_of[i] = j;
    }
    for (s, b) in blocks.iter().enumerate() {
        let o = offsets[s];
        for a in 0..b.nrows() {
            for c in 0..b.ncols() {
                out[(col_of[o + a], col_of[o + c])] += b[(a, c)];
            }
        }
    }
    out
}

#[derive(Debug)]
struct PressureLocal {
    primal_ids: Vec<usize>,
    dd: DenseFactor,
    /// `S_ΔΔ⁻¹ S_ΔΠ`
    psi: Mat<f64>,
    /// `S_ΠΔ`
    pd: Mat<f64>,
}

/// `M_p⁻¹ = T_p R̃_{p,D}ᵀ S̃_p⁻¹ R̃_{p,D} T_pᵀ`, with `S̃_p` partially assembled in the primal
/// pressure dofs.
#[derive(Debug)]
pub struct PressureBddc {
    /// `S_p^{(i)} = E_ΓΓ - E_ΓI E_II⁻¹ E_IΓ` in local nodal interface order.
    pub schur: Vec<Mat<f64>>,
    locals: Vec<PressureLocal>,
    coarse: DenseFactor,
    n_primal: usize,
    dual_offsets: Vec<usize>,
    offsets: Vec<usize>,
    r: SpMat,
    r_tilde: SpMat,
    r_tilde_d: SpMat,
    t_p: SpMat,
}

impl PressureBddc {
    pub fn build(sys: &BlockSystem, maps: &[&LocalMaps], cls: &DofClassification, restr: &RestrictionSet) -> Result<Self> {
        let p = &cls.p;
        let n_primal = p.n_primal();
        let mut schur = Vec::with_capacity(maps.len());
        let mut locals = Vec::with_capacity(maps.len());
        let mut coarse = Mat::<f64>::zeros(n_primal, n_primal);
        for (lb, m) in sys.locals.iter().zip(maps) {
            let s = lb.sub;
            let sp = local_schur(&lb.e, &m.p_slot, m.n_pi, m.n_pg, s, "E_II")?;
            let duals = &p.sub_dual[s];
            let prims = &p.sub_primal[s];
            let (nd, np) = (duals.len(), prims.len());
            let mut t = Mat::<f64>::zeros(m.n_pg, nd + np);
            for (row, &d) in p.sub_interface[s].iter().enumerate() {
                let pos = p.interface_position(d).unwrap();
                for &(h, c) in &p.expansion[pos] {
                    let col = match h {
                        HatId::Dual(id) => duals.binary_search(&id).expect("dual id of subdomain"),
                        HatId::Primal(id) => nd + prims.binary_search(&id).expect("primal id of subdomain"),
                    };
                    t[(row, col)] += c;
                }
            }
            let mut sh = t.transpose() * &sp * &t;
            linalg::symmetrize(&mut sh);
            let dd_block = sh.as_ref().submatrix(0, 0, nd, nd).to_owned();
            let dd = DenseFactor::cholesky(dd_block.as_ref()).map_err(|_| Error::SingularLocal {
                id: s,
                block: "S_ΔΔ",
            })?;
            let mut psi = sh.as_ref().submatrix(0, nd, nd, np).to_owned();
            dd.solve_mat_in_place(psi.as_mut());
            let pd = sh.as_ref().submatrix(nd, 0, np, nd).to_owned();
            let pp = sh.as_ref().submatrix(nd, nd, np, np).to_owned();
            let local_coarse = if nd > 0 { &pp - &pd * &psi } else { pp };
            for (a, &ga) in prims.iter().enumerate() {
                for (b, &gb) in prims.iter().enumerate() {
                    coarse[(ga, gb)] += local_coarse[(a, b)];
                }
            }
            schur.push(sp);
            locals.push(PressureLocal {
                primal_ids: prims.clone(),
                dd,
                psi,
                pd,
            });
        }
        linalg::symmetrize(&mut coarse);
        let coarse = DenseFactor::cholesky(coarse.as_ref()).map_err(|_| Error::SingularCoarse)?;
        Ok(Self {
            schur,
            locals,
            coarse,
            n_primal,
            dual_offsets: restr.p_dual_offsets.clone(),
            offsets: restr.p_offsets.clone(),
            r: restr.r_p.clone(),
            r_tilde: restr.r_p_tilde.clone(),
            r_tilde_d: restr.r_p_tilde_d.clone(),
            t_p: restr.t_p.clone(),
        })
    }

    /// Length of the partially assembled space: stacked local duals, then global primals.
    pub fn tilde_dim(&self) -> usize {
        self.dual_offsets.last().unwrap() + self.n_primal
    }

    /// `x = S̃_p⁻¹ z`
    pub fn apply_s_tilde_inv(&self, z: &[f64]) -> Vec<f64> {
        let nd = *self.dual_offsets.last().unwrap();
        let mut x = z.to_vec();
        let mut t = z[nd..].to_vec();
        for (s, l) in self.locals.iter().enumerate() {
            let w = &mut x[self.dual_offsets[s]..self.dual_offsets[s + 1]];
            l.dd.solve_in_place(w);
            let mut loc = vec![0.0; l.primal_ids.len()];
            linalg::dense_matvec(l.pd.as_ref(), w, &mut loc);
            for (k, &g) in l.primal_ids.iter().enumerate() {
                t[g] -= loc[k];
            }
        }
        self.coarse.solve_in_place(&mut t);
        for (s, l) in self.locals.iter().enumerate() {
            let y: Vec<f64> = l.primal_ids.iter().map(|&g| t[g]).collect();
            let w = &mut x[self.dual_offsets[s]..self.dual_offsets[s + 1]];
            let mut corr = vec![0.0; w.len()];
            linalg::dense_matvec(l.psi.as_ref(), &y, &mut corr);
            for (wi, ci) in w.iter_mut().zip(&corr) {
                *wi -= ci;
            }
        }
        x[nd..].copy_from_slice(&t);
        x
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let hat = linalg::spmv_t(&self.t_p, x);
        let z = linalg::spmv(&self.r_tilde_d, &hat);
        let w = self.apply_s_tilde_inv(&z);
        let hat = linalg::spmv_t(&self.r_tilde_d, &w);
        y.iter_mut().for_each(|v| *v = 0.0);
        linalg::spmv_add(&self.t_p, &hat, y, 1.0);
    }

    /// Assembled nodal `Ŝ_p = R_pᵀ S_p R_p`, dense.
    pub fn assembled(&self) -> Mat<f64> {
        assemble_blocks(&self.r, &self.offsets, &self.schur)
    }

    pub fn r_tilde(&self) -> &SpMat {
        &self.r_tilde
    }

    pub fn transform(&self) -> &SpMat {
        &self.t_p
    }
}

/// `M_λ⁻¹ = B_{Δ,D} H_Δ B_{Δ,D}ᵀ` with the discrete harmonic `H_Δ` or the lumped `A_ΔΔ`.
#[derive(Debug)]
pub struct LagrangeSolver {
    pub variant: LambdaVariant,
    /// Per-subdomain `H_Δ^{(i)}` (or `A_ΔΔ^{(i)}`) in local dual order.
    pub h: Vec<Mat<f64>>,
}

impl LagrangeSolver {
    pub fn build(op: &ReducedOperator, variant: LambdaVariant) -> Result<Self> {
        let mut h = Vec::with_capacity(op.subs.len());
        for sub in &op.subs {
            let m = &sub.maps;
            let ui: Vec<usize> = (0..m.n_ui).collect();
            let delta: Vec<usize> = (m.delta_offset()..m.n_r()).collect();
            let dd = linalg::submatrix(&sub.k_rr, &delta, &delta);
            let mut hs = match variant {
                LambdaVariant::Lumped => linalg::to_dense(&dd),
                LambdaVariant::Dirichlet => {
                    let ii = linalg::submatrix(&sub.k_rr, &ui, &ui);
                    let id = linalg::submatrix(&sub.k_rr, &ui, &delta);
                    let f = SparseFactor::cholesky(&ii).map_err(|_| Error::SingularLocal {
                        id: sub.sub,
                        block: "A_II",
                    })?;
                    linalg::dense_schur(&f, &id, &dd)
                }
            };
            linalg::symmetrize(&mut hs);
            h.push(hs);
        }
        Ok(Self { variant, h })
    }

    pub fn apply(&self, jump: &crate::decomposition::JumpOperator, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (s, h) in self.h.iter().enumerate() {
            let mut v = vec![0.0; h.nrows()];
            jump.apply_local_t(s, x, &mut v, true);
            let mut hv = vec![0.0; h.nrows()];
            linalg::dense_matvec(h.as_ref(), &v, &mut hv);
            jump.apply_local(s, &hv, y, true);
        }
    }
}

#[derive(Debug)]
pub struct BlockPreconditioner {
    pub layout: InterfaceLayout,
    pub xi: Option<TotalPressureSolver>,
    pub p: PressureBddc,
    pub lambda: LagrangeSolver,
    jump: crate::decomposition::JumpOperator,
    applies: AtomicUsize,
}

impl BlockPreconditioner {
    pub fn build(
        sys: &BlockSystem,
        cls: &DofClassification,
        restr: &RestrictionSet,
        op: &ReducedOperator,
        variant: LambdaVariant,
    ) -> Result<Self> {
        let maps: Vec<&LocalMaps> = op.subs.iter().map(|s| &s.maps).collect();
        let xi = if op.layout.n_xi > 0 {
            Some(TotalPressureSolver::build(sys, &maps, restr)?)
        } else {
            None
        };
        let p = PressureBddc::build(sys, &maps, cls, restr)?;
        let lambda = LagrangeSolver::build(op, variant)?;
        Ok(Self {
            layout: op.layout,
            xi,
            p,
            lambda,
            jump: op.jump.clone(),
            applies: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn apply_count(&self) -> usize {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if x.len() != n || y.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: if x.len() != n { x.len() } else { y.len() },
            });
        }
        self.applies.fetch_add(1, Ordering::Relaxed);
        let (xx, xp, xl) = self.layout.split(x);
        let (yx, yp, yl) = self.layout.split_mut(y);
        if let Some(m) = &self.xi {
            m.apply(xx, yx);
        }
        self.p.apply(xp, yp);
        self.lambda.apply(&self.jump, xl, yl);
        Ok(())
    }

    /// Dense `M⁻¹` by unit-vector probing.
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
}
