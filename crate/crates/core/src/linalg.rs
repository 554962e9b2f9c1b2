//! Sparse/dense helpers shared by the assembly, reduction and preconditioning code.
//!
//! Vectors are plain `&[f64]` slices everywhere; faer is used for storage of
//! sparse matrices (CSC) and for all factorizations and eigensolves.

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Llt as SparseLlt, Lu as SparseLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, MatMut, MatRef, Side};

use crate::error::{Error, Result};

pub type SpMat = SparseColMat<usize, f64>;

/// Collects coordinate entries; duplicates are summed on `build`.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push(Triplet::new(row, col, val));
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn build(&self) -> SpMat {
        SpMat::try_new_from_triplets(self.nrows, self.ncols, &self.entries)
            .expect("triplet indices are in range by construction")
    }
}

pub fn empty(nrows: usize, ncols: usize) -> SpMat {
    TripletBuilder::new(nrows, ncols).build()
}

/// Iterates `(row, col, value)` over the stored entries of `a`.
pub fn entries(a: &SpMat) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    let r = a.as_ref();
    let col_ptr = r.col_ptr();
    let row_idx = r.row_idx();
    let val = r.val();
    (0..a.ncols()).flat_map(move |j| (col_ptr[j]..col_ptr[j + 1]).map(move |k| (row_idx[k], j, val[k])))
}

/// `y += scale * A x`
pub fn spmv_add(a: &SpMat, x: &[f64], y: &mut [f64], scale: f64) {
    debug_assert_eq!(x.len(), a.ncols());
    debug_assert_eq!(y.len(), a.nrows());
    let r = a.as_ref();
    let col_ptr = r.col_ptr();
    let row_idx = r.row_idx();
    let val = r.val();
    for j in 0..a.ncols() {
        let xj = scale * x[j];
        if xj == 0.0 {
            continue;
        }
        for k in col_ptr[j]..col_ptr[j + 1] {
            y[row_idx[k]] += val[k] * xj;
        }
    }
}

/// `y += scale * Aᵀ x`
pub fn spmv_t_add(a: &SpMat, x: &[f64], y: &mut [f64], scale: f64) {
    debug_assert_eq!(x.len(), a.nrows());
    debug_assert_eq!(y.len(), a.ncols());
    let r = a.as_ref();
    let col_ptr = r.col_ptr();
    let row_idx = r.row_idx();
    let val = r.val();
    for j in 0..a.ncols() {
        let mut s = 0.0;
        for k in col_ptr[j]..col_ptr[j + 1] {
            s += val[k] * x[row_idx[k]];
        }
        y[j] += scale * s;
    }
}

pub fn spmv(a: &SpMat, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    spmv_add(a, x, &mut y, 1.0);
    y
}

pub fn spmv_t(a: &SpMat, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.ncols()];
    spmv_t_add(a, x, &mut y, 1.0);
    y
}

/// Extracts `A[rows, cols]`; `rows`/`cols` give the selected original indices in order.
pub fn submatrix(a: &SpMat, rows: &[usize], cols: &[usize]) -> SpMat {
    let mut row_map = vec![usize::MAX; a.nrows()];
    for (k, &r) in rows.iter().enumerate() {
        row_map[r] = k;
    }
    let mut col_map = vec![usize::MAX; a.ncols()];
    for (k, &c) in cols.iter().enumerate() {
        col_map[c] = k;
    }
    let mut t = TripletBuilder::new(rows.len(), cols.len());
    for (i, j, v) in entries(a) {
        let (ri, cj) = (row_map[i], col_map[j]);
        if ri != usize::MAX && cj != usize::MAX {
            t.push(ri, cj, v);
        }
    }
    t.build()
}

pub fn to_dense(a: &SpMat) -> Mat<f64> {
    let mut m = Mat::<f64>::zeros(a.nrows(), a.ncols());
    for (i, j, v) in entries(a) {
        m[(i, j)] += v;
    }
    m
}

/// Largest absolute entry of `A - Aᵀ`.
pub fn asymmetry(a: &SpMat) -> f64 {
    let d = to_dense(a);
    let n = d.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((d[(i, j)] - d[(j, i)]).abs());
        }
    }
    worst
}

/// Sparse direct factorization used for subdomain blocks.
pub enum SparseFactor {
    Empty,
    Cholesky(SparseLlt<usize, f64>),
    Lu(SparseLu<usize, f64>),
}

impl std::fmt::Debug for SparseFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SparseFactor::Empty => write!(f, "SparseFactor::Empty"),
            SparseFactor::Cholesky(_) => write!(f, "SparseFactor::Cholesky"),
            SparseFactor::Lu(_) => write!(f, "SparseFactor::Lu"),
        }
    }
}

impl SparseFactor {
    /// Cholesky of a symmetric positive definite matrix (full storage).
    pub fn cholesky(a: &SpMat) -> Result<Self> {
        if a.nrows() == 0 {
            return Ok(SparseFactor::Empty);
        }
        a.sp_cholesky(Side::Lower)
            .map(SparseFactor::Cholesky)
            .map_err(|e| Error::LinearAlgebra(format!("sparse Cholesky failed: {e:?}")))
    }

    /// LU with partial pivoting; valid for the indefinite saddle blocks.
    pub fn lu(a: &SpMat) -> Result<Self> {
        if a.nrows() == 0 {
            return Ok(SparseFactor::Empty);
        }
        a.sp_lu()
            .map(SparseFactor::Lu)
            .map_err(|e| Error::LinearAlgebra(format!("sparse LU failed: {e:?}")))
    }

    pub fn solve_mat_in_place(&self, rhs: MatMut<'_, f64>) {
        match self {
            SparseFactor::Empty => {}
            SparseFactor::Cholesky(f) => f.solve_in_place_with_conj(Conj::No, rhs),
            SparseFactor::Lu(f) => f.solve_in_place_with_conj(Conj::No, rhs),
        }
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        if n == 0 {
            return;
        }
        self.solve_mat_in_place(MatMut::from_column_major_slice_mut(rhs, n, 1));
    }
}

/// Sparse LU of a badly scaled (saddle point) matrix: symmetric Ruiz equilibration,
/// then iterative refinement against the unscaled matrix.
pub struct EquilibratedLu {
    matrix: SpMat,
    scale: Vec<f64>,
    factor: SparseFactor,
    refine: usize,
}

impl std::fmt::Debug for EquilibratedLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EquilibratedLu(n = {})", self.matrix.nrows())
    }
}

impl EquilibratedLu {
    pub fn new(a: &SpMat, refine: usize) -> Result<Self> {
        let n = a.nrows();
        let mut d = vec![1.0; n];
        for _ in 0..8 {
            let mut rmax = vec![0.0f64; n];
            for (i, j, v) in entries(a) {
                rmax[i] = rmax[i].max((d[i] * v * d[j]).abs());
            }
            let mut done = true;
            for i in 0..n {
                if rmax[i] > 0.0 {
                    if (rmax[i] - 1.0).abs() > 1e-2 {
                        done = false;
                    }
                    d[i] /= rmax[i].sqrt();
                }
            }
            if done {
                break;
            }
        }
        let mut t = TripletBuilder::with_capacity(n, n, a.compute_nnz());
        for (i, j, v) in entries(a) {
            t.push(i, j, d[i] * v * d[j]);
        }
        let factor = SparseFactor::lu(&t.build())?;
        Ok(Self {
            matrix: a.clone(),
            scale: d,
            factor,
            refine,
        })
    }

    fn raw_solve(&self, b: &mut [f64]) {
        for (bi, di) in b.iter_mut().zip(&self.scale) {
            *bi *= di;
        }
        self.factor.solve_in_place(b);
        for (bi, di) in b.iter_mut().zip(&self.scale) {
            *bi *= di;
        }
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        if b.is_empty() {
            return;
        }
        let rhs = b.to_vec();
        self.raw_solve(b);
        for _ in 0..self.refine {
            let mut r = rhs.clone();
            spmv_add(&self.matrix, b, &mut r, -1.0);
            self.raw_solve(&mut r);
            for (bi, ri) in b.iter_mut().zip(&r) {
                *bi += ri;
            }
        }
    }

    pub fn solve_mat_in_place(&self, mut rhs: MatMut<'_, f64>) {
        let mut col = vec![0.0; rhs.nrows()];
        for j in 0..rhs.ncols() {
            for i in 0..col.len() {
                col[i] = rhs[(i, j)];
            }
            self.solve_in_place(&mut col);
            for i in 0..col.len() {
                rhs[(i, j)] = col[i];
            }
        }
    }

    pub fn matrix(&self) -> &SpMat {
        &self.matrix
    }

    /// Symmetric equilibration `D` with `D A D` of unit row maxima.
    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
}

/// Dense factorization for small blocks (coarse problems, local Schur complements).
pub enum DenseFactor {
    Empty,
    Cholesky(faer::linalg::solvers::Llt<f64>),
    Lu(faer::linalg::solvers::PartialPivLu<f64>),
}

impl std::fmt::Debug for DenseFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DenseFactor::Empty => write!(f, "DenseFactor::Empty"),
            DenseFactor::Cholesky(_) => write!(f, "DenseFactor::Cholesky"),
            DenseFactor::Lu(_) => write!(f, "DenseFactor::Lu"),
        }
    }
}

impl DenseFactor {
    pub fn cholesky(a: MatRef<'_, f64>) -> Result<Self> {
        if a.nrows() == 0 {
            return Ok(DenseFactor::Empty);
        }
        a.llt(Side::Lower)
            .map(DenseFactor::Cholesky)
            .map_err(|e| Error::LinearAlgebra(format!("dense Cholesky failed: {e:?}")))
    }

    /// LU with partial pivoting. Fails if a pivot is exactly zero or non-finite.
    pub fn lu(a: MatRef<'_, f64>) -> Result<Self> {
        if a.nrows() == 0 {
            return Ok(DenseFactor::Empty);
        }
        let lu = a.partial_piv_lu();
        let u = lu.U();
        for i in 0..u.nrows() {
            let d = u[(i, i)];
            if d == 0.0 || !d.is_finite() {
                return Err(Error::LinearAlgebra(format!("zero pivot at {i}")));
            }
        }
        Ok(DenseFactor::Lu(lu))
    }

    pub fn solve_mat_in_place(&self, rhs: MatMut<'_, f64>) {
        match self {
            DenseFactor::Empty => {}
            DenseFactor::Cholesky(f) => f.solve_in_place_with_conj(Conj::No, rhs),
            DenseFactor::Lu(f) => f.solve_in_place_with_conj(Conj::No, rhs),
        }
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        if n == 0 {
            return;
        }
        self.solve_mat_in_place(MatMut::from_column_major_slice_mut(rhs, n, 1));
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Dense Schur complement `K_bb - K_bi K_ii⁻¹ K_ib` with `K_ii` factored sparsely.
pub fn dense_schur(k_ii: &SparseFactor, k_ib: &SpMat, k_bb: &SpMat) -> Mat<f64> {
    let mut s = to_dense(k_bb);
    if k_ib.nrows() == 0 || k_ib.ncols() == 0 {
        return s;
    }
    let mut x = to_dense(k_ib);
    k_ii.solve_mat_in_place(x.as_mut());
    // s -= K_ibᵀ x
    let r = k_ib.as_ref();
    let col_ptr = r.col_ptr();
    let row_idx = r.row_idx();
    let val = r.val();
    for a in 0..k_ib.ncols() {
        for k in col_ptr[a]..col_ptr[a + 1] {
            let i = row_idx[k];
            let v = val[k];
            for b in 0..x.ncols() {
                s[(a, b)] -= v * x[(i, b)];
            }
        }
    }
    s
}

/// Symmetrizes in place: `S ← (S + Sᵀ)/2`. Returns the largest asymmetry removed.
pub fn symmetrize(s: &mut Mat<f64>) -> f64 {
    let n = s.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (s[(i, j)], s[(j, i)]);
            worst = worst.max((a - b).abs());
            let m = 0.5 * (a + b);
            s[(i, j)] = m;
            s[(j, i)] = m;
        }
    }
    worst
}

pub fn dense_matvec(m: MatRef<'_, f64>, x: &[f64], y: &mut [f64]) {
    for j in 0..m.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for i in 0..m.nrows() {
            y[i] += m[(i, j)] * xj;
        }
    }
}

pub fn dense_matvec_t(m: MatRef<'_, f64>, x: &[f64], y: &mut [f64]) {
    for j in 0..m.ncols() {
        let mut s = 0.0;
        for i in 0..m.nrows() {
            s += m[(i, j)] * x[i];
        }
        y[j] += s;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Builds the dense matrix of a linear map by applying it to unit vectors.
pub fn probe(dim: usize, mut apply: impl FnMut(&[f64], &mut [f64])) -> Mat<f64> {
    let mut m = Mat::<f64>::zeros(dim, dim);
    let mut e = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    for j in 0..dim {
        e[j] = 1.0;
        y.iter_mut().for_each(|v| *v = 0.0);
        apply(&e, &mut y);
        for i in 0..dim {
            m[(i, j)] = y[i];
        }
        e[j] = 0.0;
    }
    m
}

/// Ascending eigenvalues of a symmetric matrix (the lower triangle is read).
pub fn sym_eigenvalues(m: MatRef<'_, f64>) -> Result<Vec<f64>> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut ev = m
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::LinearAlgebra(format!("eigensolver failed: {e:?}")))?;
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Eigenvalues of `P K` for symmetric `P` and symmetric positive definite `K`,
/// computed as the spectrum of `Lᵀ P L` with `K = L Lᵀ`.
pub fn preconditioned_spectrum(p: MatRef<'_, f64>, k: MatRef<'_, f64>) -> Result<Vec<f64>> {
    let n = k.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let llt = k
        .llt(Side::Lower)
        .map_err(|e| Error::SpdViolation(format!("Cholesky of the operator failed: {e:?}")))?;
    let l = llt.L().to_owned();
    let pl = p * &l;
    let mut t = l.transpose() * &pl;
    symmetrize(&mut t);
    sym_eigenvalues(t.as_ref())
}
