//! Sparse symmetric matrices, constraint linear maps and the constraint Gram
//! matrix, with sparsity-aware assembly.
//!
//! The constraint map `A` sends a symmetric matrix `X` to the vector
//! `[<A_1,X>, ..., <A_m,X>]`. Throughout the crate `X` is carried in factored
//! form `X = R R^T`, so every operation here works on the factor `R` directly
//! and never materializes `X`. The Gram matrix `M_R` with entries
//! `<A_i R, A_j R>` is the object the preconditioner is built from; entry
//! `(i, j)` is identically zero whenever `A_i` and `A_j` share no nonzero
//! rows, which is what makes sparse assembly worthwhile.

mod eig;

pub use eig::{dense_sym_eig, min_eig_estimate, neg_eigs, EigMode, MinEig, NegEig};

/// Default crossover dimension between dense and Lanczos eigensolves.
pub fn eig_dense_threshold_default() -> usize {
    eig::DEFAULT_DENSE_EIG_THRESHOLD
}

use crate::error::{Error, Result};

/// Dense row-major matrix. Factors `R` are tall and thin and every kernel in
/// the solver walks them row-wise, so rows are kept contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RowMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let nr = rows.len();
        let nc = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == nc), "ragged rows");
        let mut data = Vec::with_capacity(nr * nc);
        for r in &rows {
            data.extend_from_slice(r);
        }
        RowMat {
            rows: nr,
            cols: nc,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = RowMat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// row(dst) += s * row(src) of `other`.
    pub fn axpy_row(&mut self, dst: usize, s: f64, other: &RowMat, src: usize) {
        debug_assert_eq!(self.cols, other.cols);
        let d = &mut self.data[dst * self.cols..(dst + 1) * self.cols];
        let o = &other.data[src * other.cols..(src + 1) * other.cols];
        for (a, b) in d.iter_mut().zip(o) {
            *a += s * b;
        }
    }

    /// self += s * other (whole matrix).
    pub fn axpy(&mut self, s: f64, other: &RowMat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &RowMat) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns a new matrix with `extra` columns appended (filled by `f(row, k)`).
    pub fn with_appended_cols(&self, extra: usize, mut f: impl FnMut(usize, usize) -> f64) -> RowMat {
        let nc = self.cols + extra;
        let mut out = RowMat::zeros(self.rows, nc);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            for k in 0..extra {
                out.data[i * nc + self.cols + k] = f(i, k);
            }
        }
        out
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sparse symmetric matrix stored as an upper-triangle coordinate list.
///
/// Entries are kept sorted by `(row, col)` with `row <= col` and no
/// duplicates; the represented matrix is exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SymSparse {
    dim: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SymSparse {
    /// Build from coordinate triplets. Lower-triangle coordinates are
    /// reflected; duplicate coordinates are rejected.
    pub fn new(dim: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut entries: Vec<(u32, u32, f64)> = Vec::new();
        for (i, j, v) in triplets {
            if i >= dim || j >= dim {
                return Err(Error::InvalidInput(format!(
                    "entry ({i},{j}) out of range for dim {dim}"
                )));
            }
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            entries.push((r as u32, c as u32, v));
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::InvalidInput(format!(
                    "duplicate entry at ({},{})",
                    w[0].0, w[0].1
                )));
            }
        }
        Ok(SymSparse { dim, entries })
    }

    /// Like `new` but sums duplicate coordinates instead of rejecting them.
    pub fn accumulate(dim: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut entries: Vec<(u32, u32, f64)> = Vec::new();
        for (i, j, v) in triplets {
            if i >= dim || j >= dim {
                return Err(Error::InvalidInput(format!(
                    "entry ({i},{j}) out of range for dim {dim}"
                )));
            }
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            entries.push((r as u32, c as u32, v));
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(u32, u32, f64)> = Vec::with_capacity(entries.len());
        for e in entries {
            match merged.last_mut() {
                Some(last) if last.0 == e.0 && last.1 == e.1 => last.2 += e.2,
                _ => merged.push(e),
            }
        }
        merged.retain(|&(_, _, v)| v != 0.0);
        Ok(SymSparse {
            dim,
            entries: merged,
        })
    }

    pub fn zero(dim: usize) -> Self {
        SymSparse {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        SymSparse {
            dim,
            entries: (0..dim as u32).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn from_dense(a: &nalgebra::DMatrix<f64>, drop_tol: f64) -> Self {
        let n = a.nrows();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                let v = 0.5 * (a[(i, j)] + a[(j, i)]);
                if v.abs() > drop_tol {
                    entries.push((i as u32, j as u32, v));
                }
            }
        }
        SymSparse { dim: n, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Upper-triangle entries, sorted by (row, col).
    pub fn entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut a = nalgebra::DMatrix::zeros(self.dim, self.dim);
        for &(i, j, v) in &self.entries {
            a[(i as usize, j as usize)] = v;
            a[(j as usize, i as usize)] = v;
        }
        a
    }

    /// Sorted list of rows carrying at least one nonzero.
    pub fn row_set(&self) -> Vec<u32> {
        let mut rows: Vec<u32> = Vec::with_capacity(2 * self.entries.len());
        for &(i, j, _) in &self.entries {
            rows.push(i);
            rows.push(j);
        }
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    pub fn scale(&mut self, s: f64) {
        for e in &mut self.entries {
            e.2 *= s;
        }
    }

    /// self + s * other.
    pub fn add_scaled(&self, s: f64, other: &SymSparse) -> SymSparse {
        debug_assert_eq!(self.dim, other.dim);
        let triplets = self
            .entries
            .iter()
            .map(|&(i, j, v)| (i as usize, j as usize, v))
            .chain(
                other
                    .entries
                    .iter()
                    .map(|&(i, j, v)| (i as usize, j as usize, s * v)),
            );
        SymSparse::accumulate(self.dim, triplets).expect("dims already validated")
    }

    /// <A, B> Frobenius inner product of two symmetric sparse matrices.
    pub fn inner(&self, other: &SymSparse) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        // merge-walk the two sorted entry lists
        let mut s = 0.0;
        let (mut p, mut q) = (0, 0);
        while p < self.entries.len() && q < other.entries.len() {
            let a = self.entries[p];
            let b = other.entries[q];
            match (a.0, a.1).cmp(&(b.0, b.1)) {
                std::cmp::Ordering::Less => p += 1,
                std::cmp::Ordering::Greater => q += 1,
                std::cmp::Ordering::Equal => {
                    let w = if a.0 == a.1 { 1.0 } else { 2.0 };
                    s += w * a.2 * b.2;
                    p += 1;
                    q += 1;
                }
            }
        }
        s
    }

    pub fn frob_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// y = A x for a dense vector x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        y.fill(0.0);
        for &(i, j, v) in &self.entries {
            let (i, j) = (i as usize, j as usize);
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
    }

    /// A R for a row-major factor R (n x r).
    pub fn mul_factor(&self, r: &RowMat) -> RowMat {
        debug_assert_eq!(r.nrows(), self.dim);
        let mut u = RowMat::zeros(self.dim, r.ncols());
        for &(i, j, v) in &self.entries {
            let (i, j) = (i as usize, j as usize);
            u.axpy_row(i, v, r, j);
            if i != j {
                u.axpy_row(j, v, r, i);
            }
        }
        u
    }

    /// <A, R R^T> without forming R R^T.
    pub fn quad_form(&self, r: &RowMat) -> f64 {
        debug_assert_eq!(r.nrows(), self.dim);
        let mut s = 0.0;
        for &(i, j, v) in &self.entries {
            let w = dot_slices(r.row(i as usize), r.row(j as usize));
            s += if i == j { v * w } else { 2.0 * v * w };
        }
        s
    }

    /// <A, x x-diag>: value of the map on a vector block stored as a
    /// diagonal coefficient matrix, i.e. sum of A_pp * x_p.
    pub fn diag_dot(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for &(i, j, v) in &self.entries {
            if i == j {
                s += v * x[i as usize];
            }
        }
        s
    }

    /// g += s * diag(A), the adjoint action on a vector block.
    pub fn diag_axpy(&self, s: f64, g: &mut [f64]) {
        for &(i, j, v) in &self.entries {
            if i == j {
                g[i as usize] += s * v;
            }
        }
    }

    /// Diagonal of the matrix as a dense vector.
    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for &(i, j, v) in &self.entries {
            if i == j {
                d[i as usize] = v;
            }
        }
        d
    }

    pub fn max_diag(&self) -> f64 {
        self.entries
            .iter()
            .filter(|&&(i, j, _)| i == j)
            .map(|&(_, _, v)| v)
            .fold(0.0_f64, f64::max)
    }
}

/// `A_i R` for every constraint matrix, stored on the nonzero rows only.
///
/// Recomputed whenever `R` changes; Gram assembly reads pairs of these.
pub struct FactorProducts {
    pub per_mat: Vec<SparseRows>,
    pub ncols: usize,
}

/// A tall matrix restricted to a sorted subset of its rows.
pub struct SparseRows {
    pub rows: Vec<u32>,
    pub vals: RowMat,
}

impl SparseRows {
    /// Inner product with another row-restricted matrix (merge on row index).
    pub fn dot(&self, other: &SparseRows) -> f64 {
        let mut s = 0.0;
        let (mut p, mut q) = (0, 0);
        while p < self.rows.len() && q < other.rows.len() {
            match self.rows[p].cmp(&other.rows[q]) {
                std::cmp::Ordering::Less => p += 1,
                std::cmp::Ordering::Greater => q += 1,
                std::cmp::Ordering::Equal => {
                    s += dot_slices(self.vals.row(p), other.vals.row(q));
                    p += 1;
                    q += 1;
                }
            }
        }
        s
    }
}

/// Symbolic nonzero pattern of the Gram matrix: upper-triangle pairs `(i, j)`
/// with `i <= j`, present iff the nonzero-row sets of `A_i` and `A_j`
/// intersect. Diagonal pairs are always present.
#[derive(Clone, Debug, PartialEq)]
pub struct GramPattern {
    pub m: usize,
    pub pairs: Vec<(u32, u32)>,
}

impl GramPattern {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let key = if i <= j {
            (i as u32, j as u32)
        } else {
            (j as u32, i as u32)
        };
        self.pairs.binary_search(&key).is_ok()
    }

    /// Nonzeros of the full (symmetric) matrix the pattern describes.
    pub fn nnz_full(&self) -> u64 {
        let off = self.pairs.iter().filter(|&&(i, j)| i != j).count() as u64;
        let diag = self.pairs.len() as u64 - off;
        2 * off + diag
    }
}

/// The constraint Gram matrix `M_R`, entries `<A_i R, A_j R>`.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub data: SymSparse,
    pub pattern: GramPattern,
}

/// A linear map `X -> [<A_1,X>, ..., <A_m,X>]` given by `m` symmetric
/// coefficient matrices of shared dimension, with cached nonzero-row sets.
///
/// The same type carries the map on a vector block, in which case every
/// coefficient matrix is diagonal and the block variable is the diagonal.
#[derive(Clone, Debug)]
pub struct LinearMap {
    dim: usize,
    mats: Vec<SymSparse>,
    row_sets: Vec<Vec<u32>>,
}

impl LinearMap {
    pub fn new(dim: usize, mats: Vec<SymSparse>) -> Result<Self> {
        for (k, a) in mats.iter().enumerate() {
            if a.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "LinearMap coefficient matrix",
                    expected: dim,
                    got: a.dim(),
                });
            }
            let _ = k;
        }
        let row_sets = mats.iter().map(|a| a.row_set()).collect();
        Ok(LinearMap {
            dim,
            mats,
            row_sets,
        })
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mats(&self) -> &[SymSparse] {
        &self.mats
    }

    pub fn row_sets(&self) -> &[Vec<u32>] {
        &self.row_sets
    }

    /// `A(R R^T)`: component `i` is `<A_i, R R^T>`, computed as `<A_i R, R>`
    /// without forming `R R^T`.
    pub fn apply_factor(&self, r: &RowMat) -> Result<Vec<f64>> {
        if r.nrows() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "apply_factor",
                expected: self.dim,
                got: r.nrows(),
            });
        }
        Ok(self.mats.iter().map(|a| a.quad_form(r)).collect())
    }

    /// `A*(lam) R = (sum_i lam_i A_i) R`, exploiting the sparsity of each `A_i`.
    pub fn adjoint_times_factor(&self, lam: &[f64], r: &RowMat) -> Result<RowMat> {
        if lam.len() != self.mats.len() {
            return Err(Error::DimensionMismatch {
                context: "adjoint_times_factor multiplier",
                expected: self.mats.len(),
                got: lam.len(),
            });
        }
        if r.nrows() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "adjoint_times_factor factor",
                expected: self.dim,
                got: r.nrows(),
            });
        }
        let mut out = RowMat::zeros(self.dim, r.ncols());
        for (a, &l) in self.mats.iter().zip(lam) {
            if l == 0.0 {
                continue;
            }
            for &(i, j, v) in a.entries() {
                let (i, j) = (i as usize, j as usize);
                out.axpy_row(i, l * v, r, j);
                if i != j {
                    out.axpy_row(j, l * v, r, i);
                }
            }
        }
        Ok(out)
    }

    /// `A*(lam)` assembled as a sparse symmetric matrix.
    pub fn adjoint_matrix(&self, lam: &[f64]) -> Result<SymSparse> {
        if lam.len() != self.mats.len() {
            return Err(Error::DimensionMismatch {
                context: "adjoint_matrix",
                expected: self.mats.len(),
                got: lam.len(),
            });
        }
        let triplets = self.mats.iter().zip(lam).flat_map(|(a, &l)| {
            a.entries()
                .iter()
                .map(move |&(i, j, v)| (i as usize, j as usize, l * v))
        });
        SymSparse::accumulate(self.dim, triplets)
    }

    /// Map value on a vector block (diagonal coefficient matrices).
    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "apply_vec",
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.mats.iter().map(|a| a.diag_dot(x)).collect())
    }

    /// Adjoint on a vector block: `g = sum_i lam_i diag(A_i)`.
    pub fn adjoint_vec(&self, lam: &[f64]) -> Result<Vec<f64>> {
        if lam.len() != self.mats.len() {
            return Err(Error::DimensionMismatch {
                context: "adjoint_vec",
                expected: self.mats.len(),
                got: lam.len(),
            });
        }
        let mut g = vec![0.0; self.dim];
        for (a, &l) in self.mats.iter().zip(lam) {
            if l != 0.0 {
                a.diag_axpy(l, &mut g);
            }
        }
        Ok(g)
    }

    /// Cache `U_i = A_i R` on the nonzero rows of each `A_i`.
    pub fn factor_products(&self, r: &RowMat) -> Result<FactorProducts> {
        if r.nrows() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "factor_products",
                expected: self.dim,
                got: r.nrows(),
            });
        }
        let nc = r.ncols();
        let per_mat = self
            .mats
            .iter()
            .zip(&self.row_sets)
            .map(|(a, rows)| {
                let mut vals = RowMat::zeros(rows.len(), nc);
                // local index of each global row
                let pos = |g: u32| rows.binary_search(&g).expect("row in row set");
                for &(i, j, v) in a.entries() {
                    let li = pos(i);
                    vals.axpy_row(li, v, r, j as usize);
                    if i != j {
                        let lj = pos(j);
                        vals.axpy_row(lj, v, r, i as usize);
                    }
                }
                SparseRows {
                    rows: rows.clone(),
                    vals,
                }
            })
            .collect();
        Ok(FactorProducts { per_mat, ncols: nc })
    }

    /// Symbolic Gram pattern from pairwise row-set intersection, built by
    /// bucketing constraints on their nonzero rows.
    pub fn gram_pattern(&self) -> GramPattern {
        let m = self.mats.len();
        let mut touching: Vec<Vec<u32>> = vec![Vec::new(); self.dim];
        for (i, rows) in self.row_sets.iter().enumerate() {
            for &r in rows {
                touching[r as usize].push(i as u32);
            }
        }
        let mut pairs: Vec<(u32, u32)> = (0..m as u32).map(|i| (i, i)).collect();
        for bucket in &touching {
            for (a, &i) in bucket.iter().enumerate() {
                for &j in &bucket[a + 1..] {
                    pairs.push((i, j));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        GramPattern { m, pairs }
    }

    /// Assemble `M_R` over a precomputed pattern and factor-product cache.
    ///
    /// `nnz_threshold` mirrors the no-form guard: assembly refuses to start
    /// when the pattern predicts more nonzeros than the threshold.
    pub fn gram_matrix_with(
        &self,
        pattern: &GramPattern,
        products: &FactorProducts,
        nnz_threshold: u64,
    ) -> Result<GramMatrix> {
        if pattern.nnz_full() > nnz_threshold {
            return Err(Error::RefuseToForm {
                predicted: pattern.nnz_full(),
                threshold: nnz_threshold,
            });
        }
        let triplets: Vec<(usize, usize, f64)> = pattern
            .pairs
            .iter()
            .map(|&(i, j)| {
                let v = products.per_mat[i as usize].dot(&products.per_mat[j as usize]);
                (i as usize, j as usize, v)
            })
            .collect();
        let data = SymSparse::new(pattern.m, triplets)?;
        Ok(GramMatrix {
            data,
            pattern: pattern.clone(),
        })
    }

    /// Convenience wrapper: pattern, products and assembly in one call.
    pub fn gram_matrix(&self, r: &RowMat, nnz_threshold: u64) -> Result<GramMatrix> {
        let pattern = self.gram_pattern();
        let products = self.factor_products(r)?;
        self.gram_matrix_with(&pattern, &products, nnz_threshold)
    }
}

pub fn vec_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    dot_slices(a, b)
}
