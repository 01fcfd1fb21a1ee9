//! The weight operator `W ~= M_R^{-1}` behind the weighted penalty.
//!
//! Built by Cholesky factorization of the Gram matrix under a minimum-degree
//! ordering: exact when the symbolic factor stays below the fill threshold,
//! zero-fill incomplete otherwise. A relative diagonal perturbation keeps the
//! factorization positive definite; on pivot breakdown the perturbation is
//! escalated by factors of ten before giving up, at which point callers fall
//! back to the identity weight.

use crate::error::{Error, Result};
use crate::linalg::{GramMatrix, GramPattern, LinearMap, RowMat};

/// Thresholds steering weight construction.
#[derive(Clone, Copy, Debug)]
pub struct PrecondConfig {
    /// Max predicted Cholesky-factor nonzeros before switching from exact to
    /// zero-fill incomplete factorization.
    pub fill_threshold: u64,
    /// Max predicted Gram nonzeros before refusing to form the Gram matrix.
    pub gram_threshold: u64,
    /// Diagonal perturbation relative to the largest diagonal entry.
    pub ridge_rel: f64,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        PrecondConfig {
            fill_threshold: 100_000_000,   // 1e8
            gram_threshold: 1_000_000_000, // 1e9
            ridge_rel: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightPolicy {
    /// Exact Cholesky when the fill estimate allows it, incomplete otherwise.
    Auto,
    ExactCholesky,
    IncompleteCholesky,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Identity,
    ExactCholesky,
    IncompleteCholesky,
    /// Dense symmetric weight applied directly (fixed-weight runs).
    Dense,
}

/// Predicted nonzero counts from symbolic analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FillEstimate {
    pub predicted_factor_nnz: u64,
    pub predicted_gram_nnz: u64,
}

/// Sparse lower-triangular Cholesky factor with its permutation.
#[derive(Clone, Debug)]
struct CholFactor {
    m: usize,
    /// perm[k] = original index placed at position k.
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    vals: Vec<f64>,
}

/// The positive definite weight operator.
#[derive(Clone, Debug)]
pub struct WeightOperator {
    mode: WeightMode,
    m: usize,
    factor: Option<CholFactor>,
    dense: Option<nalgebra::DMatrix<f64>>,
    /// Diagonal perturbation actually used (absolute).
    pub perturbation: f64,
    /// Fingerprint of the factor the Gram matrix was assembled from.
    pub built_from: u64,
    /// Smallest Cholesky pivot observed during the build.
    pub min_pivot: f64,
}

impl WeightOperator {
    pub fn identity(m: usize) -> Self {
        WeightOperator {
            mode: WeightMode::Identity,
            m,
            factor: None,
            dense: None,
            perturbation: 0.0,
            built_from: 0,
            min_pivot: 1.0,
        }
    }

    /// Wrap a fixed dense symmetric positive definite weight.
    pub fn dense(w: nalgebra::DMatrix<f64>) -> Self {
        let m = w.nrows();
        WeightOperator {
            mode: WeightMode::Dense,
            m,
            factor: None,
            dense: Some(w),
            perturbation: 0.0,
            built_from: 0,
            min_pivot: 1.0,
        }
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// W v. Factor modes apply `P^T L^{-T} L^{-1} P v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.m, "weight apply dimension");
        match self.mode {
            WeightMode::Identity => v.to_vec(),
            WeightMode::Dense => {
                let w = self.dense.as_ref().unwrap();
                let x = nalgebra::DVector::from_column_slice(v);
                (w * x).iter().cloned().collect()
            }
            WeightMode::ExactCholesky | WeightMode::IncompleteCholesky => {
                let f = self.factor.as_ref().unwrap();
                let mut y: Vec<f64> = f.perm.iter().map(|&p| v[p]).collect();
                forward_solve(f, &mut y);
                backward_solve(f, &mut y);
                let mut out = vec![0.0; self.m];
                for (k, &p) in f.perm.iter().enumerate() {
                    out[p] = y[k];
                }
                out
            }
        }
    }

    /// <v, W v>, the weighted squared norm.
    pub fn weighted_norm_sq(&self, v: &[f64]) -> f64 {
        let wv = self.apply(v);
        v.iter().zip(&wv).map(|(a, b)| a * b).sum()
    }

    /// Nonzeros of the stored factor (diagonal included).
    pub fn factor_nnz(&self) -> Option<usize> {
        self.factor.as_ref().map(|f| f.vals.len())
    }
}

fn forward_solve(f: &CholFactor, y: &mut [f64]) {
    for j in 0..f.m {
        let start = f.col_ptr[j];
        let end = f.col_ptr[j + 1];
        let yj = y[j] / f.vals[start];
        y[j] = yj;
        for k in start + 1..end {
            y[f.row_idx[k] as usize] -= f.vals[k] * yj;
        }
    }
}

fn backward_solve(f: &CholFactor, y: &mut [f64]) {
    for j in (0..f.m).rev() {
        let start = f.col_ptr[j];
        let end = f.col_ptr[j + 1];
        let mut s = y[j];
        for k in start + 1..end {
            s -= f.vals[k] * y[f.row_idx[k] as usize];
        }
        y[j] = s / f.vals[start];
    }
}

/// Minimum-degree ordering of a symmetric pattern, eliminating the node of
/// smallest degree first with ties broken by lowest index.
pub fn min_degree_order(pattern: &GramPattern) -> Vec<usize> {
    let m = pattern.m;
    let mut adj: Vec<std::collections::BTreeSet<u32>> = vec![Default::default(); m];
    for &(i, j) in &pattern.pairs {
        if i != j {
            adj[i as usize].insert(j);
            adj[j as usize].insert(i);
        }
    }
    let mut alive: Vec<bool> = vec![true; m];
    let mut order = Vec::with_capacity(m);
    for _ in 0..m {
        let v = (0..m)
            .filter(|&i| alive[i])
            .min_by_key(|&i| (adj[i].len(), i))
            .unwrap();
        order.push(v);
        alive[v] = false;
        let neighbors: Vec<u32> = adj[v].iter().cloned().collect();
        for &u in &neighbors {
            adj[u as usize].remove(&(v as u32));
        }
        // eliminate: neighbors become a clique
        for (a, &u) in neighbors.iter().enumerate() {
            for &w in &neighbors[a + 1..] {
                adj[u as usize].insert(w);
                adj[w as usize].insert(u);
            }
        }
        adj[v].clear();
    }
    order
}

/// Column patterns of the Cholesky factor of the permuted matrix (symbolic
/// factorization; exact for the given pattern). Row indices are in permuted
/// coordinates and sorted, diagonal first.
fn symbolic_factor(pattern: &GramPattern, perm: &[usize]) -> Vec<Vec<u32>> {
    let m = pattern.m;
    let mut inv = vec![0usize; m];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    // adjacency below the diagonal in permuted coordinates
    let mut below: Vec<Vec<u32>> = vec![Vec::new(); m];
    for &(i, j) in &pattern.pairs {
        if i == j {
            continue;
        }
        let (a, b) = (inv[i as usize], inv[j as usize]);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        below[lo].push(hi as u32);
    }
    for col in below.iter_mut() {
        col.sort_unstable();
        col.dedup();
    }
    let mut cols: Vec<Vec<u32>> = vec![Vec::new(); m];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); m];
    for j in 0..m {
        // union of the original entries below j and the patterns of children
        let mut pat = below[j].clone();
        for &c in &children[j] {
            for &r in &cols[c] {
                if (r as usize) > j {
                    pat.push(r);
                }
            }
        }
        pat.sort_unstable();
        pat.dedup();
        if let Some(&parent) = pat.first() {
            children[parent as usize].push(j);
        }
        cols[j] = pat;
    }
    cols
}

/// Factor nonzeros (diagonal included) predicted by symbolic elimination
/// under the given ordering.
pub fn symbolic_fill_count(pattern: &GramPattern, perm: &[usize]) -> u64 {
    let cols = symbolic_factor(pattern, perm);
    pattern.m as u64 + cols.iter().map(|c| c.len() as u64).sum::<u64>()
}

/// Symbolic elimination count after minimum-degree ordering, plus the
/// predicted Gram nonzeros.
pub fn estimate_fill(pattern: &GramPattern) -> FillEstimate {
    let perm = min_degree_order(pattern);
    FillEstimate {
        predicted_factor_nnz: symbolic_fill_count(pattern, &perm),
        predicted_gram_nnz: pattern.nnz_full(),
    }
}

/// Whether the Gram matrix is cheap enough to form at all. A cheap upper
/// bound on the pattern size is checked before the exact pattern is built,
/// so pathologically dense maps never trigger quadratic work here.
pub fn should_form_gram(map: &LinearMap, cfg: &PrecondConfig) -> bool {
    let mut bucket_sizes = vec![0u64; map.dim()];
    for rows in map.row_sets() {
        for &r in rows {
            bucket_sizes[r as usize] += 1;
        }
    }
    let upper: u64 = map
        .len() as u64
        + bucket_sizes.iter().map(|&s| s.saturating_mul(s)).sum::<u64>();
    if upper > cfg.gram_threshold {
        return false;
    }
    map.gram_pattern().nnz_full() <= cfg.gram_threshold
}

pub fn gram_within_threshold(predicted_nnz: u64, cfg: &PrecondConfig) -> bool {
    predicted_nnz <= cfg.gram_threshold
}

/// Build the weight operator from an assembled Gram matrix.
pub fn build_weight(
    gram: &GramMatrix,
    policy: WeightPolicy,
    cfg: &PrecondConfig,
    built_from: u64,
) -> Result<WeightOperator> {
    let m = gram.data.dim();
    if policy == WeightPolicy::Identity {
        return Ok(WeightOperator::identity(m));
    }
    let perm = min_degree_order(&gram.pattern);
    let use_exact = match policy {
        WeightPolicy::ExactCholesky => true,
        WeightPolicy::IncompleteCholesky => false,
        WeightPolicy::Auto => {
            symbolic_fill_count(&gram.pattern, &perm) <= cfg.fill_threshold
        }
        WeightPolicy::Identity => unreachable!(),
    };
    let cols = if use_exact {
        symbolic_factor(&gram.pattern, &perm)
    } else {
        // zero-fill: the factor pattern is the permuted matrix's own lower triangle
        matrix_lower_pattern(&gram.pattern, &perm)
    };

    let max_diag = gram.data.max_diag();
    let mut ridge = cfg.ridge_rel * max_diag;
    let ridge_cap = 1e-2 * max_diag;
    loop {
        match numeric_cholesky(gram, &perm, &cols, ridge) {
            Ok((factor, min_pivot)) => {
                return Ok(WeightOperator {
                    mode: if use_exact {
                        WeightMode::ExactCholesky
                    } else {
                        WeightMode::IncompleteCholesky
                    },
                    m,
                    factor: Some(factor),
                    dense: None,
                    perturbation: ridge,
                    built_from,
                    min_pivot,
                });
            }
            Err((index, pivot)) => {
                let next = if ridge == 0.0 { 1e-12 } else { ridge * 10.0 };
                if next > ridge_cap || max_diag <= 0.0 {
                    return Err(Error::DegenerateGram {
                        index,
                        pivot,
                        perturbation: ridge,
                    });
                }
                ridge = next;
            }
        }
    }
}

/// Lower-triangle column patterns of the permuted matrix (no fill).
fn matrix_lower_pattern(pattern: &GramPattern, perm: &[usize]) -> Vec<Vec<u32>> {
    let m = pattern.m;
    let mut inv = vec![0usize; m];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    let mut cols: Vec<Vec<u32>> = vec![Vec::new(); m];
    for &(i, j) in &pattern.pairs {
        if i == j {
            continue;
        }
        let (a, b) = (inv[i as usize], inv[j as usize]);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        cols[lo].push(hi as u32);
    }
    for c in cols.iter_mut() {
        c.sort_unstable();
        c.dedup();
    }
    cols
}

/// Left-looking column Cholesky restricted to the given below-diagonal
/// pattern. Update terms landing outside the pattern are dropped, which is a
/// no-op when the pattern came from symbolic factorization (exact mode).
/// Returns Err((column, pivot)) on a nonpositive pivot.
#[allow(clippy::type_complexity)]
fn numeric_cholesky(
    gram: &GramMatrix,
    perm: &[usize],
    cols_below: &[Vec<u32>],
    ridge: f64,
) -> std::result::Result<(CholFactor, f64), (usize, f64)> {
    let m = gram.data.dim();
    let mut inv = vec![0usize; m];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    // permuted lower-triangle numeric columns of the input matrix
    let mut a_cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); m];
    let mut a_diag = vec![0.0f64; m];
    for &(i, j, v) in gram.data.entries() {
        let (pi, pj) = (inv[i as usize], inv[j as usize]);
        if pi == pj {
            a_diag[pi] = v;
        } else {
            let (lo, hi) = if pi < pj { (pi, pj) } else { (pj, pi) };
            a_cols[lo].push((hi as u32, v));
        }
    }

    let nnz: usize = m + cols_below.iter().map(|c| c.len()).sum::<usize>();
    let mut col_ptr = Vec::with_capacity(m + 1);
    let mut row_idx: Vec<u32> = Vec::with_capacity(nnz);
    let mut vals: Vec<f64> = vec![0.0; nnz];
    col_ptr.push(0usize);
    for (j, below) in cols_below.iter().enumerate() {
        row_idx.push(j as u32);
        row_idx.extend_from_slice(below);
        col_ptr.push(row_idx.len());
    }

    // position of a row within a column, via a marker/slot scatter array
    let mut slot = vec![usize::MAX; m];
    // linked lists: for each row j, the columns whose next uneliminated
    // entry is in row j
    let mut next_entry: Vec<usize> = vec![0; m];
    let mut col_list: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut work = vec![0.0f64; m];
    let mut min_pivot = f64::INFINITY;

    for j in 0..m {
        let (start, end) = (col_ptr[j], col_ptr[j + 1]);
        // scatter pattern of column j
        for (pos, k) in (start..end).enumerate() {
            slot[row_idx[k] as usize] = start + pos;
            work[row_idx[k] as usize] = 0.0;
        }
        work[j] = a_diag[j] + ridge;
        for &(r, v) in &a_cols[j] {
            if slot[r as usize] != usize::MAX {
                work[r as usize] = v;
            }
        }
        // pull in updates from earlier columns with a nonzero in row j
        let affecting = std::mem::take(&mut col_list[j]);
        for k in affecting {
            let ks = col_ptr[k];
            let ke = col_ptr[k + 1];
            let pos = next_entry[k];
            let ljk = vals[pos];
            for t in pos..ke {
                let r = row_idx[t] as usize;
                if slot[r] != usize::MAX {
                    work[r] -= vals[t] * ljk;
                }
            }
            // advance this column's cursor to its next row
            if pos + 1 < ke {
                next_entry[k] = pos + 1;
                col_list[row_idx[pos + 1] as usize].push(k);
            }
            let _ = ks;
        }
        let pivot = work[j];
        if pivot <= 0.0 || !pivot.is_finite() {
            // clean up markers before bailing
            for k in start..end {
                slot[row_idx[k] as usize] = usize::MAX;
            }
            return Err((perm[j], pivot));
        }
        min_pivot = min_pivot.min(pivot);
        let d = pivot.sqrt();
        vals[start] = d;
        for k in start + 1..end {
            vals[k] = work[row_idx[k] as usize] / d;
        }
        if start + 1 < end {
            next_entry[j] = start + 1;
            col_list[row_idx[start + 1] as usize].push(j);
        }
        for k in start..end {
            slot[row_idx[k] as usize] = usize::MAX;
        }
    }

    Ok((
        CholFactor {
            m,
            perm: perm.to_vec(),
            col_ptr,
            row_idx,
            vals,
        },
        min_pivot,
    ))
}

/// Cheap content fingerprint for cache bookkeeping (FNV-1a over raw bits).
pub fn fingerprint_factor(r: &RowMat) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &v in r.as_slice() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
