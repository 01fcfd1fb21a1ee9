//! Smallest-eigenpair estimation for sparse symmetric matrices.
//!
//! Dual feasibility checks need the negative part of the spectrum of the
//! dual slack matrix. Below a configurable dimension the spectrum is taken
//! from a dense symmetric eigensolve; above it a Lanczos iteration with full
//! reorthogonalization and a deterministic seeded start vector estimates the
//! smallest eigenpairs, with deflation for more than one.

use super::{vec_dot, vec_norm, SymSparse};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_DENSE_EIG_THRESHOLD: usize = 400;
const LANCZOS_TOL: f64 = 1e-8;
const LANCZOS_MAX_MATVECS: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigMode {
    Exact,
    Iterative,
}

impl EigMode {
    /// Dense below the threshold, Lanczos above.
    pub fn auto(n: usize, dense_threshold: usize) -> Self {
        if n <= dense_threshold {
            EigMode::Exact
        } else {
            EigMode::Iterative
        }
    }
}

/// Smallest eigenpair estimate. `converged` is false when the iterative
/// path ran out of matrix-vector products; the value is then best-effort.
#[derive(Clone, Debug)]
pub struct MinEig {
    pub value: f64,
    pub vector: Vec<f64>,
    pub converged: bool,
}

/// One negative eigenpair.
#[derive(Clone, Debug)]
pub struct NegEig {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Dense symmetric eigendecomposition, eigenvalues ascending.
pub fn dense_sym_eig(a: &nalgebra::DMatrix<f64>) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
    let n = a.nrows();
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = nalgebra::DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

pub fn min_eig_estimate(s: &SymSparse, mode: EigMode) -> MinEig {
    match mode {
        EigMode::Exact => {
            let (vals, vecs) = dense_sym_eig(&s.to_dense());
            MinEig {
                value: vals[0],
                vector: vecs.column(0).iter().cloned().collect(),
                converged: true,
            }
        }
        EigMode::Iterative => lanczos_min_eig(s, &[], LANCZOS_MAX_MATVECS),
    }
}

/// The eigenpairs with eigenvalue below `-threshold`, most negative first,
/// at most `cap` of them. Returns `(pairs, exhaustive)`; `exhaustive` is
/// false when the iterative path may have missed some.
pub fn neg_eigs(s: &SymSparse, mode: EigMode, threshold: f64, cap: usize) -> (Vec<NegEig>, bool) {
    match mode {
        EigMode::Exact => {
            let (vals, vecs) = dense_sym_eig(&s.to_dense());
            let mut out = Vec::new();
            for (k, &v) in vals.iter().enumerate() {
                if v < -threshold && out.len() < cap {
                    out.push(NegEig {
                        value: v,
                        vector: vecs.column(k).iter().cloned().collect(),
                    });
                }
            }
            let exhaustive = vals.iter().filter(|&&v| v < -threshold).count() <= cap;
            (out, exhaustive)
        }
        EigMode::Iterative => {
            // deflate found eigenvectors and re-run Lanczos
            let mut out: Vec<NegEig> = Vec::new();
            let mut exhaustive = true;
            let mut budget = LANCZOS_MAX_MATVECS;
            loop {
                let deflate: Vec<&[f64]> = out.iter().map(|p| p.vector.as_slice()).collect();
                let est = lanczos_min_eig_deflated(s, &deflate, budget);
                if !est.converged {
                    exhaustive = false;
                    if est.value < -threshold && out.len() < cap {
                        out.push(NegEig {
                            value: est.value,
                            vector: est.vector,
                        });
                    }
                    break;
                }
                if est.value >= -threshold {
                    break;
                }
                out.push(NegEig {
                    value: est.value,
                    vector: est.vector,
                });
                if out.len() >= cap {
                    exhaustive = false;
                    break;
                }
                budget = budget.saturating_sub(50).max(200);
            }
            (out, exhaustive)
        }
    }
}

fn lanczos_min_eig(s: &SymSparse, deflate: &[&[f64]], max_matvecs: usize) -> MinEig {
    lanczos_min_eig_deflated(s, deflate, max_matvecs)
}

/// Lanczos with full reorthogonalization and restarts. `deflate` holds unit
/// vectors whose spectral components are shifted far positive so the next
/// smallest pair is found.
fn lanczos_min_eig_deflated(s: &SymSparse, deflate: &[&[f64]], max_matvecs: usize) -> MinEig {
    let n = s.dim();
    let norm_bound = gershgorin_bound(s).max(1.0);
    let shift = 10.0 * norm_bound;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthogonalize(&mut v0, deflate);
    normalize(&mut v0);

    let basis_cap = n.min(120);
    let mut matvecs = 0;
    let mut best = MinEig {
        value: f64::INFINITY,
        vector: v0.clone(),
        converged: false,
    };

    'restart: loop {
        let mut basis: Vec<Vec<f64>> = vec![v0.clone()];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let mut w = vec![0.0; n];
        loop {
            let v = basis.last().unwrap();
            s.matvec(v, &mut w);
            // deflation: (S + shift * sum u u^T) v
            for u in deflate {
                let c = shift * vec_dot(u, v);
                for (wi, ui) in w.iter_mut().zip(u.iter()) {
                    *wi += c * ui;
                }
            }
            matvecs += 1;
            let alpha = vec_dot(&w, v);
            alphas.push(alpha);
            // full reorthogonalization against the basis and deflation space
            for b in &basis {
                let c = vec_dot(&w, b);
                for (wi, bi) in w.iter_mut().zip(b.iter()) {
                    *wi -= c * bi;
                }
            }
            orthogonalize(&mut w, deflate);
            let beta = vec_norm(&w);

            let k = alphas.len();
            if k >= 2 || beta <= 1e-14 * norm_bound {
                let (theta, y) = tridiag_min_eig(&alphas, &betas);
                let resid = if beta <= 1e-14 * norm_bound {
                    0.0
                } else {
                    (beta * y[k - 1]).abs()
                };
                if resid <= LANCZOS_TOL * norm_bound || beta <= 1e-14 * norm_bound {
                    let mut vec = vec![0.0; n];
                    for (c, b) in y.iter().zip(&basis) {
                        for (vi, bi) in vec.iter_mut().zip(b.iter()) {
                            *vi += c * bi;
                        }
                    }
                    normalize(&mut vec);
                    return MinEig {
                        value: theta,
                        vector: vec,
                        converged: true,
                    };
                }
                if theta < best.value {
                    let mut vec = vec![0.0; n];
                    for (c, b) in y.iter().zip(&basis) {
                        for (vi, bi) in vec.iter_mut().zip(b.iter()) {
                            *vi += c * bi;
                        }
                    }
                    normalize(&mut vec);
                    best = MinEig {
                        value: theta,
                        vector: vec,
                        converged: false,
                    };
                }
            }
            if matvecs >= max_matvecs {
                return best;
            }
            if basis.len() >= basis_cap {
                // restart from the current best Ritz vector
                v0 = best.vector.clone();
                orthogonalize(&mut v0, deflate);
                if vec_norm(&v0) <= 1e-12 {
                    return best;
                }
                normalize(&mut v0);
                continue 'restart;
            }
            betas.push(beta);
            let mut next = w.clone();
            for x in &mut next {
                *x /= beta;
            }
            basis.push(next);
        }
    }
}

fn gershgorin_bound(s: &SymSparse) -> f64 {
    let n = s.dim();
    let mut radius = vec![0.0; n];
    for &(i, j, v) in s.entries() {
        radius[i as usize] += v.abs();
        if i != j {
            radius[j as usize] += v.abs();
        }
    }
    radius.iter().cloned().fold(0.0, f64::max)
}

fn normalize(v: &mut [f64]) {
    let n = vec_norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn orthogonalize(v: &mut [f64], against: &[&[f64]]) {
    for u in against {
        let c = vec_dot(v, u);
        for (vi, ui) in v.iter_mut().zip(u.iter()) {
            *vi -= c * ui;
        }
    }
}

/// Smallest eigenpair of the symmetric tridiagonal (alphas, betas) matrix.
fn tridiag_min_eig(alphas: &[f64], betas: &[f64]) -> (f64, Vec<f64>) {
    let k = alphas.len();
    let mut t = nalgebra::DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let (vals, vecs) = dense_sym_eig(&t);
    (vals[0], vecs.column(0).iter().cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymSparse;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_min_eig_is_one() {
        let s = SymSparse::identity(5);
        let e = min_eig_estimate(&s, EigMode::Exact);
        assert!((e.value - 1.0).abs() < 1e-12);
        assert!((vec_norm(&e.vector) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diag_min_eig_and_vector() {
        let s = SymSparse::new(2, [(0, 0, 3.0), (1, 1, -2.0)]).unwrap();
        let e = min_eig_estimate(&s, EigMode::Exact);
        assert!((e.value + 2.0).abs() < 1e-12);
        assert!(e.vector[1].abs() > 0.999 && e.vector[0].abs() < 1e-9);
    }

    #[test]
    fn lanczos_matches_dense_on_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 50;
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in i..n {
                if rng.gen::<f64>() < 0.2 || i == j {
                    triplets.push((i, j, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        let s = SymSparse::new(n, triplets).unwrap();
        let exact = min_eig_estimate(&s, EigMode::Exact);
        let iter = min_eig_estimate(&s, EigMode::Iterative);
        assert!(iter.converged);
        assert!(
            (exact.value - iter.value).abs() < 1e-7,
            "dense {} vs lanczos {}",
            exact.value,
            iter.value
        );
    }

    #[test]
    fn neg_eigs_finds_all_negative_directions() {
        // diag(2, -1, -3, 5): two negative eigenvalues
        let s = SymSparse::new(
            4,
            [(0, 0, 2.0), (1, 1, -1.0), (2, 2, -3.0), (3, 3, 5.0)],
        )
        .unwrap();
        for mode in [EigMode::Exact, EigMode::Iterative] {
            let (pairs, exhaustive) = neg_eigs(&s, mode, 1e-10, 8);
            assert!(exhaustive, "{mode:?}");
            assert_eq!(pairs.len(), 2, "{mode:?}");
            assert!((pairs[0].value + 3.0).abs() < 1e-7);
            assert!((pairs[1].value + 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn eig_mode_auto_crossover() {
        assert_eq!(EigMode::auto(400, 400), EigMode::Exact);
        assert_eq!(EigMode::auto(401, 400), EigMode::Iterative);
    }
}
