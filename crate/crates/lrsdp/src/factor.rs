//! Factored primal iterates.
//!
//! PSD blocks are carried as a tall factor `R` with `X = R R^T`; vector
//! blocks are carried as the vector itself (nonnegative blocks are kept
//! feasible by projection, never reparameterized). The same container doubles
//! as the gradient/direction type, since gradients share the block shapes.

use crate::linalg::RowMat;
use crate::problem::{BlockKind, BlockSpec};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum FactorBlock {
    /// n x r factor of a PSD block.
    Psd(RowMat),
    /// Vector block (nonnegative or free).
    Vec(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorPoint {
    pub blocks: Vec<FactorBlock>,
}

impl FactorPoint {
    /// Seeded random start: Gaussian factors with unit-norm columns for PSD
    /// blocks, |Gaussian| entries for nonnegative blocks.
    pub fn random(specs: &[BlockSpec], rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let blocks = specs
            .iter()
            .map(|spec| match spec.kind {
                BlockKind::PsdMatrix => {
                    let n = spec.dim;
                    let r = rank.clamp(1, n);
                    let mut m = RowMat::from_fn(n, r, |_, _| standard_normal(rng));
                    for c in 0..r {
                        let nrm: f64 = (0..n).map(|i| m.get(i, c).powi(2)).sum::<f64>().sqrt();
                        if nrm > 0.0 {
                            for i in 0..n {
                                m.set(i, c, m.get(i, c) / nrm);
                            }
                        }
                    }
                    FactorBlock::Psd(m)
                }
                BlockKind::NonnegVector => {
                    FactorBlock::Vec((0..spec.dim).map(|_| standard_normal(rng).abs()).collect())
                }
                BlockKind::FreeVector => {
                    FactorBlock::Vec((0..spec.dim).map(|_| standard_normal(rng)).collect())
                }
            })
            .collect();
        FactorPoint { blocks }
    }

    pub fn zeros_like(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                FactorBlock::Psd(m) => FactorBlock::Psd(RowMat::zeros(m.nrows(), m.ncols())),
                FactorBlock::Vec(v) => FactorBlock::Vec(vec![0.0; v.len()]),
            })
            .collect();
        FactorPoint { blocks }
    }

    pub fn dot(&self, other: &FactorPoint) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| match (a, b) {
                (FactorBlock::Psd(x), FactorBlock::Psd(y)) => x.dot(y),
                (FactorBlock::Vec(x), FactorBlock::Vec(y)) => {
                    x.iter().zip(y).map(|(p, q)| p * q).sum()
                }
                _ => panic!("mismatched factor blocks"),
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// self += s * other.
    pub fn axpy(&mut self, s: f64, other: &FactorPoint) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            match (a, b) {
                (FactorBlock::Psd(x), FactorBlock::Psd(y)) => x.axpy(s, y),
                (FactorBlock::Vec(x), FactorBlock::Vec(y)) => {
                    for (p, q) in x.iter_mut().zip(y) {
                        *p += s * q;
                    }
                }
                _ => panic!("mismatched factor blocks"),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            match b {
                FactorBlock::Psd(x) => x.scale(s),
                FactorBlock::Vec(x) => x.iter_mut().for_each(|v| *v *= s),
            }
        }
    }

    /// Clamp vector blocks back onto their cones (no-op for PSD and free).
    pub fn project_cones(&mut self, specs: &[BlockSpec]) {
        for (b, spec) in self.blocks.iter_mut().zip(specs) {
            if let (FactorBlock::Vec(x), BlockKind::NonnegVector) = (b, spec.kind) {
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    pub fn psd(&self, k: usize) -> &RowMat {
        match &self.blocks[k] {
            FactorBlock::Psd(m) => m,
            _ => panic!("block {k} is not a PSD block"),
        }
    }

    pub fn vec(&self, k: usize) -> &[f64] {
        match &self.blocks[k] {
            FactorBlock::Vec(v) => v,
            _ => panic!("block {k} is not a vector block"),
        }
    }

    /// Rank of PSD block `k` (its factor width).
    pub fn rank(&self, k: usize) -> usize {
        self.psd(k).ncols()
    }

    /// Frobenius norm of X = R R^T per PSD block plus vector norms, pooled.
    /// Uses |X|_F = |R^T R|_F so the n x n matrix is never formed.
    pub fn x_norm(&self) -> f64 {
        let mut sq = 0.0;
        for b in &self.blocks {
            match b {
                FactorBlock::Psd(m) => {
                    let r = m.ncols();
                    // G = R^T R (r x r)
                    for a in 0..r {
                        for c in 0..r {
                            let mut s = 0.0;
                            for i in 0..m.nrows() {
                                s += m.get(i, a) * m.get(i, c);
                            }
                            sq += s * s;
                        }
                    }
                }
                FactorBlock::Vec(v) => sq += v.iter().map(|x| x * x).sum::<f64>(),
            }
        }
        sq.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| match b {
            FactorBlock::Psd(m) => m.as_slice().iter().all(|v| v.is_finite()),
            FactorBlock::Vec(v) => v.iter().all(|x| x.is_finite()),
        })
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream simple and seeded.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Seeded standard normal draw (shared with instance generators).
pub fn standard_normal_pub(rng: &mut ChaCha8Rng) -> f64 {
    standard_normal(rng)
}
