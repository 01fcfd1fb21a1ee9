//! Multi-block problem data: blocks, linear maps, objective, and convex side
//! constraints with their projections.
//!
//! The model is
//!
//! ```text
//! min  f(X)   s.t.   A(X) = b,   B(X) in P,   X_k in V_k,
//! ```
//!
//! where each block `X_k` lives in the PSD cone, the nonnegative orthant or a
//! free vector space, `A` and `B` are linear maps summed across blocks, and
//! `P` is a box-like closed convex set (or a user projection callback).

use crate::error::{Error, Result};
use crate::factor::{FactorBlock, FactorPoint};
use crate::linalg::{LinearMap, RowMat, SymSparse};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    PsdMatrix,
    NonnegVector,
    FreeVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub dim: usize,
}

impl BlockSpec {
    pub fn psd(dim: usize) -> Self {
        BlockSpec {
            kind: BlockKind::PsdMatrix,
            dim,
        }
    }

    pub fn nonneg(dim: usize) -> Self {
        BlockSpec {
            kind: BlockKind::NonnegVector,
            dim,
        }
    }

    pub fn free(dim: usize) -> Self {
        BlockSpec {
            kind: BlockKind::FreeVector,
            dim,
        }
    }
}

/// Projection target for the side constraint `B(X) in P`.
#[derive(Clone)]
pub enum ConvexSet {
    /// Componentwise `l <= y <= u`, entries may be infinite.
    Box { l: Vec<f64>, u: Vec<f64> },
    Nonneg,
    Free,
    Zero,
    /// User projection callback; must return the Euclidean projection.
    Custom(Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for ConvexSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConvexSet::Box { l, u } => write!(f, "Box(p={})", l.len().min(u.len())),
            ConvexSet::Nonneg => write!(f, "Nonneg"),
            ConvexSet::Free => write!(f, "Free"),
            ConvexSet::Zero => write!(f, "Zero"),
            ConvexSet::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl ConvexSet {
    pub fn boxed(l: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        if l.len() != u.len() {
            return Err(Error::DimensionMismatch {
                context: "box bounds",
                expected: l.len(),
                got: u.len(),
            });
        }
        if l.iter().zip(&u).any(|(a, b)| a > b) {
            return Err(Error::InvalidInput("box lower bound exceeds upper".into()));
        }
        Ok(ConvexSet::Box { l, u })
    }

    /// Euclidean projection of `y` onto the set.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        match self {
            ConvexSet::Box { l, u } => y
                .iter()
                .zip(l.iter().zip(u))
                .map(|(&v, (&lo, &hi))| v.max(lo).min(hi))
                .collect(),
            ConvexSet::Nonneg => y.iter().map(|&v| v.max(0.0)).collect(),
            ConvexSet::Free => y.to_vec(),
            ConvexSet::Zero => vec![0.0; y.len()],
            ConvexSet::Custom(f) => f(y),
        }
    }
}

/// Value and gradient (in `v`) of the Moreau/penalty term
/// `(beta2/2) dist(v - mu/beta2, P)^2 - |mu|^2 / (2 beta2)`.
pub fn moreau_value_grad(
    set: &ConvexSet,
    v: &[f64],
    mu: &[f64],
    beta2: f64,
) -> (f64, Vec<f64>) {
    debug_assert!(beta2 > 0.0);
    let w: Vec<f64> = v.iter().zip(mu).map(|(&vi, &mi)| vi - mi / beta2).collect();
    let pw = set.project(&w);
    let d: Vec<f64> = w.iter().zip(&pw).map(|(&a, &b)| a - b).collect();
    let dist_sq: f64 = d.iter().map(|x| x * x).sum();
    let mu_sq: f64 = mu.iter().map(|x| x * x).sum();
    let value = 0.5 * beta2 * dist_sq - mu_sq / (2.0 * beta2);
    let grad = d.iter().map(|&x| beta2 * x).collect();
    (value, grad)
}

/// Per-block objective gradient.
#[derive(Clone, Debug)]
pub enum GradBlock {
    /// Sparse symmetric gradient of a PSD block.
    Sparse(SymSparse),
    /// Dense symmetric gradient of a PSD block.
    Dense(nalgebra::DMatrix<f64>),
    /// Gradient of a vector block.
    Vector(Vec<f64>),
}

impl GradBlock {
    /// G * R for PSD-block gradients.
    pub fn times_factor(&self, r: &RowMat) -> RowMat {
        match self {
            GradBlock::Sparse(s) => s.mul_factor(r),
            GradBlock::Dense(d) => {
                let (n, rc) = (r.nrows(), r.ncols());
                let mut out = RowMat::zeros(n, rc);
                for i in 0..n {
                    for j in 0..n {
                        let v = d[(i, j)];
                        if v != 0.0 {
                            out.axpy_row(i, v, r, j);
                        }
                    }
                }
                out
            }
            GradBlock::Vector(_) => panic!("vector gradient applied to a factor"),
        }
    }

    pub fn frob_norm(&self) -> f64 {
        match self {
            GradBlock::Sparse(s) => s.frob_norm(),
            GradBlock::Dense(d) => d.norm(),
            GradBlock::Vector(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// <G, X_k> where X_k is the block value at the given factor block.
    pub fn inner_with_block(&self, fb: &FactorBlock) -> f64 {
        match (self, fb) {
            (GradBlock::Vector(g), FactorBlock::Vec(x)) => {
                g.iter().zip(x).map(|(a, b)| a * b).sum()
            }
            (_, FactorBlock::Psd(r)) => {
                let gr = self.times_factor(r);
                r.dot(&gr)
            }
            _ => panic!("mismatched gradient/factor blocks"),
        }
    }

    /// The gradient as a sparse symmetric matrix (PSD blocks only).
    pub fn to_symsparse(&self) -> SymSparse {
        match self {
            GradBlock::Sparse(s) => s.clone(),
            GradBlock::Dense(d) => SymSparse::from_dense(d, 0.0),
            GradBlock::Vector(_) => panic!("vector gradient has no matrix form"),
        }
    }
}

type ObjectiveFn = dyn Fn(&FactorPoint) -> Result<(f64, Vec<GradBlock>)> + Send + Sync;

/// Objective: either linear costs per block or a value-and-gradient callback.
#[derive(Clone)]
pub enum Objective {
    /// One cost matrix per block (diagonal-only for vector blocks).
    Linear(Vec<SymSparse>),
    Callback(Arc<ObjectiveFn>),
}

impl std::fmt::Debug for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Linear(_) => write!(f, "Linear"),
            Objective::Callback(_) => write!(f, "Callback"),
        }
    }
}

impl Objective {
    /// Register a callback objective, validating its gradient against central
    /// finite differences of the value along random directions at 3 random
    /// points (relative tolerance 1e-5).
    pub fn checked_callback(
        cb: Arc<ObjectiveFn>,
        specs: &[BlockSpec],
        seed: u64,
    ) -> Result<Objective> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1c_u64);
        for point in 0..3 {
            let x = FactorPoint::random(specs, 2, &mut rng);
            let (_, grads) = cb(&x)?;
            for _ in 0..2 {
                let mut dir = FactorPoint::random(specs, 2, &mut rng);
                let nrm = dir.norm();
                dir.scale(1.0 / nrm);
                // analytic directional derivative of f(X(R)) in R:
                // psd blocks contribute <2 G R, D>, vector blocks <g, d>
                let mut analytic = 0.0;
                for (k, g) in grads.iter().enumerate() {
                    match (&x.blocks[k], &dir.blocks[k]) {
                        (FactorBlock::Psd(r), FactorBlock::Psd(d)) => {
                            analytic += 2.0 * g.times_factor(r).dot(d);
                        }
                        (FactorBlock::Vec(_), FactorBlock::Vec(d)) => {
                            if let GradBlock::Vector(gv) = g {
                                analytic += gv.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        _ => {}
                    }
                }
                let h = 1e-5 * (1.0 + x.norm());
                let mut xp = x.clone();
                xp.axpy(h, &dir);
                let mut xm = x.clone();
                xm.axpy(-h, &dir);
                let (fp, _) = cb(&xp)?;
                let (fm, _) = cb(&xm)?;
                let fd = (fp - fm) / (2.0 * h);
                let scale = 1.0 + analytic.abs().max(fd.abs());
                let rel = (analytic - fd).abs() / scale;
                if rel > 1e-5 {
                    return Err(Error::GradientCheck {
                        point,
                        rel_err: rel,
                    });
                }
            }
        }
        Ok(Objective::Callback(cb))
    }

    /// Value and per-block gradient at a factored point.
    pub fn eval(&self, x: &FactorPoint) -> Result<(f64, Vec<GradBlock>)> {
        match self {
            Objective::Linear(costs) => {
                let mut value = 0.0;
                let mut grads = Vec::with_capacity(costs.len());
                for (c, fb) in costs.iter().zip(&x.blocks) {
                    match fb {
                        FactorBlock::Psd(r) => {
                            value += c.quad_form(r);
                            grads.push(GradBlock::Sparse(c.clone()));
                        }
                        FactorBlock::Vec(v) => {
                            value += c.diag_dot(v);
                            grads.push(GradBlock::Vector(c.diag()));
                        }
                    }
                }
                Ok((value, grads))
            }
            Objective::Callback(f) => f(x),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Objective::Linear(_))
    }

    /// Linear cost matrices, when the objective is linear.
    pub fn linear_costs(&self) -> Option<&[SymSparse]> {
        match self {
            Objective::Linear(c) => Some(c),
            Objective::Callback(_) => None,
        }
    }
}

/// The full conic problem instance.
#[derive(Clone, Debug)]
pub struct ConicProblem {
    blocks: Vec<BlockSpec>,
    a_maps: Vec<LinearMap>,
    b: Vec<f64>,
    b_maps: Option<Vec<LinearMap>>,
    side_set: Option<ConvexSet>,
    objective: Objective,
}

impl ConicProblem {
    pub fn new(
        blocks: Vec<BlockSpec>,
        a_maps: Vec<LinearMap>,
        b: Vec<f64>,
        objective: Objective,
    ) -> Result<Self> {
        Self::with_side(blocks, a_maps, b, None, None, objective)
    }

    pub fn with_side(
        blocks: Vec<BlockSpec>,
        a_maps: Vec<LinearMap>,
        b: Vec<f64>,
        b_maps: Option<Vec<LinearMap>>,
        side_set: Option<ConvexSet>,
        objective: Objective,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidInput("problem needs at least one block".into()));
        }
        if a_maps.len() != blocks.len() {
            return Err(Error::DimensionMismatch {
                context: "per-block equality maps",
                expected: blocks.len(),
                got: a_maps.len(),
            });
        }
        for (map, spec) in a_maps.iter().zip(&blocks) {
            if map.dim() != spec.dim {
                return Err(Error::DimensionMismatch {
                    context: "equality map block dimension",
                    expected: spec.dim,
                    got: map.dim(),
                });
            }
            if map.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    context: "equality map constraint count",
                    expected: b.len(),
                    got: map.len(),
                });
            }
        }
        if b_maps.is_some() != side_set.is_some() {
            return Err(Error::InvalidInput(
                "side maps and side set must be given together".into(),
            ));
        }
        if let Some(maps) = &b_maps {
            if maps.len() != blocks.len() {
                return Err(Error::DimensionMismatch {
                    context: "per-block side maps",
                    expected: blocks.len(),
                    got: maps.len(),
                });
            }
            let p = maps[0].len();
            for (map, spec) in maps.iter().zip(&blocks) {
                if map.dim() != spec.dim || map.len() != p {
                    return Err(Error::InvalidInput("inconsistent side map shapes".into()));
                }
            }
            if let Some(ConvexSet::Box { l, u }) = &side_set {
                if l.len() != p || u.len() != p {
                    return Err(Error::DimensionMismatch {
                        context: "box bounds length",
                        expected: p,
                        got: l.len(),
                    });
                }
            }
        }
        if let Objective::Linear(costs) = &objective {
            if costs.len() != blocks.len() {
                return Err(Error::DimensionMismatch {
                    context: "linear cost blocks",
                    expected: blocks.len(),
                    got: costs.len(),
                });
            }
            for (c, spec) in costs.iter().zip(&blocks) {
                if c.dim() != spec.dim {
                    return Err(Error::DimensionMismatch {
                        context: "linear cost dimension",
                        expected: spec.dim,
                        got: c.dim(),
                    });
                }
            }
        }
        Ok(ConicProblem {
            blocks,
            a_maps,
            b,
            b_maps,
            side_set,
            objective,
        })
    }

    /// Single PSD block with a linear objective; the common case.
    pub fn single_psd(
        n: usize,
        constraint_mats: Vec<SymSparse>,
        b: Vec<f64>,
        cost: SymSparse,
    ) -> Result<Self> {
        let map = LinearMap::new(n, constraint_mats)?;
        ConicProblem::new(
            vec![BlockSpec::psd(n)],
            vec![map],
            b,
            Objective::Linear(vec![cost]),
        )
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn num_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn side_dim(&self) -> usize {
        self.b_maps.as_ref().map_or(0, |m| m[0].len())
    }

    pub fn has_side(&self) -> bool {
        self.side_set.is_some()
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn a_maps(&self) -> &[LinearMap] {
        &self.a_maps
    }

    pub fn b_maps(&self) -> Option<&[LinearMap]> {
        self.b_maps.as_deref()
    }

    pub fn side_set(&self) -> Option<&ConvexSet> {
        self.side_set.as_ref()
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    /// The same problem with a replaced right-hand side.
    pub fn with_b(&self, b: Vec<f64>) -> Result<Self> {
        if b.len() != self.b.len() {
            return Err(Error::DimensionMismatch {
                context: "replacement right-hand side",
                expected: self.b.len(),
                got: b.len(),
            });
        }
        let mut out = self.clone();
        out.b = b;
        Ok(out)
    }

    /// A(X) summed across blocks.
    pub fn apply_a(&self, x: &FactorPoint) -> Result<Vec<f64>> {
        apply_maps(&self.a_maps, x, self.b.len())
    }

    /// B(X) summed across blocks (empty when no side constraints).
    pub fn apply_b(&self, x: &FactorPoint) -> Result<Vec<f64>> {
        match &self.b_maps {
            Some(maps) => apply_maps(maps, x, maps[0].len()),
            None => Ok(Vec::new()),
        }
    }

    /// A(X) - b.
    pub fn eq_residual(&self, x: &FactorPoint) -> Result<Vec<f64>> {
        let mut r = self.apply_a(x)?;
        for (ri, bi) in r.iter_mut().zip(&self.b) {
            *ri -= bi;
        }
        Ok(r)
    }
}

fn apply_maps(maps: &[LinearMap], x: &FactorPoint, m: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m];
    for (map, fb) in maps.iter().zip(&x.blocks) {
        let part = match fb {
            FactorBlock::Psd(r) => map.apply_factor(r)?,
            FactorBlock::Vec(v) => map.apply_vec(v)?,
        };
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    Ok(out)
}
