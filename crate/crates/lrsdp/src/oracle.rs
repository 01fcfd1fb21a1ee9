//! Dense small-instance reference solver.
//!
//! A full-matrix augmented Lagrangian method with exact eigenvalue projection
//! onto the PSD cone, deliberately sharing no code with the low-rank path:
//! constraint evaluation, adjoints and the KKT residual formulas are all
//! re-implemented here densely. Every derived ground truth in the test suite
//! comes from this module.

use crate::error::{Error, Result};
use crate::factor::{FactorBlock, FactorPoint};
use crate::linalg::RowMat;
use crate::palm::KktResiduals;
use crate::problem::{moreau_value_grad, BlockKind, ConicProblem, GradBlock};
use nalgebra::{DMatrix, DVector};

const MAX_PSD_DIM: usize = 50;
const MAX_CONSTRAINTS: usize = 200;

/// Dense primal block value.
#[derive(Clone, Debug)]
pub enum DenseBlock {
    Sym(DMatrix<f64>),
    Vec(Vec<f64>),
}

/// A certified dense solution.
#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub x: Vec<DenseBlock>,
    pub lam: Vec<f64>,
    pub mu: Vec<f64>,
    pub fval: f64,
    pub certified_kkt: KktResiduals,
    pub beta2: f64,
}

struct DenseOps<'a> {
    prob: &'a ConicProblem,
}

impl<'a> DenseOps<'a> {
    /// <A_i, X> for a dense symmetric block.
    fn pair(a: &crate::linalg::SymSparse, xb: &DenseBlock) -> f64 {
        match xb {
            DenseBlock::Sym(x) => {
                let mut s = 0.0;
                for &(i, j, v) in a.entries() {
                    let (i, j) = (i as usize, j as usize);
                    s += if i == j { v * x[(i, i)] } else { 2.0 * v * x[(i, j)] };
                }
                s
            }
            DenseBlock::Vec(x) => {
                let mut s = 0.0;
                for &(i, j, v) in a.entries() {
                    if i == j {
                        s += v * x[i as usize];
                    }
                }
                s
            }
        }
    }

    fn apply_a(&self, x: &[DenseBlock]) -> Vec<f64> {
        let m = self.prob.num_constraints();
        let mut out = vec![0.0; m];
        for (map, xb) in self.prob.a_maps().iter().zip(x) {
            for (i, a) in map.mats().iter().enumerate() {
                out[i] += Self::pair(a, xb);
            }
        }
        out
    }

    fn apply_b(&self, x: &[DenseBlock]) -> Vec<f64> {
        match self.prob.b_maps() {
            None => Vec::new(),
            Some(maps) => {
                let p = maps[0].len();
                let mut out = vec![0.0; p];
                for (map, xb) in maps.iter().zip(x) {
                    for (i, a) in map.mats().iter().enumerate() {
                        out[i] += Self::pair(a, xb);
                    }
                }
                out
            }
        }
    }

    /// sum_i w_i A_i as a dense block-shaped object, added into `acc`.
    fn add_adjoint(
        maps: &crate::linalg::LinearMap,
        w: &[f64],
        kind: BlockKind,
        acc: &mut DenseBlock,
    ) {
        match (kind, acc) {
            (BlockKind::PsdMatrix, DenseBlock::Sym(s)) => {
                for (a, &wi) in maps.mats().iter().zip(w) {
                    if wi == 0.0 {
                        continue;
                    }
                    for &(i, j, v) in a.entries() {
                        let (i, j) = (i as usize, j as usize);
                        s[(i, j)] += wi * v;
                        if i != j {
                            s[(j, i)] += wi * v;
                        }
                    }
                }
            }
            (_, DenseBlock::Vec(g)) => {
                for (a, &wi) in maps.mats().iter().zip(w) {
                    if wi == 0.0 {
                        continue;
                    }
                    for &(i, j, v) in a.entries() {
                        if i == j {
                            g[i as usize] += wi * v;
                        }
                    }
                }
            }
            _ => unreachable!("block shape mismatch"),
        }
    }

    /// Objective value and dense per-block gradient. Callback objectives are
    /// evaluated through an eigenvalue factorization of each PSD block.
    fn objective(&self, x: &[DenseBlock]) -> Result<(f64, Vec<DenseBlock>)> {
        match self.prob.objective() {
            crate::problem::Objective::Linear(costs) => {
                let mut val = 0.0;
                let mut grads = Vec::with_capacity(costs.len());
                for (c, xb) in costs.iter().zip(x) {
                    val += Self::pair(c, xb);
                    grads.push(match xb {
                        DenseBlock::Sym(_) => DenseBlock::Sym(c.to_dense()),
                        DenseBlock::Vec(_) => DenseBlock::Vec(c.diag()),
                    });
                }
                Ok((val, grads))
            }
            crate::problem::Objective::Callback(_) => {
                let fp = self.to_factor_point(x);
                let (val, grads) = self.prob.objective().eval(&fp)?;
                let dense_grads = grads
                    .iter()
                    .zip(x)
                    .map(|(g, xb)| match (g, xb) {
                        (GradBlock::Vector(v), DenseBlock::Vec(_)) => DenseBlock::Vec(v.clone()),
                        (GradBlock::Dense(d), DenseBlock::Sym(_)) => DenseBlock::Sym(d.clone()),
                        (GradBlock::Sparse(s), DenseBlock::Sym(_)) => {
                            DenseBlock::Sym(s.to_dense())
                        }
                        _ => unreachable!("gradient shape mismatch"),
                    })
                    .collect();
                Ok((val, dense_grads))
            }
        }
    }

    /// Exact full-rank factorization of the current dense point, for
    /// evaluating factor-based objective callbacks.
    fn to_factor_point(&self, x: &[DenseBlock]) -> FactorPoint {
        let blocks = x
            .iter()
            .map(|xb| match xb {
                DenseBlock::Vec(v) => FactorBlock::Vec(v.clone()),
                DenseBlock::Sym(s) => {
                    let (vals, vecs) = crate::linalg::dense_sym_eig(s);
                    let n = s.nrows();
                    let fac = RowMat::from_fn(n, n, |i, j| {
                        vecs[(i, j)] * vals[j].max(0.0).sqrt()
                    });
                    FactorBlock::Psd(fac)
                }
            })
            .collect();
        FactorPoint { blocks }
    }
}

fn project_block(kind: BlockKind, b: &mut DenseBlock) {
    match (kind, b) {
        (BlockKind::PsdMatrix, DenseBlock::Sym(s)) => {
            let eig = nalgebra::SymmetricEigen::new(s.clone());
            let clamped = eig.eigenvalues.map(|v| v.max(0.0));
            *s = &eig.eigenvectors
                * DMatrix::from_diagonal(&clamped)
                * eig.eigenvectors.transpose();
            // keep it exactly symmetric against drift
            let sym = (s.clone() + s.transpose()) * 0.5;
            *s = sym;
        }
        (BlockKind::NonnegVector, DenseBlock::Vec(v)) => {
            for e in v.iter_mut() {
                if *e < 0.0 {
                    *e = 0.0;
                }
            }
        }
        _ => {}
    }
}

fn block_dot(a: &DenseBlock, b: &DenseBlock) -> f64 {
    match (a, b) {
        (DenseBlock::Sym(x), DenseBlock::Sym(y)) => x.dot(y),
        (DenseBlock::Vec(x), DenseBlock::Vec(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum(),
        _ => unreachable!(),
    }
}

fn block_axpy(dst: &mut DenseBlock, s: f64, src: &DenseBlock) {
    match (dst, src) {
        (DenseBlock::Sym(x), DenseBlock::Sym(y)) => *x += y * s,
        (DenseBlock::Vec(x), DenseBlock::Vec(y)) => {
            for (p, q) in x.iter_mut().zip(y) {
                *p += s * q;
            }
        }
        _ => unreachable!(),
    }
}

/// Solve the problem densely to the given KKT tolerance.
pub fn solve_dense(
    prob: &ConicProblem,
    tol: f64,
    max_outer: usize,
    seed: u64,
) -> Result<DenseSolution> {
    for spec in prob.blocks() {
        if spec.kind == BlockKind::PsdMatrix && spec.dim > MAX_PSD_DIM {
            return Err(Error::InvalidInput(format!(
                "oracle limited to PSD blocks of dim <= {MAX_PSD_DIM}, got {}",
                spec.dim
            )));
        }
    }
    if prob.num_constraints() > MAX_CONSTRAINTS {
        return Err(Error::InvalidInput(format!(
            "oracle limited to m <= {MAX_CONSTRAINTS} constraints"
        )));
    }

    let ops = DenseOps { prob };
    // deterministic start; the seed only shifts the initial diagonal scale
    let scale = 1.0 + (seed % 7) as f64 * 0.1;
    let mut x: Vec<DenseBlock> = prob
        .blocks()
        .iter()
        .map(|spec| match spec.kind {
            BlockKind::PsdMatrix => {
                DenseBlock::Sym(DMatrix::identity(spec.dim, spec.dim) * scale)
            }
            _ => DenseBlock::Vec(vec![scale; spec.dim]),
        })
        .collect();

    let m = prob.num_constraints();
    let p = prob.side_dim();
    let mut lam = vec![0.0; m];
    let mut mu = vec![0.0; p];
    let bnorm = crate::linalg::vec_norm(prob.b());
    let mut beta = 1.0_f64.max(1.0 / (1.0 + bnorm));
    let beta2_growth = 2.0;
    let mut inner_tol = 1e-3;
    let mut last_pfeas = f64::INFINITY;

    for _outer in 0..max_outer {
        inner_minimize(&ops, &mut x, &lam, &mu, beta, prob, inner_tol)?;

        // multiplier updates
        let ra: Vec<f64> = ops
            .apply_a(&x)
            .iter()
            .zip(prob.b())
            .map(|(a, b)| a - b)
            .collect();
        for (l, r) in lam.iter_mut().zip(&ra) {
            *l -= beta * r;
        }
        if prob.has_side() {
            let bx = ops.apply_b(&x);
            let w: Vec<f64> = bx.iter().zip(&mu).map(|(&v, &mm)| v - mm / beta).collect();
            let y = prob.side_set().unwrap().project(&w);
            mu = y.iter().zip(&w).map(|(&yi, &wi)| beta * (yi - wi)).collect();
        }

        let mut kkt = certify(prob, &x, &lam, &mu, beta)?;
        // least-squares polish of lam on the face of X; mu keeps its exact
        // normal-cone structure from the ALM update
        if kkt.pfeas <= 100.0 * tol {
            if let Some(lam_ref) = refine_lambda(&ops, prob, &x, &mu) {
                let kkt_ref = certify(prob, &x, &lam_ref, &mu, beta)?;
                if kkt_ref.max_kkt < kkt.max_kkt {
                    lam = lam_ref;
                    kkt = kkt_ref;
                }
            }
        }
        if kkt.max_kkt <= tol {
            let (fval, _) = ops.objective(&x)?;
            return Ok(DenseSolution {
                x,
                lam,
                mu,
                fval,
                certified_kkt: kkt,
                beta2: beta,
            });
        }
        if kkt.pfeas > 0.1 * tol && kkt.pfeas > 0.7 * last_pfeas {
            beta = (beta * beta2_growth).min(1e8);
        }
        last_pfeas = kkt.pfeas;
        inner_tol = (inner_tol * 0.5).max(tol * 1e-2);
    }
    Err(Error::OracleFailed(format!(
        "dense reference solve did not reach tol {tol} in {max_outer} outer iterations"
    )))
}

/// Projected gradient with BB steps on the dense augmented Lagrangian.
fn inner_minimize(
    ops: &DenseOps,
    x: &mut Vec<DenseBlock>,
    lam: &[f64],
    mu: &[f64],
    beta: f64,
    prob: &ConicProblem,
    tol: f64,
) -> Result<()> {
    let value_grad = |x: &[DenseBlock]| -> Result<(f64, Vec<DenseBlock>)> {
        let (fval, fgrad) = ops.objective(x)?;
        let ra: Vec<f64> = ops
            .apply_a(x)
            .iter()
            .zip(prob.b())
            .map(|(a, b)| a - b)
            .collect();
        let lam_dot: f64 = lam.iter().zip(&ra).map(|(a, b)| a * b).sum();
        let pen: f64 = ra.iter().map(|v| v * v).sum();
        let mut val = fval - lam_dot + 0.5 * beta * pen;
        let coeff: Vec<f64> = lam.iter().zip(&ra).map(|(l, r)| -(l - beta * r)).collect();
        let mut grad = fgrad;
        for (k, map) in prob.a_maps().iter().enumerate() {
            DenseOps::add_adjoint(map, &coeff, prob.blocks()[k].kind, &mut grad[k]);
        }
        if let Some(set) = prob.side_set() {
            let bx = ops.apply_b(x);
            let (mval, mgrad) = moreau_value_grad(set, &bx, mu, beta);
            val += mval;
            for (k, map) in prob.b_maps().unwrap().iter().enumerate() {
                DenseOps::add_adjoint(map, &mgrad, prob.blocks()[k].kind, &mut grad[k]);
            }
        }
        Ok((val, grad))
    };

    let (mut fval, mut grad) = value_grad(x)?;
    let mut step = 1.0;
    let mut prev: Option<(Vec<DenseBlock>, Vec<DenseBlock>)> = None;

    for _ in 0..5000 {
        // projected-gradient residual
        let mut trial = x.clone();
        for (k, g) in grad.iter().enumerate() {
            block_axpy(&mut trial[k], -1.0, g);
            project_block(prob.blocks()[k].kind, &mut trial[k]);
        }
        let mut resid_sq = 0.0;
        for (xb, tb) in x.iter().zip(&trial) {
            let mut d = xb.clone();
            block_axpy(&mut d, -1.0, tb);
            resid_sq += block_dot(&d, &d);
        }
        if resid_sq.sqrt() <= tol {
            return Ok(());
        }

        if let Some((px, pg)) = &prev {
            let mut s_sq = 0.0;
            let mut sy = 0.0;
            for k in 0..x.len() {
                let mut s = x[k].clone();
                block_axpy(&mut s, -1.0, &px[k]);
                let mut y = grad[k].clone();
                block_axpy(&mut y, -1.0, &pg[k]);
                s_sq += block_dot(&s, &s);
                sy += block_dot(&s, &y);
            }
            if sy > 0.0 {
                step = (s_sq / sy).clamp(1e-14, 1e10);
            }
        }

        let mut accepted = false;
        let mut t = step;
        for _ in 0..60 {
            let mut cand = x.clone();
            for (k, g) in grad.iter().enumerate() {
                block_axpy(&mut cand[k], -t, g);
                project_block(prob.blocks()[k].kind, &mut cand[k]);
            }
            // first-order decrease along the projected arc: <g, x - cand>
            let mut decrease = 0.0;
            for (k, g) in grad.iter().enumerate() {
                let mut d = x[k].clone();
                block_axpy(&mut d, -1.0, &cand[k]);
                decrease += block_dot(g, &d);
            }
            let (fc, gc) = value_grad(&cand)?;
            if fc.is_finite() && decrease >= 0.0 && fc <= fval - 1e-4 * decrease {
                prev = Some((std::mem::take(x), std::mem::replace(&mut grad, gc)));
                *x = cand;
                fval = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Ok(()); // flat to machine precision at this tolerance
        }
    }
    Ok(())
}

/// Least-squares multiplier recovery: minimize, over `lam`, the norm of
/// `(grad f - A*(lam) - B*(mu))` restricted to the range of each PSD block
/// (eigenvectors above a relative rank cutoff) and to the active coordinates
/// of vector blocks. Solved through ridged normal equations.
fn refine_lambda(
    ops: &DenseOps,
    prob: &ConicProblem,
    x: &[DenseBlock],
    mu: &[f64],
) -> Option<Vec<f64>> {
    let m = prob.num_constraints();
    if m == 0 {
        return None;
    }
    let (_, fgrad) = ops.objective(x).ok()?;
    // G = grad f - B*(mu), the lam-independent part of the slack
    let mut g = fgrad;
    if let Some(maps) = prob.b_maps() {
        let neg_mu: Vec<f64> = mu.iter().map(|v| -v).collect();
        for (k, map) in maps.iter().enumerate() {
            DenseOps::add_adjoint(map, &neg_mu, prob.blocks()[k].kind, &mut g[k]);
        }
    }

    let mut normal = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for (k, xb) in x.iter().enumerate() {
        let map = &prob.a_maps()[k];
        match xb {
            DenseBlock::Sym(s) => {
                let (vals, vecs) = crate::linalg::dense_sym_eig(s);
                let top = vals.last().cloned().unwrap_or(0.0).max(0.0);
                if top <= 0.0 {
                    continue;
                }
                let keep: Vec<usize> = (0..vals.len())
                    .filter(|&i| vals[i] > 1e-7 * top)
                    .collect();
                if keep.is_empty() {
                    continue;
                }
                let v = DMatrix::from_fn(s.nrows(), keep.len(), |r, c| vecs[(r, keep[c])]);
                let avs: Vec<DMatrix<f64>> =
                    map.mats().iter().map(|a| a.to_dense() * &v).collect();
                let gv = match &g[k] {
                    DenseBlock::Sym(gm) => gm * &v,
                    _ => unreachable!(),
                };
                for i in 0..m {
                    rhs[i] += avs[i].dot(&gv);
                    for j in i..m {
                        let t = avs[i].dot(&avs[j]);
                        normal[(i, j)] += t;
                        if i != j {
                            normal[(j, i)] += t;
                        }
                    }
                }
            }
            DenseBlock::Vec(xv) => {
                let active: Vec<usize> = match prob.blocks()[k].kind {
                    BlockKind::FreeVector => (0..xv.len()).collect(),
                    _ => {
                        let top = xv.iter().cloned().fold(0.0_f64, f64::max);
                        (0..xv.len()).filter(|&i| xv[i] > 1e-7 * (1.0 + top)).collect()
                    }
                };
                if active.is_empty() {
                    continue;
                }
                let gv = match &g[k] {
                    DenseBlock::Vec(v) => v,
                    _ => unreachable!(),
                };
                let cols: Vec<Vec<f64>> = map
                    .mats()
                    .iter()
                    .map(|a| {
                        let d = a.diag();
                        active.iter().map(|&l| d[l]).collect()
                    })
                    .collect();
                for i in 0..m {
                    rhs[i] += cols[i]
                        .iter()
                        .zip(active.iter().map(|&l| gv[l]))
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                    for j in i..m {
                        let t: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                        normal[(i, j)] += t;
                        if i != j {
                            normal[(j, i)] += t;
                        }
                    }
                }
            }
        }
    }
    let scale = (0..m).map(|i| normal[(i, i)]).fold(0.0_f64, f64::max);
    if scale <= 0.0 {
        return None;
    }
    let ridged = normal + DMatrix::identity(m, m) * (1e-12 * scale);
    let chol = nalgebra::Cholesky::new(ridged)?;
    Some(chol.solve(&rhs).iter().cloned().collect())
}

/// Dense re-implementation of the KKT residual formulas.
pub fn certify(
    prob: &ConicProblem,
    x: &[DenseBlock],
    lam: &[f64],
    mu: &[f64],
    beta2: f64,
) -> Result<KktResiduals> {
    let ops = DenseOps { prob };
    let b = prob.b();
    let ra: Vec<f64> = ops.apply_a(x).iter().zip(b).map(|(a, bb)| a - bb).collect();
    let mut pfeas =
        crate::linalg::vec_norm(&ra) / (1.0 + crate::linalg::vec_norm(b));
    if let Some(set) = prob.side_set() {
        let bx = ops.apply_b(x);
        let w: Vec<f64> = bx.iter().zip(mu).map(|(&v, &mm)| v - mm / beta2).collect();
        let y = set.project(&w);
        let dev: f64 = bx
            .iter()
            .zip(&y)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt();
        pfeas = pfeas.max(dev / (1.0 + crate::linalg::vec_norm(&bx)));
    }

    // S = grad f - A*(lam) - B*(mu), assembled densely
    let (_, fgrad) = ops.objective(x)?;
    let mut slack = fgrad.clone();
    let neg_lam: Vec<f64> = lam.iter().map(|v| -v).collect();
    for (k, map) in prob.a_maps().iter().enumerate() {
        DenseOps::add_adjoint(map, &neg_lam, prob.blocks()[k].kind, &mut slack[k]);
    }
    if let Some(maps) = prob.b_maps() {
        let neg_mu: Vec<f64> = mu.iter().map(|v| -v).collect();
        for (k, map) in maps.iter().enumerate() {
            DenseOps::add_adjoint(map, &neg_mu, prob.blocks()[k].kind, &mut slack[k]);
        }
    }

    let mut s_norm_sq = 0.0;
    let mut viol_sq = 0.0;
    let mut xs = 0.0;
    let mut grad_norm_sq = 0.0;
    for (k, sb) in slack.iter().enumerate() {
        grad_norm_sq += block_dot(&fgrad[k], &fgrad[k]);
        s_norm_sq += block_dot(sb, sb);
        xs += block_dot(&x[k], sb);
        match (prob.blocks()[k].kind, sb) {
            (BlockKind::PsdMatrix, DenseBlock::Sym(s)) => {
                let eig = nalgebra::SymmetricEigen::new(s.clone());
                viol_sq += eig
                    .eigenvalues
                    .iter()
                    .map(|&v| v.min(0.0).powi(2))
                    .sum::<f64>();
            }
            (BlockKind::NonnegVector, DenseBlock::Vec(s)) => {
                viol_sq += s.iter().map(|&v| v.min(0.0).powi(2)).sum::<f64>();
            }
            (BlockKind::FreeVector, DenseBlock::Vec(s)) => {
                viol_sq += s.iter().map(|v| v * v).sum::<f64>();
            }
            _ => unreachable!(),
        }
    }
    let dfeas = viol_sq.sqrt() / (1.0 + s_norm_sq.sqrt());
    let mut comp = xs.abs() / (1.0 + grad_norm_sq.sqrt());
    let mut pdgap = None;
    if prob.objective().is_linear() && !prob.has_side() {
        let (cx, _) = ops.objective(x)?;
        let lb: f64 = lam.iter().zip(b).map(|(a, c)| a * c).sum();
        let gap = (lb - cx).abs() / (1.0 + lb.abs() + cx.abs());
        pdgap = Some(gap);
        if gap < comp {
            comp = gap;
        }
    }
    let max_kkt = pfeas.max(dfeas).max(comp);
    Ok(KktResiduals {
        pfeas,
        dfeas,
        comp,
        pdgap,
        max_kkt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymSparse;

    #[test]
    fn trace_one_identity_cost() {
        let n = 2;
        let prob = ConicProblem::single_psd(
            n,
            vec![SymSparse::identity(n)],
            vec![1.0],
            SymSparse::identity(n),
        )
        .unwrap();
        let sol = solve_dense(&prob, 1e-9, 5000, 0).unwrap();
        assert!((sol.fval - 1.0).abs() < 1e-8, "fval {}", sol.fval);
        assert!(sol.certified_kkt.max_kkt <= 1e-9);
    }

    fn theta_c5() -> ConicProblem {
        let n = 5;
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)];
        let mut mats = vec![SymSparse::identity(n)];
        let mut b = vec![1.0];
        for &(i, j) in &edges {
            mats.push(SymSparse::new(n, [(i, j, 0.5)]).unwrap());
            b.push(0.0);
        }
        let mut ones = Vec::new();
        for i in 0..n {
            for j in i..n {
                ones.push((i, j, -1.0));
            }
        }
        let c = SymSparse::new(n, ones).unwrap();
        ConicProblem::single_psd(n, mats, b, c).unwrap()
    }

    #[test]
    fn lovasz_theta_c5_is_sqrt5() {
        let prob = theta_c5();
        let sol = solve_dense(&prob, 1e-9, 5000, 0).unwrap();
        let want = -(5.0_f64).sqrt();
        assert!(
            (sol.fval - want).abs() < 1e-6,
            "fval {} vs {}",
            sol.fval,
            want
        );
    }

    #[test]
    fn k3_maxcut_matches_one_parameter_family_grid() {
        // X with unit diagonal and constant off-diagonal rho in [-1/2, 1];
        // scan the family densely and verify the PSD boundary numerically
        let n = 3;
        let mut lt = Vec::new();
        for i in 0..n {
            lt.push((i, i, -0.5));
            for j in i + 1..n {
                lt.push((i, j, 0.25));
            }
        }
        let c = SymSparse::new(n, lt).unwrap();
        let mats = (0..n)
            .map(|i| SymSparse::new(n, [(i, i, 1.0)]).unwrap())
            .collect();
        let prob = ConicProblem::single_psd(n, mats, vec![1.0; n], c.clone()).unwrap();

        let mut best = f64::INFINITY;
        let grid = 50_000;
        for k in 0..=grid {
            let rho = -0.6 + 1.7 * (k as f64) / (grid as f64);
            let mut x = DMatrix::from_element(n, n, rho);
            for i in 0..n {
                x[(i, i)] = 1.0;
            }
            let eig = nalgebra::SymmetricEigen::new(x.clone());
            if eig.eigenvalues.iter().all(|&v| v >= -1e-12) {
                let val = (c.to_dense() * &x).trace();
                best = best.min(val);
            }
        }
        assert!((best - (-2.25)).abs() < 2e-4, "grid best {best}");

        let sol = solve_dense(&prob, 1e-8, 5000, 0).unwrap();
        // oracle within grid resolution of the grid value, and on the nose
        // for the value the grid certifies
        assert!(
            (sol.fval - best).abs() < 2e-4,
            "oracle {} vs grid {}",
            sol.fval,
            best
        );
        assert!((sol.fval - (-2.25)).abs() < 1e-6, "oracle {}", sol.fval);
    }

    #[test]
    fn certify_perturbed_point_reports_pfeas() {
        // X = X* + 1e-3 I on the trace-constrained instance:
        // pfeas = n * 1e-3 / (1 + |b|)
        let n = 2;
        let prob = ConicProblem::single_psd(
            n,
            vec![SymSparse::identity(n)],
            vec![1.0],
            SymSparse::identity(n),
        )
        .unwrap();
        let sol = solve_dense(&prob, 1e-9, 5000, 0).unwrap();
        let mut x = sol.x.clone();
        if let DenseBlock::Sym(s) = &mut x[0] {
            *s += DMatrix::identity(n, n) * 1e-3;
        }
        let kkt = certify(&prob, &x, &sol.lam, &sol.mu, sol.beta2).unwrap();
        let want = n as f64 * 1e-3 / 2.0;
        assert!((kkt.pfeas - want).abs() < 1e-6, "pfeas {}", kkt.pfeas);
    }

    #[test]
    fn oracle_is_deterministic() {
        let prob = theta_c5();
        let a = solve_dense(&prob, 1e-8, 5000, 3).unwrap();
        let b = solve_dense(&prob, 1e-8, 5000, 3).unwrap();
        assert_eq!(a.fval.to_bits(), b.fval.to_bits());
    }

    #[test]
    fn oracle_budget_exhaustion_is_an_error() {
        let prob = theta_c5();
        match solve_dense(&prob, 1e-12, 1, 0) {
            Err(Error::OracleFailed(_)) => {}
            other => panic!("expected oracle failure, got {:?}", other.map(|s| s.fval)),
        }
    }
}
