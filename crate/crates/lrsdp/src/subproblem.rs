//! The (weighted) augmented Lagrangian subproblem over factors.
//!
//! For fixed multipliers and penalties the subproblem is
//!
//! ```text
//! min_R  f(X) - <lam, A(X) - b> + (beta1/2) |A(X) - b|^2_W
//!        + (beta2/2) dist(B(X) - mu/beta2, P)^2 - |mu|^2 / (2 beta2),
//! ```
//!
//! with `X = R R^T` on PSD blocks. It is minimized by gradient descent with
//! Barzilai-Borwein step initialization and monotone Armijo backtracking,
//! growing the rank when the dual slack matrix certifies a strict saddle.
//!
//! Stationarity is certified on the full-matrix condition: the residual is
//!
//! ```text
//! sqrt( sum_k |2 S_k R_k|_F^2  +  sum_k |Pi_{S+}(-S_k)|_F^2  +  sum_v |pg_v|^2 )
//! ```
//!
//! where `S_k` is the dual slack of PSD block `k` at the subproblem's implied
//! multipliers (so its factor gradient is exactly `2 S_k R_k`), the middle
//! term measures dual infeasibility of `S_k`, and `pg_v` is the projected
//! gradient residual of vector block `v`.

use crate::error::{Error, Result};
use crate::factor::{FactorBlock, FactorPoint};
use crate::linalg::{neg_eigs, EigMode, RowMat, SymSparse};
use crate::precond::WeightOperator;
use crate::problem::{moreau_value_grad, BlockKind, ConicProblem};
use std::time::Instant;

/// Data of one subproblem solve.
#[derive(Clone)]
pub struct SubproblemParams<'a> {
    pub lam: &'a [f64],
    pub mu: &'a [f64],
    pub beta1: f64,
    pub beta2: f64,
    pub weight: &'a WeightOperator,
    /// Stationarity tolerance (epsilon_k).
    pub eps: f64,
    pub max_inner_iters: usize,
    pub max_time_secs: Option<f64>,
    pub knobs: SubKnobs,
}

/// Tuning knobs with the module defaults.
#[derive(Clone, Copy, Debug)]
pub struct SubKnobs {
    pub armijo_c: f64,
    pub bb_step: bool,
    pub escape_tol: f64,
    pub dense_eig_threshold: usize,
    /// Grow the rank on saddle certificates.
    pub rank_adaptive: bool,
    /// Run exactly this many inner iterations, no early exit (used by the
    /// fixed-weight equivalence checks).
    pub fixed_iters: Option<usize>,
}

impl Default for SubKnobs {
    fn default() -> Self {
        SubKnobs {
            armijo_c: 1e-4,
            bb_step: true,
            escape_tol: 1e-8,
            dense_eig_threshold: crate::linalg::eig_dense_threshold_default(),
            rank_adaptive: true,
            fixed_iters: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubStatus {
    Converged,
    BudgetExhausted,
    NumericalFailure,
}

#[derive(Clone, Debug, Default)]
pub struct SubStats {
    pub inner_iters: usize,
    pub escapes: usize,
    pub final_residual: f64,
    pub final_value: f64,
}

/// Dual slack per block: a symmetric matrix on PSD blocks, the reduced
/// gradient on vector blocks.
#[derive(Clone, Debug)]
pub enum SlackBlock {
    Psd(SymSparse),
    Vec(Vec<f64>),
}

/// Subproblem value and gradient with respect to the factors.
pub fn subproblem_value_grad(
    prob: &ConicProblem,
    x: &FactorPoint,
    p: &SubproblemParams,
) -> Result<(f64, FactorPoint)> {
    let (val, grad, _, _) = eval_inner(prob, x, p, true)?;
    Ok((val, grad.expect("gradient requested")))
}

/// Value only; skips adjoint assembly.
pub fn subproblem_value(prob: &ConicProblem, x: &FactorPoint, p: &SubproblemParams) -> Result<f64> {
    let (val, _, _, _) = eval_inner(prob, x, p, false)?;
    Ok(val)
}

/// Effective multipliers implied by the current point: `lam_hat` enters the
/// gradient through `A*`, `nu = -mu_hat` through `B*`.
struct Effective {
    lam_hat: Vec<f64>,
    nu: Vec<f64>,
}

fn eval_inner(
    prob: &ConicProblem,
    x: &FactorPoint,
    p: &SubproblemParams,
    with_grad: bool,
) -> Result<(f64, Option<FactorPoint>, Effective, Vec<crate::problem::GradBlock>)> {
    let (fobj, fgrads) = prob.objective().eval(x)?;
    let ra = prob.eq_residual(x)?;
    let wra = p.weight.apply(&ra);
    let lam_dot: f64 = p.lam.iter().zip(&ra).map(|(a, b)| a * b).sum();
    let pen: f64 = ra.iter().zip(&wra).map(|(a, b)| a * b).sum();
    let mut val = fobj - lam_dot + 0.5 * p.beta1 * pen;
    let lam_hat: Vec<f64> = p
        .lam
        .iter()
        .zip(&wra)
        .map(|(l, w)| l - p.beta1 * w)
        .collect();

    let mut nu = Vec::new();
    if let Some(set) = prob.side_set() {
        let vb = prob.apply_b(x)?;
        let (mval, mgrad) = moreau_value_grad(set, &vb, p.mu, p.beta2);
        val += mval;
        nu = mgrad;
    }

    let eff = Effective { lam_hat, nu };
    if !with_grad {
        return Ok((val, None, eff, fgrads));
    }

    let mut gblocks = Vec::with_capacity(x.blocks.len());
    for (k, fb) in x.blocks.iter().enumerate() {
        match fb {
            FactorBlock::Psd(r) => {
                // G_k R with G_k = grad f - A*(lam_hat) + B*(nu); factor
                // gradient is 2 G_k R
                let mut gr = fgrads[k].times_factor(r);
                let alr = prob.a_maps()[k].adjoint_times_factor(&eff.lam_hat, r)?;
                gr.axpy(-1.0, &alr);
                if let Some(bmaps) = prob.b_maps() {
                    let blr = bmaps[k].adjoint_times_factor(&eff.nu, r)?;
                    gr.axpy(1.0, &blr);
                }
                gr.scale(2.0);
                gblocks.push(FactorBlock::Psd(gr));
            }
            FactorBlock::Vec(_) => {
                let mut g = match &fgrads[k] {
                    crate::problem::GradBlock::Vector(v) => v.clone(),
                    _ => {
                        return Err(Error::ObjectiveEval(
                            "vector block gradient has wrong shape".into(),
                        ))
                    }
                };
                let av = prob.a_maps()[k].adjoint_vec(&eff.lam_hat)?;
                for (gi, ai) in g.iter_mut().zip(&av) {
                    *gi -= ai;
                }
                if let Some(bmaps) = prob.b_maps() {
                    let bv = bmaps[k].adjoint_vec(&eff.nu)?;
                    for (gi, bi) in g.iter_mut().zip(&bv) {
                        *gi += bi;
                    }
                }
                gblocks.push(FactorBlock::Vec(g));
            }
        }
    }
    Ok((val, Some(FactorPoint { blocks: gblocks }), eff, fgrads))
}

/// Dual slack `S = grad f(X) - A*(lam_hat) - B*(mu_hat)` at the subproblem's
/// implied (post-update) multipliers, so subproblem stationarity reads
/// `S R ~= 0` on PSD blocks.
pub fn dual_slack(
    prob: &ConicProblem,
    x: &FactorPoint,
    p: &SubproblemParams,
) -> Result<Vec<SlackBlock>> {
    let (_, _, eff, fgrads) = eval_inner(prob, x, p, false)?;
    slack_from_effective(prob, x, &eff, &fgrads)
}

/// Dual slack at raw multipliers: `S = grad f(X) - A*(lam) - B*(mu)`.
pub fn slack_at_multipliers(
    prob: &ConicProblem,
    x: &FactorPoint,
    lam: &[f64],
    mu: &[f64],
) -> Result<Vec<SlackBlock>> {
    let (_, fgrads) = prob.objective().eval(x)?;
    let eff = Effective {
        lam_hat: lam.to_vec(),
        nu: mu.iter().map(|v| -v).collect(),
    };
    slack_from_effective(prob, x, &eff, &fgrads)
}

fn slack_from_effective(
    prob: &ConicProblem,
    x: &FactorPoint,
    eff: &Effective,
    fgrads: &[crate::problem::GradBlock],
) -> Result<Vec<SlackBlock>> {
    let mut out = Vec::with_capacity(x.blocks.len());
    for (k, fb) in x.blocks.iter().enumerate() {
        match fb {
            FactorBlock::Psd(_) => {
                let mut s = fgrads[k].to_symsparse();
                let al = prob.a_maps()[k].adjoint_matrix(&eff.lam_hat)?;
                s = s.add_scaled(-1.0, &al);
                if let Some(bmaps) = prob.b_maps() {
                    let bl = bmaps[k].adjoint_matrix(&eff.nu)?;
                    s = s.add_scaled(1.0, &bl);
                }
                out.push(SlackBlock::Psd(s));
            }
            FactorBlock::Vec(_) => {
                let mut g = match &fgrads[k] {
                    crate::problem::GradBlock::Vector(v) => v.clone(),
                    _ => unreachable!("shape validated in eval"),
                };
                let av = prob.a_maps()[k].adjoint_vec(&eff.lam_hat)?;
                for (gi, ai) in g.iter_mut().zip(&av) {
                    *gi -= ai;
                }
                if let Some(bmaps) = prob.b_maps() {
                    let bv = bmaps[k].adjoint_vec(&eff.nu)?;
                    for (gi, bi) in g.iter_mut().zip(&bv) {
                        *gi += bi;
                    }
                }
                out.push(SlackBlock::Vec(g));
            }
        }
    }
    Ok(out)
}

/// Projected-gradient residual of one vector block.
fn vec_block_residual(kind: BlockKind, x: &[f64], g: &[f64]) -> f64 {
    match kind {
        BlockKind::NonnegVector => x
            .iter()
            .zip(g)
            .map(|(&xi, &gi)| {
                let step = (xi - gi).max(0.0);
                (xi - step).powi(2)
            })
            .sum::<f64>()
            .sqrt(),
        _ => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Frobenius norm of the negative part of S, plus its most negative pairs.
fn negative_part(
    s: &SymSparse,
    knobs: &SubKnobs,
    want_vectors: bool,
) -> (f64, Vec<crate::linalg::NegEig>) {
    let mode = EigMode::auto(s.dim(), knobs.dense_eig_threshold);
    let tol = knobs.escape_tol * (1.0 + s.frob_norm());
    let cap = if want_vectors { 16 } else { 64 };
    let (pairs, _exhaustive) = neg_eigs(s, mode, 0.0, cap);
    let norm_sq: f64 = pairs.iter().map(|p| p.value * p.value).sum();
    let escapers = pairs.into_iter().filter(|p| p.value < -tol).collect();
    (norm_sq.sqrt(), escapers)
}

/// Full stationarity residual at a point (gradient, dual infeasibility and
/// vector-block projected gradients combined).
pub fn check_stationarity(
    prob: &ConicProblem,
    x: &FactorPoint,
    p: &SubproblemParams,
) -> Result<f64> {
    let (_, grad, eff, fgrads) = eval_inner(prob, x, p, true)?;
    let grad = grad.expect("gradient requested");
    let slack = slack_from_effective(prob, x, &eff, &fgrads)?;
    let mut sq = 0.0;
    for (k, (gb, sb)) in grad.blocks.iter().zip(&slack).enumerate() {
        match (gb, sb) {
            (FactorBlock::Psd(g), SlackBlock::Psd(s)) => {
                sq += g.dot(g); // |2 S R|_F^2
                let (neg, _) = negative_part(s, &p.knobs, false);
                sq += neg * neg;
            }
            (FactorBlock::Vec(g), SlackBlock::Vec(_)) => {
                let r = vec_block_residual(prob.blocks()[k].kind, x.vec(k), g);
                sq += r * r;
            }
            _ => unreachable!(),
        }
    }
    Ok(sq.sqrt())
}

/// Append columns for the `k_add` most negative eigendirections of the dual
/// slack, with the column scale chosen by backtracking until the subproblem
/// value strictly decreases. Returns None when no eigenvalue is sufficiently
/// negative (no-escape).
pub fn escape_rank(
    prob: &ConicProblem,
    x: &FactorPoint,
    slack: &[SlackBlock],
    k_add: usize,
    p: &SubproblemParams,
) -> Result<Option<FactorPoint>> {
    let base = subproblem_value(prob, x, p)?;
    let mut out = x.clone();
    let mut any = false;
    for (k, sb) in slack.iter().enumerate() {
        let SlackBlock::Psd(s) = sb else { continue };
        let r = x.psd(k);
        let n = r.nrows();
        let (_, escapers) = negative_part(s, &p.knobs, true);
        if escapers.is_empty() {
            continue;
        }
        let take = k_add.min(escapers.len()).min(n.saturating_sub(r.ncols()).max(1));
        let dirs: Vec<&[f64]> = escapers.iter().take(take).map(|e| e.vector.as_slice()).collect();
        if r.ncols() + dirs.len() <= n {
            // append delta * v_i, halving delta until strict decrease
            let mut delta = 1.0;
            for _ in 0..60 {
                let cand = r.with_appended_cols(dirs.len(), |row, c| delta * dirs[c][row]);
                let mut trial = out.clone();
                trial.blocks[k] = FactorBlock::Psd(cand);
                let v = subproblem_value(prob, &trial, p)?;
                if v < base - 1e-12 {
                    out = trial;
                    any = true;
                    break;
                }
                delta *= 0.5;
            }
        } else if n <= p.knobs.dense_eig_threshold {
            // full-width factor: refactor X + delta^2 v v^T densely
            let rd = r.to_dmatrix();
            let xm = &rd * rd.transpose();
            let v0 = &escapers[0].vector;
            let mut delta = 1.0;
            for _ in 0..60 {
                let mut xp = xm.clone();
                for i in 0..n {
                    for j in 0..n {
                        xp[(i, j)] += delta * delta * v0[i] * v0[j];
                    }
                }
                let (vals, vecs) = crate::linalg::dense_sym_eig(&xp);
                let cand = RowMat::from_fn(n, n, |i, j| {
                    vecs[(i, j)] * vals[j].max(0.0).sqrt()
                });
                let mut trial = out.clone();
                trial.blocks[k] = FactorBlock::Psd(cand);
                let v = subproblem_value(prob, &trial, p)?;
                if v < base - 1e-12 {
                    out = trial;
                    any = true;
                    break;
                }
                delta *= 0.5;
            }
        }
    }
    Ok(if any { Some(out) } else { None })
}

fn project_point(prob: &ConicProblem, x: &mut FactorPoint) {
    x.project_cones(prob.blocks());
}

/// Minimize the subproblem from `x0`. Returns the best iterate, a status and
/// solve statistics.
pub fn minimize_subproblem(
    prob: &ConicProblem,
    x0: &FactorPoint,
    p: &SubproblemParams,
) -> Result<(FactorPoint, SubStatus, SubStats)> {
    let start = Instant::now();
    let mut stats = SubStats::default();
    let mut x = x0.clone();
    project_point(prob, &mut x);

    let (mut fval, mut grad) = subproblem_value_grad(prob, &x, p)?;
    if !fval.is_finite() || !grad.all_finite() {
        return Ok((x, SubStatus::NumericalFailure, stats));
    }

    let mut t = 1.0 / (1.0 + grad.norm());
    let mut prev: Option<(FactorPoint, FactorPoint)> = None; // (x, grad) of last iterate
    let mut escapes_this_call = 0usize;
    let budget = p.knobs.fixed_iters.unwrap_or(p.max_inner_iters);

    loop {
        if stats.inner_iters >= budget {
            let status = if p.knobs.fixed_iters.is_some() {
                SubStatus::Converged
            } else {
                SubStatus::BudgetExhausted
            };
            stats.final_residual = check_stationarity(prob, &x, p)?;
            stats.final_value = fval;
            return Ok((x, status, stats));
        }
        if let Some(limit) = p.max_time_secs {
            if start.elapsed().as_secs_f64() > limit {
                stats.final_residual = check_stationarity(prob, &x, p)?;
                stats.final_value = fval;
                return Ok((x, SubStatus::BudgetExhausted, stats));
            }
        }

        // cheap residual proxy: gradient norm with projected vector parts
        let proxy = residual_proxy(prob, &x, &grad);
        if p.knobs.fixed_iters.is_none() && proxy <= p.eps {
            // full certificate including the spectrum of S
            let (_, _, eff, fgrads) = eval_inner(prob, &x, p, false)?;
            let slack = slack_from_effective(prob, &x, &eff, &fgrads)?;
            let mut neg_sq = 0.0;
            let mut can_escape = false;
            for sb in &slack {
                if let SlackBlock::Psd(s) = sb {
                    let (neg, escapers) = negative_part(s, &p.knobs, true);
                    neg_sq += neg * neg;
                    can_escape |= !escapers.is_empty();
                }
            }
            let resid = (proxy * proxy + neg_sq).sqrt();
            if resid <= p.eps {
                stats.final_residual = resid;
                stats.final_value = fval;
                return Ok((x, SubStatus::Converged, stats));
            }
            if p.knobs.rank_adaptive && can_escape {
                let k_add = 1usize << escapes_this_call.min(4);
                if let Some(next) = escape_rank(prob, &x, &slack, k_add, p)? {
                    x = next;
                    let vg = subproblem_value_grad(prob, &x, p)?;
                    fval = vg.0;
                    grad = vg.1;
                    prev = None;
                    t = 1.0 / (1.0 + grad.norm());
                    stats.escapes += 1;
                    escapes_this_call += 1;
                    continue;
                }
            }
            // cannot certify and cannot escape: keep iterating
        }

        // BB step from the last displacement pair
        if p.knobs.bb_step {
            if let Some((px, pg)) = &prev {
                let mut s = x.clone();
                s.axpy(-1.0, px);
                let mut y = grad.clone();
                y.axpy(-1.0, pg);
                let sy = s.dot(&y);
                if sy > 0.0 {
                    let ss = s.dot(&s);
                    t = (ss / sy).clamp(1e-12, 1e12);
                }
            }
        }

        // monotone Armijo backtracking along the projected arc
        let mut accepted = false;
        let mut step = t;
        for _ in 0..60 {
            let mut trial = x.clone();
            trial.axpy(-step, &grad);
            project_point(prob, &mut trial);
            let mut dx = x.clone();
            dx.axpy(-1.0, &trial);
            let decrease = grad.dot(&dx); // <g, x - x_trial> >= 0 along the arc
            let ftrial = subproblem_value(prob, &trial, p)?;
            if !ftrial.is_finite() {
                step *= 0.5;
                continue;
            }
            if ftrial <= fval - p.knobs.armijo_c * decrease && decrease >= 0.0 {
                let vg = subproblem_value_grad(prob, &trial, p)?;
                prev = Some((x, grad));
                x = trial;
                fval = vg.0;
                grad = vg.1;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        stats.inner_iters += 1;
        if !grad.all_finite() || !fval.is_finite() {
            return Ok((x, SubStatus::NumericalFailure, stats));
        }
        if !accepted {
            if p.knobs.fixed_iters.is_some() {
                continue; // keep burning fixed iterations in place
            }
            // no descent at tiny steps: certify or report budget exhaustion
            let resid = check_stationarity(prob, &x, p)?;
            stats.final_residual = resid;
            stats.final_value = fval;
            let status = if resid <= p.eps {
                SubStatus::Converged
            } else {
                SubStatus::BudgetExhausted
            };
            return Ok((x, status, stats));
        }
    }
}

/// Gradient norm with vector blocks measured by their projected residual.
fn residual_proxy(prob: &ConicProblem, x: &FactorPoint, grad: &FactorPoint) -> f64 {
    let mut sq = 0.0;
    for (k, gb) in grad.blocks.iter().enumerate() {
        match gb {
            FactorBlock::Psd(g) => sq += g.dot(g),
            FactorBlock::Vec(g) => {
                let r = vec_block_residual(prob.blocks()[k].kind, x.vec(k), g);
                sq += r * r;
            }
        }
    }
    sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::LinearMap;
    use crate::problem::{BlockSpec, ConvexSet, GradBlock, Objective};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn identity_params<'a>(
        lam: &'a [f64],
        mu: &'a [f64],
        w: &'a WeightOperator,
        eps: f64,
    ) -> SubproblemParams<'a> {
        SubproblemParams {
            lam,
            mu,
            beta1: 1.0,
            beta2: 1.0,
            weight: w,
            eps,
            max_inner_iters: 20000,
            max_time_secs: None,
            knobs: SubKnobs::default(),
        }
    }

    fn random_symsparse(rng: &mut ChaCha8Rng, n: usize, fill: f64) -> SymSparse {
        let mut t = Vec::new();
        for i in 0..n {
            for j in i..n {
                if rng.gen::<f64>() < fill {
                    t.push((i, j, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        if t.is_empty() {
            t.push((0, 0, 1.0));
        }
        SymSparse::new(n, t).unwrap()
    }

    /// max-cut style problem on the triangle graph K3.
    fn k3_maxcut() -> ConicProblem {
        let n = 3;
        // Laplacian of K3: 2 on diagonal, -1 off
        let mut lt = Vec::new();
        for i in 0..n {
            lt.push((i, i, -0.5)); // -L/4 diagonal
            for j in i + 1..n {
                lt.push((i, j, 0.25));
            }
        }
        let c = SymSparse::new(n, lt).unwrap();
        let mats = (0..n)
            .map(|i| SymSparse::new(n, [(i, i, 1.0)]).unwrap())
            .collect();
        ConicProblem::single_psd(n, mats, vec![1.0; n], c).unwrap()
    }

    #[test]
    fn feasible_point_gradient_is_objective_gradient() {
        // lam = 0, mu = 0, penalties vanish at a feasible point:
        // gradient reduces to 2 grad f(X) R
        let n = 3;
        let mats = vec![SymSparse::identity(n)];
        let c = SymSparse::new(n, [(0, 0, 1.0), (1, 1, 2.0), (0, 1, 0.3)]).unwrap();
        let prob = ConicProblem::single_psd(n, mats, vec![1.0], c.clone()).unwrap();
        // feasible: trace X = 1
        let r = RowMat::from_rows(vec![vec![1.0], vec![0.0], vec![0.0]]);
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(r.clone())],
        };
        let w = WeightOperator::identity(1);
        let p = identity_params(&[0.0], &[], &w, 1e-8);
        let (_, g) = subproblem_value_grad(&prob, &x, &p).unwrap();
        let want = {
            let mut m = c.mul_factor(&r);
            m.scale(2.0);
            m
        };
        match &g.blocks[0] {
            FactorBlock::Psd(gm) => {
                for (a, b) in gm.as_slice().iter().zip(want.as_slice()) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn trace_penalty_hand_value() {
        // single constraint <I,X> = 1, f = 0, W = I, beta1 = 1, lam = 0,
        // n = 2, R = [1;1] (r=1): trace X = 2, value = 0.5, gradient = 2R
        let n = 2;
        let mats = vec![SymSparse::identity(n)];
        let prob = ConicProblem::single_psd(n, mats, vec![1.0], SymSparse::zero(n)).unwrap();
        let r = RowMat::from_rows(vec![vec![1.0], vec![1.0]]);
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(r.clone())],
        };
        let w = WeightOperator::identity(1);
        let p = identity_params(&[0.0], &[], &w, 1e-8);
        let (val, g) = subproblem_value_grad(&prob, &x, &p).unwrap();
        assert!((val - 0.5).abs() < 1e-14);
        match &g.blocks[0] {
            FactorBlock::Psd(gm) => {
                for (a, b) in gm.as_slice().iter().zip(r.as_slice()) {
                    assert!((a - 2.0 * b).abs() < 1e-14);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_box_side_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 4;
        let m = 3;
        let pdim = 3;
        let amats: Vec<_> = (0..m).map(|_| random_symsparse(&mut rng, n, 0.5)).collect();
        let bmats: Vec<_> = (0..pdim).map(|_| random_symsparse(&mut rng, n, 0.5)).collect();
        let amap = LinearMap::new(n, amats).unwrap();
        let bmap = LinearMap::new(n, bmats).unwrap();
        let c = random_symsparse(&mut rng, n, 0.5);
        let set = ConvexSet::boxed(vec![-0.5; pdim], vec![0.5; pdim]).unwrap();
        let prob = ConicProblem::with_side(
            vec![BlockSpec::psd(n)],
            vec![amap],
            (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            Some(vec![bmap]),
            Some(set),
            Objective::Linear(vec![c]),
        )
        .unwrap();
        let lam: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..pdim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = WeightOperator::identity(m);
        let mut p = identity_params(&lam, &mu, &w, 1e-8);
        p.beta1 = 1.7;
        p.beta2 = 2.3;
        let x = FactorPoint::random(prob.blocks(), 2, &mut rng);
        let (_, g) = subproblem_value_grad(&prob, &x, &p).unwrap();
        // central differences on a few entries
        let gm = match &g.blocks[0] {
            FactorBlock::Psd(m) => m.clone(),
            _ => panic!(),
        };
        for (i, j) in [(0, 0), (1, 1), (2, 0), (3, 1)] {
            let h = 1e-6;
            let mut xp = x.clone();
            if let FactorBlock::Psd(m) = &mut xp.blocks[0] {
                m.set(i, j, m.get(i, j) + h);
            }
            let mut xm = x.clone();
            if let FactorBlock::Psd(m) = &mut xm.blocks[0] {
                m.set(i, j, m.get(i, j) - h);
            }
            let fp = subproblem_value(&prob, &xp, &p).unwrap();
            let fm = subproblem_value(&prob, &xm, &p).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let scale = 1.0 + fd.abs().max(gm.get(i, j).abs());
            assert!(
                (gm.get(i, j) - fd).abs() / scale < 1e-6,
                "entry ({i},{j}): {} vs {fd}",
                gm.get(i, j)
            );
        }
    }

    #[test]
    fn reduces_to_classical_alm_subproblem_with_identity_weight() {
        // term-by-term identity with the unweighted formula on random data
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..10 {
            let n = rng.gen_range(2..6);
            let m = rng.gen_range(1..5);
            let mats: Vec<_> = (0..m).map(|_| random_symsparse(&mut rng, n, 0.5)).collect();
            let c = random_symsparse(&mut rng, n, 0.5);
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let prob = ConicProblem::single_psd(n, mats, b.clone(), c.clone()).unwrap();
            let lam: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let beta = rng.gen_range(0.5..3.0);
            let w = WeightOperator::identity(m);
            let mut p = identity_params(&lam, &[], &w, 1e-8);
            p.beta1 = beta;
            let x = FactorPoint::random(prob.blocks(), 2, &mut rng);
            let (val, _) = subproblem_value_grad(&prob, &x, &p).unwrap();
            // direct classical formula
            let fx = c.quad_form(x.psd(0));
            let ra = prob.eq_residual(&x).unwrap();
            let want = fx - crate::linalg::vec_dot(&lam, &ra)
                + 0.5 * beta * crate::linalg::vec_dot(&ra, &ra);
            assert!((val - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn minimizes_convex_quadratic_over_free_block() {
        // f = 1/2 |x - c|^2, no constraints
        let dim = 5;
        let c: Vec<f64> = (0..dim).map(|i| i as f64 * 0.3 - 0.7).collect();
        let cc = c.clone();
        let cb: Arc<dyn Fn(&FactorPoint) -> crate::Result<(f64, Vec<GradBlock>)> + Send + Sync> =
            Arc::new(move |x: &FactorPoint| {
                let v = x.vec(0);
                let val = 0.5
                    * v.iter()
                        .zip(&cc)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                let g = v.iter().zip(&cc).map(|(a, b)| a - b).collect();
                Ok((val, vec![GradBlock::Vector(g)]))
            });
        let specs = vec![BlockSpec::free(dim)];
        let obj = Objective::checked_callback(cb, &specs, 7).unwrap();
        let map = LinearMap::new(dim, vec![]).unwrap();
        let prob = ConicProblem::new(specs, vec![map], vec![], obj).unwrap();
        let w = WeightOperator::identity(0);
        let p = identity_params(&[], &[], &w, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = FactorPoint::random(prob.blocks(), 1, &mut rng);
        let (x, status, stats) = minimize_subproblem(&prob, &x0, &p).unwrap();
        assert_eq!(status, SubStatus::Converged);
        assert!(stats.final_residual <= 1e-8);
        for (a, b) in x.vec(0).iter().zip(&c) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn k3_maxcut_penalized_subproblem_reaches_stationarity() {
        let prob = k3_maxcut();
        let m = 3;
        let w = WeightOperator::identity(m);
        let mut p = identity_params(&[0.0; 3], &[], &w, 1e-6);
        p.beta1 = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x0 = FactorPoint::random(prob.blocks(), 2, &mut rng);
        let (x, status, stats) = minimize_subproblem(&prob, &x0, &p).unwrap();
        assert_eq!(status, SubStatus::Converged, "stats: {stats:?}");
        let resid = check_stationarity(&prob, &x, &p).unwrap();
        assert!(resid <= 1e-6, "residual {resid}");
        // dense oracle: projected gradient on X >= 0 for the same penalized
        // objective g(X) = <-L/4, X> + 5 |diag(X) - 1|^2
        let val = subproblem_value(&prob, &x, &p).unwrap();
        let oracle = dense_penalized_oracle();
        assert!(
            (val - oracle).abs() <= 1e-5 * (1.0 + oracle.abs()),
            "{val} vs oracle {oracle}"
        );
    }

    /// Projected gradient on dense X for the K3 max-cut penalized problem.
    fn dense_penalized_oracle() -> f64 {
        let n = 3;
        let mut l = nalgebra::DMatrix::from_element(n, n, 0.25);
        for i in 0..n {
            l[(i, i)] = -0.5;
        }
        let gval = |x: &nalgebra::DMatrix<f64>| {
            let mut v = (l.clone() * x).trace();
            for i in 0..n {
                v += 5.0 * (x[(i, i)] - 1.0).powi(2);
            }
            v
        };
        let ggrad = |x: &nalgebra::DMatrix<f64>| {
            let mut g = l.clone();
            for i in 0..n {
                g[(i, i)] += 10.0 * (x[(i, i)] - 1.0);
            }
            g
        };
        let mut x = nalgebra::DMatrix::identity(n, n);
        let mut step = 0.1;
        for _ in 0..20000 {
            let g = ggrad(&x);
            let mut trial = &x - &g * step;
            // project onto PSD cone
            let eig = nalgebra::SymmetricEigen::new(trial.clone());
            let vals = eig.eigenvalues.map(|v| v.max(0.0));
            trial = &eig.eigenvectors
                * nalgebra::DMatrix::from_diagonal(&vals)
                * eig.eigenvectors.transpose();
            if gval(&trial) <= gval(&x) {
                x = trial;
                step *= 1.2;
            } else {
                step *= 0.5;
            }
            if step < 1e-16 {
                break;
            }
        }
        gval(&x)
    }

    #[test]
    fn dual_slack_matches_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 4;
        let m = 3;
        let mats: Vec<_> = (0..m).map(|_| random_symsparse(&mut rng, n, 0.5)).collect();
        let c = random_symsparse(&mut rng, n, 0.5);
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let prob = ConicProblem::single_psd(n, mats, b, c.clone()).unwrap();
        let lam: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = WeightOperator::identity(m);
        let mut p = identity_params(&lam, &[], &w, 1e-8);
        p.beta1 = 2.0;
        let x = FactorPoint::random(prob.blocks(), 2, &mut rng);
        let slack = dual_slack(&prob, &x, &p).unwrap();
        let SlackBlock::Psd(s) = &slack[0] else {
            panic!()
        };
        // dense: C - sum lam_hat_i A_i with lam_hat = lam - beta W (A(X)-b)
        let ra = prob.eq_residual(&x).unwrap();
        let lam_hat: Vec<f64> = lam.iter().zip(&ra).map(|(l, r)| l - 2.0 * r).collect();
        let mut dense = c.to_dense();
        for (a, &lh) in prob.a_maps()[0].mats().iter().zip(&lam_hat) {
            dense -= a.to_dense() * lh;
        }
        let got = s.to_dense();
        for i in 0..n {
            for j in 0..n {
                assert!((got[(i, j)] - dense[(i, j)]).abs() < 1e-12);
            }
        }
        // linear f with no constraints: S = C
        let prob0 = ConicProblem::single_psd(n, vec![], vec![], c.clone()).unwrap();
        let w0 = WeightOperator::identity(0);
        let p0 = identity_params(&[], &[], &w0, 1e-8);
        let slack0 = dual_slack(&prob0, &x, &p0).unwrap();
        let SlackBlock::Psd(s0) = &slack0[0] else {
            panic!()
        };
        assert_eq!(s0.to_dense(), c.to_dense());
    }

    #[test]
    fn stationary_point_has_small_slack_times_factor() {
        let prob = k3_maxcut();
        let w = WeightOperator::identity(3);
        let mut p = identity_params(&[0.0; 3], &[], &w, 1e-8);
        p.beta1 = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let x0 = FactorPoint::random(prob.blocks(), 2, &mut rng);
        let (x, _, _) = minimize_subproblem(&prob, &x0, &p).unwrap();
        let slack = dual_slack(&prob, &x, &p).unwrap();
        let SlackBlock::Psd(s) = &slack[0] else {
            panic!()
        };
        let sr = s.mul_factor(x.psd(0));
        assert!(sr.norm() <= 1e-8 * (1.0 + x.psd(0).norm()));
    }

    #[test]
    fn escape_from_constructed_saddle() {
        // K3 max-cut at r=1: R = ones is a saddle of the penalized problem
        let prob = k3_maxcut();
        let w = WeightOperator::identity(3);
        let mut p = identity_params(&[0.0; 3], &[], &w, 1e-6);
        p.beta1 = 10.0;
        let r = RowMat::from_rows(vec![vec![1.0], vec![1.0], vec![1.0]]);
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(r)],
        };
        let slack = dual_slack(&prob, &x, &p).unwrap();
        let base = subproblem_value(&prob, &x, &p).unwrap();
        let escaped = escape_rank(&prob, &x, &slack, 1, &p).unwrap();
        let xe = escaped.expect("saddle should admit an escape");
        assert_eq!(xe.rank(0), 2);
        let ve = subproblem_value(&prob, &xe, &p).unwrap();
        assert!(ve < base - 1e-12);
    }

    #[test]
    fn no_escape_when_slack_is_psd() {
        let n = 3;
        let prob =
            ConicProblem::single_psd(n, vec![], vec![], SymSparse::identity(n)).unwrap();
        let w = WeightOperator::identity(0);
        let p = identity_params(&[], &[], &w, 1e-8);
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(RowMat::zeros(n, 1))],
        };
        let slack = dual_slack(&prob, &x, &p).unwrap();
        // S = I is PSD
        assert!(escape_rank(&prob, &x, &slack, 1, &p).unwrap().is_none());
        // and the escape example from the contract: S = diag(1, -1), R = e1
        let s = SymSparse::new(2, [(0, 0, 1.0), (1, 1, -1.0)]).unwrap();
        let (_, escapers) = negative_part(&s, &p.knobs, true);
        assert_eq!(escapers.len(), 1);
        assert!(escapers[0].vector[1].abs() > 0.999);
    }

    #[test]
    fn stationarity_residual_dominated_by_negative_eigenvalue() {
        // full-rank factor, zero gradient, S with a -1 eigenvalue:
        // the residual must be at least 1
        let n = 2;
        // f(X) = <diag(1,-1), X>, no constraints; S = diag(1,-1) everywhere
        let c = SymSparse::new(n, [(0, 0, 1.0), (1, 1, -1.0)]).unwrap();
        let prob = ConicProblem::single_psd(n, vec![], vec![], c).unwrap();
        let w = WeightOperator::identity(0);
        let p = identity_params(&[], &[], &w, 1e-8);
        // gradient 2 S R = 0 forces rows of R into the kernel-ish: take R = 0
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(RowMat::zeros(n, n))],
        };
        let resid = check_stationarity(&prob, &x, &p).unwrap();
        assert!(resid >= 1.0);
    }

    #[test]
    fn monotone_descent_along_accepted_steps() {
        let prob = k3_maxcut();
        let w = WeightOperator::identity(3);
        let mut p = identity_params(&[0.0; 3], &[], &w, 1e-10);
        p.beta1 = 5.0;
        p.max_inner_iters = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut x = FactorPoint::random(prob.blocks(), 2, &mut rng);
        // run the solver step by step via fixed_iters=1 and track values
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let mut p1 = p.clone();
            p1.knobs.fixed_iters = Some(1);
            let (xn, _, stats) = minimize_subproblem(&prob, &x, &p1).unwrap();
            assert!(
                stats.final_value <= last + 1e-12,
                "value increased: {} -> {}",
                last,
                stats.final_value
            );
            last = stats.final_value;
            x = xn;
        }
    }
}
