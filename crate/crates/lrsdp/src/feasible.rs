//! Riemannian feasible first stage and the two-stage driver.
//!
//! On problems whose every block is a PSD matrix, the first stage runs
//! Riemannian gradient descent on the constraint manifold
//! `{R : A(R R^T) = b}`: the gradient is projected onto the tangent space by
//! solving the Gram system `M_R lam = d` with diagonally preconditioned CG,
//! and points are pulled back onto the manifold by a Gauss-Newton retraction.
//! Side constraints are handled by wrapping the stage in an outer augmented
//! Lagrangian loop on `B`.
//!
//! The stage hands over to the preconditioned ALM when any of its trouble
//! signs fire: PCG failing its iteration cap (attributed to fill when the
//! symbolic factor is too large to build, to degeneracy otherwise), the
//! retraction failing to converge, or a dual-feasibility stall at a
//! stationary point.

use crate::error::Result;
use crate::factor::{FactorBlock, FactorPoint};
use crate::linalg::{vec_dot, vec_norm, FactorProducts, LinearMap, RowMat, SymSparse};
use crate::palm::{
    self, IterRecord, KktResiduals, Multipliers, RunHistory, Schedules, SolveOptions, SolveStatus,
    StageKind, StagePolicy, SwitchEvent, SwitchReason,
};
use crate::precond::{estimate_fill, WeightOperator};
use crate::problem::{moreau_value_grad, BlockKind, ConicProblem};
use crate::subproblem::slack_at_multipliers;
use std::time::Instant;

/// Preconditioner used inside a PCG call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcgPrecondKind {
    None,
    Diagonal,
    Cholesky,
}

pub enum PcgPrecond<'a> {
    None,
    Diagonal(&'a [f64]),
    Cholesky(&'a WeightOperator),
}

impl PcgPrecond<'_> {
    fn kind(&self) -> PcgPrecondKind {
        match self {
            PcgPrecond::None => PcgPrecondKind::None,
            PcgPrecond::Diagonal(_) => PcgPrecondKind::Diagonal,
            PcgPrecond::Cholesky(_) => PcgPrecondKind::Cholesky,
        }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            PcgPrecond::None => r.to_vec(),
            PcgPrecond::Diagonal(d) => r
                .iter()
                .zip(d.iter())
                .map(|(&ri, &di)| if di > 0.0 { ri / di } else { ri })
                .collect(),
            PcgPrecond::Cholesky(w) => w.apply(r),
        }
    }
}

/// Outcome of one tangent-space linear solve.
#[derive(Clone, Copy, Debug)]
pub struct TangentSolveStats {
    pub pcg_iters: usize,
    pub converged: bool,
    pub preconditioner_kind: PcgPrecondKind,
    /// `p^T M p <= 0` was observed: the Gram operator is numerically
    /// indefinite (LICQ failure).
    pub degenerate: bool,
}

/// Preconditioned conjugate gradients on a symmetric PSD operator.
pub fn pcg_solve(
    op: &dyn Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    precond: PcgPrecond,
    maxit: usize,
    tol: f64,
) -> (Vec<f64>, TangentSolveStats) {
    let n = rhs.len();
    let mut stats = TangentSolveStats {
        pcg_iters: 0,
        converged: false,
        preconditioner_kind: precond.kind(),
        degenerate: false,
    };
    let rhs_norm = vec_norm(rhs);
    let mut x = vec![0.0; n];
    if rhs_norm == 0.0 {
        stats.converged = true;
        return (x, stats);
    }
    let mut r = rhs.to_vec();
    let mut z = precond.apply(&r);
    let mut p = z.clone();
    let mut rz = vec_dot(&r, &z);
    for _ in 0..maxit {
        let mp = op(&p);
        let pmp = vec_dot(&p, &mp);
        if pmp <= 0.0 || !pmp.is_finite() {
            stats.degenerate = true;
            return (x, stats);
        }
        let alpha = rz / pmp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * mp[i];
        }
        stats.pcg_iters += 1;
        if vec_norm(&r) <= tol * rhs_norm {
            stats.converged = true;
            return (x, stats);
        }
        z = precond.apply(&r);
        let rz_new = vec_dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, stats)
}

/// Cached per-iterate data for the manifold machinery of one PSD block set.
struct GramContext<'a> {
    maps: Vec<&'a LinearMap>,
    products: Vec<FactorProducts>,
    diag: Vec<f64>,
}

impl<'a> GramContext<'a> {
    fn build(maps: Vec<&'a LinearMap>, factors: &[&RowMat]) -> Result<Self> {
        let m = maps[0].len();
        let mut products = Vec::with_capacity(maps.len());
        for (map, r) in maps.iter().zip(factors) {
            products.push(map.factor_products(r)?);
        }
        let mut diag = vec![0.0; m];
        for prods in &products {
            for (i, u) in prods.per_mat.iter().enumerate() {
                diag[i] += u.vals.dot(&u.vals);
            }
        }
        Ok(GramContext {
            maps,
            products,
            diag,
        })
    }

    /// v -> M_R v via the cached factor products.
    fn matvec(&self, factors: &[&RowMat], lam: &[f64]) -> Vec<f64> {
        let m = self.diag.len();
        let mut out = vec![0.0; m];
        for ((map, prods), r) in self.maps.iter().zip(&self.products).zip(factors) {
            let v = map
                .adjoint_times_factor(lam, r)
                .expect("dims checked at build");
            for (i, u) in prods.per_mat.iter().enumerate() {
                let mut s = 0.0;
                for (li, &row) in u.rows.iter().enumerate() {
                    s += vec_dot(u.vals.row(li), v.row(row as usize));
                }
                out[i] += s;
            }
        }
        out
    }

    /// d_i = sum_k <A_i^k R_k, G_k>.
    fn rhs(&self, dirs: &[&RowMat]) -> Vec<f64> {
        let m = self.diag.len();
        let mut out = vec![0.0; m];
        for (prods, g) in self.products.iter().zip(dirs) {
            for (i, u) in prods.per_mat.iter().enumerate() {
                let mut s = 0.0;
                for (li, &row) in u.rows.iter().enumerate() {
                    s += vec_dot(u.vals.row(li), g.row(row as usize));
                }
                out[i] += s;
            }
        }
        out
    }
}

/// Orthogonal projection of `g` onto the tangent space at `r`:
/// `H = G - A*(lam) R` with `M_R lam = [<A_i R, G>]`, solved by PCG.
pub fn tangent_project(
    map: &LinearMap,
    r: &RowMat,
    g: &RowMat,
    pcg_max_iters: usize,
) -> Result<(RowMat, Vec<f64>, TangentSolveStats)> {
    let ctx = GramContext::build(vec![map], &[r])?;
    let d = ctx.rhs(&[g]);
    let factors = [r];
    let op = |lam: &[f64]| ctx.matvec(&factors, lam);
    let (lam, stats) = pcg_solve(
        &op,
        &d,
        PcgPrecond::Diagonal(&ctx.diag),
        pcg_max_iters,
        1e-10,
    );
    let mut h = g.clone();
    let alr = map.adjoint_times_factor(&lam, r)?;
    h.axpy(-1.0, &alr);
    Ok((h, lam, stats))
}

/// Gauss-Newton pullback onto `A(Y Y^T) = b` from `Y0 = R + t H`.
///
/// Each step solves `2 M_Y nu = -c(Y)` and moves along `A*(nu) Y`. Returns
/// the final point, whether feasibility reached `1e-10 (1 + |b|)`, and the
/// accumulated PCG statistics (worst case over steps).
pub fn retract(
    map: &LinearMap,
    b: &[f64],
    r: &RowMat,
    h: &RowMat,
    t: f64,
    gn_max_iters: usize,
    pcg_max_iters: usize,
) -> Result<(RowMat, bool, TangentSolveStats)> {
    let mut y = r.clone();
    y.axpy(t, h);
    gauss_newton_feasify(map, b, y, gn_max_iters, pcg_max_iters)
}

pub fn gauss_newton_feasify(
    map: &LinearMap,
    b: &[f64],
    mut y: RowMat,
    gn_max_iters: usize,
    pcg_max_iters: usize,
) -> Result<(RowMat, bool, TangentSolveStats)> {
    let tol = 1e-10 * (1.0 + vec_norm(b));
    let mut agg = TangentSolveStats {
        pcg_iters: 0,
        converged: true,
        preconditioner_kind: PcgPrecondKind::Diagonal,
        degenerate: false,
    };
    for _ in 0..gn_max_iters {
        let c: Vec<f64> = map
            .apply_factor(&y)?
            .iter()
            .zip(b)
            .map(|(a, bb)| a - bb)
            .collect();
        if vec_norm(&c) <= tol {
            return Ok((y, true, agg));
        }
        let ctx = GramContext::build(vec![map], &[&y])?;
        let rhs: Vec<f64> = c.iter().map(|v| -0.5 * v).collect();
        let factors = [&y];
        let op = |lam: &[f64]| ctx.matvec(&factors, lam);
        let (nu, stats) = pcg_solve(
            &op,
            &rhs,
            PcgPrecond::Diagonal(&ctx.diag),
            pcg_max_iters,
            1e-10,
        );
        agg.pcg_iters += stats.pcg_iters;
        agg.degenerate |= stats.degenerate;
        if stats.degenerate || !stats.converged {
            agg.converged = false;
            return Ok((y, false, agg));
        }
        let step = map.adjoint_times_factor(&nu, &y)?;
        y.axpy(1.0, &step);
        if !y.as_slice().iter().all(|v| v.is_finite()) {
            return Ok((y, false, agg));
        }
    }
    let c: Vec<f64> = map
        .apply_factor(&y)?
        .iter()
        .zip(b)
        .map(|(a, bb)| a - bb)
        .collect();
    Ok((vec_norm(&c) <= tol).then(|| y.clone()).map_or((y.clone(), false, agg), |yy| (yy, true, agg)))
}

/// Trouble signals of the feasible stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeasibleEvent {
    PcgFailure,
    RetractionFailure,
    DualStall,
}

/// Deterministic mapping from trouble signals to a switch reason. PCG
/// failures are attributed to fill when the symbolic Cholesky factor of the
/// Gram pattern is too large to build, and to degeneracy otherwise.
pub fn switch_decision(fill_exceeds_threshold: bool, event: FeasibleEvent) -> SwitchReason {
    match event {
        FeasibleEvent::PcgFailure => {
            if fill_exceeds_threshold {
                SwitchReason::FillTooLarge
            } else {
                SwitchReason::Degenerate
            }
        }
        FeasibleEvent::RetractionFailure => SwitchReason::RetractionFailed,
        FeasibleEvent::DualStall => SwitchReason::Degenerate,
    }
}

/// Stage bookkeeping for one feasible run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageState {
    pub stage: StageKind,
    pub switch_reason: SwitchReason,
}

enum StageOutcome {
    Converged {
        point: FactorPoint,
        mult: Multipliers,
        kkt: KktResiduals,
    },
    /// Inner target reached for the wrapped side-constraint loop.
    InnerDone {
        point: FactorPoint,
        lam: Vec<f64>,
    },
    Switch {
        point: FactorPoint,
        lam: Vec<f64>,
        reason: SwitchReason,
    },
    Budget {
        point: FactorPoint,
        lam: Vec<f64>,
    },
}

struct StageCounters {
    pcg_iters: usize,
    stage_iters: usize,
    trace: Vec<IterRecord>,
}

/// All blocks PSD: the manifold machinery applies.
fn manifold_applicable(prob: &ConicProblem) -> bool {
    prob.num_constraints() > 0
        && prob
            .blocks()
            .iter()
            .all(|b| b.kind == BlockKind::PsdMatrix)
        && prob.blocks().len() == 1
}

/// Objective of the stage: f plus, when side constraints are wrapped, the
/// Moreau penalty at the current (mu, beta2). Returns value and the X-space
/// coefficient vector nu so gradients can be assembled per block.
fn stage_value(
    prob: &ConicProblem,
    x: &FactorPoint,
    mu: &[f64],
    beta2: f64,
) -> Result<(f64, Vec<f64>)> {
    let (mut val, _) = prob.objective().eval(x)?;
    let mut nu = Vec::new();
    if let Some(set) = prob.side_set() {
        let bx = prob.apply_b(x)?;
        let (mval, mgrad) = moreau_value_grad(set, &bx, mu, beta2);
        val += mval;
        nu = mgrad;
    }
    Ok((val, nu))
}

/// Euclidean factor gradient of the stage objective: `2 (grad f + B*(nu)) R`.
fn stage_grad(prob: &ConicProblem, x: &FactorPoint, nu: &[f64]) -> Result<RowMat> {
    let r = x.psd(0);
    let (_, fgrads) = prob.objective().eval(x)?;
    let mut g = fgrads[0].times_factor(r);
    if let Some(bmaps) = prob.b_maps() {
        let blr = bmaps[0].adjoint_times_factor(nu, r)?;
        g.axpy(1.0, &blr);
    }
    g.scale(2.0);
    Ok(g)
}

/// Dual slack of the stage at multiplier estimate `lam` (and outer `mu`).
fn stage_slack(prob: &ConicProblem, x: &FactorPoint, lam: &[f64], nu: &[f64]) -> Result<SymSparse> {
    let (_, fgrads) = prob.objective().eval(x)?;
    let mut s = fgrads[0].to_symsparse();
    let al = prob.a_maps()[0].adjoint_matrix(lam)?;
    s = s.add_scaled(-1.0, &al);
    if let Some(bmaps) = prob.b_maps() {
        let bl = bmaps[0].adjoint_matrix(nu)?;
        s = s.add_scaled(1.0, &bl);
    }
    Ok(s)
}

/// Run the feasible stage until KKT convergence, an inner target (wrapped
/// mode), a switch trigger, or budget exhaustion.
#[allow(clippy::too_many_arguments)]
fn feasible_stage(
    prob: &ConicProblem,
    opts: &SolveOptions,
    start: &Instant,
    x0: FactorPoint,
    mu: &[f64],
    beta2: f64,
    inner_target: Option<f64>,
    fill_exceeds: bool,
    counters: &mut StageCounters,
    budget: usize,
) -> Result<StageOutcome> {
    let map = &prob.a_maps()[0];
    let b = prob.b();
    let mut x = x0;
    let mut lam_mult = vec![0.0; prob.num_constraints()];
    let mut theta = inner_target.unwrap_or(1e-3_f64.max(opts.tol));
    let theta_floor = inner_target.unwrap_or(0.05 * opts.tol);
    let mut consecutive_escapes = 0usize;

    loop {
        if counters.pcg_iters >= budget
            || start.elapsed().as_secs_f64() > opts.max_time_secs
        {
            return Ok(StageOutcome::Budget { point: x, lam: lam_mult });
        }
        let (fval, nu) = stage_value(prob, &x, mu, beta2)?;
        let g = stage_grad(prob, &x, &nu)?;
        let r = x.psd(0).clone();
        let (h, lam_raw, stats) = tangent_project(map, &r, &g, opts.pcg_max_iters)?;
        counters.pcg_iters += stats.pcg_iters.max(1);
        counters.stage_iters += 1;
        if stats.degenerate || !stats.converged {
            let reason = switch_decision(fill_exceeds, FeasibleEvent::PcgFailure);
            return Ok(StageOutcome::Switch {
                point: x,
                lam: lam_mult,
                reason,
            });
        }
        // the factor gradient is 2 grad_f R, so the normal component solves
        // for twice the Lagrange multiplier
        lam_mult = lam_raw.iter().map(|v| 0.5 * v).collect();

        let gscale = 1.0 + g.norm();
        if h.norm() <= theta * gscale {
            // stationary on the manifold at this resolution: certify
            let mult = Multipliers {
                lam: lam_mult.clone(),
                mu: mu.to_vec(),
            };
            let kkt = palm::kkt_residuals(prob, &x, &mult, beta2)?;
            record_stage_iter(counters, prob, &x, &kkt, fval, opts, theta, beta2)?;
            if inner_target.is_none() && kkt.max_kkt <= opts.tol {
                return Ok(StageOutcome::Converged {
                    point: x,
                    mult,
                    kkt,
                });
            }
            // saddle escape: append the most negative eigendirection and
            // pull back onto the manifold
            let s = stage_slack(prob, &x, &lam_mult, &nu)?;
            let mode = crate::linalg::EigMode::auto(s.dim(), opts.knobs.dense_eig_threshold);
            let esc_tol = opts.knobs.escape_tol * (1.0 + s.frob_norm());
            let (pairs, _) = crate::linalg::neg_eigs(&s, mode, esc_tol, 4);
            let n = r.nrows();
            if !pairs.is_empty() && r.ncols() < n && consecutive_escapes < 8 {
                let k_add = (1usize << consecutive_escapes.min(3))
                    .min(pairs.len())
                    .min(n - r.ncols());
                let mut escaped = false;
                let mut delta = 1.0;
                for _ in 0..40 {
                    let cand =
                        r.with_appended_cols(k_add, |row, c| delta * pairs[c].vector[row]);
                    let (y, ok, st) =
                        gauss_newton_feasify(map, b, cand, opts.gn_max_iters, opts.pcg_max_iters)?;
                    counters.pcg_iters += st.pcg_iters;
                    if ok {
                        let mut xe = x.clone();
                        xe.blocks[0] = FactorBlock::Psd(y);
                        let (ve, _) = stage_value(prob, &xe, mu, beta2)?;
                        if ve < fval - 1e-12 {
                            x = xe;
                            escaped = true;
                            break;
                        }
                    }
                    delta *= 0.5;
                }
                if escaped {
                    consecutive_escapes += 1;
                    continue;
                }
            }
            if inner_target.is_some() {
                return Ok(StageOutcome::InnerDone {
                    point: x,
                    lam: lam_mult,
                });
            }
            if theta > theta_floor {
                theta = (theta * 0.25).max(theta_floor);
                continue;
            }
            // stationary, certified infeasible in the dual, nothing to
            // escape: the instance is degenerate for the feasible method
            return Ok(StageOutcome::Switch {
                point: x,
                lam: lam_mult,
                reason: switch_decision(fill_exceeds, FeasibleEvent::DualStall),
            });
        }

        consecutive_escapes = 0;
        // Armijo backtracking on the retracted step; a retraction that does
        // not converge is an immediate switch trigger
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..30 {
            let (y, ok, st) = retract(map, b, &r, &h, -t, opts.gn_max_iters, opts.pcg_max_iters)?;
            counters.pcg_iters += st.pcg_iters;
            if st.degenerate || (!ok && !st.converged) {
                let reason = switch_decision(fill_exceeds, FeasibleEvent::PcgFailure);
                return Ok(StageOutcome::Switch {
                    point: x,
                    lam: lam_mult,
                    reason,
                });
            }
            if !ok {
                return Ok(StageOutcome::Switch {
                    point: x,
                    lam: lam_mult,
                    reason: switch_decision(fill_exceeds, FeasibleEvent::RetractionFailure),
                });
            }
            let mut xt = x.clone();
            xt.blocks[0] = FactorBlock::Psd(y);
            let (vt, _) = stage_value(prob, &xt, mu, beta2)?;
            if vt <= fval - 1e-4 * t * h.dot(&h) {
                x = xt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // numerically flat: treat like a stationarity event next loop
            theta = theta.max(h.norm() / gscale * 1.001);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn record_stage_iter(
    counters: &mut StageCounters,
    _prob: &ConicProblem,
    x: &FactorPoint,
    kkt: &KktResiduals,
    fval: f64,
    opts: &SolveOptions,
    eps: f64,
    beta2: f64,
) -> Result<()> {
    counters.trace.push(IterRecord {
        iter: counters.stage_iters,
        stage: StageKind::Feasible,
        fval,
        pfeas: kkt.pfeas,
        dfeas: kkt.dfeas,
        comp: kkt.comp,
        max_kkt: kkt.max_kkt,
        inner_iters: 0,
        beta1: 0.0,
        beta2,
        eps,
        dual_identity_gap: 0.0,
        min_pivot: 1.0,
        max_rank: palm::max_psd_rank(x),
    });
    if opts.verbose {
        eprintln!(
            "feas it {:3}  fval {:+.8e}  pfeas {:.2e}  dfeas {:.2e}  comp {:.2e}  rank {}",
            counters.stage_iters,
            fval,
            kkt.pfeas,
            kkt.dfeas,
            kkt.comp,
            palm::max_psd_rank(x)
        );
    }
    Ok(())
}

/// Two-stage solve: feasible method first, preconditioned ALM on any switch
/// trigger (or directly, when the manifold machinery does not apply).
pub fn sdpfplus_solve(prob: &ConicProblem, opts: &SolveOptions) -> Result<RunHistory> {
    let mut prob = prob.clone();
    if opts.perturb_b {
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(opts.seed ^ 0x9e37);
        let scale = 1e-10 * (1.0 + vec_norm(prob.b()));
        let b: Vec<f64> = prob
            .b()
            .iter()
            .map(|v| v + scale * crate::factor::standard_normal_pub(&mut rng))
            .collect();
        prob = prob.with_b(b)?;
    }
    match opts.stage {
        StagePolicy::PalmOnly => return palm::solve(&prob, opts),
        StagePolicy::Auto | StagePolicy::FeasibleOnly => {}
    }
    if !manifold_applicable(&prob) {
        // vector or multiple blocks: the simplified stage does not model
        // their manifold; hand the problem to PALM directly
        if opts.stage == StagePolicy::FeasibleOnly {
            return Err(crate::error::Error::InvalidInput(
                "feasible-only stage needs a single PSD block with equality constraints".into(),
            ));
        }
        return palm::solve(&prob, opts);
    }

    let start = Instant::now();
    let map = &prob.a_maps()[0];
    let fill_exceeds =
        estimate_fill(&map.gram_pattern()).predicted_factor_nnz > opts.precond_cfg.fill_threshold;
    let mut counters = StageCounters {
        pcg_iters: 0,
        stage_iters: 0,
        trace: Vec::new(),
    };
    let mut events: Vec<SwitchEvent> = Vec::new();

    // initial feasible point by Gauss-Newton from the seeded random start
    let x0 = palm::initial_point(&prob, opts);
    let (y0, found, st0) = gauss_newton_feasify(
        map,
        prob.b(),
        x0.psd(0).clone(),
        100,
        opts.pcg_max_iters,
    )?;
    counters.pcg_iters += st0.pcg_iters;
    let stage_start = if found {
        let mut x = x0.clone();
        x.blocks[0] = FactorBlock::Psd(y0);
        Some(x)
    } else {
        None
    };

    let outcome = match stage_start {
        None => {
            let reason = if st0.degenerate || !st0.converged {
                switch_decision(fill_exceeds, FeasibleEvent::PcgFailure)
            } else {
                switch_decision(fill_exceeds, FeasibleEvent::RetractionFailure)
            };
            StageOutcome::Switch {
                point: x0,
                lam: vec![0.0; prob.num_constraints()],
                reason,
            }
        }
        Some(xf) => {
            if prob.has_side() {
                wrapped_stage(&prob, opts, &start, xf, fill_exceeds, &mut counters)?
            } else {
                feasible_stage(
                    &prob,
                    opts,
                    &start,
                    xf,
                    &[],
                    1.0,
                    None,
                    fill_exceeds,
                    &mut counters,
                    opts.max_iters,
                )?
            }
        }
    };

    match outcome {
        StageOutcome::Converged { point, mult, kkt } => {
            let (fval, _) = prob.objective().eval(&point)?;
            let dfval = if prob.objective().is_linear() && !prob.has_side() {
                Some(vec_dot(&mult.lam, prob.b()))
            } else {
                None
            };
            let final_slack = slack_at_multipliers(&prob, &point, &mult.lam, &mult.mu)?;
            Ok(RunHistory {
                fval,
                dfval,
                iter: counters.stage_iters,
                ttime: start.elapsed().as_secs_f64(),
                trace: counters.trace,
                num_chol: 0,
                num_cg_iter: counters.pcg_iters,
                switch_events: events,
                singular: false,
                status: SolveStatus::Converged,
                kkt,
                final_point: point,
                final_multipliers: mult,
                final_slack,
                min_pivot: 1.0,
                iterate_trace: None,
            })
        }
        StageOutcome::InnerDone { .. } => unreachable!("inner mode is handled by wrapped_stage"),
        StageOutcome::Budget { point, lam } => {
            let mult = Multipliers {
                lam,
                mu: vec![0.0; prob.side_dim()],
            };
            if opts.stage == StagePolicy::FeasibleOnly {
                return finish_stalled(&prob, &start, point, mult, counters, events);
            }
            // out of budget without a switch trigger: report as exhausted
            finish_stalled(&prob, &start, point, mult, counters, events)
        }
        StageOutcome::Switch { point, lam, reason } => {
            events.push(SwitchEvent {
                at_iter: counters.stage_iters,
                reason,
            });
            let singular = reason == SwitchReason::Degenerate;
            if opts.stage == StagePolicy::FeasibleOnly {
                let mult = Multipliers {
                    lam,
                    mu: vec![0.0; prob.side_dim()],
                };
                let mut hist = finish_stalled(&prob, &start, point, mult, counters, events)?;
                hist.status = SolveStatus::Stalled;
                hist.singular = singular;
                return Ok(hist);
            }
            let warm = Multipliers {
                lam,
                mu: vec![0.0; prob.side_dim()],
            };
            let sched = Schedules::new(opts.eps0, palm::initial_beta(&prob), opts.tol);
            let mut hist = palm::solve_from(
                &prob,
                opts,
                point,
                Some((warm, sched)),
                StageKind::Palm,
                &mut events,
                counters.stage_iters,
                counters.pcg_iters,
            )?;
            let mut trace = counters.trace;
            trace.extend(hist.trace);
            hist.trace = trace;
            hist.singular = singular;
            Ok(hist)
        }
    }
}

/// Outer augmented Lagrangian on the side constraints, each subproblem
/// solved by the feasible stage.
fn wrapped_stage(
    prob: &ConicProblem,
    opts: &SolveOptions,
    start: &Instant,
    x0: FactorPoint,
    fill_exceeds: bool,
    counters: &mut StageCounters,
) -> Result<StageOutcome> {
    let mut x = x0;
    let p = prob.side_dim();
    let mut mu = vec![0.0; p];
    let mut sched = Schedules::new(opts.eps0, palm::initial_beta(prob), opts.tol);
    let mut lam_last = vec![0.0; prob.num_constraints()];

    loop {
        if counters.pcg_iters >= opts.max_iters
            || start.elapsed().as_secs_f64() > opts.max_time_secs
        {
            return Ok(StageOutcome::Budget { point: x, lam: lam_last });
        }
        let outcome = feasible_stage(
            prob,
            opts,
            start,
            x,
            &mu,
            sched.beta2,
            Some(sched.eps),
            fill_exceeds,
            counters,
            opts.max_iters,
        )?;
        let (point, lam) = match outcome {
            StageOutcome::InnerDone { point, lam } => (point, lam),
            StageOutcome::Switch { point, lam, reason } => {
                return Ok(StageOutcome::Switch { point, lam, reason })
            }
            StageOutcome::Budget { point, lam } => {
                return Ok(StageOutcome::Budget { point, lam })
            }
            StageOutcome::Converged { .. } => unreachable!("inner mode never certifies alone"),
        };
        x = point;
        lam_last = lam;

        // mu update at the new iterate
        let bx = prob.apply_b(&x)?;
        let w: Vec<f64> = bx
            .iter()
            .zip(&mu)
            .map(|(&v, &m)| v - m / sched.beta2)
            .collect();
        let y = prob.side_set().unwrap().project(&w);
        mu = y
            .iter()
            .zip(&w)
            .map(|(&yi, &wi)| sched.beta2 * (yi - wi))
            .collect();

        let mult = Multipliers {
            lam: lam_last.clone(),
            mu: mu.clone(),
        };
        let kkt = palm::kkt_residuals(prob, &x, &mult, sched.beta2)?;
        if kkt.max_kkt <= opts.tol {
            return Ok(StageOutcome::Converged {
                point: x,
                mult,
                kkt,
            });
        }
        let dev: f64 = bx
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        sched.update(0.0, dev);
    }
}

fn finish_stalled(
    prob: &ConicProblem,
    start: &Instant,
    point: FactorPoint,
    mult: Multipliers,
    counters: StageCounters,
    events: Vec<SwitchEvent>,
) -> Result<RunHistory> {
    let (fval, _) = prob.objective().eval(&point)?;
    let kkt = palm::kkt_residuals(prob, &point, &mult, 1.0)?;
    let final_slack = slack_at_multipliers(prob, &point, &mult.lam, &mult.mu)?;
    Ok(RunHistory {
        fval,
        dfval: None,
        iter: counters.stage_iters,
        ttime: start.elapsed().as_secs_f64(),
        trace: counters.trace,
        num_chol: 0,
        num_cg_iter: counters.pcg_iters,
        switch_events: events,
        singular: false,
        status: SolveStatus::BudgetExhausted,
        kkt,
        final_point: point,
        final_multipliers: mult,
        final_slack,
        min_pivot: 1.0,
        iterate_trace: None,
    })
}

/// Top-level entry: dispatch on the stage policy.
pub fn solve(prob: &ConicProblem, opts: &SolveOptions) -> Result<RunHistory> {
    match opts.stage {
        StagePolicy::PalmOnly => palm::solve(prob, opts),
        _ => sdpfplus_solve(prob, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{gen_maxcut, gen_theta, Graph, ThetaVariant};
    use crate::oracle;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_rowmat(rng: &mut ChaCha8Rng, n: usize, r: usize) -> RowMat {
        RowMat::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_map(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LinearMap {
        let mats = (0..m)
            .map(|_| {
                let mut tr = Vec::new();
                for i in 0..n {
                    for j in i..n {
                        if rng.gen::<f64>() < 0.5 {
                            tr.push((i, j, rng.gen_range(-1.0..1.0)));
                        }
                    }
                }
                if tr.is_empty() {
                    tr.push((0, 0, 1.0));
                }
                SymSparse::new(n, tr).unwrap()
            })
            .collect();
        LinearMap::new(n, mats).unwrap()
    }

    /// A(R H^T + H R^T) as a vector, the tangency defect.
    fn tangency_defect(map: &LinearMap, r: &RowMat, h: &RowMat) -> f64 {
        let mut out = vec![0.0; map.len()];
        for (i, a) in map.mats().iter().enumerate() {
            let ar = a.mul_factor(r);
            out[i] = 2.0 * ar.dot(h);
        }
        vec_norm(&out)
    }

    #[test]
    fn project_tangent_vector_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let map = random_map(&mut rng, 6, 4);
        let r = random_rowmat(&mut rng, 6, 3);
        let g = random_rowmat(&mut rng, 6, 3);
        let (h, _, st) = tangent_project(&map, &r, &g, 200).unwrap();
        assert!(st.converged);
        // projecting an already-tangent vector changes nothing
        let (h2, _, _) = tangent_project(&map, &r, &h, 200).unwrap();
        let mut diff = h2.clone();
        diff.axpy(-1.0, &h);
        assert!(diff.norm() <= 1e-10 * (1.0 + h.norm()), "{}", diff.norm());
    }

    #[test]
    fn project_trace_constraint_by_hand() {
        // single constraint <I, X> = 1, R = e1, G = e1:
        // H = G - (<G,R>/<R,R>) R = 0
        let map = LinearMap::new(3, vec![SymSparse::identity(3)]).unwrap();
        let r = RowMat::from_rows(vec![vec![1.0], vec![0.0], vec![0.0]]);
        let (h, _, _) = tangent_project(&map, &r, &r, 20).unwrap();
        assert!(h.norm() < 1e-12);
    }

    #[test]
    fn projection_matches_dense_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (n, m, rk) = (6, 4, 2);
        let map = random_map(&mut rng, n, m);
        let r = random_rowmat(&mut rng, n, rk);
        let g = random_rowmat(&mut rng, n, rk);
        let (h, _, st) = tangent_project(&map, &r, &g, 500).unwrap();
        assert!(st.converged);
        assert!(tangency_defect(&map, &r, &h) <= 1e-9);
        // dense solve: M lam = d
        let rd = r.to_dmatrix();
        let us: Vec<_> = map.mats().iter().map(|a| a.to_dense() * &rd).collect();
        let mut mm = nalgebra::DMatrix::zeros(m, m);
        let mut d = nalgebra::DVector::zeros(m);
        for i in 0..m {
            d[i] = us[i].dot(&g.to_dmatrix());
            for j in 0..m {
                mm[(i, j)] = us[i].dot(&us[j]);
            }
        }
        let lam = mm.lu().solve(&d).unwrap();
        let mut want = g.to_dmatrix();
        for (u, &l) in us.iter().zip(lam.iter()) {
            want -= u * l;
        }
        for i in 0..n {
            for j in 0..rk {
                assert!((h.get(i, j) - want[(i, j)]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn projection_residual_is_normal_to_tangent_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..50 {
            let n = rng.gen_range(3..7);
            let m = rng.gen_range(1..4);
            let map = random_map(&mut rng, n, m);
            let r = random_rowmat(&mut rng, n, 2);
            let g = random_rowmat(&mut rng, n, 2);
            let (h, _, st) = tangent_project(&map, &r, &g, 500).unwrap();
            if !st.converged || st.degenerate {
                continue;
            }
            // any tangent vector H' satisfies <G - H, H'> = 0
            let gp = random_rowmat(&mut rng, n, 2);
            let (hp, _, _) = tangent_project(&map, &r, &gp, 500).unwrap();
            let mut normal = g.clone();
            normal.axpy(-1.0, &h);
            let ip = normal.dot(&hp);
            let scale = 1.0 + normal.norm() * hp.norm();
            assert!(ip.abs() <= 1e-9 * scale, "inner product {ip}");
        }
    }

    #[test]
    fn retract_zero_step_is_identity() {
        let map = LinearMap::new(3, vec![SymSparse::identity(3)]).unwrap();
        let r = {
            let mut m = RowMat::zeros(3, 1);
            m.set(0, 0, 1.0);
            m
        };
        let h = RowMat::zeros(3, 1);
        let (y, ok, _) = retract(&map, &[1.0], &r, &h, 1.0, 20, 20).unwrap();
        assert!(ok);
        let mut d = y.clone();
        d.axpy(-1.0, &r);
        assert!(d.norm() < 1e-12);
    }

    #[test]
    fn sphere_retraction_is_normalization() {
        // A = {I}, b = 1: the Gauss-Newton limit is (R + tH)/|R + tH|_F
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let map = LinearMap::new(4, vec![SymSparse::identity(4)]).unwrap();
        for _ in 0..50 {
            let mut r = random_rowmat(&mut rng, 4, 2);
            let nrm = r.norm();
            r.scale(1.0 / nrm); // feasible on the sphere
            let mut h = random_rowmat(&mut rng, 4, 2);
            // tangent: <R, H> = 0
            let c = r.dot(&h) / r.dot(&r);
            h.axpy(-c, &r.clone());
            let t = rng.gen_range(0.01..0.8);
            let (y, ok, _) = retract(&map, &[1.0], &r, &h, t, 20, 20).unwrap();
            assert!(ok);
            let mut want = r.clone();
            want.axpy(t, &h);
            let wn = want.norm();
            want.scale(1.0 / wn);
            let mut d = y.clone();
            d.axpy(-1.0, &want);
            assert!(d.norm() <= 1e-9, "defect {}", d.norm());
        }
    }

    #[test]
    fn retraction_fails_from_far_infeasible_start() {
        // |Y0|^2 = 1e12 on the sphere: Gauss-Newton contracts by ~1/4 per
        // step from above and cannot reach feasibility in 20 steps
        let map = LinearMap::new(3, vec![SymSparse::identity(3)]).unwrap();
        let mut y0 = RowMat::zeros(3, 1);
        y0.set(0, 0, 1e6);
        let (_, ok, _) = gauss_newton_feasify(&map, &[1.0], y0, 20, 20).unwrap();
        assert!(!ok);
    }

    #[test]
    fn pcg_identity_converges_in_one_iteration() {
        let op = |v: &[f64]| v.to_vec();
        let rhs = vec![1.0, -2.0, 3.0];
        let (x, st) = pcg_solve(&op, &rhs, PcgPrecond::None, 20, 1e-10);
        assert!(st.converged);
        assert_eq!(st.pcg_iters, 1);
        for (a, b) in x.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pcg_diagonal_preconditioner_on_diagonal_matrix() {
        let d: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let dc = d.clone();
        let op = move |v: &[f64]| -> Vec<f64> {
            v.iter().zip(&dc).map(|(a, b)| a * b).collect()
        };
        let rhs: Vec<f64> = (0..10).map(|i| (i as f64) - 4.5).collect();
        let (x, st) = pcg_solve(&op, &rhs, PcgPrecond::Diagonal(&d), 20, 1e-10);
        assert!(st.converged);
        assert_eq!(st.pcg_iters, 1);
        for i in 0..10 {
            assert!((x[i] - rhs[i] / d[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pcg_detects_indefiniteness() {
        let op = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let rhs = vec![1.0, 1.0];
        let (_, st) = pcg_solve(&op, &rhs, PcgPrecond::None, 20, 1e-10);
        assert!(st.degenerate);
    }

    #[test]
    fn cholesky_preconditioner_beats_diagonal_on_ill_conditioned_system() {
        // SPD with condition 1e6
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let n = 30;
        let a = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = a.qr().q();
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            vals.push(10f64.powf(6.0 * i as f64 / (n - 1) as f64));
        }
        let m = &q * nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vals)) * q.transpose();
        let msym = (&m + m.transpose()) * 0.5;
        let diag: Vec<f64> = (0..n).map(|i| msym[(i, i)]).collect();
        let mm = msym.clone();
        let op = move |v: &[f64]| -> Vec<f64> {
            (&mm * nalgebra::DVector::from_column_slice(v))
                .iter()
                .cloned()
                .collect()
        };
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, st_diag) = pcg_solve(&op, &rhs, PcgPrecond::Diagonal(&diag), 500, 1e-10);
        // exact-Cholesky preconditioner through the weight operator
        let data = SymSparse::from_dense(&msym, 0.0);
        let pairs: Vec<(u32, u32)> = data.entries().iter().map(|&(i, j, _)| (i, j)).collect();
        let pattern = crate::linalg::GramPattern { m: n, pairs };
        let gram = crate::linalg::GramMatrix { data, pattern };
        let w = crate::precond::build_weight(
            &gram,
            crate::precond::WeightPolicy::ExactCholesky,
            &crate::precond::PrecondConfig::default(),
            0,
        )
        .unwrap();
        let (_, st_chol) = pcg_solve(&op, &rhs, PcgPrecond::Cholesky(&w), 500, 1e-10);
        assert!(st_chol.converged);
        assert!(
            st_diag.pcg_iters > st_chol.pcg_iters,
            "diag {} vs chol {}",
            st_diag.pcg_iters,
            st_chol.pcg_iters
        );
    }

    #[test]
    fn switch_decision_mapping() {
        use FeasibleEvent::*;
        assert_eq!(
            switch_decision(true, PcgFailure),
            SwitchReason::FillTooLarge
        );
        assert_eq!(
            switch_decision(false, PcgFailure),
            SwitchReason::Degenerate
        );
        assert_eq!(
            switch_decision(true, RetractionFailure),
            SwitchReason::RetractionFailed
        );
        assert_eq!(switch_decision(false, DualStall), SwitchReason::Degenerate);
    }

    #[test]
    fn feasibility_preserved_along_descent_steps() {
        // manual feasible steps on max-cut over C5: project, retract, check
        let g = Graph::cycle(5);
        let prob = gen_maxcut(&g, None).unwrap();
        let map = &prob.a_maps()[0];
        let b = prob.b();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let x0 = random_rowmat(&mut rng, 5, 3);
        let (mut r, ok, _) = gauss_newton_feasify(map, b, x0, 100, 50).unwrap();
        assert!(ok);
        let cost = prob.objective().linear_costs().unwrap()[0].clone();
        let mut fval = cost.quad_form(&r);
        for _ in 0..15 {
            let mut g = cost.mul_factor(&r);
            g.scale(2.0);
            let (h, _, st) = tangent_project(map, &r, &g, 50).unwrap();
            assert!(st.converged);
            if h.norm() < 1e-9 {
                break;
            }
            let mut t = 1.0;
            loop {
                let (y, ok, _) = retract(map, b, &r, &h, -t, 20, 50).unwrap();
                assert!(ok, "retraction failed at t={t}");
                let v = cost.quad_form(&y);
                if v <= fval - 1e-4 * t * h.dot(&h) {
                    r = y;
                    fval = v;
                    break;
                }
                t *= 0.5;
                assert!(t > 1e-12);
            }
            // feasibility preservation after every accepted step
            let ra: Vec<f64> = map
                .apply_factor(&r)
                .unwrap()
                .iter()
                .zip(b)
                .map(|(a, bb)| a - bb)
                .collect();
            assert!(vec_norm(&ra) <= 1e-8 * (1.0 + vec_norm(b)));
        }
    }

    #[test]
    fn maxcut_c5_solved_entirely_in_feasible_stage() {
        let g = Graph::cycle(5);
        let prob = gen_maxcut(&g, None).unwrap();
        let opts = SolveOptions {
            seed: 5,
            ..Default::default()
        };
        let hist = sdpfplus_solve(&prob, &opts).unwrap();
        assert_eq!(hist.status, SolveStatus::Converged);
        assert!(hist.switch_events.is_empty(), "{:?}", hist.switch_events);
        assert!(hist.kkt.max_kkt <= 1e-6);
        let oracle_sol = oracle::solve_dense(&prob, 1e-9, 5000, 0).unwrap();
        assert!(
            (hist.fval - oracle_sol.fval).abs() <= 1e-5 * (1.0 + oracle_sol.fval.abs()),
            "{} vs {}",
            hist.fval,
            oracle_sol.fval
        );
    }

    #[test]
    fn theta_plus_c5_converges_with_side_wrapping() {
        let g = Graph::cycle(5);
        let prob = gen_theta(&g, ThetaVariant::Plus).unwrap();
        let opts = SolveOptions {
            seed: 2,
            ..Default::default()
        };
        let hist = solve(&prob, &opts).unwrap();
        assert_eq!(hist.status, SolveStatus::Converged, "kkt {:?}", hist.kkt);
        assert!(hist.kkt.max_kkt <= 1e-6);
        let oracle_sol = oracle::solve_dense(&prob, 1e-8, 5000, 0).unwrap();
        assert!(
            (hist.fval - oracle_sol.fval).abs() <= 1e-5 * (1.0 + oracle_sol.fval.abs()),
            "{} vs {}",
            hist.fval,
            oracle_sol.fval
        );
    }

    #[test]
    fn near_degenerate_instance_switches_and_still_converges() {
        let prob = crate::instances::gen_ill_conditioned_theta(10, 3).unwrap();
        let opts = SolveOptions {
            seed: 7,
            ..Default::default()
        };
        let hist = sdpfplus_solve(&prob, &opts).unwrap();
        assert!(
            !hist.switch_events.is_empty(),
            "expected a stage switch, trace: {:?}",
            hist.trace.len()
        );
        assert_eq!(hist.status, SolveStatus::Converged, "kkt {:?}", hist.kkt);
        assert!(hist.kkt.max_kkt <= 1e-6);
    }
}
