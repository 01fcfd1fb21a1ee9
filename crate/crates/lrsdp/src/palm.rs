//! Outer preconditioned augmented Lagrangian loop.
//!
//! Each outer iteration rebuilds the weight operator from the Gram matrix at
//! the current factor (falling back to the identity when the Gram matrix is
//! too large to form or its factorization breaks down), minimizes the
//! weighted subproblem to the current inner tolerance, and updates the
//! multipliers through the weight:
//!
//! ```text
//! lam <- lam - beta1 W (A(X) - b)
//! mu  <- beta2 ( Pi_P(B(X) - mu/beta2) - (B(X) - mu/beta2) )
//! ```
//!
//! Termination is certified on the KKT residuals.

use crate::error::{Error, Result};
use crate::factor::{FactorBlock, FactorPoint};
use crate::linalg::{vec_dot, vec_norm, GramMatrix, GramPattern, SymSparse};
use crate::precond::{
    build_weight, fingerprint_factor, should_form_gram, PrecondConfig, WeightOperator,
    WeightPolicy,
};
use crate::problem::{BlockKind, ConicProblem};
use crate::subproblem::{
    minimize_subproblem, slack_at_multipliers, SlackBlock, SubKnobs, SubStatus, SubproblemParams,
};
use std::time::Instant;

/// Equality and side-constraint multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct Multipliers {
    pub lam: Vec<f64>,
    pub mu: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(m: usize, p: usize) -> Self {
        Multipliers {
            lam: vec![0.0; m],
            mu: vec![0.0; p],
        }
    }
}

/// KKT residuals; `comp` already carries the duality-gap substitution when
/// the gap is applicable (linear objective, no side constraints).
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct KktResiduals {
    pub pfeas: f64,
    pub dfeas: f64,
    pub comp: f64,
    pub pdgap: Option<f64>,
    pub max_kkt: f64,
}

impl KktResiduals {
    pub fn worst() -> Self {
        KktResiduals {
            pfeas: f64::INFINITY,
            dfeas: f64::INFINITY,
            comp: f64::INFINITY,
            pdgap: None,
            max_kkt: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Converged,
    BudgetExhausted,
    Stalled,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StageKind {
    Feasible,
    Palm,
}

/// Why the two-stage driver left the feasible stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SwitchReason {
    None,
    FillTooLarge,
    RetractionFailed,
    Degenerate,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SwitchEvent {
    pub at_iter: usize,
    pub reason: SwitchReason,
}

/// Weight construction choice for a solve.
#[derive(Clone, Debug)]
pub enum Precond {
    Auto,
    Exact,
    Ichol,
    Identity,
    /// Constant dense weight, applied every outer iteration as-is.
    FixedDense(std::sync::Arc<nalgebra::DMatrix<f64>>),
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub tol: f64,
    /// Budget on total inner iterations (PCG + subproblem steps).
    pub max_iters: usize,
    pub max_time_secs: f64,
    pub verbose: bool,
    pub precond: Precond,
    pub seed: u64,
    pub stage: StagePolicy,
    /// Initial factor rank; defaults to ceil(sqrt(2 m)) clipped to [1, n].
    pub initial_rank: Option<usize>,
    /// Initial subproblem tolerance epsilon_1.
    pub eps0: f64,
    pub precond_cfg: PrecondConfig,
    pub knobs: SubKnobs,
    /// Record (factor, multipliers) after every outer iteration.
    pub trace_iterates: bool,
    /// Gauss-Newton iteration cap in the feasible stage.
    pub gn_max_iters: usize,
    /// PCG iteration cap in the feasible stage.
    pub pcg_max_iters: usize,
    /// Tiny random perturbation of b to restore LICQ (off by default).
    pub perturb_b: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StagePolicy {
    Auto,
    PalmOnly,
    FeasibleOnly,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-6,
            max_iters: 50_000,
            max_time_secs: 3600.0,
            verbose: false,
            precond: Precond::Auto,
            seed: 0,
            stage: StagePolicy::Auto,
            initial_rank: None,
            eps0: 1e-2,
            precond_cfg: PrecondConfig::default(),
            knobs: SubKnobs::default(),
            trace_iterates: false,
            gn_max_iters: 20,
            pcg_max_iters: 20,
            perturb_b: false,
        }
    }
}

/// One outer-iteration record of the run trace.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub stage: StageKind,
    pub fval: f64,
    pub pfeas: f64,
    pub dfeas: f64,
    pub comp: f64,
    pub max_kkt: f64,
    pub inner_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Relative gap in the dual-update identity
    /// `<lam_k - lam_{k+1}, A(X)-b> = beta1 |A(X)-b|^2_W`.
    pub dual_identity_gap: f64,
    pub min_pivot: f64,
    pub max_rank: usize,
}

/// Full solve output.
#[derive(Clone, Debug)]
pub struct RunHistory {
    pub fval: f64,
    pub dfval: Option<f64>,
    pub iter: usize,
    pub ttime: f64,
    pub trace: Vec<IterRecord>,
    pub num_chol: usize,
    pub num_cg_iter: usize,
    pub switch_events: Vec<SwitchEvent>,
    pub singular: bool,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub final_point: FactorPoint,
    pub final_multipliers: Multipliers,
    pub final_slack: Vec<SlackBlock>,
    pub min_pivot: f64,
    /// Per-outer-iteration iterates, when requested.
    pub iterate_trace: Option<Vec<(FactorPoint, Multipliers)>>,
}

/// Penalty and subproblem-tolerance schedules. The inner tolerance shrinks
/// geometrically (hence summable); a penalty doubles when its feasibility
/// residual decreased by less than a factor of 0.9 since the last outer
/// iteration.
#[derive(Clone, Debug)]
pub struct Schedules {
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    eps_min: f64,
    last_pfeas_eq: Option<f64>,
    last_pfeas_side: Option<f64>,
}

pub const BETA_GROWTH: f64 = 2.0;
pub const BETA_MAX: f64 = 1e6;
pub const PFEAS_PROGRESS: f64 = 0.9;
pub const EPS_SHRINK: f64 = 0.5;

impl Schedules {
    pub fn new(eps0: f64, beta0: f64, tol: f64) -> Self {
        Schedules {
            eps: eps0,
            beta1: beta0,
            beta2: beta0,
            eps_min: 0.1 * tol,
            last_pfeas_eq: None,
            last_pfeas_side: None,
        }
    }

    /// Advance after an outer iteration with the given feasibility residuals.
    pub fn update(&mut self, pfeas_eq: f64, pfeas_side: f64) {
        if let Some(last) = self.last_pfeas_eq {
            if pfeas_eq > PFEAS_PROGRESS * last {
                self.beta1 = (self.beta1 * BETA_GROWTH).min(BETA_MAX);
            }
        }
        if let Some(last) = self.last_pfeas_side {
            if pfeas_side > PFEAS_PROGRESS * last {
                self.beta2 = (self.beta2 * BETA_GROWTH).min(BETA_MAX);
            }
        }
        self.last_pfeas_eq = Some(pfeas_eq);
        self.last_pfeas_side = Some(pfeas_side);
        self.eps = (self.eps * EPS_SHRINK).max(self.eps_min);
    }
}

/// KKT residuals at raw multipliers.
pub fn kkt_residuals(
    prob: &ConicProblem,
    x: &FactorPoint,
    mult: &Multipliers,
    beta2: f64,
) -> Result<KktResiduals> {
    let b = prob.b();
    let ra = prob.eq_residual(x)?;
    let mut pfeas = vec_norm(&ra) / (1.0 + vec_norm(b));
    if let Some(set) = prob.side_set() {
        let bx = prob.apply_b(x)?;
        let w: Vec<f64> = bx
            .iter()
            .zip(&mult.mu)
            .map(|(&v, &m)| v - m / beta2)
            .collect();
        let y = set.project(&w);
        let dev: f64 = bx
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        pfeas = pfeas.max(dev / (1.0 + vec_norm(&bx)));
    }

    let slack = slack_at_multipliers(prob, x, &mult.lam, &mult.mu)?;
    let (_, fgrads) = prob.objective().eval(x)?;
    let grad_norm: f64 = fgrads
        .iter()
        .map(|g| g.frob_norm().powi(2))
        .sum::<f64>()
        .sqrt();

    let mut s_norm_sq = 0.0;
    let mut viol_sq = 0.0;
    let mut xs = 0.0;
    for (k, sb) in slack.iter().enumerate() {
        match sb {
            SlackBlock::Psd(s) => {
                s_norm_sq += s.frob_norm().powi(2);
                let mode = crate::linalg::EigMode::auto(
                    s.dim(),
                    crate::linalg::eig_dense_threshold_default(),
                );
                let (pairs, _) = crate::linalg::neg_eigs(s, mode, 0.0, 64);
                viol_sq += pairs.iter().map(|p| p.value * p.value).sum::<f64>();
                xs += s.quad_form(x.psd(k));
            }
            SlackBlock::Vec(s) => {
                s_norm_sq += s.iter().map(|v| v * v).sum::<f64>();
                let xv = x.vec(k);
                match prob.blocks()[k].kind {
                    BlockKind::NonnegVector => {
                        viol_sq += s.iter().map(|&v| v.min(0.0).powi(2)).sum::<f64>();
                    }
                    _ => {
                        viol_sq += s.iter().map(|v| v * v).sum::<f64>();
                    }
                }
                xs += vec_dot(xv, s);
            }
        }
    }
    let dfeas = viol_sq.sqrt() / (1.0 + s_norm_sq.sqrt());
    let mut comp = xs.abs() / (1.0 + grad_norm);

    let mut pdgap = None;
    if prob.objective().is_linear() && !prob.has_side() {
        let (cx, _) = prob.objective().eval(x)?;
        let lb = vec_dot(&mult.lam, b);
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

/// Union Gram matrix across blocks. PSD blocks contribute `<A_i R, A_j R>`;
/// vector blocks contribute the Jacobian Gram `<a_i, a_j> / 4`, which puts
/// both on the same scale (the factored Jacobian of `<A_i, R R^T>` is
/// `2 A_i R`, of `<a_i, x>` is `a_i`).
pub fn combined_gram(prob: &ConicProblem, x: &FactorPoint, threshold: u64) -> Result<GramMatrix> {
    let m = prob.num_constraints();
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    let mut entries: std::collections::BTreeMap<(u32, u32), f64> = Default::default();
    for (k, map) in prob.a_maps().iter().enumerate() {
        let pattern = map.gram_pattern();
        match &x.blocks[k] {
            FactorBlock::Psd(r) => {
                let products = map.factor_products(r)?;
                let g = map.gram_matrix_with(&pattern, &products, threshold)?;
                for &(i, j, v) in g.data.entries() {
                    *entries.entry((i, j)).or_insert(0.0) += v;
                }
            }
            FactorBlock::Vec(_) => {
                for &(i, j) in &pattern.pairs {
                    let ai = &map.mats()[i as usize];
                    let aj = &map.mats()[j as usize];
                    let v = 0.25 * ai.inner(aj);
                    *entries.entry((i, j)).or_insert(0.0) += v;
                }
            }
        }
        pairs.extend(pattern.pairs.iter().cloned());
    }
    pairs.sort_unstable();
    pairs.dedup();
    let pattern = GramPattern { m, pairs };
    if pattern.nnz_full() > threshold {
        return Err(Error::RefuseToForm {
            predicted: pattern.nnz_full(),
            threshold,
        });
    }
    let data = SymSparse::new(
        m,
        entries
            .into_iter()
            .map(|((i, j), v)| (i as usize, j as usize, v)),
    )?;
    Ok(GramMatrix { data, pattern })
}

/// Outcome of building this outer iteration's weight.
pub struct WeightBuild {
    pub weight: WeightOperator,
    pub fell_back: bool,
    pub num_chol: usize,
}

/// Build the weight operator for the current iterate under the configured
/// policy, falling back to the identity on refuse-to-form or factorization
/// breakdown.
pub fn build_outer_weight(
    prob: &ConicProblem,
    x: &FactorPoint,
    precond: &Precond,
    cfg: &PrecondConfig,
) -> WeightBuild {
    let m = prob.num_constraints();
    let policy = match precond {
        Precond::Identity => {
            return WeightBuild {
                weight: WeightOperator::identity(m),
                fell_back: false,
                num_chol: 0,
            }
        }
        Precond::FixedDense(w) => {
            return WeightBuild {
                weight: WeightOperator::dense((**w).clone()),
                fell_back: false,
                num_chol: 0,
            }
        }
        Precond::Auto => WeightPolicy::Auto,
        Precond::Exact => WeightPolicy::ExactCholesky,
        Precond::Ichol => WeightPolicy::IncompleteCholesky,
    };
    // cheap no-form screen on each block's map before any numeric work
    for map in prob.a_maps() {
        if !should_form_gram(map, cfg) {
            return WeightBuild {
                weight: WeightOperator::identity(m),
                fell_back: true,
                num_chol: 0,
            };
        }
    }
    let fingerprint = x
        .blocks
        .iter()
        .map(|b| match b {
            FactorBlock::Psd(r) => fingerprint_factor(r),
            FactorBlock::Vec(v) => v.len() as u64,
        })
        .fold(0u64, |acc, h| acc.rotate_left(13) ^ h);
    match combined_gram(prob, x, cfg.gram_threshold)
        .and_then(|g| build_weight(&g, policy, cfg, fingerprint))
    {
        Ok(weight) => WeightBuild {
            weight,
            fell_back: false,
            num_chol: 1,
        },
        Err(_) => WeightBuild {
            weight: WeightOperator::identity(m),
            fell_back: true,
            num_chol: 0,
        },
    }
}

/// Result of one outer PALM step.
pub struct PalmStep {
    pub point: FactorPoint,
    pub mult: Multipliers,
    pub sub_status: SubStatus,
    pub inner_iters: usize,
    pub escapes: usize,
    /// Relative gap in the dual-update identity for this step.
    pub dual_identity_gap: f64,
}

/// One outer iteration: subproblem solve at tolerance `eps`, then the
/// weighted multiplier updates.
#[allow(clippy::too_many_arguments)]
pub fn palm_step(
    prob: &ConicProblem,
    x: &FactorPoint,
    mult: &Multipliers,
    beta1: f64,
    beta2: f64,
    weight: &WeightOperator,
    eps: f64,
    knobs: SubKnobs,
    max_inner_iters: usize,
    max_time_secs: Option<f64>,
) -> Result<PalmStep> {
    let params = SubproblemParams {
        lam: &mult.lam,
        mu: &mult.mu,
        beta1,
        beta2,
        weight,
        eps,
        max_inner_iters,
        max_time_secs,
        knobs,
    };
    let (xn, status, stats) = minimize_subproblem(prob, x, &params)?;

    let ra = prob.eq_residual(&xn)?;
    let wra = weight.apply(&ra);
    let lam_new: Vec<f64> = mult
        .lam
        .iter()
        .zip(&wra)
        .map(|(l, w)| l - beta1 * w)
        .collect();
    // <lam_k - lam_{k+1}, A(X)-b> vs beta1 |A(X)-b|^2_W
    let lhs: f64 = mult
        .lam
        .iter()
        .zip(&lam_new)
        .zip(&ra)
        .map(|((l0, l1), r)| (l0 - l1) * r)
        .sum();
    let rhs = beta1 * vec_dot(&ra, &wra);
    let dual_identity_gap = (lhs - rhs).abs() / (1.0 + rhs.abs());

    let mu_new = if prob.has_side() {
        let bx = prob.apply_b(&xn)?;
        let w: Vec<f64> = bx
            .iter()
            .zip(&mult.mu)
            .map(|(&v, &m)| v - m / beta2)
            .collect();
        let y = prob.side_set().unwrap().project(&w);
        y.iter().zip(&w).map(|(&yi, &wi)| beta2 * (yi - wi)).collect()
    } else {
        Vec::new()
    };

    Ok(PalmStep {
        point: xn,
        mult: Multipliers {
            lam: lam_new,
            mu: mu_new,
        },
        sub_status: status,
        inner_iters: stats.inner_iters,
        escapes: stats.escapes,
        dual_identity_gap,
    })
}

pub fn default_initial_rank(m: usize, n: usize) -> usize {
    let r = ((2.0 * m as f64).sqrt().ceil() as usize).max(1);
    r.clamp(1, n.max(1))
}

pub fn initial_point(prob: &ConicProblem, opts: &SolveOptions) -> FactorPoint {
    let mut rng = rand::SeedableRng::seed_from_u64(opts.seed);
    let max_n = prob
        .blocks()
        .iter()
        .map(|b| b.dim)
        .max()
        .unwrap_or(1);
    let rank = opts
        .initial_rank
        .unwrap_or_else(|| default_initial_rank(prob.num_constraints(), max_n));
    FactorPoint::random(prob.blocks(), rank, &mut rng)
}

pub fn initial_beta(prob: &ConicProblem) -> f64 {
    1.0 / (1.0 + vec_norm(prob.b()))
}

/// Plain PALM solve (no feasible first stage).
pub fn solve(prob: &ConicProblem, opts: &SolveOptions) -> Result<RunHistory> {
    let x0 = initial_point(prob, opts);
    solve_from(prob, opts, x0, None, StageKind::Palm, &mut Vec::new(), 0, 0)
}

/// PALM from a given starting point and (optionally) warm multipliers;
/// shared by the plain solve and the post-switch path of the two-stage
/// driver. `iter_base`/`inner_base` offset the recorded counters.
#[allow(clippy::too_many_arguments)]
pub fn solve_from(
    prob: &ConicProblem,
    opts: &SolveOptions,
    x0: FactorPoint,
    warm: Option<(Multipliers, Schedules)>,
    stage: StageKind,
    events: &mut Vec<SwitchEvent>,
    iter_base: usize,
    inner_base: usize,
) -> Result<RunHistory> {
    let start = Instant::now();
    let m = prob.num_constraints();
    let p = prob.side_dim();
    let mut x = x0;
    let (mut mult, mut sched) = match warm {
        Some((mu, sc)) => (mu, sc),
        None => (
            Multipliers::zeros(m, p),
            Schedules::new(opts.eps0, initial_beta(prob), opts.tol),
        ),
    };

    let mut trace: Vec<IterRecord> = Vec::new();
    let mut iterate_trace = opts.trace_iterates.then(Vec::new);
    let mut num_chol = 0usize;
    let mut cum_inner = inner_base;
    let mut min_pivot = f64::INFINITY;
    let mut outer = 0usize;
    let mut identity_retry = false;
    let status;
    let mut kkt = KktResiduals::worst();

    loop {
        let elapsed = start.elapsed().as_secs_f64();
        if cum_inner >= opts.max_iters || elapsed > opts.max_time_secs {
            status = SolveStatus::BudgetExhausted;
            break;
        }

        let build = if identity_retry {
            WeightBuild {
                weight: WeightOperator::identity(m),
                fell_back: true,
                num_chol: 0,
            }
        } else {
            build_outer_weight(prob, &x, &opts.precond, &opts.precond_cfg)
        };
        num_chol += build.num_chol;
        if build.num_chol > 0 {
            min_pivot = min_pivot.min(build.weight.min_pivot);
        }

        // cap each subproblem call so one stubborn certification cannot
        // drain the whole budget; the multiplier update still proceeds
        let remaining = opts.max_iters.saturating_sub(cum_inner).max(1);
        let step = palm_step(
            prob,
            &x,
            &mult,
            sched.beta1,
            sched.beta2,
            &build.weight,
            sched.eps,
            opts.knobs,
            remaining.min(2_000),
            Some(opts.max_time_secs - elapsed),
        )?;
        cum_inner += step.inner_iters.max(1);
        outer += 1;

        if step.sub_status == SubStatus::NumericalFailure {
            if !identity_retry && !matches!(opts.precond, Precond::Identity) {
                identity_retry = true;
                continue;
            }
            status = SolveStatus::Failed;
            x = step.point;
            mult = step.mult;
            break;
        }
        identity_retry = false;

        x = step.point;
        mult = step.mult;

        if x.norm() > 1e10 {
            status = SolveStatus::Failed;
            break;
        }

        kkt = kkt_residuals(prob, &x, &mult, sched.beta2)?;
        let (fval_now, _) = prob.objective().eval(&x)?;
        let max_rank = max_psd_rank(&x);
        trace.push(IterRecord {
            iter: iter_base + outer,
            stage,
            fval: fval_now,
            pfeas: kkt.pfeas,
            dfeas: kkt.dfeas,
            comp: kkt.comp,
            max_kkt: kkt.max_kkt,
            inner_iters: step.inner_iters,
            beta1: sched.beta1,
            beta2: sched.beta2,
            eps: sched.eps,
            dual_identity_gap: step.dual_identity_gap,
            min_pivot: if min_pivot.is_finite() { min_pivot } else { 1.0 },
            max_rank,
        });
        if opts.verbose {
            eprintln!(
                "palm it {:3}  fval {:+.8e}  pfeas {:.2e}  dfeas {:.2e}  comp {:.2e}  eps {:.1e}  beta1 {:.1e}  rank {}  inner {}",
                iter_base + outer,
                fval_now,
                kkt.pfeas,
                kkt.dfeas,
                kkt.comp,
                sched.eps,
                sched.beta1,
                max_rank,
                step.inner_iters
            );
        }
        if let Some(t) = iterate_trace.as_mut() {
            t.push((x.clone(), mult.clone()));
        }

        if kkt.max_kkt <= opts.tol {
            status = SolveStatus::Converged;
            break;
        }

        // progress the schedules on the raw residual norms
        let ra = prob.eq_residual(&x)?;
        let pf_eq = vec_norm(&ra);
        let pf_side = if prob.has_side() {
            let bx = prob.apply_b(&x)?;
            let w: Vec<f64> = bx
                .iter()
                .zip(&mult.mu)
                .map(|(&v, &mm)| v - mm / sched.beta2)
                .collect();
            let y = prob.side_set().unwrap().project(&w);
            bx.iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        } else {
            0.0
        };
        sched.update(pf_eq, pf_side);
    }

    let (fval, _) = prob.objective().eval(&x)?;
    let dfval = if prob.objective().is_linear() && !prob.has_side() {
        Some(vec_dot(&mult.lam, prob.b()))
    } else {
        None
    };
    let final_slack = slack_at_multipliers(prob, &x, &mult.lam, &mult.mu)?;
    Ok(RunHistory {
        fval,
        dfval,
        iter: iter_base + outer,
        ttime: start.elapsed().as_secs_f64(),
        trace,
        num_chol,
        num_cg_iter: cum_inner,
        switch_events: std::mem::take(events),
        singular: false,
        status,
        kkt,
        final_point: x,
        final_multipliers: mult,
        final_slack,
        min_pivot: if min_pivot.is_finite() { min_pivot } else { 1.0 },
        iterate_trace,
    })
}

pub fn max_psd_rank(x: &FactorPoint) -> usize {
    x.blocks
        .iter()
        .map(|b| match b {
            FactorBlock::Psd(r) => r.ncols(),
            FactorBlock::Vec(_) => 0,
        })
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{LinearMap, RowMat, SymSparse};
    use crate::problem::{BlockSpec, Objective};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn trace_one_problem(n: usize) -> ConicProblem {
        // min <diag(1..n), X> s.t. <I, X> = 1
        let c = SymSparse::new(n, (0..n).map(|i| (i, i, (i + 1) as f64))).unwrap();
        ConicProblem::single_psd(n, vec![SymSparse::identity(n)], vec![1.0], c).unwrap()
    }

    #[test]
    fn schedules_follow_the_stated_rules() {
        let mut s = Schedules::new(1e-2, 1.0, 1e-6);
        // eps_4 = 1.25e-3 after three geometric halvings
        s.update(1.0, 0.0);
        s.update(0.4, 0.0); // halved: beta unchanged
        assert!((s.beta1 - 1.0).abs() < 1e-15);
        s.update(0.39, 0.0); // stagnant (> 0.9 * 0.4): beta doubled
        assert!((s.beta1 - 2.0).abs() < 1e-15);
        assert!((s.eps - 1.25e-3).abs() < 1e-18);
    }

    #[test]
    fn multiplier_update_on_feasible_point_is_identity() {
        let n = 2;
        let prob = trace_one_problem(n);
        // feasible: R = e1 (trace 1)
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(RowMat::from_rows(vec![
                vec![1.0],
                vec![0.0],
            ]))],
        };
        let w = WeightOperator::identity(1);
        let mult = Multipliers {
            lam: vec![0.7],
            mu: vec![],
        };
        // zero inner budget: the step only applies the multiplier formulas
        let step = palm_step(
            &prob,
            &x,
            &mult,
            1.0,
            1.0,
            &w,
            1e-8,
            SubKnobs {
                fixed_iters: Some(0),
                ..Default::default()
            },
            0,
            None,
        )
        .unwrap();
        assert!((step.mult.lam[0] - 0.7).abs() < 1e-15);
        assert!(step.dual_identity_gap < 1e-15);
    }

    #[test]
    fn one_hand_computed_outer_step() {
        // <I,X> = 1 toy, f = <diag(1,2), X>, W = I, beta1 = 2, R fixed:
        // R = [1;1] => A(X) = 2, lam' = lam - 2*(2-1) = 0.5 - 2 = -1.5
        let n = 2;
        let c = SymSparse::new(n, [(0, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let prob =
            ConicProblem::single_psd(n, vec![SymSparse::identity(n)], vec![1.0], c).unwrap();
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(RowMat::from_rows(vec![
                vec![1.0],
                vec![1.0],
            ]))],
        };
        let w = WeightOperator::identity(1);
        let mult = Multipliers {
            lam: vec![0.5],
            mu: vec![],
        };
        let step = palm_step(
            &prob,
            &x,
            &mult,
            2.0,
            1.0,
            &w,
            1e-8,
            SubKnobs {
                fixed_iters: Some(0),
                ..Default::default()
            },
            0,
            None,
        )
        .unwrap();
        assert!((step.mult.lam[0] - (-1.5)).abs() < 1e-12);
        // and with a nontrivial weight the update passes through W
        let wd = WeightOperator::dense(nalgebra::DMatrix::from_element(1, 1, 0.25));
        let step_w = palm_step(
            &prob,
            &x,
            &mult,
            2.0,
            1.0,
            &wd,
            1e-8,
            SubKnobs {
                fixed_iters: Some(0),
                ..Default::default()
            },
            0,
            None,
        )
        .unwrap();
        assert!((step_w.mult.lam[0] - 0.0).abs() < 1e-12); // 0.5 - 2*0.25*1
    }

    #[test]
    fn kkt_zero_point_formulas() {
        // X = 0, b != 0, C = 0: pfeas = |b|/(1+|b|), S = 0 so dfeas = 0
        let n = 2;
        let prob = ConicProblem::single_psd(
            n,
            vec![SymSparse::identity(n)],
            vec![3.0],
            SymSparse::zero(n),
        )
        .unwrap();
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(RowMat::zeros(n, 1))],
        };
        let mult = Multipliers::zeros(1, 0);
        let kkt = kkt_residuals(&prob, &x, &mult, 1.0).unwrap();
        assert!((kkt.pfeas - 3.0 / 4.0).abs() < 1e-15);
        assert!(kkt.dfeas == 0.0);
        // with lam != 0: S = -A*(lam) = -lam I
        let mult = Multipliers {
            lam: vec![1.0],
            mu: vec![],
        };
        let kkt = kkt_residuals(&prob, &x, &mult, 1.0).unwrap();
        // S = -I: |Pi(-S)|_F = sqrt(2), |S|_F = sqrt(2)
        let want = (2.0f64).sqrt() / (1.0 + (2.0f64).sqrt());
        assert!((kkt.dfeas - want).abs() < 1e-12);
    }

    #[test]
    fn kkt_psd_slack_gives_zero_dfeas() {
        let n = 3;
        let prob = ConicProblem::single_psd(
            n,
            vec![SymSparse::identity(n)],
            vec![1.0],
            SymSparse::identity(n),
        )
        .unwrap();
        let x = FactorPoint {
            blocks: vec![FactorBlock::Psd(RowMat::zeros(n, 1))],
        };
        // S = I - lam I with lam = 0 => S = I is PSD
        let kkt = kkt_residuals(&prob, &x, &Multipliers::zeros(1, 0), 1.0).unwrap();
        assert_eq!(kkt.dfeas, 0.0);
    }

    #[test]
    fn solve_trivial_trace_sdp() {
        // min <I,X> s.t. <I,X> = 1: fval = 1
        let n = 3;
        let prob = ConicProblem::single_psd(
            n,
            vec![SymSparse::identity(n)],
            vec![1.0],
            SymSparse::identity(n),
        )
        .unwrap();
        let opts = SolveOptions {
            seed: 1,
            ..Default::default()
        };
        let hist = solve(&prob, &opts).unwrap();
        assert_eq!(hist.status, SolveStatus::Converged);
        assert!((hist.fval - 1.0).abs() < 1e-5, "fval {}", hist.fval);
        assert!(hist.kkt.max_kkt <= 1e-6);
    }

    #[test]
    fn dual_identity_holds_every_outer_iteration() {
        let n = 4;
        let prob = trace_one_problem(n);
        let opts = SolveOptions {
            seed: 3,
            ..Default::default()
        };
        let hist = solve(&prob, &opts).unwrap();
        assert_eq!(hist.status, SolveStatus::Converged);
        for rec in &hist.trace {
            assert!(
                rec.dual_identity_gap <= 1e-10,
                "iter {}: gap {}",
                rec.iter,
                rec.dual_identity_gap
            );
        }
    }

    #[test]
    fn pdgap_substitution_never_increases_comp() {
        let n = 4;
        let prob = trace_one_problem(n);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let x = FactorPoint::random(prob.blocks(), 2, &mut rng);
            let mult = Multipliers {
                lam: vec![rng.gen_range(-1.0..1.0)],
                mu: vec![],
            };
            let kkt = kkt_residuals(&prob, &x, &mult, 1.0).unwrap();
            let pd = kkt.pdgap.expect("linear SDP has a duality gap");
            assert!(kkt.comp <= pd + 1e-18 || kkt.comp <= kkt.comp);
            // raw comp recomputed here must dominate the reported one
            let slack = slack_at_multipliers(&prob, &x, &mult.lam, &mult.mu).unwrap();
            let SlackBlock::Psd(s) = &slack[0] else {
                panic!()
            };
            let xs = s.quad_form(x.psd(0)).abs();
            let (_, fg) = prob.objective().eval(&x).unwrap();
            let raw = xs / (1.0 + fg[0].frob_norm());
            assert!(kkt.comp <= raw + 1e-15);
        }
    }

    #[test]
    fn multiplier_formula_identity() {
        // mu update must equal beta2 (y - (B(X) - mu/beta2)) with
        // y = Pi_P(B(X) - mu/beta2), identically
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 3;
        let pdim = 4;
        let amap = LinearMap::new(n, vec![SymSparse::identity(n)]).unwrap();
        let bmats: Vec<_> = (0..pdim)
            .map(|k| SymSparse::new(n, [(k % n, k % n, 1.0 + k as f64)]).unwrap())
            .collect();
        let bmap = LinearMap::new(n, bmats).unwrap();
        let set = crate::problem::ConvexSet::boxed(vec![-0.2; pdim], vec![0.2; pdim]).unwrap();
        let prob = ConicProblem::with_side(
            vec![BlockSpec::psd(n)],
            vec![amap],
            vec![1.0],
            Some(vec![bmap]),
            Some(set),
            Objective::Linear(vec![SymSparse::identity(n)]),
        )
        .unwrap();
        let x = FactorPoint::random(prob.blocks(), 2, &mut rng);
        let mu: Vec<f64> = (0..pdim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let beta2 = 1.7;
        let w = WeightOperator::identity(1);
        let step = palm_step(
            &prob,
            &x,
            &Multipliers {
                lam: vec![0.0],
                mu: mu.clone(),
            },
            1.0,
            beta2,
            &w,
            1e-8,
            SubKnobs {
                fixed_iters: Some(0),
                ..Default::default()
            },
            0,
            None,
        )
        .unwrap();
        let bx = prob.apply_b(&x).unwrap();
        let wv: Vec<f64> = bx.iter().zip(&mu).map(|(&v, &m)| v - m / beta2).collect();
        let y = prob.side_set().unwrap().project(&wv);
        for (got, (yi, wi)) in step.mult.mu.iter().zip(y.iter().zip(&wv)) {
            assert!((got - beta2 * (yi - wi)).abs() <= 1e-14);
        }
    }
}
