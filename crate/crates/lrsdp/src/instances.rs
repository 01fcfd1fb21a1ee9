//! Instance generators for the benchmark problem families.

use crate::error::{Error, Result};
use crate::factor::standard_normal_pub;
use crate::linalg::{LinearMap, SymSparse};
use crate::problem::{BlockSpec, ConicProblem, ConvexSet, GradBlock, Objective};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Simple undirected graph as an edge list over `0..n`.
#[derive(Clone, Debug)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Graph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j) in &edges {
            if i == j {
                return Err(Error::InvalidInput(format!("self-loop at vertex {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({i},{j}) out of range for n = {n}"
                )));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return Err(Error::InvalidInput(format!("duplicate edge ({i},{j})")));
            }
        }
        Ok(Graph { n, edges })
    }

    pub fn cycle(n: usize) -> Self {
        Graph {
            n,
            edges: (0..n).map(|i| (i, (i + 1) % n)).collect(),
        }
    }

    pub fn path(n: usize) -> Self {
        Graph {
            n,
            edges: (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        Graph { n, edges }
    }

    pub fn petersen() -> Self {
        let mut edges = Vec::new();
        for i in 0..5 {
            edges.push((i, (i + 1) % 5)); // outer cycle
            edges.push((5 + i, 5 + (i + 2) % 5)); // inner pentagram
            edges.push((i, 5 + i)); // spokes
        }
        Graph { n: 10, edges }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaVariant {
    Plain,
    /// Adds the entrywise nonnegativity side constraint.
    Plus,
}

/// Lovasz theta SDP: `min -<1, X>  s.t.  <I, X> = 1, X_ij = 0 on edges`.
/// The plus variant adds `X >= 0` entrywise through the side map.
pub fn gen_theta(graph: &Graph, variant: ThetaVariant) -> Result<ConicProblem> {
    let n = graph.n;
    let mut mats = vec![SymSparse::identity(n)];
    let mut b = vec![1.0];
    for &(i, j) in &graph.edges {
        mats.push(SymSparse::new(n, [(i, j, 0.5)])?);
        b.push(0.0);
    }
    let mut ones = Vec::new();
    for i in 0..n {
        for j in i..n {
            ones.push((i, j, -1.0));
        }
    }
    let cost = SymSparse::new(n, ones)?;
    let amap = LinearMap::new(n, mats)?;
    match variant {
        ThetaVariant::Plain => ConicProblem::new(
            vec![BlockSpec::psd(n)],
            vec![amap],
            b,
            Objective::Linear(vec![cost]),
        ),
        ThetaVariant::Plus => {
            let mut bmats = Vec::new();
            for i in 0..n {
                for j in i..n {
                    let v = if i == j { 1.0 } else { 0.5 };
                    bmats.push(SymSparse::new(n, [(i, j, v)])?);
                }
            }
            let bmap = LinearMap::new(n, bmats)?;
            ConicProblem::with_side(
                vec![BlockSpec::psd(n)],
                vec![amap],
                b,
                Some(vec![bmap]),
                Some(ConvexSet::Nonneg),
                Objective::Linear(vec![cost]),
            )
        }
    }
}

/// Max-cut SDP relaxation: `min <-L/4, X>  s.t.  diag(X) = 1` with `L` the
/// weighted graph Laplacian.
pub fn gen_maxcut(graph: &Graph, weights: Option<&[f64]>) -> Result<ConicProblem> {
    let n = graph.n;
    if let Some(w) = weights {
        if w.len() != graph.edges.len() {
            return Err(Error::DimensionMismatch {
                context: "max-cut edge weights",
                expected: graph.edges.len(),
                got: w.len(),
            });
        }
    }
    let mut triplets: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for (e, &(i, j)) in graph.edges.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[e]);
        let (lo, hi) = (i.min(j), i.max(j));
        *triplets.entry((lo, hi)).or_insert(0.0) += w / 4.0; // -(-w)/4 off-diagonal
        *triplets.entry((lo, lo)).or_insert(0.0) += -w / 4.0;
        *triplets.entry((hi, hi)).or_insert(0.0) += -w / 4.0;
    }
    let cost = SymSparse::new(n, triplets.into_iter().map(|((i, j), v)| (i, j, v)))?;
    let mats = (0..n)
        .map(|i| SymSparse::new(n, [(i, i, 1.0)]))
        .collect::<Result<Vec<_>>>()?;
    ConicProblem::single_psd(n, mats, vec![1.0; n], cost)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcmLoss {
    Square,
    Huber,
}

/// Huber penalty and its derivative.
pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

pub fn huber_deriv(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Nearest-correlation-matrix problem with entrywise weights:
/// square loss `1/2 |H o (X - Xhat)|_F^2` or its Huber variant, subject to
/// `diag(X) = 1`.
pub fn ncm_problem(
    h: nalgebra::DMatrix<f64>,
    xhat: nalgebra::DMatrix<f64>,
    loss: NcmLoss,
    delta: f64,
) -> Result<ConicProblem> {
    let n = h.nrows();
    if xhat.nrows() != n || h.ncols() != n || xhat.ncols() != n {
        return Err(Error::InvalidInput("weight/data shape mismatch".into()));
    }
    let specs = vec![BlockSpec::psd(n)];
    let h = Arc::new(h);
    let xhat = Arc::new(xhat);
    let cb = {
        let h = h.clone();
        let xhat = xhat.clone();
        move |x: &crate::factor::FactorPoint| -> Result<(f64, Vec<GradBlock>)> {
            let r = x.psd(0);
            let rd = r.to_dmatrix();
            let xm = &rd * rd.transpose();
            let n = xm.nrows();
            let mut val = 0.0;
            let mut grad = nalgebra::DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let e = h[(i, j)] * (xm[(i, j)] - xhat[(i, j)]);
                    match loss {
                        NcmLoss::Square => {
                            val += 0.5 * e * e;
                            grad[(i, j)] = h[(i, j)] * e;
                        }
                        NcmLoss::Huber => {
                            val += huber(e, delta);
                            grad[(i, j)] = h[(i, j)] * huber_deriv(e, delta);
                        }
                    }
                }
            }
            // symmetrize against asymmetric weight input
            let g = (grad.clone() + grad.transpose()) * 0.5;
            Ok((val, vec![GradBlock::Dense(g)]))
        }
    };
    let objective = Objective::checked_callback(Arc::new(cb), &specs, 0x4cc)?;
    let mats = (0..n)
        .map(|i| SymSparse::new(n, [(i, i, 1.0)]))
        .collect::<Result<Vec<_>>>()?;
    let amap = LinearMap::new(n, mats)?;
    ConicProblem::new(specs, vec![amap], vec![1.0; n], objective)
}

/// Seeded NCM instance: `Xhat` a perturbed random correlation matrix,
/// weights uniform in [0.1, 10].
pub fn gen_ncm(n: usize, loss: NcmLoss, delta: f64, seed: u64) -> Result<ConicProblem> {
    if n < 2 {
        return Err(Error::InvalidInput("ncm needs n >= 2".into()));
    }
    let (h, xhat) = ncm_data(n, seed);
    ncm_problem(h, xhat, loss, delta)
}

/// The raw (H, Xhat) data of a seeded NCM instance.
pub fn ncm_data(n: usize, seed: u64) -> (nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // random correlation matrix: normalize a Gram matrix of Gaussians
    let g = nalgebra::DMatrix::from_fn(n, n, |_, _| standard_normal_pub(&mut rng));
    let mut c = &g * g.transpose();
    for i in 0..n {
        let d = c[(i, i)].max(1e-12).sqrt();
        for j in 0..n {
            c[(i, j)] /= d;
            c[(j, i)] /= d;
        }
    }
    // entrywise perturbation, symmetrized, unit diagonal restored
    let mut xhat = c;
    for i in 0..n {
        for j in i + 1..n {
            let v = (xhat[(i, j)] + 0.3 * standard_normal_pub(&mut rng)).clamp(-0.97, 0.97);
            xhat[(i, j)] = v;
            xhat[(j, i)] = v;
        }
        xhat[(i, i)] = 1.0;
    }
    let mut h = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = rng.gen_range(0.1..10.0);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    (h, xhat)
}

/// Ill-conditioned family: theta constraints on a seeded random graph plus
/// five near-duplicate constraints scaled by 1e-3. The added rows keep the
/// scaled copy's right-hand side consistent with the feasible point `I/n`.
pub fn gen_ill_conditioned_theta(n: usize, seed: u64) -> Result<ConicProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < 0.4 {
                edges.push((i, j));
            }
        }
    }
    if edges.is_empty() {
        edges.push((0, 1));
    }
    let graph = Graph::new(n, edges)?;
    let base = gen_theta(&graph, ThetaVariant::Plain)?;
    let mut mats: Vec<SymSparse> = base.a_maps()[0].mats().to_vec();
    let mut b = base.b().to_vec();
    let m0 = mats.len();
    for k in 0..5 {
        let j = k % m0;
        // random symmetric perturbation direction, diagonal-heavy so it is
        // not in the span of the existing constraints
        let mut tr = Vec::new();
        for i in 0..n {
            tr.push((i, i, standard_normal_pub(&mut rng)));
        }
        let d = SymSparse::accumulate(n, tr)?;
        let a_new = mats[j].add_scaled(1.0, &d);
        let mut scaled = a_new;
        scaled.scale(1e-3);
        // keep X = I/n feasible: b entry matches the new row at that point
        let b_new = 1e-3 * (b[j] + d.diag().iter().sum::<f64>() / n as f64);
        mats.push(scaled);
        b.push(b_new);
    }
    let cost = base.objective().linear_costs().unwrap()[0].clone();
    ConicProblem::single_psd(n, mats, b, cost)
}

/// Configuration of one random feasible instance.
#[derive(Clone, Copy, Debug)]
pub struct RandomInstanceSpec {
    pub seed: u64,
    pub box_side: bool,
    pub nonlinear: bool,
    /// Add a nonnegative vector block next to the PSD block.
    pub with_vec_block: bool,
}

/// Random instance that is feasible by construction: a target point is drawn
/// first and the right-hand side is its image under the maps.
pub fn gen_random_feasible(spec: RandomInstanceSpec) -> Result<ConicProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b97f4a7c15));
    let n = rng.gen_range(4..=8);
    let m = rng.gen_range(3..=10);
    let r_star = 3.min(n);

    let mut blocks = vec![BlockSpec::psd(n)];
    let vdim = if spec.with_vec_block { rng.gen_range(2..=4) } else { 0 };
    if spec.with_vec_block {
        blocks.push(BlockSpec::nonneg(vdim));
    }

    // target point
    let rstar = crate::linalg::RowMat::from_fn(n, r_star, |_, _| 0.7 * standard_normal_pub(&mut rng));
    let xstar_vec: Vec<f64> = (0..vdim).map(|_| rng.gen_range(0.2..1.5)).collect();

    // constraint maps
    let mut psd_mats = Vec::with_capacity(m);
    let mut vec_mats = Vec::with_capacity(m);
    for _ in 0..m {
        let mut tr = Vec::new();
        for i in 0..n {
            for j in i..n {
                if rng.gen::<f64>() < 0.5 {
                    tr.push((i, j, standard_normal_pub(&mut rng)));
                }
            }
        }
        if tr.is_empty() {
            tr.push((0, 0, 1.0));
        }
        psd_mats.push(SymSparse::new(n, tr)?);
        if spec.with_vec_block {
            let mut tv = Vec::new();
            for l in 0..vdim {
                if rng.gen::<f64>() < 0.6 {
                    tv.push((l, l, standard_normal_pub(&mut rng)));
                }
            }
            vec_mats.push(SymSparse::accumulate(vdim, tv)?);
        }
    }
    let amap_psd = LinearMap::new(n, psd_mats)?;
    let mut a_maps = vec![amap_psd];
    if spec.with_vec_block {
        a_maps.push(LinearMap::new(vdim, vec_mats)?);
    }

    // b = A(X*)
    let mut b = vec![0.0; m];
    for (i, a) in a_maps[0].mats().iter().enumerate() {
        b[i] += a.quad_form(&rstar);
    }
    if spec.with_vec_block {
        for (i, a) in a_maps[1].mats().iter().enumerate() {
            b[i] += a.diag_dot(&xstar_vec);
        }
    }

    // optional box side constraints around the target image
    let (b_maps, side) = if spec.box_side {
        let p = 3;
        let mut bm_psd = Vec::with_capacity(p);
        for _ in 0..p {
            let mut tr = Vec::new();
            for i in 0..n {
                for j in i..n {
                    if rng.gen::<f64>() < 0.4 {
                        tr.push((i, j, standard_normal_pub(&mut rng)));
                    }
                }
            }
            if tr.is_empty() {
                tr.push((0, 0, 1.0));
            }
            bm_psd.push(SymSparse::new(n, tr)?);
        }
        let mut bx = vec![0.0; p];
        for (i, a) in bm_psd.iter().enumerate() {
            bx[i] = a.quad_form(&rstar);
        }
        let mut maps = vec![LinearMap::new(n, bm_psd)?];
        if spec.with_vec_block {
            maps.push(LinearMap::new(vdim, vec![SymSparse::zero(vdim); p])?);
        }
        let l: Vec<f64> = bx.iter().map(|v| v - rng.gen_range(0.2..0.6)).collect();
        let u: Vec<f64> = bx.iter().map(|v| v + rng.gen_range(0.2..0.6)).collect();
        (Some(maps), Some(ConvexSet::boxed(l, u)?))
    } else {
        (None, None)
    };

    let objective = if spec.nonlinear {
        // square-loss pull toward a random symmetric target, plus a convex
        // quadratic on the vector block
        let xhat = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i <= j {
                0.0
            } else {
                0.0
            }
        });
        let mut xhat = xhat;
        for i in 0..n {
            for j in i..n {
                let v = 0.5 * standard_normal_pub(&mut rng);
                xhat[(i, j)] = v;
                xhat[(j, i)] = v;
            }
        }
        let target_vec: Vec<f64> = (0..vdim).map(|_| rng.gen_range(-0.5..1.0)).collect();
        let has_vec = spec.with_vec_block;
        let cb = move |x: &crate::factor::FactorPoint| -> Result<(f64, Vec<GradBlock>)> {
            let r = x.psd(0);
            let rd = r.to_dmatrix();
            let xm = &rd * rd.transpose();
            let diff = &xm - &xhat;
            let val_psd = 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
            let mut grads = vec![GradBlock::Dense(diff)];
            let mut val = val_psd;
            if has_vec {
                let xv = x.vec(1);
                let g: Vec<f64> = xv.iter().zip(&target_vec).map(|(a, c)| a - c).collect();
                val += 0.5 * g.iter().map(|v| v * v).sum::<f64>();
                grads.push(GradBlock::Vector(g));
            }
            Ok((val, grads))
        };
        Objective::checked_callback(Arc::new(cb), &blocks, spec.seed)?
    } else {
        // strictly diagonally dominant symmetric cost: positive definite, so
        // the objective is coercive over the PSD cone and the instance is
        // bounded with attained optimum
        let mut costs = Vec::new();
        let mut off = vec![Vec::new(); n];
        let mut tr = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen::<f64>() < 0.4 {
                    let v = standard_normal_pub(&mut rng);
                    tr.push((i, j, v));
                    off[i].push(v.abs());
                    off[j].push(v.abs());
                }
            }
        }
        for (i, o) in off.iter().enumerate() {
            let dom: f64 = o.iter().sum::<f64>() + rng.gen_range(0.5..1.5);
            tr.push((i, i, dom));
        }
        costs.push(SymSparse::new(n, tr)?);
        if spec.with_vec_block {
            let tv: Vec<_> = (0..vdim)
                .map(|l| (l, l, rng.gen_range(0.1..1.0)))
                .collect();
            costs.push(SymSparse::new(vdim, tv)?);
        }
        Objective::Linear(costs)
    };

    ConicProblem::with_side(blocks, a_maps, b, b_maps, side, objective)
}

/// Self-contained NCM instance descriptor (JSON carrier for the CLI); the
/// data matrices are reproduced deterministically from the seed.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct NcmInstanceFile {
    pub schema: u32,
    pub kind: String,
    pub n: usize,
    pub loss: String,
    pub delta: f64,
    pub seed: u64,
}

impl NcmInstanceFile {
    pub fn new(n: usize, loss: NcmLoss, delta: f64, seed: u64) -> Self {
        NcmInstanceFile {
            schema: 1,
            kind: "ncm".into(),
            n,
            loss: match loss {
                NcmLoss::Square => "square".into(),
                NcmLoss::Huber => "huber".into(),
            },
            delta,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: NcmInstanceFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("bad ncm instance: {e}")))?;
        if inst.kind != "ncm" {
            return Err(Error::InvalidInput(format!(
                "unknown instance kind `{}`",
                inst.kind
            )));
        }
        Ok(inst)
    }

    pub fn build(&self) -> Result<ConicProblem> {
        let loss = match self.loss.as_str() {
            "square" => NcmLoss::Square,
            "huber" => NcmLoss::Huber,
            other => {
                return Err(Error::InvalidInput(format!("unknown ncm loss `{other}`")))
            }
        };
        gen_ncm(self.n, loss, self.delta, self.seed)
    }
}
