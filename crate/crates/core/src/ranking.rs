//! Row-normalized transition chains, (personalized) PageRank, detection gaps
//! and the perturbation and leakage bounds that certify detection.
//!
//! Index conventions:
//! - seeds and scores use *original* dictionary indices;
//! - a block split `N` refers to the first `N` *kept* positions of a chain
//!   (rows of `|K^T|` with zero mass are dropped before normalization).
//!
//! Without dropped rows the two coincide, which is the usual case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edmd::{self, FiniteSampleParams, KoopmanMatrix};
use crate::error::{Error, Result};
use crate::numerics::{self, inf_norm, min_abs_row_sum, Matrix, Vector};

/// Row sums of a stochastic matrix may drift this far from 1.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Scores closer than this are ranked as ties (broken by index).
pub const RANK_TIE_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticMatrix {
    pub p: Matrix,
    /// Original indices of the rows/columns of `p`.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Names of the kept observables, in `p` order.
    pub names: Vec<String>,
    /// Absolute row sums `r_i` of the source `|K^T|`, by original index.
    pub source_r: Vec<f64>,
    pub r_max: f64,
    pub n_original: usize,
}

/// Divide each row by its sum. Rows must have positive mass.
pub fn row_normalize(a: &Matrix) -> Result<Matrix> {
    let mut out = a.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!("row {i} has no mass")));
        }
        row.iter_mut().for_each(|v| *v = v.abs() / s);
    }
    Ok(out)
}

impl StochasticMatrix {
    /// Wrap an already row-stochastic matrix (nothing dropped, `r = 1`).
    pub fn from_row_stochastic(p: Matrix) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n || n == 0 {
            return Err(Error::DimensionMismatch("a chain needs a nonempty square matrix".into()));
        }
        numerics::check_finite(&p, "P")?;
        for (i, row) in p.row_iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidParameter(format!("row {i} of P is not a probability vector")));
            }
        }
        Ok(StochasticMatrix {
            p,
            kept: (0..n).collect(),
            dropped: Vec::new(),
            names: (1..=n).map(|i| format!("psi{i}")).collect(),
            source_r: vec![1.0; n],
            r_max: 1.0,
            n_original: n,
        })
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Position of an original index in `p`.
    pub fn position(&self, original: usize) -> Option<usize> {
        self.kept.iter().position(|&k| k == original)
    }

    fn seed_positions(&self, seeds: &[usize]) -> Result<Vec<usize>> {
        if seeds.is_empty() {
            return Err(Error::InvalidSeedSet("seed set is empty".into()));
        }
        let mut pos = Vec::with_capacity(seeds.len());
        for &s in seeds {
            if s >= self.n_original {
                return Err(Error::InvalidSeedSet(format!("seed {s} out of range")));
            }
            let p = self.position(s).ok_or_else(|| Error::SeedDropped(self.original_name(s)))?;
            if pos.contains(&p) {
                return Err(Error::InvalidSeedSet(format!("seed {s} repeated")));
            }
            pos.push(p);
        }
        Ok(pos)
    }

    fn original_name(&self, original: usize) -> String {
        match self.position(original) {
            Some(p) => self.names[p].clone(),
            None => format!("#{original}"),
        }
    }

    /// `||P12||_inf` for a split after `n` kept positions.
    pub fn p12_inf(&self, n: usize) -> Result<f64> {
        Ok(inf_norm(&edmd::block(&self.p, n)?.k12))
    }

    /// `1 - ||P22||_inf`.
    pub fn eta(&self, n: usize) -> Result<f64> {
        Ok(1.0 - inf_norm(&edmd::block(&self.p, n)?.k22))
    }
}

/// `P = R(|K^T|)`. Rows of `|K^T|` without mass are dropped together with
/// their columns, repeatedly, until every remaining row has mass.
pub fn transition_matrix(k: &KoopmanMatrix) -> Result<StochasticMatrix> {
    let n = k.dim();
    let a = k.k.transpose().map(f64::abs);
    let source_r: Vec<f64> = a.row_iter().map(|r| r.sum()).collect();
    let r_max = source_r.iter().copied().fold(0.0, f64::max);
    let mut kept: Vec<usize> = (0..n).collect();
    loop {
        let next: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&i| kept.iter().map(|&j| a[(i, j)]).sum::<f64>() > 0.0)
            .collect();
        if next.len() == kept.len() {
            break;
        }
        kept = next;
    }
    if kept.is_empty() {
        return Err(Error::EmptyChain);
    }
    let sub = Matrix::from_fn(kept.len(), kept.len(), |i, j| a[(kept[i], kept[j])]);
    let p = row_normalize(&sub)?;
    let dropped = (0..n).filter(|i| !kept.contains(i)).collect();
    Ok(StochasticMatrix {
        p,
        names: kept.iter().map(|&i| k.names[i].clone()).collect(),
        kept,
        dropped,
        source_r,
        r_max,
        n_original: n,
    })
}

/// `P(0)`: zero `P12` and renormalize the top rows.
pub fn renormalized_reference(chain: &StochasticMatrix, n: usize) -> Result<StochasticMatrix> {
    edmd::check_split(n, chain.len())?;
    let mut out = chain.clone();
    for i in 0..n {
        let s: f64 = (0..n).map(|j| chain.p[(i, j)]).sum();
        if !(s > 0.0) {
            return Err(Error::DegenerateRow(chain.names[i].clone()));
        }
        for j in 0..chain.len() {
            out.p[(i, j)] = if j < n { chain.p[(i, j)] / s } else { 0.0 };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PprResult {
    /// Scores by original index; dropped indices score 0.
    pub scores: Vec<f64>,
    pub alpha: f64,
    /// Seeds by original index; empty for standard PageRank.
    pub seed_set: Vec<usize>,
    /// Original indices by descending score, ties by ascending index,
    /// dropped indices last.
    pub ranking: Vec<usize>,
    pub kept: Vec<usize>,
}

impl PprResult {
    fn from_positions(chain: &StochasticMatrix, pi: &Vector, alpha: f64, seeds: Vec<usize>) -> Self {
        let mut scores = vec![0.0; chain.n_original];
        for (p, &orig) in chain.kept.iter().enumerate() {
            scores[orig] = pi[p];
        }
        // quantize so that roundoff-level differences count as ties
        let key = |i: usize| (scores[i] / RANK_TIE_TOL).round() as i64;
        let mut ranking = chain.kept.clone();
        ranking.sort_by(|&a, &b| key(b).cmp(&key(a)).then(a.cmp(&b)));
        let mut dropped = chain.dropped.clone();
        dropped.sort_unstable();
        ranking.extend(dropped);
        PprResult { scores, alpha, seed_set: seeds, ranking, kept: chain.kept.clone() }
    }

    /// Total score on a set of original indices.
    pub fn mass(&self, set: &[usize]) -> f64 {
        set.iter().map(|&i| self.scores[i]).sum()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("damping must lie in [0, 1), got {alpha}")))
    }
}

/// Standard PageRank (`seeds = None`, uniform preference over kept indices)
/// or multi-seed PPR (uniform preference over the seeds).
pub fn pagerank(chain: &StochasticMatrix, alpha: f64, seeds: Option<&[usize]>) -> Result<PprResult> {
    check_alpha(alpha)?;
    let n = chain.len();
    let (s, seed_list) = match seeds {
        None => (Vector::from_element(n, 1.0 / n as f64), Vec::new()),
        Some(seeds) => {
            let pos = chain.seed_positions(seeds)?;
            let mut s = Vector::zeros(n);
            for &p in &pos {
                s[p] = 1.0 / pos.len() as f64;
            }
            (s, seeds.to_vec())
        }
    };
    let pi = numerics::solve_row_resolvent(&s, &chain.p, alpha)?;
    Ok(PprResult::from_positions(chain, &pi, alpha, seed_list))
}

/// PPR with an arbitrary preference vector given by original index.
pub fn pagerank_with_preference(chain: &StochasticMatrix, alpha: f64, preference: &[f64]) -> Result<PprResult> {
    check_alpha(alpha)?;
    if preference.len() != chain.n_original {
        return Err(Error::DimensionMismatch("preference length differs from the dictionary".into()));
    }
    if preference.iter().any(|&v| !(v >= 0.0)) || (preference.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidSeedSet("preference is not a probability vector".into()));
    }
    for &d in &chain.dropped {
        if preference[d] > 0.0 {
            return Err(Error::SeedDropped(format!("#{d}")));
        }
    }
    let s = Vector::from_fn(chain.len(), |p, _| preference[chain.kept[p]]);
    let pi = numerics::solve_row_resolvent(&s, &chain.p, alpha)?;
    let support = (0..chain.n_original).filter(|&i| preference[i] > 0.0).collect();
    Ok(PprResult::from_positions(chain, &pi, alpha, support))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaps {
    pub delta: f64,
    pub block_min: f64,
    pub tail_max: f64,
}

/// `min_{i in block} pi(i) - max_{j outside} pi(j)`, where the block is the
/// first `n` kept indices and dropped indices count as score 0.
pub fn detection_gaps(pi: &PprResult, n: usize) -> Result<Gaps> {
    let total = pi.scores.len();
    if n == 0 || n >= total || n > pi.kept.len() {
        return Err(Error::InvalidSplit { split: n, n: total });
    }
    let block = &pi.kept[..n];
    let block_min = block.iter().map(|&i| pi.scores[i]).fold(f64::INFINITY, f64::min);
    let tail_max = (0..total)
        .filter(|i| !block.contains(i))
        .map(|i| pi.scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Gaps { delta: block_min - tail_max, block_min, tail_max })
}

/// Closed-form and certificate quantities for one split, damping and seed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n: usize,
    pub n_tilde: usize,
    pub alpha: f64,
    /// Seeds by original index; empty means standard PageRank only.
    pub seed_set: Vec<usize>,
    pub p12_inf: f64,
    pub eta: f64,
    /// `2 alpha ||P12||_inf / (1 - alpha)`.
    pub perturbation_bound: f64,
    pub delta0_pr: f64,
    /// The mixing relaxation: a lower bound on `delta0_pr`.
    pub delta0_pr_lower: f64,
    pub delta0_ppr: Option<f64>,
    pub q_alpha: Vec<f64>,
    pub q_min_alpha: f64,
    pub s_eff: Vec<f64>,
    /// Right-hand side of the explicit PR condition (mixing relaxation).
    pub threshold_pr: f64,
    /// `(1 - alpha) / (4 alpha) * delta0_pr`, the exact-gap PR condition.
    pub threshold_pr_exact: f64,
    pub threshold_ppr: Option<f64>,
    pub mixing_ok: bool,
    pub reachability_ok: Option<bool>,
    /// Sufficient conditions on the actual chain (set by the certificate).
    pub pr_pass: Option<bool>,
    pub pr_pass_relaxed: Option<bool>,
    pub ppr_pass: Option<bool>,
    /// Actual gaps on `P` (set by the certificate).
    pub delta_pr: Option<f64>,
    pub delta_ppr: Option<f64>,
}

struct Resolvents {
    r11: Matrix,
    r22: Matrix,
    p21: Matrix,
}

fn block_resolvents(p0: &Matrix, n: usize, alpha: f64) -> Result<Resolvents> {
    let b = edmd::block(p0, n)?;
    let inv = |m: &Matrix| -> Result<Matrix> {
        let sys = Matrix::identity(m.nrows(), m.ncols()) - m * alpha;
        sys.try_inverse().ok_or_else(|| Error::SolveFailed("singular block resolvent".into()))
    };
    Ok(Resolvents { r11: inv(&b.k11)?, r22: inv(&b.k22)?, p21: b.k21 })
}

/// Closed-form auxiliary gaps on a leakage-free reference chain.
pub fn auxiliary_gaps(p0: &StochasticMatrix, n: usize, alpha: f64, seeds: Option<&[usize]>) -> Result<GapReport> {
    check_alpha(alpha)?;
    edmd::check_split(n, p0.len())?;
    let nt = p0.len();
    let top_right = edmd::block(&p0.p, n)?.k12;
    if top_right.iter().any(|&v| v != 0.0) {
        return Err(Error::InvalidParameter("reference chain must have a zero top-right block".into()));
    }
    let Resolvents { r11, r22, p21 } = block_resolvents(&p0.p, n, alpha)?;
    let r22p21 = &r22 * &p21;
    let s_eff: Vec<f64> = (0..n).map(|v| 1.0 + alpha * r22p21.column(v).sum()).collect();
    let pr_in = (0..n)
        .map(|i| (0..n).map(|v| s_eff[v] * r11[(v, i)]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    let pr_out = (0..nt - n).map(|j| r22.column(j).sum()).fold(0.0, f64::max);
    let nf = n as f64;
    let ntf = nt as f64;
    let delta0_pr = (1.0 - alpha) / ntf * (pr_in - pr_out);

    let q_alpha: Vec<f64> = (0..n).map(|i| (1.0 - alpha) / nf * r11.column(i).sum()).collect();
    let q_min = q_alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let eta = p0.eta(n)?;
    let bracket = q_min - (ntf - nf) * (1.0 - alpha) / (nf * (1.0 - alpha + alpha * eta));
    let delta0_pr_lower = nf / ntf * bracket;
    let factor = if alpha > 0.0 { (1.0 - alpha) / (4.0 * alpha) } else { f64::INFINITY };
    let scaled = |x: f64| if x == 0.0 { 0.0 } else { factor * x };

    let (delta0_ppr, threshold_ppr, reach, seed_list) = match seeds {
        None => (None, None, None, Vec::new()),
        Some(seeds) => {
            let pos = p0.seed_positions(seeds)?;
            if let Some(&s) = seeds.iter().zip(&pos).find(|(_, &p)| p >= n).map(|(s, _)| s) {
                return Err(Error::InvalidSeedSet(format!("seed {s} lies outside the candidate block")));
            }
            let sums: Vec<f64> = (0..n).map(|i| pos.iter().map(|&v| r11[(v, i)]).sum()).collect();
            let m = sums.iter().copied().fold(f64::INFINITY, f64::min);
            let d = (1.0 - alpha) / pos.len() as f64 * m;
            (Some(d), Some(scaled(d)), Some(sums.iter().all(|&x| x > 0.0)), seeds.to_vec())
        }
    };

    Ok(GapReport {
        n,
        n_tilde: nt,
        alpha,
        seed_set: seed_list,
        p12_inf: 0.0,
        eta,
        perturbation_bound: 0.0,
        delta0_pr,
        delta0_pr_lower,
        delta0_ppr,
        q_alpha,
        q_min_alpha: q_min,
        s_eff,
        threshold_pr: scaled(delta0_pr_lower),
        threshold_pr_exact: scaled(delta0_pr),
        threshold_ppr,
        mixing_ok: bracket > 0.0,
        reachability_ok: reach,
        pr_pass: None,
        pr_pass_relaxed: None,
        ppr_pass: None,
        delta_pr: None,
        delta_ppr: None,
    })
}

/// Evaluate the detection conditions on `P` and report the actual gaps.
///
/// PR passes when `||P12|| < (1-a)/(4a) * delta0_pr` with the exact
/// closed-form gap; the relaxed flag uses the mixing lower bound instead.
/// PPR passes when `||P12|| < (1-a)^2/(4a|S|) min_i sum_v R11[v,i]` and every
/// block node is reachable from a seed.
pub fn detection_certificate(chain: &StochasticMatrix, n: usize, alpha: f64, seeds: Option<&[usize]>) -> Result<GapReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("certificate needs damping in (0, 1), got {alpha}")));
    }
    let p0 = renormalized_reference(chain, n)?;
    let mut r = auxiliary_gaps(&p0, n, alpha, seeds)?;
    let p12 = chain.p12_inf(n)?;
    r.p12_inf = p12;
    r.perturbation_bound = 2.0 * alpha * p12 / (1.0 - alpha);
    r.pr_pass = Some(p12 < r.threshold_pr_exact);
    r.pr_pass_relaxed = Some(p12 < r.threshold_pr);
    r.delta_pr = Some(detection_gaps(&pagerank(chain, alpha, None)?, n)?.delta);
    if let Some(seeds) = seeds {
        let t = r.threshold_ppr.unwrap_or(0.0);
        r.ppr_pass = Some(p12 < t && r.reachability_ok == Some(true));
        r.delta_ppr = Some(detection_gaps(&pagerank(chain, alpha, Some(seeds))?, n)?.delta);
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapKind {
    Pr,
    Ppr,
}

/// Whether the sufficient condition holds; skips the actual-gap solves.
fn condition_holds(p0: &StochasticMatrix, p12: f64, n: usize, alpha: f64, seeds: Option<&[usize]>, kind: GapKind) -> Result<bool> {
    match kind {
        GapKind::Pr => Ok(p12 < auxiliary_gaps(p0, n, alpha, None)?.threshold_pr_exact),
        GapKind::Ppr => {
            let r = auxiliary_gaps(p0, n, alpha, seeds)?;
            Ok(r.reachability_ok == Some(true) && p12 < r.threshold_ppr.unwrap_or(0.0))
        }
    }
}

pub const DEFAULT_WINDOW_TOL: f64 = 1e-9;
const WINDOW_GRID: usize = 200;
// Far enough from 0 and 1 that the closed-form gap does not cancel to roundoff.
const WINDOW_PROBE: f64 = 1e-6;

/// `alpha* = sup{alpha in (0,1) : condition holds}` by a grid scan followed by
/// bisection on the last pass/fail transition. Returns 0 when nothing passes.
pub fn alpha_star(chain: &StochasticMatrix, n: usize, seeds: Option<&[usize]>, kind: GapKind, tol: f64) -> Result<f64> {
    if kind == GapKind::Ppr && seeds.is_none() {
        return Err(Error::InvalidSeedSet("PPR window needs a seed set".into()));
    }
    let p0 = renormalized_reference(chain, n)?;
    let p12 = chain.p12_inf(n)?;
    let holds = |a: f64| condition_holds(&p0, p12, n, a, seeds, kind);
    let grid: Vec<f64> = std::iter::once(WINDOW_PROBE)
        .chain((1..WINDOW_GRID).map(|k| k as f64 / WINDOW_GRID as f64))
        .chain(std::iter::once(1.0 - WINDOW_PROBE))
        .collect();
    let mut last = None;
    for (idx, &a) in grid.iter().enumerate() {
        if holds(a)? {
            last = Some(idx);
        }
    }
    let Some(idx) = last else { return Ok(0.0) };
    if idx + 1 == grid.len() {
        return Ok(grid[idx]);
    }
    let (mut lo, mut hi) = (grid[idx], grid[idx + 1]);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if holds(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Example {
    A,
    B,
}

/// Three-state chains with a two-state candidate block.
///
/// A: `[[0, 1-e, e], [1-e, 0, e], [b, b, 1-2b]]`, seed {0} (well mixed block).
/// B: `[[1-e, 0, e], [1, 0, 0], [b, b, 1-2b]]`, seed {1} (node 1 is starved).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleSpec {
    pub which: Example,
    pub beta: f64,
}

impl ExampleSpec {
    pub fn new(which: Example) -> Self {
        ExampleSpec { which, beta: 0.5 }
    }

    pub const N: usize = 2;

    pub fn seeds(&self) -> Vec<usize> {
        match self.which {
            Example::A => vec![0],
            Example::B => vec![1],
        }
    }

    pub fn matrix(&self, eps: f64) -> Result<StochasticMatrix> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::InvalidParameter(format!("leakage must lie in [0, 1], got {eps}")));
        }
        let b = self.beta;
        if !(b > 0.0 && b <= 0.5) {
            return Err(Error::InvalidParameter(format!("beta must lie in (0, 1/2], got {b}")));
        }
        let rows = match self.which {
            Example::A => [0.0, 1.0 - eps, eps, 1.0 - eps, 0.0, eps, b, b, 1.0 - 2.0 * b],
            Example::B => [1.0 - eps, 0.0, eps, 1.0, 0.0, 0.0, b, b, 1.0 - 2.0 * b],
        };
        StochasticMatrix::from_row_stochastic(Matrix::from_row_slice(3, 3, &rows))
    }

    /// Closed-form `(delta0_pr, delta0_ppr)` at damping `alpha`.
    pub fn closed_gaps(&self, alpha: f64) -> (f64, f64) {
        let b = self.beta;
        match self.which {
            Example::A => (alpha * b / (1.0 - alpha + 2.0 * alpha * b), alpha / (1.0 + alpha)),
            Example::B => (
                alpha * (1.0 - alpha) * (3.0 * b - 1.0) / (3.0 * (1.0 - alpha + 2.0 * alpha * b)),
                alpha.min(1.0 - alpha),
            ),
        }
    }

    /// Closed-form `(alpha*_pr, alpha*_ppr)`; only derived for `beta = 1/2`.
    pub fn closed_window(&self, eps: f64) -> Option<(f64, f64)> {
        if self.beta != 0.5 {
            return None;
        }
        Some(match self.which {
            Example::A => ((1.0 - 8.0 * eps).max(0.0), ((1.0 - 4.0 * eps) / (1.0 + 4.0 * eps)).max(0.0)),
            Example::B => {
                let pr = (1.0 - (24.0 * eps).sqrt()).max(0.0);
                let ppr = if eps <= 0.125 {
                    (1.0 + 2.0 * eps) - 2.0 * (eps * (1.0 + eps)).sqrt()
                } else {
                    (1.0 - 4.0 * eps).max(0.0)
                };
                (pr, ppr)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub epsilon: f64,
    pub alpha_star_pr: f64,
    pub alpha_star_ppr: Option<f64>,
    pub alpha_star_pr_closed: Option<f64>,
    pub alpha_star_ppr_closed: Option<f64>,
}

/// `alpha*(eps)` over a grid for one of the built-in examples.
pub fn detection_window(spec: &ExampleSpec, eps_grid: &[f64], tol: f64) -> Result<Vec<WindowPoint>> {
    if eps_grid.is_empty() {
        return Err(Error::InvalidParameter("epsilon grid is empty".into()));
    }
    let seeds = spec.seeds();
    eps_grid
        .par_iter()
        .map(|&eps| {
            let chain = spec.matrix(eps)?;
            let closed = spec.closed_window(eps);
            Ok(WindowPoint {
                epsilon: eps,
                alpha_star_pr: alpha_star(&chain, ExampleSpec::N, None, GapKind::Pr, tol)?,
                alpha_star_ppr: Some(alpha_star(&chain, ExampleSpec::N, Some(&seeds), GapKind::Ppr, tol)?),
                alpha_star_pr_closed: closed.map(|c| c.0),
                alpha_star_ppr_closed: closed.map(|c| c.1),
            })
        })
        .collect()
}

/// `sup{eps : alpha*(eps) > 0}` by bisection on `[0, 1/2]`.
pub fn window_closure(spec: &ExampleSpec, kind: GapKind, tol: f64) -> Result<f64> {
    let seeds = spec.seeds();
    let open = |eps: f64| -> Result<bool> {
        let chain = spec.matrix(eps)?;
        let s = (kind == GapKind::Ppr).then_some(seeds.as_slice());
        Ok(alpha_star(&chain, ExampleSpec::N, s, kind, 1e-6)? > 0.0)
    };
    let (mut lo, mut hi) = (0.0, 0.5);
    if !open(lo)? {
        return Ok(0.0);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if open(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Leakage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Truncated series value.
    pub lambda: f64,
    /// Upper bound on the omitted tail of the series.
    pub truncation_tail: f64,
    pub bound: f64,
    pub gamma: f64,
    pub r_max: f64,
    pub k_max: usize,
    /// PPR mass on the selected set.
    pub pi_mass: f64,
}

/// Terms until `alpha^{k+1} (1-gamma) / (1-alpha)` drops below `1e-14`.
fn default_k_max(alpha: f64, gamma: f64) -> usize {
    let mut k = 1;
    while alpha.powi(k as i32 + 1) * (1.0 - gamma) / (1.0 - alpha) >= 1e-14 && k < 100_000 {
        k += 1;
    }
    k
}

/// Discounted multi-step leakage of `|K^T|` out of `set` and its PPR bound.
pub fn leakage(k: &KoopmanMatrix, set: &[usize], preference: &[f64], alpha: f64, k_max: Option<usize>) -> Result<LeakageReport> {
    let n = k.dim();
    check_alpha(alpha)?;
    if preference.len() != n {
        return Err(Error::DimensionMismatch("preference length differs from K".into()));
    }
    if set.is_empty() || set.iter().any(|&i| i >= n) {
        return Err(Error::InvalidSeedSet("selected set is empty or out of range".into()));
    }
    if preference.iter().enumerate().any(|(i, &v)| v > 0.0 && !set.contains(&i)) {
        return Err(Error::InvalidSeedSet("preference must be supported on the selected set".into()));
    }
    let chain = transition_matrix(k)?;
    let r_max = chain.r_max;
    if !(alpha < r_max) {
        return Err(Error::PreconditionUnsatisfiable(format!("damping {alpha} is not below r_max = {r_max}")));
    }
    let gamma = alpha / r_max;
    let kmax = k_max.unwrap_or_else(|| default_k_max(alpha, gamma));
    let a = k.k.transpose().map(f64::abs);
    let outside: Vec<usize> = (0..n).filter(|i| !set.contains(i)).collect();
    let mut v = Vector::from_column_slice(preference).transpose();
    let mut lambda = 0.0;
    let mut g = 1.0;
    for _ in 0..kmax {
        v = &v * &a;
        g *= gamma;
        lambda += g * outside.iter().map(|&j| v[j]).sum::<f64>();
    }
    lambda *= 1.0 - gamma;
    let tail = (1.0 - gamma) * alpha.powi(kmax as i32 + 1) / (1.0 - alpha);
    let pi = pagerank_with_preference(&chain, alpha, preference)?;
    let pi_mass = pi.mass(set);
    Ok(LeakageReport {
        lambda,
        truncation_tail: tail,
        bound: (1.0 - gamma) / (1.0 - alpha) * (1.0 - pi_mass),
        gamma,
        r_max,
        k_max: kmax,
        pi_mass,
    })
}

// ---------------------------------------------------------------------------
// Finite-sample bounds

/// Population-level quantities needed by the sample-complexity bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationQuantities {
    pub delta0_ppr: f64,
    pub delta0_pr: f64,
    pub p12_inf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Complexity {
    Samples(f64),
    NotSatisfiable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub alpha: f64,
    pub m: usize,
    pub eps_m: f64,
    pub c_edmd: f64,
    pub m_min: f64,
    /// `2 alpha (eps0 + eps_M) / ((1 - alpha) r0_min)`.
    pub pi_bound: f64,
    /// PPR sample complexity at `alpha = 1/2`.
    pub ppr_sample_complexity: Complexity,
    /// PR sample complexity at the report's `alpha`.
    pub pr_sample_complexity: Complexity,
    /// `alpha^2 / (1 - alpha)^2`.
    pub pr_prefactor: f64,
    pub finite_sample_leakage: Option<f64>,
}

/// `M >= max{M_min, 32 a^2 L C^2 / ((1-a)^2 r0^2 (gap - 4 a r_max p12 / ((1-a) r0))^2)}`.
pub fn sample_complexity(params: &FiniteSampleParams, gap: f64, p12_inf: f64, alpha: f64) -> Result<Complexity> {
    let est = edmd::finite_sample_epsilon(params, 1)?;
    let r0 = params.r0_min;
    let eff = gap - 4.0 * alpha * params.r_max * p12_inf / ((1.0 - alpha) * r0);
    if !(gap > 0.0) || !(eff > 0.0) {
        return Ok(Complexity::NotSatisfiable);
    }
    let pref = alpha * alpha / ((1.0 - alpha) * (1.0 - alpha));
    let m = pref * 32.0 * params.log_term() * est.c_edmd.powi(2) / (r0 * r0 * eff * eff);
    Ok(Complexity::Samples(m.max(est.m_min)))
}

/// Evaluate the end-to-end bound, both sample complexities and (when the
/// empirical PPR mass on the selected set is given) the finite-sample leakage.
pub fn end_to_end_report(
    params: &FiniteSampleParams,
    pop: &PopulationQuantities,
    alpha: f64,
    m: usize,
    pi_mass: Option<f64>,
) -> Result<EndToEndReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("damping must lie in (0, 1), got {alpha}")));
    }
    let est = edmd::finite_sample_epsilon(params, m)?;
    let r0 = params.r0_min;
    let leak = match pi_mass {
        Some(mass) => {
            if !(alpha < params.r_max) {
                return Err(Error::PreconditionUnsatisfiable(format!(
                    "damping {alpha} is not below r_max = {}",
                    params.r_max
                )));
            }
            let gamma = alpha / params.r_max;
            Some((1.0 - gamma) / (1.0 - alpha) * (1.0 - mass + 2.0 * alpha * est.eps_m / ((1.0 - alpha) * r0)))
        }
        None => None,
    };
    Ok(EndToEndReport {
        alpha,
        m,
        eps_m: est.eps_m,
        c_edmd: est.c_edmd,
        m_min: est.m_min,
        pi_bound: 2.0 * alpha * (params.eps0 + est.eps_m) / ((1.0 - alpha) * r0),
        ppr_sample_complexity: sample_complexity(params, pop.delta0_ppr, pop.p12_inf, 0.5)?,
        pr_sample_complexity: sample_complexity(params, pop.delta0_pr, pop.p12_inf, alpha)?,
        pr_prefactor: alpha * alpha / ((1.0 - alpha) * (1.0 - alpha)),
        finite_sample_leakage: leak,
    })
}

// ---------------------------------------------------------------------------
// Lemma sweeps

/// Worst margin of one inequality family over a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub evaluations: usize,
    /// `min(rhs - lhs)`; for equalities `-|lhs - rhs|`.
    pub min_margin: f64,
    pub tolerance: f64,
    pub first_violation: Option<String>,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.first_violation.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub instances: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub checks: Vec<CheckSummary>,
}

impl PerturbationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckSummary::passed)
    }

    pub fn first_violation(&self) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| !c.passed())
    }
}

/// Margin tolerance for inequalities in the sweep.
pub const MARGIN_TOL: f64 = 1e-10;
/// Tolerance for the `||P - P(0)|| = 2 ||P12||` identity.
pub const EQUALITY_TOL: f64 = 1e-12;

struct Margin {
    check: &'static str,
    value: f64,
    detail: String,
}

const CHECK_NAMES: [(&str, f64); 7] = [
    ("coupling-abs-power", MARGIN_TOL),
    ("coupling-normalized", MARGIN_TOL),
    ("row-normalization-stability", MARGIN_TOL),
    ("resolvent-perturbation", MARGIN_TOL),
    ("reference-distance-identity", EQUALITY_TOL),
    ("shared-perturbation", MARGIN_TOL),
    ("multi-step-leakage", MARGIN_TOL),
];

fn random_nonneg(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        // sparse-ish: about a quarter of entries are exact zeros
        if rng.random::<f64>() < 0.25 {
            0.0
        } else {
            rng.random::<f64>()
        }
    })
}

fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    loop {
        let a = random_nonneg(rng, n, n);
        if let Ok(p) = row_normalize(&a) {
            return p;
        }
    }
}

fn random_probability(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    let v = Vector::from_fn(n, |_, _| rng.random::<f64>() + 1e-3);
    let s = v.sum();
    v / s
}

/// Random chain whose top-right block carries a random fraction of the top rows' mass.
fn random_block_chain(rng: &mut ChaCha8Rng, n: usize, split: usize) -> StochasticMatrix {
    let mut a = random_nonneg(rng, n, n);
    let leak = [0.0, 1e-3, 0.05, 0.3, 1.0][rng.random_range(0..5)];
    for i in 0..split {
        a[(i, (i + 1) % split)] += 0.5;
        for j in split..n {
            a[(i, j)] *= leak;
        }
    }
    for i in split..n {
        a[(i, i)] += 0.1;
    }
    StochasticMatrix::from_row_stochastic(row_normalize(&a).expect("rows have mass")).expect("stochastic")
}

fn relative(rhs: f64, lhs: f64) -> f64 {
    (rhs - lhs) / rhs.abs().max(1.0)
}

fn instance_margins(seed: u64, index: usize, alphas: &[f64]) -> Result<Vec<Margin>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = rng.random_range(3..=8usize);
    let split = rng.random_range(1..n);
    let mut out = Vec::new();
    let tag = |what: &str| format!("instance {index} (n={n}, N={split}): {what}");

    // coupling: |A^k| <= |A|^k <= r_max^k R(|A|)^k
    let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let abs_a = a.map(f64::abs);
    let r = inf_norm(&a);
    let a_hat = row_normalize(&abs_a)?;
    let (mut ak, mut absk, mut hatk) = (a.clone(), abs_a.clone(), a_hat.clone());
    for k in 1..=8 {
        if k > 1 {
            ak = &ak * &a;
            absk = &absk * &abs_a;
            hatk = &hatk * &a_hat;
        }
        let rk = r.powi(k);
        let (mut m1, mut m2) = (f64::INFINITY, f64::INFINITY);
        for idx in 0..n * n {
            m1 = m1.min(relative(absk[idx], ak[idx].abs()));
            m2 = m2.min(relative(rk * hatk[idx], absk[idx]));
        }
        out.push(Margin { check: "coupling-abs-power", value: m1, detail: tag(&format!("k={k}")) });
        out.push(Margin { check: "coupling-normalized", value: m2, detail: tag(&format!("k={k}")) });
    }

    // row normalization: ||R(A) - R(B)|| <= 2/r_min(A) ||A - B||
    let base = random_nonneg(&mut rng, n, n) + Matrix::from_element(n, n, 0.01);
    let scale = [1e-4, 1e-2, 0.5, 2.0][rng.random_range(0..4)];
    let other = (&base + random_nonneg(&mut rng, n, n) * scale - random_nonneg(&mut rng, n, n) * scale).map(f64::abs);
    if min_abs_row_sum(&other) > 0.0 {
        let lhs = inf_norm(&(row_normalize(&base)? - row_normalize(&other)?));
        let rhs = 2.0 / min_abs_row_sum(&base) * inf_norm(&(&base - &other));
        out.push(Margin { check: "row-normalization-stability", value: relative(rhs, lhs), detail: tag(&format!("scale={scale}")) });
    }

    // resolvent: ||q - q'||_1 <= a/(1-a) ||S - S'||
    let s1 = random_stochastic(&mut rng, n);
    let s2 = if rng.random::<bool>() {
        random_stochastic(&mut rng, n)
    } else {
        row_normalize(&(&s1 + random_nonneg(&mut rng, n, n) * 1e-2))?
    };
    let pref = random_probability(&mut rng, n);
    for &alpha in alphas {
        let q1 = numerics::solve_row_resolvent(&pref, &s1, alpha)?;
        let q2 = numerics::solve_row_resolvent(&pref, &s2, alpha)?;
        let lhs = (q1 - q2).abs().sum();
        let rhs = alpha / (1.0 - alpha) * inf_norm(&(&s1 - &s2));
        out.push(Margin { check: "resolvent-perturbation", value: relative(rhs, lhs), detail: tag(&format!("alpha={alpha}")) });
    }

    // shared bound on a block chain
    let chain = random_block_chain(&mut rng, n, split);
    let p0 = renormalized_reference(&chain, split)?;
    let p12 = chain.p12_inf(split)?;
    let dist = inf_norm(&(&chain.p - &p0.p));
    out.push(Margin {
        check: "reference-distance-identity",
        value: -(dist - 2.0 * p12).abs(),
        detail: tag(&format!("||P-P0||={dist}, 2||P12||={}", 2.0 * p12)),
    });
    let n_seeds = rng.random_range(1..=split);
    let mut seeds: Vec<usize> = (0..split).collect();
    for i in 0..n_seeds {
        let j = rng.random_range(i..split);
        seeds.swap(i, j);
    }
    seeds.truncate(n_seeds);
    for &alpha in alphas {
        let rhs = 2.0 * alpha / (1.0 - alpha) * p12;
        for s in [None, Some(seeds.as_slice())] {
            let pi = pagerank(&chain, alpha, s)?;
            let pi0 = pagerank(&p0, alpha, s)?;
            let lhs: f64 = pi.scores.iter().zip(&pi0.scores).map(|(x, y)| (x - y).abs()).sum();
            let which = if s.is_some() { "ppr" } else { "pr" };
            out.push(Margin {
                check: "shared-perturbation",
                value: relative(rhs, lhs),
                detail: tag(&format!("{which}, alpha={alpha}")),
            });
        }
    }

    // multi-step leakage of a random signed K
    let c = rng.random_range(0.5..2.4);
    let mut kmat = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let rk = inf_norm(&kmat.transpose());
    kmat *= c / rk;
    let kk = KoopmanMatrix::anonymous(kmat)?;
    let size = rng.random_range(2..=3usize).min(n - 1);
    let set: Vec<usize> = (0..size).collect();
    let mut prefv = vec![0.0; n];
    let w = random_probability(&mut rng, size);
    for (i, &v) in w.iter().enumerate() {
        prefv[i] = v;
    }
    let r_max = transition_matrix(&kk)?.r_max;
    let mut leak_alphas = vec![0.4 * r_max];
    leak_alphas.extend(alphas.iter().copied().filter(|&a| a < r_max));
    for alpha in leak_alphas {
        if alpha >= 1.0 {
            continue;
        }
        let rep = leakage(&kk, &set, &prefv, alpha, None)?;
        out.push(Margin {
            check: "multi-step-leakage",
            value: relative(rep.bound, rep.lambda + rep.truncation_tail),
            detail: tag(&format!("alpha={alpha:.4}, r_max={r_max:.4}")),
        });
    }
    Ok(out)
}

/// Check the coupling, row-normalization, resolvent, shared-perturbation and
/// leakage inequalities on `instances` seeded random block instances.
pub fn perturbation_suite(instances: usize, seed: u64, alphas: &[f64]) -> Result<PerturbationReport> {
    if instances == 0 {
        return Err(Error::InvalidParameter("need at least one instance".into()));
    }
    if let Some(&a) = alphas.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::InvalidParameter(format!("damping {a} not in (0, 1)")));
    }
    let per: Vec<Vec<Margin>> = (0..instances)
        .into_par_iter()
        .map(|i| instance_margins(seed, i, alphas))
        .collect::<Result<_>>()?;
    let checks = CHECK_NAMES
        .iter()
        .map(|&(name, tol)| {
            let mut summary = CheckSummary {
                name: name.to_string(),
                evaluations: 0,
                min_margin: f64::INFINITY,
                tolerance: tol,
                first_violation: None,
            };
            for m in per.iter().flatten().filter(|m| m.check == name) {
                summary.evaluations += 1;
                summary.min_margin = summary.min_margin.min(m.value);
                if m.value < -tol && summary.first_violation.is_none() {
                    summary.first_violation = Some(format!("{} (margin {:.3e})", m.detail, m.value));
                }
            }
            summary
        })
        .collect();
    Ok(PerturbationReport { instances, seed, alphas: alphas.to_vec(), checks })
}
