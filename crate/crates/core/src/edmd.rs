//! EDMD estimation, block structure and finite-sample constants.
//!
//! Convention: column `i` of `K` holds the coefficients of `K psi_i` in the
//! dictionary, so `K[j, i]` is the weight of `psi_j`. The bottom-left block
//! `K21` (rows `N..`, columns `..N`) is therefore the part of the first `N`
//! observables' images that leaks outside their span.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::numerics::{self, frobenius_norm, inf_norm, Matrix, PivotedQr, RankPolicy};
use crate::systems::{read_table, write_table, BoxRegion, System};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanMatrix {
    pub k: Matrix,
    pub names: Vec<String>,
    pub split: Option<usize>,
    /// `||Psi(Y) - Psi(X) K||_F` on the fitting data, when known.
    pub residual: Option<f64>,
}

/// The four blocks of a split matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    pub k11: Matrix,
    pub k12: Matrix,
    pub k21: Matrix,
    pub k22: Matrix,
}

/// Entries of `K21` below this fraction of `||K||_F` count as structural zeros.
pub const STRUCTURAL_ZERO_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub split: usize,
    pub n_tilde: usize,
    pub offdiag_frobenius: f64,
    pub max_abs_k21: f64,
    pub zero_threshold: f64,
    /// Every entry of `K21` is below the structural-zero threshold.
    pub structural_zero: bool,
    pub bound_note: String,
}

/// JSON sidecar for a matrix CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanMeta {
    pub names: Vec<String>,
    pub split: Option<usize>,
    pub residual: Option<f64>,
    pub manifest_hash: Option<String>,
}

impl KoopmanMatrix {
    pub fn new(k: Matrix, names: Vec<String>) -> Result<Self> {
        if k.nrows() != k.ncols() {
            return Err(Error::DimensionMismatch(format!("K is {}x{}", k.nrows(), k.ncols())));
        }
        if names.len() != k.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} names for a {}x{} matrix",
                names.len(),
                k.nrows(),
                k.ncols()
            )));
        }
        Ok(KoopmanMatrix { k, names, split: None, residual: None })
    }

    /// Unnamed matrix; observables are called `psi1..psiN`.
    pub fn anonymous(k: Matrix) -> Result<Self> {
        let names = (1..=k.nrows()).map(|i| format!("psi{i}")).collect();
        Self::new(k, names)
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn with_split(mut self, n: usize) -> Result<Self> {
        check_split(n, self.dim())?;
        self.split = Some(n);
        Ok(self)
    }

    pub fn block(&self, n: usize) -> Result<Blocks> {
        block(&self.k, n)
    }

    pub fn offdiag_frobenius(&self, n: usize) -> Result<f64> {
        offdiag_frobenius(&self.k, n)
    }

    pub fn block_report(&self, n: usize) -> Result<BlockReport> {
        let b = self.block(n)?;
        let thr = STRUCTURAL_ZERO_REL * frobenius_norm(&self.k);
        let max_abs = b.k21.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(BlockReport {
            split: n,
            n_tilde: self.dim(),
            offdiag_frobenius: frobenius_norm(&b.k21),
            max_abs_k21: max_abs,
            zero_threshold: thr,
            structural_zero: max_abs <= thr,
            bound_note: "||K21||_F bounds the projection error only for an orthonormal dictionary".into(),
        })
    }

    /// Simultaneous row/column relabeling: new index `a` is old index `perm[a]`.
    pub fn permute(&self, perm: &[usize]) -> Result<KoopmanMatrix> {
        check_permutation(perm, self.dim())?;
        let k = Matrix::from_fn(self.dim(), self.dim(), |a, b| self.k[(perm[a], perm[b])]);
        let names = perm.iter().map(|&p| self.names[p].clone()).collect();
        Ok(KoopmanMatrix { k, names, split: self.split, residual: self.residual })
    }

    /// Copy with `K21 = 0`.
    pub fn zero_bottom_left(&self, n: usize) -> Result<KoopmanMatrix> {
        check_split(n, self.dim())?;
        let mut out = self.clone();
        for j in n..self.dim() {
            for i in 0..n {
                out.k[(j, i)] = 0.0;
            }
        }
        out.split = Some(n);
        Ok(out)
    }

    /// Principal submatrix on `indices` (in that order).
    pub fn submatrix(&self, indices: &[usize]) -> KoopmanMatrix {
        let k = Matrix::from_fn(indices.len(), indices.len(), |a, b| self.k[(indices[a], indices[b])]);
        let names = indices.iter().map(|&i| self.names[i].clone()).collect();
        KoopmanMatrix { k, names, split: None, residual: None }
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path, manifest_hash: Option<String>) -> Result<()> {
        write_table(csv_path, &self.names, self.dim(), |r| self.k.row(r).iter().copied().collect())?;
        let meta = KoopmanMeta {
            names: self.names.clone(),
            split: self.split,
            residual: self.residual,
            manifest_hash,
        };
        std::fs::write(json_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read(csv_path: &Path) -> Result<KoopmanMatrix> {
        let (names, rows) = read_table(csv_path)?;
        let n = names.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("{} is not a square matrix", csv_path.display())));
        }
        KoopmanMatrix::new(Matrix::from_fn(n, n, |i, j| rows[i][j]), names)
    }
}

pub fn check_split(n: usize, n_tilde: usize) -> Result<()> {
    if n == 0 || n >= n_tilde {
        Err(Error::InvalidSplit { split: n, n: n_tilde })
    } else {
        Ok(())
    }
}

pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!("length {} for {n} indices", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidPermutation(format!("index {p} repeated or out of range")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn block(k: &Matrix, n: usize) -> Result<Blocks> {
    let nt = k.nrows();
    check_split(n, nt)?;
    Ok(Blocks {
        k11: k.view((0, 0), (n, n)).into_owned(),
        k12: k.view((0, n), (n, nt - n)).into_owned(),
        k21: k.view((n, 0), (nt - n, n)).into_owned(),
        k22: k.view((n, n), (nt - n, nt - n)).into_owned(),
    })
}

/// `||K21||_F`.
pub fn offdiag_frobenius(k: &Matrix, n: usize) -> Result<f64> {
    Ok(frobenius_norm(&block(k, n)?.k21))
}

/// `K = Psi(X)^+ Psi(Y)`, strict full-rank solve.
pub fn edmd(psi_x: &Matrix, psi_y: &Matrix, names: &[String]) -> Result<KoopmanMatrix> {
    edmd_with(psi_x, psi_y, names, RankPolicy::Strict)
}

pub fn edmd_with(psi_x: &Matrix, psi_y: &Matrix, names: &[String], policy: RankPolicy) -> Result<KoopmanMatrix> {
    if psi_x.shape() != psi_y.shape() {
        return Err(Error::DimensionMismatch(format!(
            "Psi(X) is {:?}, Psi(Y) is {:?}",
            psi_x.shape(),
            psi_y.shape()
        )));
    }
    if names.len() != psi_x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} names for {} columns",
            names.len(),
            psi_x.ncols()
        )));
    }
    numerics::check_finite(psi_x, "Psi(X)")?;
    numerics::check_finite(psi_y, "Psi(Y)")?;
    let qr = PivotedQr::new(psi_x);
    let k = match qr.solve(psi_y, policy) {
        Ok(k) => k,
        Err(Error::RankDeficient { rank, cols, .. }) => {
            // the trailing pivots are the columns the factorization could not use
            let names = qr.pivots()[rank.min(cols)..].iter().map(|&i| names[i].clone()).collect();
            return Err(Error::RankDeficient { rank, cols, names });
        }
        Err(e) => return Err(e),
    };
    let residual = frobenius_norm(&(psi_y - psi_x * &k));
    Ok(KoopmanMatrix { k, names: names.to_vec(), split: None, residual: Some(residual) })
}

/// Analytic Koopman matrix of the toy map on `{x1, x2, x1^2}`.
pub fn toy_analytic_k3(system: &System) -> Result<Matrix> {
    match system {
        System::Toy2d { dt, a, b } => {
            let l = 1.0 - dt * a;
            let m = 1.0 - dt * b;
            Ok(Matrix::from_row_slice(3, 3, &[l, 0.0, 0.0, 0.0, m, 0.0, 0.0, dt * b, l * l]))
        }
        other => Err(Error::InvalidSystem(format!("{} has no analytic 3x3 matrix", other.name()))),
    }
}

/// Inputs of the concentration bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSampleParams {
    pub n_tilde: usize,
    pub bound_d: f64,
    pub lambda_min: f64,
    pub gram_norm2: f64,
    pub rho: f64,
    pub r0_min: f64,
    pub r_max: f64,
    pub eps0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteSampleEstimate {
    pub eps_m: f64,
    pub c_edmd: f64,
    pub m_min: f64,
}

impl FiniteSampleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 0.5) {
            return Err(Error::InvalidProbability(self.rho));
        }
        let pos = [self.bound_d, self.lambda_min, self.gram_norm2, self.r0_min, self.r_max];
        if self.n_tilde == 0 || pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(
                "finite-sample parameters must be positive and finite".into(),
            ));
        }
        if !(self.eps0 >= 0.0 && self.eps0.is_finite()) {
            return Err(Error::InvalidParameter("eps0 must be nonnegative".into()));
        }
        Ok(())
    }

    /// `C_EDMD = 4 N^{3/2} D^2 (1 + ||G||_2 / lambda_min) / lambda_min`.
    pub fn c_edmd(&self) -> f64 {
        let n = self.n_tilde as f64;
        4.0 * n.powf(1.5) * self.bound_d.powi(2) * (1.0 + self.gram_norm2 / self.lambda_min) / self.lambda_min
    }

    pub fn log_term(&self) -> f64 {
        (2.0 * self.n_tilde as f64 / self.rho).ln()
    }
}

/// `eps_M = C sqrt(2 log(2N/rho) / M)` and the sample threshold
/// `M_min = 32 N^2 D^4 / lambda_min^2 * log(2N/rho)`.
pub fn finite_sample_epsilon(params: &FiniteSampleParams, m: usize) -> Result<FiniteSampleEstimate> {
    params.validate()?;
    if m == 0 {
        return Err(Error::InvalidParameter("M must be at least 1".into()));
    }
    let c = params.c_edmd();
    let lg = params.log_term();
    let n = params.n_tilde as f64;
    Ok(FiniteSampleEstimate {
        eps_m: c * (2.0 * lg / m as f64).sqrt(),
        c_edmd: c,
        m_min: 32.0 * n * n * params.bound_d.powi(4) / params.lambda_min.powi(2) * lg,
    })
}

/// Empirical Gram `G = Psi(X)^T Psi(X) / M`: `(lambda_min, ||G||_2)`.
pub fn gram_estimate(psi_x: &Matrix) -> (f64, f64) {
    let m = psi_x.nrows().max(1) as f64;
    let g = psi_x.transpose() * psi_x / m;
    let eig = numerics::symmetric_eigenvalues(&g);
    let lmin = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let lmax = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    (lmin, lmax)
}

/// `max_j sup |psi_j|` over a dense grid on a box (`points_per_axis` per axis).
pub fn sup_bound(dict: &Dictionary, region: &BoxRegion, points_per_axis: usize) -> Result<f64> {
    region.validate()?;
    if points_per_axis < 2 {
        return Err(Error::InvalidParameter("grid needs at least 2 points per axis".into()));
    }
    let d = region.lo.len();
    let total = points_per_axis.checked_pow(d as u32).ok_or_else(|| {
        Error::InvalidParameter("grid too large".into())
    })?;
    let pts = Matrix::from_fn(total, d, |r, c| {
        let idx = (r / points_per_axis.pow(c as u32)) % points_per_axis;
        let t = idx as f64 / (points_per_axis - 1) as f64;
        region.lo[c] + t * (region.hi[c] - region.lo[c])
    });
    let vals = dict.evaluate(&pts)?;
    Ok(vals.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

/// `||(K0 - K)^T||_inf`.
pub fn eps0(k: &Matrix, k0: &Matrix) -> f64 {
    inf_norm(&(k0 - k).transpose())
}

/// Per-step prediction error on `targets` (column indices of the sub-dictionary).
///
/// `truth[s]` holds `Psi(F^{s+1}(x))` for the test points; step `s + 1`
/// compares it with `Psi(x) K^{s+1}` in empirical `L2`, summed over targets.
pub fn prediction_error_from_steps(k: &Matrix, psi_x: &Matrix, truth: &[Matrix], targets: &[usize]) -> Result<Vec<f64>> {
    let n = k.nrows();
    if psi_x.ncols() != n || truth.iter().any(|t| t.shape() != psi_x.shape()) {
        return Err(Error::DimensionMismatch("prediction inputs disagree in shape".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::InvalidParameter(format!("target index {t} outside the sub-dictionary")));
    }
    let m = psi_x.nrows().max(1) as f64;
    let mut pred = psi_x.clone();
    let mut out = Vec::with_capacity(truth.len());
    for t in truth {
        pred = &pred * k;
        let mut acc = 0.0;
        for &j in targets {
            let col = t.column(j) - pred.column(j);
            acc += col.norm_squared() / m;
        }
        out.push(acc.sqrt());
    }
    Ok(out)
}

/// Prediction error for a deterministic system: the truth is built by
/// iterating the flow map from the test points.
pub fn prediction_error(
    k_sub: &KoopmanMatrix,
    dict: &Dictionary,
    system: &System,
    test_points: &Matrix,
    targets: &[usize],
    horizon: usize,
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    if dict.len() != k_sub.dim() {
        return Err(Error::DimensionMismatch("dictionary and K disagree in size".into()));
    }
    let psi_x = dict.evaluate(test_points)?;
    let mut states = test_points.clone();
    let mut truth = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let next: Vec<Vec<f64>> = states
            .row_iter()
            .map(|r| system.flow_map(&r.iter().copied().collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        states = Matrix::from_fn(states.nrows(), states.ncols(), |i, j| next[i][j]);
        truth.push(dict.evaluate(&states)?);
    }
    prediction_error_from_steps(&k_sub.k, &psi_x, &truth, targets)
}

/// Display rescale `a -> -1 + 2 / (1 + e^{-a})` used for heatmaps.
pub fn display_rescale(a: f64) -> f64 {
    -1.0 + 2.0 / (1.0 + (-a).exp())
}

/// Row-major array of entries, optionally rescaled for display.
pub fn heatmap(k: &Matrix, rescale: bool) -> Vec<Vec<f64>> {
    k.row_iter()
        .map(|r| r.iter().map(|&v| if rescale { display_rescale(v) } else { v }).collect())
        .collect()
}
