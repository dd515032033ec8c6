//! Dense real-matrix kernels.
//!
//! Everything downstream is built on four primitives: a column-pivoted
//! Householder QR for least squares (strict and minimum-norm), a dense LU
//! solve for the row resolvent `(1 - a) s (I - aQ)^-1`, a handful of matrix
//! norms, and a general eigen-decomposition (real Schur form for the values,
//! complex inverse iteration for the vectors).
//!
//! Matrices are `nalgebra::DMatrix<f64>`; the storage order is nalgebra's
//! (column-major), which suits the column-oriented Householder sweeps.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// How a least-squares solve treats a numerically rank-deficient design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankPolicy {
    /// Fail with [`Error::RankDeficient`].
    #[default]
    Strict,
    /// Return the minimum-norm solution on the numerical column space.
    MinNorm,
}

/// Column-pivoted Householder QR of a column-equilibrated copy of `A`.
///
/// `A D^-1 P = Q R` where `D = diag(column norms)` and `P` is the pivot
/// permutation (`perm[k]` is the original column placed at position `k`).
#[derive(Debug, Clone)]
pub struct PivotedQr {
    rows: usize,
    cols: usize,
    /// Householder vectors (full length `rows`, zero above the diagonal).
    reflectors: Vec<(Vec<f64>, f64)>,
    r: Matrix,
    perm: Vec<usize>,
    scale: Vec<f64>,
    rank: usize,
}

impl PivotedQr {
    pub fn new(a: &Matrix) -> Self {
        let (m, n) = a.shape();
        let mut work = a.clone();
        let scale: Vec<f64> = (0..n)
            .map(|j| {
                let s = work.column(j).norm();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        for (j, s) in scale.iter().enumerate() {
            work.column_mut(j).unscale_mut(*s);
        }

        let steps = m.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut reflectors = Vec::with_capacity(steps);
        let data = work.as_mut_slice();

        for k in 0..steps {
            // pivot on the largest remaining column norm
            let mut best = k;
            let mut best_norm = -1.0;
            for j in k..n {
                let col = &data[j * m + k..(j + 1) * m];
                let nrm: f64 = col.iter().map(|v| v * v).sum();
                if nrm > best_norm {
                    best_norm = nrm;
                    best = j;
                }
            }
            if best != k {
                for i in 0..m {
                    data.swap(k * m + i, best * m + i);
                }
                perm.swap(k, best);
            }

            let x = &data[k * m + k..(k + 1) * m];
            let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut v = vec![0.0; m];
            if norm_x == 0.0 {
                reflectors.push((v, 0.0));
                continue;
            }
            let alpha = if x[0] >= 0.0 { -norm_x } else { norm_x };
            v[k..].copy_from_slice(x);
            v[k] -= alpha;
            let vtv: f64 = v[k..].iter().map(|t| t * t).sum();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };

            data[k * m + k] = alpha;
            for i in k + 1..m {
                data[k * m + i] = 0.0;
            }
            for j in k + 1..n {
                let col = &mut data[j * m..(j + 1) * m];
                let dot: f64 = v[k..].iter().zip(&col[k..]).map(|(a, b)| a * b).sum();
                let f = beta * dot;
                if f != 0.0 {
                    for (c, vi) in col[k..].iter_mut().zip(&v[k..]) {
                        *c -= f * vi;
                    }
                }
            }
            reflectors.push((v, beta));
        }

        let r = work.rows(0, steps).into_owned();
        let r00 = if steps > 0 { r[(0, 0)].abs() } else { 0.0 };
        let tol = m.max(n) as f64 * f64::EPSILON * r00;
        let rank = (0..steps).take_while(|&k| r[(k, k)].abs() > tol).count();

        PivotedQr {
            rows: m,
            cols: n,
            reflectors,
            r,
            perm,
            scale,
            rank,
        }
    }

    /// Numerical rank under the threshold `max(M, N) * eps * |R[0,0]|`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn pivots(&self) -> &[usize] {
        &self.perm
    }

    /// Apply `Q^T` to the columns of `b` in place.
    fn apply_qt(&self, b: &mut Matrix) {
        let m = self.rows;
        let k_cols = b.ncols();
        let data = b.as_mut_slice();
        for (k, (v, beta)) in self.reflectors.iter().enumerate() {
            if *beta == 0.0 {
                continue;
            }
            for j in 0..k_cols {
                let col = &mut data[j * m..(j + 1) * m];
                let dot: f64 = v[k..].iter().zip(&col[k..]).map(|(a, c)| a * c).sum();
                let f = beta * dot;
                for (c, vi) in col[k..].iter_mut().zip(&v[k..]) {
                    *c -= f * vi;
                }
            }
        }
    }

    /// Undo the pivot permutation and the column equilibration.
    fn unpermute(&self, y: &Matrix) -> Matrix {
        let mut x = Matrix::zeros(self.cols, y.ncols());
        for (pos, &orig) in self.perm.iter().enumerate() {
            let s = self.scale[orig];
            for j in 0..y.ncols() {
                x[(orig, j)] = y[(pos, j)] / s;
            }
        }
        x
    }

    pub fn solve(&self, b: &Matrix, policy: RankPolicy) -> Result<Matrix> {
        if b.nrows() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has {} rows, design has {}",
                b.nrows(),
                self.rows
            )));
        }
        let n = self.cols;
        let full = self.rank == n && self.rows >= n;
        if !full && policy == RankPolicy::Strict {
            return Err(Error::RankDeficient {
                rank: self.rank,
                cols: n,
                names: Vec::new(),
            });
        }
        let mut qtb = b.clone();
        self.apply_qt(&mut qtb);
        let steps = self.r.nrows();
        let c = qtb.rows(0, steps).into_owned();

        let y = if full {
            back_substitute(&self.r.columns(0, n).into_owned(), &c)
        } else {
            // minimum-norm solution of R y = c through the SVD of R
            let r = self.r.clone();
            let svd = r.svd(true, true);
            let smax = svd.singular_values.max();
            let tol = self.rows.max(n) as f64 * f64::EPSILON * smax;
            svd.solve(&c, tol).map_err(|e| Error::SolveFailed(e.to_string()))?
        };
        Ok(self.unpermute(&y))
    }
}

fn back_substitute(r: &Matrix, c: &Matrix) -> Matrix {
    let n = r.ncols();
    let mut y = Matrix::zeros(n, c.ncols());
    for col in 0..c.ncols() {
        for i in (0..n).rev() {
            let mut acc = c[(i, col)];
            for k in i + 1..n {
                acc -= r[(i, k)] * y[(k, col)];
            }
            y[(i, col)] = acc / r[(i, i)];
        }
    }
    y
}

/// `argmin_X ||B - A X||_F` for a full-column-rank `A`.
pub fn least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    least_squares_with(a, b, RankPolicy::Strict)
}

pub fn least_squares_with(a: &Matrix, b: &Matrix, policy: RankPolicy) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    check_finite(a, "A")?;
    check_finite(b, "B")?;
    PivotedQr::new(a).solve(b, policy)
}

/// `(1 - alpha) s (I - alpha Q)^-1` as a row vector, via an LU solve of the
/// transposed system.
pub fn solve_row_resolvent(s: &Vector, q: &Matrix, alpha: f64) -> Result<Vector> {
    let n = q.nrows();
    if q.ncols() != n || s.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "resolvent needs square Q matching s (Q {}x{}, s {})",
            q.nrows(),
            q.ncols(),
            s.len()
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "damping must lie in [0, 1), got {alpha}"
        )));
    }
    if q.iter().any(|&v| v < 0.0) || inf_norm(q) > 1.0 + 1e-9 {
        return Err(Error::InvalidParameter(
            "resolvent needs a nonnegative Q with ||Q||_inf <= 1".into(),
        ));
    }
    if alpha == 0.0 {
        return Ok(s.clone());
    }
    let system = Matrix::identity(n, n) - q.transpose() * alpha;
    let x = system
        .lu()
        .solve(s)
        .ok_or_else(|| Error::SolveFailed("singular resolvent system".into()))?;
    Ok(x * (1.0 - alpha))
}

/// Max absolute row sum.
pub fn inf_norm(a: &Matrix) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Min absolute row sum (0 for an empty matrix).
pub fn min_abs_row_sum(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

pub fn check_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} has non-finite entries")))
    }
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: Complex64,
    /// Unit-norm right eigenvector.
    pub vector: DVector<Complex64>,
}

const SCHUR_MAX_ITER_PER_DIM: usize = 1000;

/// Eigenpairs of a general square matrix, sorted by modulus descending.
pub fn eig(a: &Matrix) -> Result<Vec<EigenPair>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch("eig needs a square matrix".into()));
    }
    check_finite(a, "A")?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let max_iter = SCHUR_MAX_ITER_PER_DIM * n;
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, max_iter)
        .ok_or(Error::EigFailed {
            iterations: max_iter,
        })?;
    let values = schur.complex_eigenvalues();

    let ac: DMatrix<Complex64> = a.map(|v| Complex64::new(v, 0.0));
    let scale = frobenius_norm(a).max(f64::MIN_POSITIVE);
    let mut pairs = Vec::with_capacity(n);
    for &lambda in values.iter() {
        let vector = inverse_iteration(&ac, lambda, scale)?;
        pairs.push(EigenPair {
            value: lambda,
            vector,
        });
    }
    pairs.sort_by(|x, y| y.value.norm().total_cmp(&x.value.norm()));
    Ok(pairs)
}

fn inverse_iteration(a: &DMatrix<Complex64>, lambda: Complex64, scale: f64) -> Result<DVector<Complex64>> {
    let n = a.nrows();
    let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.37 * i as f64, 0.11 * (i % 3) as f64));
    let nv = v.norm();
    v.unscale_mut(nv);

    let mut best: Option<(f64, DVector<Complex64>)> = None;
    for attempt in 0..4 {
        let delta = scale * 1e-13 * 10f64.powi(2 * attempt);
        let shift = lambda + Complex64::new(delta, delta);
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] -= shift;
        }
        let lu = b.lu();
        let mut x = v.clone();
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&x) {
                Some(y) if y.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => {
                    let ny = y.norm();
                    if ny == 0.0 {
                        ok = false;
                        break;
                    }
                    x = y.unscale(ny);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let resid = (a * &x - &x * lambda).norm();
        if resid <= 1e-10 * scale {
            return Ok(x);
        }
        if best.as_ref().is_none_or(|(r, _)| resid < *r) {
            best = Some((resid, x));
        }
    }
    best.map(|(_, x)| x).ok_or(Error::EigFailed { iterations: 12 })
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let mut vals: Vec<f64> = a.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Entrywise absolute value.
pub fn abs(a: &Matrix) -> Matrix {
    a.map(f64::abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut q = Matrix::from_fn(n, n, |_, _| rng.random::<f64>());
        for mut row in q.row_iter_mut() {
            let s: f64 = row.iter().sum();
            row /= s;
        }
        q
    }

    /// Truncated Neumann series `(1-a) sum_k a^k s Q^k`, stopping once
    /// `a^k < 1e-14`.
    fn neumann_oracle(s: &Vector, q: &Matrix, alpha: f64) -> Vector {
        let mut term = s.transpose();
        let mut acc = term.clone();
        let mut weight = 1.0;
        while weight >= 1e-14 {
            term = &term * q;
            weight *= alpha;
            acc += &term * weight;
        }
        (acc * (1.0 - alpha)).transpose()
    }

    #[test]
    fn identity_design_returns_rhs() {
        let b = Matrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 4.0, 0.5, 6.0]);
        let x = least_squares(&Matrix::identity(3, 3), &b).unwrap();
        assert!((x - b).abs().max() < 1e-15);
    }

    #[test]
    fn single_column_projection_is_mean() {
        let a = Matrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = Matrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let x = least_squares(&a, &b).unwrap();
        assert!((x[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn recovers_planted_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 50, 5);
        let x0 = random_matrix(&mut rng, 5, 3);
        let b = &a * &x0;
        let x = least_squares(&a, &b).unwrap();
        assert!((x - x0).abs().max() < 1e-10);
    }

    #[test]
    fn matches_normal_equations_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 40, 6);
        let b = random_matrix(&mut rng, 40, 2);
        let x = least_squares(&a, &b).unwrap();
        let ata = a.transpose() * &a;
        let normal = ata.lu().solve(&(a.transpose() * &b)).unwrap();
        assert!((x - normal).abs().max() < 1e-10);
    }

    #[test]
    fn rank_deficient_is_reported() {
        let mut a = Matrix::zeros(6, 3);
        for i in 0..6 {
            a[(i, 0)] = i as f64;
            a[(i, 1)] = 1.0;
            a[(i, 2)] = 2.0 * i as f64 + 3.0;
        }
        let b = Matrix::from_element(6, 1, 1.0);
        match least_squares(&a, &b) {
            Err(Error::RankDeficient { rank, cols, .. }) => {
                assert_eq!(rank, 2);
                assert_eq!(cols, 3);
            }
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn min_norm_fits_rank_deficient_design() {
        // duplicated column: fitted values must still be the projection
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_matrix(&mut rng, 30, 3);
        let mut a = Matrix::zeros(30, 4);
        a.columns_mut(0, 3).copy_from(&base);
        a.set_column(3, &base.column(1));
        let b = random_matrix(&mut rng, 30, 2);
        let x = least_squares_with(&a, &b, RankPolicy::MinNorm).unwrap();
        let x3 = least_squares(&base, &b).unwrap();
        assert!(((&a * &x) - (&base * &x3)).abs().max() < 1e-10);
        // the duplicated pair shares the weight equally
        assert!((x[(1, 0)] - x[(3, 0)]).abs() < 1e-10);
    }

    #[test]
    fn resolvent_with_zero_damping_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_stochastic(&mut rng, 4);
        let s = Vector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(solve_row_resolvent(&s, &q, 0.0).unwrap(), s);
    }

    #[test]
    fn resolvent_of_swap_matrix() {
        let q = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let s = Vector::from_vec(vec![1.0, 0.0]);
        let pi = solve_row_resolvent(&s, &q, 0.5).unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn resolvent_matches_neumann_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_stochastic(&mut rng, 6);
        let s = Vector::from_element(6, 1.0 / 6.0);
        let pi = solve_row_resolvent(&s, &q, 0.85).unwrap();
        let oracle = neumann_oracle(&s, &q, 0.85);
        assert!((pi - oracle).abs().sum() < 1e-10);
    }

    #[test]
    fn resolvent_is_probability_vector_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..100 {
            let n = rng.random_range(2..9);
            let q = random_stochastic(&mut rng, n);
            let mut s = Vector::from_fn(n, |_, _| rng.random::<f64>());
            s /= s.sum();
            let alpha = rng.random_range(0.0..0.99);
            let pi = solve_row_resolvent(&s, &q, alpha).unwrap();
            assert!(pi.iter().all(|&v| v >= -1e-15));
            assert!((pi.sum() - 1.0).abs() < 1e-12);
            assert!((pi - neumann_oracle(&s, &q, alpha)).abs().sum() < 1e-10);
        }
    }

    #[test]
    fn resolvent_rejects_bad_damping() {
        let q = Matrix::identity(2, 2);
        let s = Vector::from_vec(vec![0.5, 0.5]);
        assert!(solve_row_resolvent(&s, &q, 1.0).is_err());
    }

    #[test]
    fn norms_by_hand() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, -2.0, 0.0, 3.0]);
        assert_eq!(inf_norm(&a), 3.0);
        assert!((frobenius_norm(&a) - 14f64.sqrt()).abs() < 1e-15);
        assert_eq!(min_abs_row_sum(&a), 3.0);
        let z = Matrix::zeros(3, 3);
        assert_eq!((inf_norm(&z), frobenius_norm(&z), min_abs_row_sum(&z)), (0.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((inf_norm(&random_stochastic(&mut rng, 5)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eig_diagonal_and_symmetric() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0, 2.0]));
        let vals: Vec<f64> = eig(&d).unwrap().iter().map(|p| p.value.re).collect();
        assert_eq!(vals.len(), 3);
        for (v, want) in vals.iter().zip([3.0, 2.0, 1.0]) {
            assert!((v - want).abs() < 1e-12);
        }
        let s = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let vals: Vec<f64> = eig(&s).unwrap().iter().map(|p| p.value.re).collect();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_residuals_on_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 8, 8);
        let ac = a.map(|v| Complex64::new(v, 0.0));
        let fro = frobenius_norm(&a);
        let pairs = eig(&a).unwrap();
        assert_eq!(pairs.len(), 8);
        for p in &pairs {
            let r = (&ac * &p.vector - &p.vector * p.value).norm();
            assert!(r <= 1e-8 * fro, "residual {r}");
        }
        for w in pairs.windows(2) {
            assert!(w[0].value.norm() >= w[1].value.norm() - 1e-12);
        }
    }

    #[test]
    fn eig_rotation_has_unit_circle_pair() {
        let t = 0.3f64;
        let a = Matrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        let pairs = eig(&a).unwrap();
        for p in &pairs {
            assert!((p.value.norm() - 1.0).abs() < 1e-12);
            assert!((p.value.arg().abs() - t).abs() < 1e-12);
        }
    }
}
