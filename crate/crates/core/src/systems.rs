//! Benchmark dynamical systems and snapshot generation.
//!
//! Deterministic systems expose a one-step flow map `F`. The Langevin model
//! is stochastic, so it only steps with an explicit noise draw; samplers
//! supply the noise from a seeded ChaCha8 stream.
//!
//! Reproducibility: i.i.d. sampling gives sample `i` its own ChaCha stream
//! (`set_stream(i)`), so the result does not depend on how rayon splits the
//! index range.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Multi-well free-energy surface on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamachandranPotential {
    pub centers: Vec<[f64; 2]>,
    pub depths: Vec<f64>,
    pub widths: Vec<f64>,
    /// Amplitude of the `cos 2phi + cos 2psi` background.
    pub background: f64,
}

impl Default for RamachandranPotential {
    fn default() -> Self {
        RamachandranPotential {
            centers: vec![[-1.0, -1.0], [-1.0, 1.2], [1.1, -0.3]],
            depths: vec![-6.0, -6.0, -4.0],
            widths: vec![0.55, 0.55, 0.65],
            background: 0.3,
        }
    }
}

/// Wrap an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Geodesic distance on the unit circle.
pub fn circle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

impl RamachandranPotential {
    fn check(&self) -> Result<()> {
        let k = self.centers.len();
        if k == 0 || self.depths.len() != k || self.widths.len() != k {
            return Err(Error::InvalidSystem(
                "well centers, depths and widths must have equal nonzero length".into(),
            ));
        }
        if self.widths.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidSystem("well widths must be positive".into()));
        }
        Ok(())
    }

    /// Potential value and gradient `(dV/dphi, dV/dpsi)`.
    pub fn value_grad(&self, phi: f64, psi: f64) -> (f64, [f64; 2]) {
        let mut v = self.background * ((2.0 * phi).cos() + (2.0 * psi).cos());
        let mut g = [
            -2.0 * self.background * (2.0 * phi).sin(),
            -2.0 * self.background * (2.0 * psi).sin(),
        ];
        for ((c, a), s) in self.centers.iter().zip(&self.depths).zip(&self.widths) {
            // signed wrapped offsets; their squares are the geodesic distances squared
            let dphi = wrap_angle(phi - c[0]);
            let dpsi = wrap_angle(psi - c[1]);
            let s2 = s * s;
            let e = a * (-(dphi * dphi + dpsi * dpsi) / (2.0 * s2)).exp();
            v += e;
            g[0] -= e * dphi / s2;
            g[1] -= e * dpsi / s2;
        }
        (v, g)
    }

    pub fn value(&self, phi: f64, psi: f64) -> f64 {
        self.value_grad(phi, psi).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integrator {
    ExactMap,
    Rk4,
    EulerMaruyama,
}

/// A benchmark system together with its time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum System {
    /// `x1' = x1 - dt*a*x1`, `x2' = x2 - dt*b*(x2 - x1^2)`.
    Toy2d { dt: f64, a: f64, b: f64 },
    /// `x'' = -delta x' + gamma x - beta x^3`.
    Duffing { dt: f64, delta: f64, gamma: f64, beta: f64 },
    VanDerPol { dt: f64, mu: f64 },
    Lorenz { dt: f64, sigma: f64, rho: f64, beta: f64 },
    /// Overdamped Langevin dynamics on the torus, Euler-Maruyama steps.
    RamachandranLangevin {
        dt: f64,
        beta_temp: f64,
        #[serde(default)]
        potential: RamachandranPotential,
    },
    /// Linear map `x -> A x` (row-major `a`).
    ExplicitMatrix { a: Vec<Vec<f64>> },
}

impl System {
    pub fn toy() -> Self {
        System::Toy2d { dt: 0.2, a: 0.4, b: 1.0 }
    }

    pub fn duffing() -> Self {
        System::Duffing { dt: 0.1, delta: 0.3, gamma: 1.0, beta: 1.0 }
    }

    pub fn van_der_pol() -> Self {
        System::VanDerPol { dt: 0.1, mu: 1.1 }
    }

    pub fn lorenz() -> Self {
        System::Lorenz { dt: 0.001, sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }

    pub fn ramachandran() -> Self {
        System::RamachandranLangevin {
            dt: 0.005,
            beta_temp: 1.0,
            potential: RamachandranPotential::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::Toy2d { .. } => "toy2d",
            System::Duffing { .. } => "duffing",
            System::VanDerPol { .. } => "van-der-pol",
            System::Lorenz { .. } => "lorenz",
            System::RamachandranLangevin { .. } => "ramachandran-langevin",
            System::ExplicitMatrix { .. } => "explicit-matrix",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            System::Lorenz { .. } => 3,
            System::ExplicitMatrix { a } => a.len(),
            _ => 2,
        }
    }

    /// Time step; the linear map counts as one unit of time.
    pub fn dt(&self) -> f64 {
        match self {
            System::Toy2d { dt, .. }
            | System::Duffing { dt, .. }
            | System::VanDerPol { dt, .. }
            | System::Lorenz { dt, .. }
            | System::RamachandranLangevin { dt, .. } => *dt,
            System::ExplicitMatrix { .. } => 1.0,
        }
    }

    pub fn integrator(&self) -> Integrator {
        match self {
            System::Toy2d { .. } | System::ExplicitMatrix { .. } => Integrator::ExactMap,
            System::RamachandranLangevin { .. } => Integrator::EulerMaruyama,
            _ => Integrator::Rk4,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.integrator() == Integrator::EulerMaruyama
    }

    pub fn validate(&self) -> Result<()> {
        let dt = self.dt();
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidSystem(format!("dt must be positive, got {dt}")));
        }
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        let ok = match self {
            System::Toy2d { a, b, .. } => finite(&[*a, *b]),
            System::Duffing { delta, gamma, beta, .. } => finite(&[*delta, *gamma, *beta]),
            System::VanDerPol { mu, .. } => finite(&[*mu]),
            System::Lorenz { sigma, rho, beta, .. } => finite(&[*sigma, *rho, *beta]),
            System::RamachandranLangevin { beta_temp, potential, .. } => {
                potential.check()?;
                *beta_temp > 0.0 && beta_temp.is_finite()
            }
            System::ExplicitMatrix { a } => {
                let d = a.len();
                d > 0 && a.iter().all(|r| r.len() == d && finite(r))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSystem(format!("bad parameters for {}", self.name())))
        }
    }

    fn vector_field(&self, x: &[f64], out: &mut [f64]) {
        match self {
            System::Duffing { delta, gamma, beta, .. } => {
                out[0] = x[1];
                out[1] = -delta * x[1] + gamma * x[0] - beta * x[0].powi(3);
            }
            System::VanDerPol { mu, .. } => {
                out[0] = x[1];
                out[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
            }
            System::Lorenz { sigma, rho, beta, .. } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
            _ => unreachable!("vector field requested for a map"),
        }
    }

    fn rk4(&self, x: &[f64], h: f64) -> Vec<f64> {
        let d = x.len();
        let mut k1 = vec![0.0; d];
        let mut k2 = vec![0.0; d];
        let mut k3 = vec![0.0; d];
        let mut k4 = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        self.vector_field(x, &mut k1);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        self.vector_field(&tmp, &mut k2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        self.vector_field(&tmp, &mut k3);
        for i in 0..d {
            tmp[i] = x[i] + h * k3[i];
        }
        self.vector_field(&tmp, &mut k4);
        (0..d)
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }

    /// RK4 over one `dt` using `substeps` equal sub-steps. Used as a
    /// fine-step reference; `flow_map` is the `substeps = 1` case.
    pub fn rk4_substeps(&self, x: &[f64], substeps: usize) -> Vec<f64> {
        let h = self.dt() / substeps as f64;
        let mut s = x.to_vec();
        for _ in 0..substeps {
            s = self.rk4(&s, h);
        }
        s
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} has dimension {}, state has {}",
                self.name(),
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// One discrete step of a deterministic system.
    pub fn flow_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let y = match self {
            System::Toy2d { dt, a, b } => {
                vec![x[0] - dt * a * x[0], x[1] - dt * b * (x[1] - x[0] * x[0])]
            }
            System::ExplicitMatrix { a } => a
                .iter()
                .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
                .collect(),
            System::RamachandranLangevin { .. } => {
                return Err(Error::StochasticSystem(self.name().into()))
            }
            _ => self.rk4(x, self.dt()),
        };
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(Error::NonFiniteState { step: 1 })
        }
    }

    /// One step driven by the standard-normal draws in `noise` (ignored by
    /// deterministic systems).
    pub fn step_with_noise(&self, x: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        match self {
            System::RamachandranLangevin { dt, beta_temp, potential } => {
                self.check_state(x)?;
                let (_, g) = potential.value_grad(x[0], x[1]);
                let amp = (2.0 * dt / beta_temp).sqrt();
                let y = vec![
                    wrap_angle(x[0] - g[0] * dt + amp * noise[0]),
                    wrap_angle(x[1] - g[1] * dt + amp * noise[1]),
                ];
                if y.iter().all(|v| v.is_finite()) {
                    Ok(y)
                } else {
                    Err(Error::NonFiniteState { step: 1 })
                }
            }
            _ => self.flow_map(x),
        }
    }

    fn step_rng(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if self.is_stochastic() {
            let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
            self.step_with_noise(x, &noise)
        } else {
            self.flow_map(x)
        }
    }
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        BoxRegion { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::InvalidRegion("lo and hi must have equal nonzero length".into()));
        }
        for (l, h) in self.lo.iter().zip(&self.hi) {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::InvalidRegion(format!("degenerate interval [{l}, {h}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampling {
    IidUniform { region: BoxRegion },
    Trajectory { burn_in: usize, stride: usize },
}

/// Paired samples `(x_i, y_i = F(x_i))`, stored as `M x d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub system: System,
    pub sampling: Sampling,
    pub seed: u64,
    pub x: Matrix,
    pub y: Matrix,
}

/// The JSON sidecar written next to a snapshot CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub system: System,
    pub sampling: Sampling,
    pub seed: u64,
    pub count: usize,
    pub dim: usize,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn meta(&self) -> SnapshotMeta {
        SnapshotMeta {
            system: self.system.clone(),
            sampling: self.sampling.clone(),
            seed: self.seed,
            count: self.len(),
            dim: self.dim(),
        }
    }

    /// Rows `range` as a new set (used for train/test splits).
    pub fn slice(&self, start: usize, len: usize) -> SnapshotSet {
        SnapshotSet {
            system: self.system.clone(),
            sampling: self.sampling.clone(),
            seed: self.seed,
            x: self.x.rows(start, len).into_owned(),
            y: self.y.rows(start, len).into_owned(),
        }
    }

    /// CSV with header `x1..xd,y1..yd`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.extend((1..=d).map(|i| format!("y{i}")));
        write_table(path, &header, self.len(), |r| {
            self.x.row(r).iter().chain(self.y.row(r).iter()).copied().collect()
        })
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        self.write_csv(csv_path)?;
        std::fs::write(json_path, serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    pub fn read(csv_path: &Path, json_path: &Path) -> Result<SnapshotSet> {
        let meta: SnapshotMeta = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        let (header, rows) = read_table(csv_path)?;
        let d = meta.dim;
        if header.len() != 2 * d {
            return Err(Error::Config(format!(
                "snapshot CSV has {} columns, sidecar says dim {d}",
                header.len()
            )));
        }
        let m = rows.len();
        let x = Matrix::from_fn(m, d, |i, j| rows[i][j]);
        let y = Matrix::from_fn(m, d, |i, j| rows[i][d + j]);
        Ok(SnapshotSet { system: meta.system, sampling: meta.sampling, seed: meta.seed, x, y })
    }
}

/// Format a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a numeric table with a header row.
pub fn write_table(
    path: &Path,
    header: &[String],
    rows: usize,
    row: impl Fn(usize) -> Vec<f64>,
) -> Result<()> {
    write_records(path, header, rows, |r| row(r).into_iter().map(fmt_f64).collect())
}

/// Write a table of preformatted text fields with a header row.
pub fn write_records(
    path: &Path,
    header: &[String],
    rows: usize,
    row: impl Fn(usize) -> Vec<String>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in 0..rows {
        w.write_record(row(r)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a numeric table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: bad number '{f}': {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// The RNG for sample `i` of an i.i.d. draw.
fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// `m` points uniform on `region`, each mapped once through the system.
pub fn sample_iid(system: &System, region: &BoxRegion, m: usize, seed: u64) -> Result<SnapshotSet> {
    system.validate()?;
    region.validate()?;
    let d = system.dim();
    if region.lo.len() != d {
        return Err(Error::InvalidRegion(format!(
            "region has dimension {}, system has {d}",
            region.lo.len()
        )));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let x: Vec<f64> = (0..d).map(|j| rng.random_range(region.lo[j]..region.hi[j])).collect();
            let y = system.step_rng(&x, &mut rng).map_err(|e| match e {
                Error::NonFiniteState { .. } => Error::NonFiniteState { step: i },
                other => other,
            })?;
            Ok((x, y))
        })
        .collect::<Result<_>>()?;
    let x = Matrix::from_fn(m, d, |i, j| pairs[i].0[j]);
    let y = Matrix::from_fn(m, d, |i, j| pairs[i].1[j]);
    Ok(SnapshotSet {
        system: system.clone(),
        sampling: Sampling::IidUniform { region: region.clone() },
        seed,
        x,
        y,
    })
}

/// `steps` consecutive states starting from (and including) `x0`.
pub fn simulate_trajectory(system: &System, x0: &[f64], steps: usize, seed: u64) -> Result<Matrix> {
    system.validate()?;
    system.check_state(x0)?;
    let d = system.dim();
    let mut out = Matrix::zeros(steps, d);
    if steps == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = x0.to_vec();
    for t in 0..steps {
        for j in 0..d {
            out[(t, j)] = s[j];
        }
        if t + 1 < steps {
            s = system.step_rng(&s, &mut rng).map_err(|e| match e {
                Error::NonFiniteState { .. } => Error::NonFiniteState { step: t + 1 },
                other => other,
            })?;
        }
    }
    Ok(out)
}

/// Consecutive pairs `(s_k, s_{k+1})` for `k = burn_in, burn_in + stride, ...`
/// from a trajectory of `total_steps` states.
pub fn sample_trajectory(
    system: &System,
    x0: &[f64],
    total_steps: usize,
    burn_in: usize,
    stride: usize,
    seed: u64,
) -> Result<SnapshotSet> {
    if total_steps <= burn_in + 1 {
        return Err(Error::TrajectoryTooShort { needed: burn_in + 2, available: total_steps });
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be at least 1".into()));
    }
    let traj = simulate_trajectory(system, x0, total_steps, seed)?;
    let starts: Vec<usize> = (burn_in..total_steps - 1).step_by(stride).collect();
    let d = system.dim();
    let x = Matrix::from_fn(starts.len(), d, |i, j| traj[(starts[i], j)]);
    let y = Matrix::from_fn(starts.len(), d, |i, j| traj[(starts[i] + 1, j)]);
    Ok(SnapshotSet {
        system: system.clone(),
        sampling: Sampling::Trajectory { burn_in, stride },
        seed,
        x,
        y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_map_by_hand() {
        let s = System::toy();
        let y = s.flow_map(&[1.0, 0.0]).unwrap();
        assert!((y[0] - 0.92).abs() < 1e-15 && (y[1] - 0.2).abs() < 1e-15);
        assert_eq!(s.flow_map(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn duffing_step_matches_fine_rk4() {
        let s = System::duffing();
        let coarse = s.flow_map(&[1.0, 0.0]).unwrap();
        let fine = s.rk4_substeps(&[1.0, 0.0], 10);
        for (c, f) in coarse.iter().zip(&fine) {
            assert!((c - f).abs() < 1e-6);
        }
    }

    #[test]
    fn explicit_matrix_is_linear_map() {
        let s = System::ExplicitMatrix { a: vec![vec![0.0, -1.0], vec![1.0, 0.5]] };
        assert_eq!(s.flow_map(&[2.0, 3.0]).unwrap(), vec![-3.0, 3.5]);
    }

    #[test]
    fn blowup_is_reported() {
        let s = System::ExplicitMatrix { a: vec![vec![f64::MAX]] };
        assert!(matches!(s.flow_map(&[10.0]), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn langevin_needs_noise() {
        let s = System::ramachandran();
        assert!(matches!(s.flow_map(&[0.0, 0.0]), Err(Error::StochasticSystem(_))));
    }

    #[test]
    fn iid_sampling_is_deterministic_and_in_box() {
        let region = BoxRegion::cube(2, -2.0, 2.0);
        let a = sample_iid(&System::toy(), &region, 100, 9).unwrap();
        let b = sample_iid(&System::toy(), &region, 100, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_iid(&System::toy(), &region, 2000, 1).unwrap();
        assert!(c.x.row_iter().all(|r| region.contains(&[r[0], r[1]])));
        // pair consistency
        for i in 0..c.len() {
            let y = System::toy().flow_map(&[c.x[(i, 0)], c.x[(i, 1)]]).unwrap();
            assert_eq!(y, vec![c.y[(i, 0)], c.y[(i, 1)]]);
        }
    }

    #[test]
    fn iid_prefix_is_stable_across_sizes() {
        // per-sample streams make sample i independent of M and of the split
        let region = BoxRegion::cube(2, -1.0, 1.0);
        let a = sample_iid(&System::duffing(), &region, 50, 4).unwrap();
        let b = sample_iid(&System::duffing(), &region, 80, 4).unwrap();
        assert_eq!(a.x, b.x.rows(0, 50).into_owned());
    }

    #[test]
    fn degenerate_region_rejected() {
        let region = BoxRegion { lo: vec![0.0, 1.0], hi: vec![1.0, 1.0] };
        assert!(matches!(
            sample_iid(&System::toy(), &region, 10, 0),
            Err(Error::InvalidRegion(_))
        ));
    }

    #[test]
    fn trajectory_pair_counts() {
        let s = sample_trajectory(&System::lorenz(), &[1.0, 1.0, 1.0], 30_000, 10_000, 1, 0).unwrap();
        assert_eq!(s.len(), 19_999);
        let t = sample_trajectory(&System::toy(), &[1.0, 1.0], 2, 0, 1, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
    }

    #[test]
    fn potential_well_contribution() {
        let p = RamachandranPotential::default();
        // the first well alone at its own center
        let solo = RamachandranPotential {
            centers: vec![p.centers[0]],
            depths: vec![p.depths[0]],
            widths: vec![p.widths[0]],
            background: 0.0,
        };
        assert_eq!(solo.value(-1.0, -1.0), -6.0);
        let v = p.value(0.4, -2.0);
        assert!((v - p.value(0.4 + 2.0 * PI, -2.0)).abs() < 1e-12);
        assert!((v - p.value(0.4, -2.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn potential_gradient_matches_finite_differences() {
        let p = RamachandranPotential::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..100 {
            let phi = rng.random_range(-PI..PI);
            let psi = rng.random_range(-PI..PI);
            let (_, g) = p.value_grad(phi, psi);
            let fd0 = (p.value(phi + h, psi) - p.value(phi - h, psi)) / (2.0 * h);
            let fd1 = (p.value(phi, psi + h) - p.value(phi, psi - h)) / (2.0 * h);
            assert!((g[0] - fd0).abs() < 1e-5, "{} vs {}", g[0], fd0);
            assert!((g[1] - fd1).abs() < 1e-5);
        }
    }

    #[test]
    fn circle_distance_is_geodesic() {
        assert!((circle_distance(3.0, -3.0) - (2.0 * PI - 6.0)).abs() < 1e-12);
        assert_eq!(circle_distance(0.5, 0.5), 0.0);
        assert!(wrap_angle(3.5) < PI && wrap_angle(3.5) >= -PI);
    }

    #[test]
    fn langevin_is_metastable() {
        let sys = System::ramachandran();
        let traj = simulate_trajectory(&sys, &[-1.0, -1.0], 100_000, 5).unwrap();
        let centers = RamachandranPotential::default().centers;
        let near = traj
            .row_iter()
            .filter(|r| {
                centers.iter().any(|c| {
                    let d0 = circle_distance(r[0], c[0]);
                    let d1 = circle_distance(r[1], c[1]);
                    (d0 * d0 + d1 * d1).sqrt() <= 1.0
                })
            })
            .count();
        assert!(near as f64 / traj.nrows() as f64 >= 0.6, "fraction {}", near as f64 / 1e5);
        assert!(traj.iter().all(|v| (-PI..PI).contains(v)));
    }

    #[test]
    fn snapshot_csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("koopman-snap-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let s = sample_iid(&System::duffing(), &BoxRegion::cube(2, -2.0, 2.0), 17, 3).unwrap();
        let (c, j) = (dir.join("s.csv"), dir.join("s.json"));
        s.write(&c, &j).unwrap();
        let back = SnapshotSet::read(&c, &j).unwrap();
        assert_eq!(back, s);
        std::fs::remove_dir_all(&dir).ok();
    }
}
