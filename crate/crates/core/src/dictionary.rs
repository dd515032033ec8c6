//! Observable dictionaries and their evaluation matrices `Psi(X)`.
//!
//! Observable order is part of the contract: it fixes the row/column indices
//! of every EDMD matrix and the meaning of seed sets given by name.

use std::collections::HashSet;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::systems::circle_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    /// Natural seed for personalized PageRank.
    SeedCandidate,
    /// Recovers a state coordinate (always kept by the oscillator presets).
    StateCoordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trig {
    Sin,
    Cos,
}

impl Trig {
    fn apply(self, t: f64) -> f64 {
        match self {
            Trig::Sin => t.sin(),
            Trig::Cos => t.cos(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Trig::Sin => "sin",
            Trig::Cos => "cos",
        }
    }
}

/// What an observable computes. Angles are state coordinates 0 (phi) and 1 (psi).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ObservableKind {
    /// `prod_c x_c^{powers[c]}`.
    Monomial { powers: Vec<u32> },
    /// `L_i(x_0) L_j(x_1)` with standard Laguerre polynomials.
    Laguerre { i: usize, j: usize },
    /// `f(k phi + l psi)`.
    Fourier { f: Trig, k: i32, l: i32 },
    /// `f(k phi) g(l psi)`.
    FourierProduct { f: Trig, k: i32, g: Trig, l: i32 },
    /// Gaussian bump in geodesic torus distance.
    TorusRbf { center: [f64; 2], sigma: f64 },
    /// Coordinate `coord` read `level * stride` steps along a trajectory.
    Delay { coord: usize, level: usize, stride: usize },
}

/// Standard Laguerre polynomials `L_0..=L_n` at `t` by the three-term recurrence.
pub fn laguerre_all(n: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(1.0 - t);
    }
    for k in 1..n {
        let next = ((2 * k + 1) as f64 - t) * out[k] - k as f64 * out[k - 1];
        out.push(next / (k + 1) as f64);
    }
    out
}

pub fn laguerre(n: usize, t: f64) -> f64 {
    laguerre_all(n, t)[n]
}

impl ObservableKind {
    /// Smallest state dimension this observable can read.
    fn min_dim(&self) -> usize {
        match self {
            ObservableKind::Monomial { powers } => powers.len(),
            ObservableKind::Delay { coord, .. } => coord + 1,
            _ => 2,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ObservableKind::Monomial { powers } => {
                powers.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product()
            }
            ObservableKind::Laguerre { i, j } => laguerre(*i, x[0]) * laguerre(*j, x[1]),
            ObservableKind::Fourier { f, k, l } => f.apply(*k as f64 * x[0] + *l as f64 * x[1]),
            ObservableKind::FourierProduct { f, k, g, l } => {
                f.apply(*k as f64 * x[0]) * g.apply(*l as f64 * x[1])
            }
            ObservableKind::TorusRbf { center, sigma } => {
                let d0 = circle_distance(x[0], center[0]);
                let d1 = circle_distance(x[1], center[1]);
                (-(d0 * d0 + d1 * d1) / (2.0 * sigma * sigma)).exp()
            }
            ObservableKind::Delay { coord, .. } => x[*coord],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub name: String,
    pub kind: ObservableKind,
    pub group: String,
    #[serde(default)]
    pub tags: Vec<Tag>,
}

impl Observable {
    fn new(name: String, kind: ObservableKind, group: &str) -> Self {
        Observable { name, kind, group: group.to_string(), tags: Vec::new() }
    }

    fn tagged(mut self, tags: &[Tag]) -> Self {
        self.tags.extend_from_slice(tags);
        self
    }

    pub fn has_tag(&self, tag: Tag) -> bool {
        self.tags.contains(&tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    /// Builder name and parameters, for manifests.
    pub builder: String,
    pub params: serde_json::Value,
    /// State dimension the observables read.
    pub dim: usize,
    pub observables: Vec<Observable>,
}

/// One line of the dictionary manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub name: String,
    pub group: String,
    pub tags: Vec<Tag>,
}

impl Dictionary {
    fn from_parts(builder: &str, params: serde_json::Value, dim: usize, observables: Vec<Observable>) -> Self {
        let d = Dictionary { builder: builder.into(), params, dim, observables };
        debug_assert!(d.check_names().is_ok());
        d
    }

    fn check_names(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for o in &self.observables {
            if !seen.insert(o.name.as_str()) {
                return Err(Error::Config(format!("duplicate observable name '{}'", o.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observables.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.observables.iter().map(|o| o.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.observables
            .iter()
            .position(|o| o.name == name)
            .ok_or_else(|| Error::UnknownObservable(name.to_string()))
    }

    pub fn indices_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index_of(n.as_ref())).collect()
    }

    pub fn tagged(&self, tag: Tag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observables[i].has_tag(tag)).collect()
    }

    /// Sub-dictionary in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dictionary> {
        let mut obs = Vec::with_capacity(indices.len());
        for &i in indices {
            let o = self.observables.get(i).ok_or_else(|| {
                Error::InvalidParameter(format!("index {i} out of range for {} observables", self.len()))
            })?;
            obs.push(o.clone());
        }
        let d = Dictionary {
            builder: format!("{}[subset]", self.builder),
            params: serde_json::json!({ "parent": self.params, "indices": indices }),
            dim: self.dim,
            observables: obs,
        };
        d.check_names()?;
        Ok(d)
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.observables
            .iter()
            .enumerate()
            .map(|(index, o)| ManifestEntry {
                index,
                name: o.name.clone(),
                group: o.group.clone(),
                tags: o.tags.clone(),
            })
            .collect()
    }

    pub fn requires_trajectory(&self) -> bool {
        self.observables.iter().any(|o| matches!(o.kind, ObservableKind::Delay { .. }))
    }

    /// `Psi(X)`: entry `(i, j)` is `psi_j(x_i)`.
    pub fn evaluate(&self, points: &Matrix) -> Result<Matrix> {
        if let Some(o) = self.observables.iter().find(|o| matches!(o.kind, ObservableKind::Delay { .. })) {
            return Err(Error::RequiresTrajectory(o.name.clone()));
        }
        let d = points.ncols();
        let need = self.observables.iter().map(|o| o.kind.min_dim()).max().unwrap_or(0);
        if d < need {
            return Err(Error::DimensionMismatch(format!(
                "dictionary reads {need} coordinates, points have {d}"
            )));
        }
        let m = points.nrows();
        let n = self.len();
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = points.row(i).iter().copied().collect();
                self.eval_point(&x)
            })
            .collect();
        Ok(Matrix::from_fn(m, n, |i, j| rows[i][j]))
    }

    /// Evaluate every observable at one state.
    pub fn eval_point(&self, x: &[f64]) -> Vec<f64> {
        // Laguerre values are shared across the whole dictionary
        let max_order = self
            .observables
            .iter()
            .filter_map(|o| match o.kind {
                ObservableKind::Laguerre { i, j } => Some(i.max(j)),
                _ => None,
            })
            .max();
        let cache = max_order.map(|n| (laguerre_all(n, x[0]), laguerre_all(n, x[1])));
        self.observables
            .iter()
            .map(|o| match (&o.kind, &cache) {
                (ObservableKind::Laguerre { i, j }, Some((lx, ly))) => lx[*i] * ly[*j],
                (kind, _) => kind.eval(x),
            })
            .collect()
    }

    /// `Psi(X)` and its one-step shift `Psi(Y)` for a delay dictionary on a
    /// trajectory (`T x d`, one state per row). Row `t` of `Psi(X)` reads
    /// coordinate `c` at `t + level * stride`; `Psi(Y)` is the same at `t + 1`.
    pub fn evaluate_delay(&self, trajectory: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut cols = Vec::with_capacity(self.len());
        for o in &self.observables {
            match o.kind {
                ObservableKind::Delay { coord, level, stride } => cols.push((coord, level * stride)),
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "'{}' is not a delay observable",
                        o.name
                    )))
                }
            }
        }
        if let Some(&(c, _)) = cols.iter().find(|(c, _)| *c >= trajectory.ncols()) {
            return Err(Error::DimensionMismatch(format!(
                "delay coordinate {c} but trajectory has {} columns",
                trajectory.ncols()
            )));
        }
        let depth = cols.iter().map(|(_, off)| *off).max().unwrap_or(0);
        let t = trajectory.nrows();
        if t < depth + 2 {
            return Err(Error::TrajectoryTooShort { needed: depth + 2, available: t });
        }
        let m = t - depth - 1;
        let px = Matrix::from_fn(m, cols.len(), |r, j| trajectory[(r + cols[j].1, cols[j].0)]);
        let py = Matrix::from_fn(m, cols.len(), |r, j| trajectory[(r + 1 + cols[j].1, cols[j].0)]);
        Ok((px, py))
    }
}

fn monomial_name(powers: &[u32]) -> String {
    let parts: Vec<String> = powers
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0)
        .map(|(c, &p)| if p == 1 { format!("x{}", c + 1) } else { format!("x{}^{}", c + 1, p) })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join("*")
    }
}

/// Monomials `x1^i x2^j`, ordered by total degree, then by descending power of `x1`.
pub fn build_monomials_2d(max_total_degree: u32, include_constant: bool) -> Result<Dictionary> {
    if max_total_degree < 1 {
        return Err(Error::InvalidParameter("max_total_degree must be at least 1".into()));
    }
    let start = if include_constant { 0 } else { 1 };
    let mut obs = Vec::new();
    for total in start..=max_total_degree {
        for i in (0..=total).rev() {
            let powers = vec![i, total - i];
            let mut o = Observable::new(monomial_name(&powers), ObservableKind::Monomial { powers }, &format!("degree-{total}"));
            if total == 1 {
                o = o.tagged(&[Tag::StateCoordinate, Tag::SeedCandidate]);
            }
            obs.push(o);
        }
    }
    Ok(Dictionary::from_parts(
        "monomials-2d",
        serde_json::json!({ "max_total_degree": max_total_degree, "include_constant": include_constant }),
        2,
        obs,
    ))
}

/// The coordinate functions `x1..xd`.
pub fn build_identity(dim: usize) -> Result<Dictionary> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let obs = (0..dim)
        .map(|c| {
            let mut powers = vec![0; dim];
            powers[c] = 1;
            Observable::new(monomial_name(&powers), ObservableKind::Monomial { powers }, "coordinates")
                .tagged(&[Tag::StateCoordinate, Tag::SeedCandidate])
        })
        .collect();
    Ok(Dictionary::from_parts("identity", serde_json::json!({ "dim": dim }), dim, obs))
}

/// Products `L_i(x) L_j(y)` with `1 <= i + j <= max_total_order`, ordered by
/// total order, then by descending `i`. The first two are `1 - x` and `1 - y`.
pub fn build_laguerre_2d(max_total_order: usize) -> Result<Dictionary> {
    if max_total_order < 1 {
        return Err(Error::InvalidParameter("max_total_order must be at least 1".into()));
    }
    let mut obs = Vec::new();
    for total in 1..=max_total_order {
        for i in (0..=total).rev() {
            let j = total - i;
            let mut o = Observable::new(format!("L{i}(x)*L{j}(y)"), ObservableKind::Laguerre { i, j }, &format!("order-{total}"));
            if total == 1 {
                o = o.tagged(&[Tag::StateCoordinate, Tag::SeedCandidate]);
            }
            obs.push(o);
        }
    }
    Ok(Dictionary::from_parts("laguerre-2d", serde_json::json!({ "max_total_order": max_total_order }), 2, obs))
}

/// Pairs `(k, l)` of the diagonal Fourier group: `k >= 1` with `|k| + |l| <= 4`,
/// then `k = 0` with `l = 1..=4`. Twenty pairs, forty observables.
pub fn diagonal_fourier_pairs() -> Vec<(i32, i32)> {
    let mut pairs = Vec::new();
    for k in 1..=4i32 {
        let r = 4 - k;
        for l in -r..=r {
            pairs.push((k, l));
        }
    }
    for l in 1..=4 {
        pairs.push((0, l));
    }
    pairs
}

pub const RAMACHANDRAN_RBF_SIGMA: f64 = 0.45;
pub const RAMACHANDRAN_RBF_GRID: usize = 10;

fn signed(k: i32, var: &str) -> String {
    match k {
        0 => String::new(),
        1 => var.to_string(),
        -1 => format!("-{var}"),
        _ => format!("{k}{var}"),
    }
}

fn linear_phase(k: i32, l: i32) -> String {
    let a = signed(k, "phi");
    let b = signed(l, "psi");
    match (a.is_empty(), b.is_empty()) {
        (true, _) => b,
        (_, true) => a,
        _ if l < 0 => format!("{a}{b}"),
        _ => format!("{a}+{b}"),
    }
}

/// The 236-observable torus dictionary: circular coordinates, axis Fourier
/// modes `k = 2..8`, cross products `k, l = 1..4`, diagonal modes and a
/// 10x10 grid of geodesic Gaussian bumps.
pub fn build_ramachandran_dict() -> Dictionary {
    let mut obs = Vec::with_capacity(236);
    let coord_tags = [Tag::StateCoordinate, Tag::SeedCandidate];
    for (k, l) in [(1, 0), (0, 1)] {
        for f in [Trig::Sin, Trig::Cos] {
            obs.push(
                Observable::new(format!("{}({})", f.name(), linear_phase(k, l)), ObservableKind::Fourier { f, k, l }, "circular")
                    .tagged(&coord_tags),
            );
        }
    }
    for axis in 0..2 {
        for m in 2..=8 {
            let (k, l) = if axis == 0 { (m, 0) } else { (0, m) };
            for f in [Trig::Sin, Trig::Cos] {
                obs.push(Observable::new(
                    format!("{}({})", f.name(), linear_phase(k, l)),
                    ObservableKind::Fourier { f, k, l },
                    "fourier",
                ));
            }
        }
    }
    for k in 1..=4 {
        for l in 1..=4 {
            for f in [Trig::Sin, Trig::Cos] {
                for g in [Trig::Sin, Trig::Cos] {
                    obs.push(Observable::new(
                        format!("{}({})*{}({})", f.name(), signed(k, "phi"), g.name(), signed(l, "psi")),
                        ObservableKind::FourierProduct { f, k, g, l },
                        "cross",
                    ));
                }
            }
        }
    }
    for (k, l) in diagonal_fourier_pairs() {
        for f in [Trig::Sin, Trig::Cos] {
            // same functions as the circular/axis groups get a distinct name
            obs.push(Observable::new(
                format!("{}[{}]", f.name(), linear_phase(k, l)),
                ObservableKind::Fourier { f, k, l },
                "diagonal",
            ));
        }
    }
    let g = RAMACHANDRAN_RBF_GRID;
    let h = 2.0 * PI / g as f64;
    for a in 0..g {
        for b in 0..g {
            let center = [-PI + (a as f64 + 0.5) * h, -PI + (b as f64 + 0.5) * h];
            obs.push(Observable::new(
                format!("rbf(c=({:.4},{:.4}),s={})", center[0], center[1], RAMACHANDRAN_RBF_SIGMA),
                ObservableKind::TorusRbf { center, sigma: RAMACHANDRAN_RBF_SIGMA },
                "rbf",
            ));
        }
    }
    Dictionary::from_parts(
        "ramachandran",
        serde_json::json!({ "rbf_sigma": RAMACHANDRAN_RBF_SIGMA, "rbf_grid": g }),
        2,
        obs,
    )
}

/// Delay coordinates `delay(x_c, k)`, level-major: all coordinates at level 0,
/// then level 1, and so on.
pub fn build_delay_embedding(dim: usize, n_delay: usize, stride: usize) -> Result<Dictionary> {
    if dim == 0 || n_delay == 0 || stride == 0 {
        return Err(Error::InvalidParameter("dim, n_delay and stride must be at least 1".into()));
    }
    let mut obs = Vec::with_capacity(dim * n_delay);
    for level in 0..n_delay {
        for coord in 0..dim {
            let mut o = Observable::new(
                format!("delay(x{}, {level})", coord + 1),
                ObservableKind::Delay { coord, level, stride },
                &format!("level-{level}"),
            );
            if level == 0 {
                o = o.tagged(&[Tag::StateCoordinate, Tag::SeedCandidate]);
            }
            obs.push(o);
        }
    }
    Ok(Dictionary::from_parts(
        "delay-embedding",
        serde_json::json!({ "dim": dim, "n_delay": n_delay, "stride": stride }),
        dim,
        obs,
    ))
}
