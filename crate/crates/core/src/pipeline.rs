//! Dictionary selection end to end: rank the full EDMD matrix, keep the top
//! `N` observables, refit on them. Also the ordering baselines used for size
//! sweeps and the preset experiments built on top of them.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{self, Dictionary};
use crate::edmd::{self, BlockReport, KoopmanMatrix};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, RankPolicy};
use crate::ranking::{self, Example, ExampleSpec, GapKind, GapReport, PprResult, WindowPoint};
use crate::systems::{self, fmt_f64, BoxRegion, System};

/// One forced include swapped into the top-`N` set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub removed: usize,
    pub added: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub sub_dictionary: Vec<String>,
    /// Original indices, in PPR rank order.
    pub indices: Vec<usize>,
    pub k_sub: KoopmanMatrix,
    pub ppr: PprResult,
    /// Certificate for the selected block; `None` when the permuted chain
    /// drops rows or the selection is the whole dictionary.
    pub gap_report: Option<GapReport>,
    pub forced_includes: Vec<usize>,
    pub substitutions: Vec<Substitution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectParams {
    pub n: usize,
    pub alpha: f64,
    /// Seed observable names; empty means standard PageRank.
    pub seeds: Vec<String>,
    pub forced: Vec<usize>,
    pub policy: RankPolicy,
}

/// Top `n` of `ranking` with every `forced` index present. Missing forced
/// indices replace the lowest-ranked non-forced picks. Output is in rank order.
pub fn top_n_with_forced(ranking: &[usize], n: usize, forced: &[usize]) -> Result<(Vec<usize>, Vec<Substitution>)> {
    if n == 0 || n > ranking.len() {
        return Err(Error::InvalidSplit { split: n, n: ranking.len() });
    }
    let distinct: std::collections::BTreeSet<_> = forced.iter().collect();
    if distinct.len() != forced.len() || forced.len() > n || forced.iter().any(|&f| f >= ranking.len()) {
        return Err(Error::InvalidParameter("forced includes must be distinct, in range and at most N".into()));
    }
    let mut top = ranking[..n].to_vec();
    let mut subs = Vec::new();
    for &f in forced {
        if top.contains(&f) {
            continue;
        }
        let pos = top.iter().rposition(|t| !forced.contains(t)).expect("forced.len() <= n");
        subs.push(Substitution { removed: top[pos], added: f });
        top.remove(pos);
        top.push(f);
    }
    let rank_of = |i: usize| ranking.iter().position(|&r| r == i).unwrap_or(usize::MAX);
    top.sort_by_key(|&i| rank_of(i));
    Ok((top, subs))
}

fn columns(a: &Matrix, idx: &[usize]) -> Matrix {
    a.select_columns(idx)
}

/// Rank, take the top `N` (with forced includes), refit on the chosen columns.
pub fn select(k_full: &KoopmanMatrix, psi_x: &Matrix, psi_y: &Matrix, params: &SelectParams) -> Result<SelectionResult> {
    let nt = k_full.dim();
    if psi_x.ncols() != nt || psi_y.ncols() != nt {
        return Err(Error::DimensionMismatch("snapshot columns differ from K".into()));
    }
    let seeds = names_to_indices(&k_full.names, &params.seeds)?;
    let chain = ranking::transition_matrix(k_full)?;
    let ppr = ranking::pagerank(&chain, params.alpha, (!seeds.is_empty()).then_some(seeds.as_slice()))?;
    let (indices, substitutions) = top_n_with_forced(&ppr.ranking, params.n, &params.forced)?;
    let names: Vec<String> = indices.iter().map(|&i| k_full.names[i].clone()).collect();
    let k_sub = edmd::edmd_with(&columns(psi_x, &indices), &columns(psi_y, &indices), &names, params.policy)?;
    let gap_report = block_certificate(k_full, &indices, &ppr.ranking, &seeds, params.alpha);
    Ok(SelectionResult {
        sub_dictionary: names,
        indices,
        k_sub,
        ppr,
        gap_report,
        forced_includes: params.forced.clone(),
        substitutions,
    })
}

fn block_certificate(k_full: &KoopmanMatrix, indices: &[usize], ranking: &[usize], seeds: &[usize], alpha: f64) -> Option<GapReport> {
    let n = indices.len();
    if n >= k_full.dim() || alpha <= 0.0 {
        return None;
    }
    let perm: Vec<usize> = indices.iter().copied().chain(ranking.iter().copied().filter(|i| !indices.contains(i))).collect();
    let chain = ranking::transition_matrix(&k_full.permute(&perm).ok()?).ok()?;
    if !chain.dropped.is_empty() {
        return None;
    }
    let moved: Vec<usize> = seeds.iter().filter_map(|s| perm.iter().position(|p| p == s)).collect();
    let inside = !moved.is_empty() && moved.iter().all(|&p| p < n);
    ranking::detection_certificate(&chain, n, alpha, inside.then_some(moved.as_slice())).ok()
}

fn names_to_indices(names: &[String], wanted: &[String]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| names.iter().position(|n| n == w).ok_or_else(|| Error::UnknownObservable(w.clone())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Ordering {
    Ppr,
    Pr,
    Random { seed: u64 },
    Incremental,
}

impl Ordering {
    pub fn label(&self) -> &'static str {
        match self {
            Ordering::Ppr => "ppr",
            Ordering::Pr => "pr",
            Ordering::Random { .. } => "random",
            Ordering::Incremental => "incremental",
        }
    }
}

pub struct OrderingContext<'a> {
    pub k_full: &'a KoopmanMatrix,
    pub alpha: f64,
    /// Seed indices for PPR; empty falls back to standard PageRank.
    pub seeds: &'a [usize],
    pub forced: &'a [usize],
}

/// A full permutation of the dictionary with the forced includes first.
pub fn ordering(method: &Ordering, ctx: &OrderingContext) -> Result<Vec<usize>> {
    let n = ctx.k_full.dim();
    let base: Vec<usize> = match method {
        Ordering::Incremental => (0..n).collect(),
        Ordering::Random { seed } => {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            v
        }
        Ordering::Pr | Ordering::Ppr => {
            let chain = ranking::transition_matrix(ctx.k_full)?;
            let seeds = (*method == Ordering::Ppr && !ctx.seeds.is_empty()).then_some(ctx.seeds);
            ranking::pagerank(&chain, ctx.alpha, seeds)?.ranking
        }
    };
    Ok(ctx.forced.iter().copied().chain(base.into_iter().filter(|i| !ctx.forced.contains(i))).collect())
}

/// The eigenpair of `K_sub` closest to a target continuous-time frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEigen {
    pub eigenvalue: Complex64,
    /// `arg(lambda) / dt`.
    pub frequency: f64,
    /// `|frequency - target|`.
    pub offset: f64,
    /// Real part of the eigenfunction along the supplied samples.
    pub values: Vec<f64>,
}

/// Pick the eigenvalue whose frequency `Im(log lambda)/dt` is closest to
/// `target_omega` (largest modulus on ties) and evaluate `Psi(x) v` on the
/// rows of `psi_along`. The phase is fixed so the largest sample is real.
pub fn pseudo_eigenfunction(k_sub: &KoopmanMatrix, psi_along: &Matrix, target_omega: f64, dt: f64) -> Result<PseudoEigen> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if psi_along.ncols() != k_sub.dim() {
        return Err(Error::DimensionMismatch("sample columns differ from K".into()));
    }
    let pairs = numerics::eig(&k_sub.k)?;
    let best = pairs
        .iter()
        .filter(|p| p.value.norm() > 1e-14)
        .min_by(|a, b| {
            let da = (a.value.arg() / dt - target_omega).abs();
            let db = (b.value.arg() / dt - target_omega).abs();
            da.total_cmp(&db)
        })
        .ok_or(Error::EigFailed { iterations: 0 })?;
    let freq = best.value.arg() / dt;
    let vals: Vec<Complex64> = psi_along
        .row_iter()
        .map(|r| r.iter().zip(best.vector.iter()).map(|(&p, &v)| v * p).sum())
        .collect();
    let peak = vals.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap_or(Complex64::new(1.0, 0.0));
    let phase = if peak.norm() > 0.0 { peak.conj() / peak.norm() } else { Complex64::new(1.0, 0.0) };
    Ok(PseudoEigen {
        eigenvalue: best.value,
        frequency: freq,
        offset: (freq - target_omega).abs(),
        values: vals.iter().map(|v| (v * phase).re).collect(),
    })
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingSpec {
    /// Uniform i.i.d. training and test points, mapped one step by the flow.
    IidUniform { region: BoxRegion, m_test: usize },
    /// One trajectory from `x0`, subsampled every `stride` steps after
    /// `burn_in`; a random `test_fraction` of the pairs is held out.
    Trajectory {
        x0: Vec<f64>,
        burn_in: usize,
        stride: usize,
        test_fraction: f64,
        /// Each replicate starts from `x0 + U(-j, j)^d`, so deterministic
        /// systems give distinct trajectories.
        #[serde(default)]
        x0_jitter: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "kebab-case")]
pub enum DictionarySpec {
    Monomials { max_degree: u32, include_constant: bool },
    Identity,
    Laguerre { max_order: usize },
    Ramachandran,
    DelayEmbedding { n_delay: usize, stride: usize },
}

impl DictionarySpec {
    pub fn build(&self, dim: usize) -> Result<Dictionary> {
        match self {
            DictionarySpec::Monomials { max_degree, include_constant } => dictionary::build_monomials_2d(*max_degree, *include_constant),
            DictionarySpec::Identity => dictionary::build_identity(dim),
            DictionarySpec::Laguerre { max_order } => dictionary::build_laguerre_2d(*max_order),
            DictionarySpec::Ramachandran => Ok(dictionary::build_ramachandran_dict()),
            DictionarySpec::DelayEmbedding { n_delay, stride } => dictionary::build_delay_embedding(dim, *n_delay, *stride),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ppr,
    Pr,
    Random,
    Incremental,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSpec {
    pub target_omega: f64,
}

fn default_alpha() -> f64 {
    0.85
}

fn default_horizon() -> usize {
    1
}

fn default_methods() -> Vec<Method> {
    vec![Method::Ppr, Method::Pr, Method::Random, Method::Incremental]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: System,
    pub sampling: SamplingSpec,
    pub dictionary: DictionarySpec,
    /// Training pairs (i.i.d.) or total pairs before the held-out split (trajectory).
    pub m: usize,
    pub replicates: usize,
    /// Replicate `r` uses seed `seed + r`.
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed_observables: Vec<String>,
    #[serde(default)]
    pub forced_includes: Vec<String>,
    /// Observables whose prediction error is measured; must be forced includes.
    #[serde(default)]
    pub targets: Vec<String>,
    pub sizes: Vec<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub rank_policy: RankPolicy,
    /// Report the block structure of the PPR-ordered full matrix at this split.
    #[serde(default)]
    pub block_split: Option<usize>,
    #[serde(default)]
    pub eigen: Option<EigenSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let cfg = |m: String| Err(Error::Config(format!("{}: {m}", self.name)));
        if self.replicates == 0 {
            return cfg("replicates must be at least 1".into());
        }
        if self.m == 0 || self.sizes.is_empty() || self.horizon == 0 || self.methods.is_empty() {
            return cfg("m, sizes, horizon and methods must be nonempty".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return cfg(format!("alpha {} not in (0, 1)", self.alpha));
        }
        if let Some(t) = self.targets.iter().find(|t| !self.forced_includes.contains(t)) {
            return cfg(format!("target '{t}' must also be a forced include"));
        }
        if self.sizes.iter().any(|&n| n < self.forced_includes.len().max(1)) {
            return cfg("every size must hold the forced includes".into());
        }
        match &self.sampling {
            SamplingSpec::IidUniform { region, m_test } => {
                region.validate()?;
                if *m_test == 0 {
                    return cfg("m_test must be at least 1".into());
                }
                if self.system.is_stochastic() {
                    return cfg("stochastic systems need trajectory sampling".into());
                }
            }
            SamplingSpec::Trajectory { x0, stride, test_fraction, x0_jitter, .. } => {
                if x0.len() != self.system.dim() || *stride == 0 || !(*test_fraction > 0.0 && *test_fraction < 1.0) || !(*x0_jitter >= 0.0) {
                    return cfg("trajectory needs x0 of the state dimension, stride >= 1 and test_fraction in (0, 1)".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub name: String,
    pub example: Example,
    #[serde(default = "half")]
    pub beta: f64,
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn half() -> f64 {
    0.5
}

fn default_tol() -> f64 {
    ranking::DEFAULT_WINDOW_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Preset {
    Experiment(ExperimentConfig),
    Window(WindowConfig),
}

impl Preset {
    pub fn name(&self) -> &str {
        match self {
            Preset::Experiment(c) => &c.name,
            Preset::Window(c) => &c.name,
        }
    }

    pub fn from_json(text: &str) -> Result<Preset> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Preset> {
        Preset::from_json(&fs::read_to_string(path)?)
    }

    /// Replace the base seed (window presets have none).
    pub fn with_seed(mut self, seed: u64) -> Preset {
        if let Preset::Experiment(c) = &mut self {
            c.seed = seed;
        }
        self
    }
}

pub const PRESET_NAMES: [&str; 7] = ["toy", "duffing", "vdp", "ramachandran-desk", "lorenz-desk", "example-a", "example-b"];

/// The checked-in preset files, compiled in so the CLI works from any directory.
pub fn builtin_preset(name: &str) -> Result<Preset> {
    let text = match name {
        "toy" => include_str!("../../../presets/toy.json"),
        "duffing" => include_str!("../../../presets/duffing.json"),
        "vdp" => include_str!("../../../presets/vdp.json"),
        "ramachandran-desk" => include_str!("../../../presets/ramachandran-desk.json"),
        "lorenz-desk" => include_str!("../../../presets/lorenz-desk.json"),
        "example-a" => include_str!("../../../presets/example-a.json"),
        "example-b" => include_str!("../../../presets/example-b.json"),
        other => return Err(Error::Config(format!("unknown preset '{other}' (known: {})", PRESET_NAMES.join(", ")))),
    };
    Preset::from_json(text)
}

/// One-step (and multi-step) errors of one ordering at one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: Method,
    pub n: usize,
    /// Error after `1..=horizon` steps.
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenRecord {
    pub method: Method,
    pub n: usize,
    pub re: f64,
    pub im: f64,
    pub frequency: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    pub seed: u64,
    pub n_tilde: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub curves: Vec<CurvePoint>,
    /// PPR scores by original index.
    pub ppr_scores: Vec<f64>,
    /// Names in PPR rank order (no forced pinning).
    pub ppr_ranking: Vec<String>,
    /// 1-based PPR ranks of the seed observables.
    pub seed_ranks: Vec<usize>,
    pub block_report: Option<BlockReport>,
    pub eigen: Vec<EigenRecord>,
}

impl ReplicateReport {
    pub fn one_step(&self, method: Method, n: usize) -> Option<f64> {
        self.curves.iter().find(|c| c.method == method && c.n == n).map(|c| c.errors[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub method: Method,
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample SD; 0 for a single replicate.
    pub sd: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub replicates: Vec<ReplicateReport>,
    /// One-step error aggregated over replicates.
    pub summary: Vec<CurveSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub name: String,
    pub example: Example,
    pub beta: f64,
    pub points: Vec<WindowPoint>,
    pub closure_pr: f64,
    pub closure_ppr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PresetReport {
    Experiment(ExperimentReport),
    Window(WindowReport),
}

/// Mean and unbiased SD.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Observables on training pairs and on a held-out set with multi-step truth.
struct Data {
    psi_x: Matrix,
    psi_y: Matrix,
    psi_test: Matrix,
    truth: Vec<Matrix>,
    dt: f64,
}

/// Seed for an auxiliary stream that must not collide with the sampling seed.
fn derived_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ tag
}

const TEST_TAG: u64 = 0x7E57;
const SHUFFLE_TAG: u64 = 0x5A0F;
const JITTER_TAG: u64 = 0x0171;

fn gather_data(cfg: &ExperimentConfig, dict: &Dictionary, seed: u64) -> Result<Data> {
    let h = cfg.horizon;
    match &cfg.sampling {
        SamplingSpec::IidUniform { region, m_test } => {
            if dict.requires_trajectory() {
                return Err(Error::RequiresTrajectory(dict.builder.clone()));
            }
            let train = systems::sample_iid(&cfg.system, region, cfg.m, seed)?;
            let test = systems::sample_iid(&cfg.system, region, *m_test, derived_seed(seed, TEST_TAG))?;
            let mut truth = vec![dict.evaluate(&test.y)?];
            let mut state = test.y.clone();
            for _ in 1..h {
                let next: Vec<Vec<f64>> = state
                    .row_iter()
                    .map(|r| cfg.system.flow_map(&r.iter().copied().collect::<Vec<_>>()))
                    .collect::<Result<_>>()?;
                state = Matrix::from_fn(state.nrows(), state.ncols(), |i, j| next[i][j]);
                truth.push(dict.evaluate(&state)?);
            }
            Ok(Data {
                psi_x: dict.evaluate(&train.x)?,
                psi_y: dict.evaluate(&train.y)?,
                psi_test: dict.evaluate(&test.x)?,
                truth,
                dt: cfg.system.dt(),
            })
        }
        SamplingSpec::Trajectory { x0, burn_in, stride, test_fraction, x0_jitter } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, JITTER_TAG));
            let start: Vec<f64> = x0.iter().map(|&v| if *x0_jitter > 0.0 { v + rng.random_range(-*x0_jitter..*x0_jitter) } else { v }).collect();
            let depth = dict
                .observables
                .iter()
                .map(|o| match o.kind {
                    dictionary::ObservableKind::Delay { level, stride, .. } => level * stride,
                    _ => 0,
                })
                .max()
                .unwrap_or(0);
            let frames_needed = cfg.m + 1 + depth;
            let steps = burn_in + (frames_needed - 1) * stride + 1;
            let traj = systems::simulate_trajectory(&cfg.system, &start, steps, seed)?;
            let d = cfg.system.dim();
            let frames = Matrix::from_fn(frames_needed, d, |i, j| traj[(burn_in + i * stride, j)]);
            let all = if dict.requires_trajectory() {
                let (px, py) = dict.evaluate_delay(&frames)?;
                let n = px.nrows();
                let mut all = px.insert_row(n, 0.0);
                all.row_mut(n).copy_from(&py.row(n - 1));
                all
            } else {
                dict.evaluate(&frames)?
            };
            // held-out pairs are drawn at random from the valid multi-step starts
            let total = all.nrows() - 1;
            let test = ((total as f64) * test_fraction).round() as usize;
            if test == 0 || total < h + test {
                return Err(Error::TrajectoryTooShort { needed: h + test + 1, available: total + 1 });
            }
            let mut starts: Vec<usize> = (0..=total - h).collect();
            starts.shuffle(&mut ChaCha8Rng::seed_from_u64(derived_seed(seed, TEST_TAG)));
            let mut test_starts = starts[..test].to_vec();
            test_starts.sort_unstable();
            let train_starts: Vec<usize> = (0..total).filter(|t| test_starts.binary_search(t).is_err()).collect();
            let shifted = |idx: &[usize], by: usize| idx.iter().map(|&t| t + by).collect::<Vec<_>>();
            Ok(Data {
                psi_x: all.select_rows(&train_starts),
                psi_y: all.select_rows(&shifted(&train_starts, 1)),
                psi_test: all.select_rows(&test_starts),
                truth: (1..=h).map(|s| all.select_rows(&shifted(&test_starts, s))).collect(),
                dt: cfg.system.dt() * *stride as f64,
            })
        }
    }
}

fn run_replicate(cfg: &ExperimentConfig, dict: &Dictionary, replicate: usize, out: Option<&Path>) -> Result<ReplicateReport> {
    let seed = cfg.seed.wrapping_add(replicate as u64);
    let data = gather_data(cfg, dict, seed)?;
    let names = dict.names();
    let k_full = edmd::edmd_with(&data.psi_x, &data.psi_y, &names, cfg.rank_policy)?;
    let seeds = dict.indices_of(&cfg.seed_observables)?;
    let forced = dict.indices_of(&cfg.forced_includes)?;
    let targets = dict.indices_of(&cfg.targets)?;
    let ctx = OrderingContext { k_full: &k_full, alpha: cfg.alpha, seeds: &seeds, forced: &forced };
    let nt = dict.len();
    if let Some(&n) = cfg.sizes.iter().find(|&&n| n > nt) {
        return Err(Error::Config(format!("size {n} exceeds the dictionary size {nt}")));
    }

    let chain = ranking::transition_matrix(&k_full)?;
    let ppr = ranking::pagerank(&chain, cfg.alpha, (!seeds.is_empty()).then_some(seeds.as_slice()))?;
    let seed_ranks = seeds.iter().map(|s| ppr.ranking.iter().position(|r| r == s).map_or(0, |p| p + 1)).collect();

    let mut curves = Vec::new();
    let mut eigen = Vec::new();
    let mut orderings = Vec::new();
    for &method in &cfg.methods {
        let ord = match method {
            Method::Ppr => Ordering::Ppr,
            Method::Pr => Ordering::Pr,
            Method::Random => Ordering::Random { seed: derived_seed(seed, SHUFFLE_TAG) },
            Method::Incremental => Ordering::Incremental,
        };
        let perm = ordering(&ord, &ctx)?;
        for &n in &cfg.sizes {
            let idx = &perm[..n];
            let sub_names: Vec<String> = idx.iter().map(|&i| names[i].clone()).collect();
            let k_sub = edmd::edmd_with(&columns(&data.psi_x, idx), &columns(&data.psi_y, idx), &sub_names, cfg.rank_policy)?;
            let tpos: Vec<usize> = targets.iter().map(|t| idx.iter().position(|i| i == t).expect("targets are forced")).collect();
            let test_cols = columns(&data.psi_test, idx);
            let truth: Vec<Matrix> = data.truth.iter().map(|t| columns(t, idx)).collect();
            let errors = if tpos.is_empty() {
                Vec::new()
            } else {
                edmd::prediction_error_from_steps(&k_sub.k, &test_cols, &truth, &tpos)?
            };
            curves.push(CurvePoint { method, n, errors });
            if let Some(spec) = cfg.eigen {
                let pe = pseudo_eigenfunction(&k_sub, &test_cols, spec.target_omega, data.dt)?;
                eigen.push(EigenRecord {
                    method,
                    n,
                    re: pe.eigenvalue.re,
                    im: pe.eigenvalue.im,
                    frequency: pe.frequency,
                    offset: pe.offset,
                });
            }
        }
        orderings.push((method, perm));
    }

    let block_report = match cfg.block_split {
        Some(split) => {
            let perm = ordering(&Ordering::Ppr, &OrderingContext { forced: &[], ..ctx })?;
            Some(k_full.permute(&perm)?.block_report(split)?)
        }
        None => None,
    };

    let report = ReplicateReport {
        replicate,
        seed,
        n_tilde: nt,
        train_pairs: data.psi_x.nrows(),
        test_pairs: data.psi_test.nrows(),
        curves,
        ppr_scores: ppr.scores.clone(),
        ppr_ranking: ppr.ranking.iter().map(|&i| names[i].clone()).collect(),
        seed_ranks,
        block_report,
        eigen,
    };
    if let Some(dir) = out {
        write_replicate(dir, dict, &k_full, &ppr, &orderings, &report, cfg.horizon)?;
    }
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Ppr => "ppr",
        Method::Pr => "pr",
        Method::Random => "random",
        Method::Incremental => "incremental",
    }
}

fn write_heatmap(path: &Path, k: &Matrix) -> Result<()> {
    let header: Vec<String> = (0..k.ncols()).map(|j| format!("c{j}")).collect();
    let map = edmd::heatmap(k, true);
    systems::write_table(path, &header, map.len(), |i| map[i].clone())
}

fn write_replicate(
    dir: &Path,
    dict: &Dictionary,
    k_full: &KoopmanMatrix,
    ppr: &PprResult,
    orderings: &[(Method, Vec<usize>)],
    report: &ReplicateReport,
    horizon: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    k_full.write(&dir.join("k_full.csv"), &dir.join("k_full.json"), None)?;
    write_heatmap(&dir.join("heatmap_original.csv"), &k_full.k)?;
    let ppr_perm = orderings.iter().find(|(m, _)| *m == Method::Ppr).map(|(_, p)| p.clone()).unwrap_or_else(|| ppr.ranking.clone());
    write_heatmap(&dir.join("heatmap_ppr.csv"), &k_full.permute(&ppr_perm)?.k)?;
    write_json(&dir.join("dictionary_manifest.json"), &dict.manifest())?;

    let names = dict.names();
    systems::write_records(
        &dir.join("ppr_scores.csv"),
        &["rank".into(), "index".into(), "name".into(), "score".into()],
        ppr.ranking.len(),
        |r| {
            let i = ppr.ranking[r];
            vec![(r + 1).to_string(), i.to_string(), names[i].clone(), fmt_f64(ppr.scores[i])]
        },
    )?;
    let sel: Vec<serde_json::Value> = orderings
        .iter()
        .map(|(m, p)| serde_json::json!({ "method": method_label(*m), "order": p.iter().map(|&i| &names[i]).collect::<Vec<_>>() }))
        .collect();
    write_json(&dir.join("selections.json"), &sel)?;

    let mut header = vec!["method".to_string(), "n".to_string()];
    header.extend((1..=horizon).map(|s| format!("error_step{s}")));
    systems::write_records(&dir.join("curves.csv"), &header, report.curves.len(), |r| {
        let c = &report.curves[r];
        let mut row = vec![method_label(c.method).to_string(), c.n.to_string()];
        row.extend(c.errors.iter().map(|&e| fmt_f64(e)));
        row.resize(horizon + 2, String::new());
        row
    })?;
    if !report.eigen.is_empty() {
        let header: Vec<String> = ["method", "n", "re", "im", "frequency", "offset"].iter().map(|s| s.to_string()).collect();
        systems::write_records(&dir.join("eigen.csv"), &header, report.eigen.len(), |r| {
            let e = &report.eigen[r];
            vec![method_label(e.method).into(), e.n.to_string(), fmt_f64(e.re), fmt_f64(e.im), fmt_f64(e.frequency), fmt_f64(e.offset)]
        })?;
    }
    write_json(&dir.join("replicate.json"), report)
}

/// Run every replicate (in parallel) and aggregate the one-step curves.
/// Outputs go to `<out>/<name>/<replicate>/` when `out` is given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dict = cfg.dictionary.build(cfg.system.dim())?;
    dict.indices_of(&cfg.seed_observables)?;
    dict.indices_of(&cfg.forced_includes)?;
    let base: Option<PathBuf> = out.map(|o| o.join(&cfg.name));
    let replicates: Vec<ReplicateReport> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let dir = base.as_ref().map(|b| b.join(r.to_string()));
            run_replicate(cfg, &dict, r, dir.as_deref()).map_err(|e| Error::Replicate {
                seed: cfg.seed.wrapping_add(r as u64),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut summary = Vec::new();
    for &method in &cfg.methods {
        for &n in &cfg.sizes {
            let vals: Vec<f64> = replicates.iter().filter_map(|r| r.one_step(method, n)).collect();
            if vals.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&vals);
            summary.push(CurveSummary { method, n, mean, sd, count: vals.len() });
        }
    }
    let report = ExperimentReport { name: cfg.name.clone(), replicates, summary };
    if let Some(b) = &base {
        fs::create_dir_all(b)?;
        let header: Vec<String> = ["method", "n", "mean", "sd", "replicates"].iter().map(|s| s.to_string()).collect();
        systems::write_records(&b.join("summary.csv"), &header, report.summary.len(), |i| {
            let s = &report.summary[i];
            vec![method_label(s.method).into(), s.n.to_string(), fmt_f64(s.mean), fmt_f64(s.sd), s.count.to_string()]
        })?;
        write_json(&b.join("config.json"), cfg)?;
    }
    Ok(report)
}

/// Write `alpha*(eps)` rows as CSV; missing values are left empty.
pub fn write_window_csv(path: &Path, points: &[WindowPoint]) -> Result<()> {
    let header: Vec<String> = ["epsilon", "alpha_star_pr", "alpha_star_ppr", "alpha_star_pr_closed", "alpha_star_ppr_closed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    systems::write_records(path, &header, points.len(), |i| {
        let p = &points[i];
        vec![fmt_f64(p.epsilon), fmt_f64(p.alpha_star_pr), opt(p.alpha_star_ppr), opt(p.alpha_star_pr_closed), opt(p.alpha_star_ppr_closed)]
    })
}

pub fn run_window(cfg: &WindowConfig, out: Option<&Path>) -> Result<WindowReport> {
    let spec = ExampleSpec { which: cfg.example, beta: cfg.beta };
    let points = ranking::detection_window(&spec, &cfg.eps_grid, cfg.tol)?;
    let report = WindowReport {
        name: cfg.name.clone(),
        example: cfg.example,
        beta: cfg.beta,
        points,
        closure_pr: ranking::window_closure(&spec, GapKind::Pr, 1e-7)?,
        closure_ppr: ranking::window_closure(&spec, GapKind::Ppr, 1e-7)?,
    };
    if let Some(o) = out {
        let dir = o.join(&cfg.name).join("0");
        fs::create_dir_all(&dir)?;
        write_window_csv(&dir.join("window.csv"), &report.points)?;
        write_json(&dir.join("window.json"), &report)?;
    }
    Ok(report)
}

pub fn run_preset(preset: &Preset, out: Option<&Path>) -> Result<PresetReport> {
    match preset {
        Preset::Experiment(c) => run_experiment(c, out).map(PresetReport::Experiment),
        Preset::Window(c) => run_window(c, out).map(PresetReport::Window),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(m: usize, seed: u64) -> (Dictionary, Matrix, Matrix) {
        let dict = dictionary::build_monomials_2d(3, false).unwrap();
        let s = systems::sample_iid(&System::toy(), &BoxRegion::cube(2, -2.0, 2.0), m, seed).unwrap();
        let px = dict.evaluate(&s.x).unwrap();
        let py = dict.evaluate(&s.y).unwrap();
        (dict, px, py)
    }

    fn params(n: usize, seeds: &[&str], forced: Vec<usize>) -> SelectParams {
        SelectParams {
            n,
            alpha: 0.85,
            seeds: seeds.iter().map(|s| s.to_string()).collect(),
            forced,
            policy: RankPolicy::Strict,
        }
    }

    #[test]
    fn forced_injection_replaces_lowest() {
        let ranking = [4, 2, 0, 1, 3];
        let (top, subs) = top_n_with_forced(&ranking, 3, &[3]).unwrap();
        assert_eq!(top, vec![4, 2, 3]);
        assert_eq!(subs, vec![Substitution { removed: 0, added: 3 }]);
        let (top, subs) = top_n_with_forced(&ranking, 3, &[2]).unwrap();
        assert_eq!(top, vec![4, 2, 0]);
        assert!(subs.is_empty());
        assert!(top_n_with_forced(&ranking, 1, &[1, 3]).is_err());
    }

    #[test]
    fn toy_selection_picks_invariant_block() {
        let (dict, px, py) = toy_data(100, 4);
        let k = edmd::edmd(&px, &py, &dict.names()).unwrap();
        let sel = select(&k, &px, &py, &params(3, &["x1", "x2"], vec![])).unwrap();
        let mut got = sel.sub_dictionary.clone();
        got.sort();
        assert_eq!(got, vec!["x1", "x1^2", "x2"]);
        let want = edmd::toy_analytic_k3(&System::toy()).unwrap();
        let order: Vec<usize> = ["x1", "x2", "x1^2"].iter().map(|n| sel.sub_dictionary.iter().position(|s| s == n).unwrap()).collect();
        let k3 = sel.k_sub.submatrix(&order).k;
        assert!((k3 - want).abs().max() < 1e-10);
        let gaps = sel.gap_report.unwrap();
        assert!(gaps.p12_inf < 1e-10);
        assert_eq!(gaps.ppr_pass, Some(true));
    }

    #[test]
    fn full_size_is_identity_selection() {
        let (dict, px, py) = toy_data(60, 1);
        let k = edmd::edmd(&px, &py, &dict.names()).unwrap();
        let sel = select(&k, &px, &py, &params(9, &[], vec![])).unwrap();
        let mut idx = sel.indices.clone();
        idx.sort();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
        let back: Vec<usize> = (0..9).map(|i| sel.indices.iter().position(|&j| j == i).unwrap()).collect();
        assert!((sel.k_sub.submatrix(&back).k - &k.k).abs().max() < 1e-9);
        assert!(sel.gap_report.is_none());
        // empty seed list falls back to standard PageRank
        let chain = ranking::transition_matrix(&k).unwrap();
        assert_eq!(sel.ppr.ranking, ranking::pagerank(&chain, 0.85, None).unwrap().ranking);
    }

    #[test]
    fn unknown_seed_is_reported() {
        let (dict, px, py) = toy_data(30, 2);
        let k = edmd::edmd(&px, &py, &dict.names()).unwrap();
        assert!(matches!(select(&k, &px, &py, &params(3, &["x9"], vec![])), Err(Error::UnknownObservable(_))));
    }

    #[test]
    fn orderings() {
        let (dict, px, py) = toy_data(80, 3);
        let k = edmd::edmd(&px, &py, &dict.names()).unwrap();
        let seeds = [0, 1];
        let ctx = OrderingContext { k_full: &k, alpha: 0.85, seeds: &seeds, forced: &[] };
        assert_eq!(ordering(&Ordering::Incremental, &ctx).unwrap(), (0..9).collect::<Vec<_>>());
        let r1 = ordering(&Ordering::Random { seed: 5 }, &ctx).unwrap();
        assert_eq!(r1, ordering(&Ordering::Random { seed: 5 }, &ctx).unwrap());
        assert_ne!(r1, ordering(&Ordering::Random { seed: 6 }, &ctx).unwrap());
        let ppr = ordering(&Ordering::Ppr, &ctx).unwrap();
        let sel = select(&k, &px, &py, &params(3, &["x1", "x2"], vec![])).unwrap();
        let mut a = ppr[..3].to_vec();
        a.sort();
        let mut b = sel.indices.clone();
        b.sort();
        assert_eq!(a, b);
        let pinned = OrderingContext { forced: &[8, 7], ..ctx };
        let p = ordering(&Ordering::Random { seed: 5 }, &pinned).unwrap();
        assert_eq!(&p[..2], &[8, 7]);
        let mut all = p.clone();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn rotation_frequency() {
        let theta: f64 = 0.3;
        let (c, s) = (theta.cos(), theta.sin());
        let k = KoopmanMatrix::anonymous(Matrix::from_row_slice(2, 2, &[c, -s, s, c])).unwrap();
        let pts = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let pe = pseudo_eigenfunction(&k, &pts, 6.0, 0.05).unwrap();
        assert!((pe.frequency - theta / 0.05).abs() < 1e-12);
        assert!((pe.eigenvalue.norm() - 1.0).abs() < 1e-12);
        let pe = pseudo_eigenfunction(&k, &pts, -6.0, 0.05).unwrap();
        assert!((pe.frequency + 6.0).abs() < 1e-12);
        let d = KoopmanMatrix::anonymous(Matrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, -0.5])).unwrap();
        let pe = pseudo_eigenfunction(&d, &pts, 0.0, 1.0).unwrap();
        assert!((pe.eigenvalue.re - 0.9).abs() < 1e-12);
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn presets_parse_and_validate() {
        for name in PRESET_NAMES {
            let p = builtin_preset(name).unwrap();
            assert_eq!(p.name(), name);
            if let Preset::Experiment(c) = &p {
                c.validate().unwrap();
                let dict = c.dictionary.build(c.system.dim()).unwrap();
                dict.indices_of(&c.seed_observables).unwrap();
                dict.indices_of(&c.forced_includes).unwrap();
                assert!(c.sizes.iter().all(|&n| n <= dict.len()));
            }
        }
        assert!(matches!(builtin_preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn toy_experiment_runs() {
        let Preset::Experiment(mut cfg) = builtin_preset("toy").unwrap() else { panic!() };
        cfg.replicates = 2;
        let rep = run_experiment(&cfg, None).unwrap();
        assert_eq!(rep.replicates.len(), 2);
        let block = rep.replicates[0].block_report.as_ref().unwrap();
        assert!(block.structural_zero);
        assert!(rep.replicates[0].one_step(Method::Ppr, 3).unwrap() < 1e-10);
    }
}
