//! Acceptance gate. Prints one PASS/FAIL line per criterion, then a summary.
//!
//! Failing criteria are reported but do not fail the process unless
//! `KOOPMAN_ACCEPTANCE_STRICT=1` is set; see the README for which criteria
//! are known to fail and why.

use std::time::{Duration, Instant};

use koopman_core::dictionary::{self, Dictionary};
use koopman_core::edmd::{self, toy_analytic_k3};
use koopman_core::numerics::{inf_norm, Matrix};
use koopman_core::pipeline::{self, builtin_preset, ExperimentReport, Method, Preset};
use koopman_core::ranking::{self, Example, ExampleSpec, GapKind, StochasticMatrix};
use koopman_core::systems::{sample_iid, BoxRegion, System};
use koopman_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Option<Duration>,
    gating: bool,
    run: fn() -> Result<Outcome>,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn toy_snapshots(m: usize, seed: u64, dict: &Dictionary) -> Result<(Matrix, Matrix)> {
    let s = sample_iid(&System::toy(), &BoxRegion::cube(2, -2.0, 2.0), m, seed)?;
    Ok((dict.evaluate(&s.x)?, dict.evaluate(&s.y)?))
}

fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

// 1. toy zero block and the 3x3 invariant block
fn toy_zero_block() -> Result<Outcome> {
    let dict = dictionary::build_monomials_2d(3, false)?;
    let want = Matrix::from_row_slice(3, 3, &[0.92, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.2, 0.8464]);
    let (mut worst_zero, mut worst_top) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let (px, py) = toy_snapshots(100, seed, &dict)?;
        let k = edmd::edmd(&px, &py, &dict.names())?;
        let b = k.block(3)?;
        worst_zero = worst_zero.max(max_abs(&b.k21));
        worst_top = worst_top.max(max_abs(&(b.k11 - &want)));
    }
    outcome(
        worst_zero <= 1e-10 && worst_top <= 1e-9,
        format!("20 seeds: max|K21| = {worst_zero:.2e} (<= 1e-10), max|K11 - exact| = {worst_top:.2e} (<= 1e-9)"),
    )
}

// 2. the reordered dictionary exposes two nested zero blocks
fn permuted_zero_blocks() -> Result<Outcome> {
    let dict = dictionary::build_monomials_2d(3, false)?;
    let order = ["x1", "x1*x2", "x1^3", "x2", "x1^2", "x2^2", "x1^2*x2", "x1*x2^2", "x2^3"];
    let perm = dict.indices_of(&order)?;
    let (mut z3, mut z5) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let (px, py) = toy_snapshots(100, seed, &dict)?;
        let k = edmd::edmd(&px, &py, &dict.names())?.permute(&perm)?;
        let (b3, b5) = (k.block(3)?, k.block(5)?);
        assert_eq!(b3.k21.shape(), (6, 3));
        assert_eq!(b5.k21.shape(), (4, 5));
        z3 = z3.max(max_abs(&b3.k21));
        z5 = z5.max(max_abs(&b5.k21));
    }
    outcome(z3 <= 1e-10 && z5 <= 1e-10, format!("max|K21| 6x3 = {z3:.2e}, 4x5 = {z5:.2e} (<= 1e-10)"))
}

fn window_errors(which: Example, eps_grid: &[f64]) -> Result<(f64, f64)> {
    let spec = ExampleSpec::new(which);
    let pts = ranking::detection_window(&spec, eps_grid, ranking::DEFAULT_WINDOW_TOL)?;
    let (mut pr, mut ppr) = (0.0f64, 0.0f64);
    for p in &pts {
        let (cpr, cppr) = spec.closed_window(p.epsilon).expect("beta = 1/2");
        pr = pr.max((p.alpha_star_pr - cpr).abs());
        ppr = ppr.max((p.alpha_star_ppr.unwrap() - cppr).abs());
    }
    Ok((pr, ppr))
}

// 3. example A windows and closures
fn example_a_window() -> Result<Outcome> {
    let grid: Vec<f64> = (1..=12).map(|k| k as f64 / 100.0).collect();
    let (pr, ppr) = window_errors(Example::A, &grid)?;
    let spec = ExampleSpec::new(Example::A);
    let c_pr = ranking::window_closure(&spec, GapKind::Pr, 1e-7)?;
    let c_ppr = ranking::window_closure(&spec, GapKind::Ppr, 1e-7)?;
    let (d_pr, d_ppr) = ((c_pr - 0.125).abs(), (c_ppr - 0.25).abs());
    outcome(
        pr <= 1e-5 && ppr <= 1e-5 && d_pr <= 1e-4 && d_ppr <= 1e-4,
        format!("max err PR {pr:.1e}, PPR {ppr:.1e} (<= 1e-5); closures {c_pr:.6} vs 1/8, {c_ppr:.6} vs 1/4 (<= 1e-4)"),
    )
}

// 4. example B windows, including both PPR branches
fn example_b_window() -> Result<Outcome> {
    let grid: Vec<f64> = (1..=60).map(|k| k as f64 * 0.005).collect();
    let (pr, ppr) = window_errors(Example::B, &grid)?;
    let spec = ExampleSpec::new(Example::B);
    let p = spec.matrix(0.125)?;
    let at_branch = ranking::alpha_star(&p, 2, Some(&spec.seeds()), GapKind::Ppr, ranking::DEFAULT_WINDOW_TOL)?;
    let d = (at_branch - 0.5).abs();
    outcome(
        pr <= 1e-5 && ppr <= 1e-5 && d <= 1e-5,
        format!("eps in (0, 0.3], 60 points: max err PR {pr:.1e}, PPR {ppr:.1e}; alpha*_PPR(1/8) = {at_branch:.7}"),
    )
}

// 5. lemma sweep
fn lemma_suite() -> Result<Outcome> {
    let rep = ranking::perturbation_suite(200, 1, &[0.1, 0.3, 0.5, 0.7, 0.85, 0.95])?;
    let worst: Vec<String> = rep.checks.iter().map(|c| format!("{} {:.1e}", c.name, c.min_margin)).collect();
    let detail = match rep.first_violation() {
        Some(c) => format!("violation in {}: {}", c.name, c.first_violation.clone().unwrap_or_default()),
        None => format!("200 instances, min margins: {}", worst.join(", ")),
    };
    outcome(rep.all_passed(), detail)
}

/// Random chain with a prescribed block split; independent of the library's sweep generator.
fn random_chain(rng: &mut ChaCha8Rng) -> (StochasticMatrix, usize) {
    let n = rng.random_range(3..=10usize);
    let split = rng.random_range(1..n);
    let leak: f64 = rng.random_range(0.0..0.5);
    let mut a = Matrix::from_fn(n, n, |_, _| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() });
    for i in 0..n {
        a[(i, i)] += 0.05;
        let s: f64 = a.row(i).sum();
        a.row_mut(i).unscale_mut(s);
        if i < split {
            for j in split..n {
                a[(i, j)] *= leak;
            }
            let s: f64 = a.row(i).sum();
            a.row_mut(i).unscale_mut(s);
        }
    }
    (StochasticMatrix::from_row_stochastic(a).expect("row stochastic"), split)
}

// 6. closed-form auxiliary gaps agree with direct solves on P(0)
fn closed_form_gaps() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut bound_ok) = (0.0f64, true);
    for _ in 0..100 {
        let (p, split) = random_chain(&mut rng);
        let p0 = ranking::renormalized_reference(&p, split)?;
        let alpha = rng.random_range(0.05..0.95);
        let n_seeds = rng.random_range(1..=split);
        let seeds: Vec<usize> = (0..n_seeds).collect();
        let r = ranking::auxiliary_gaps(&p0, split, alpha, Some(&seeds))?;
        let pr = ranking::detection_gaps(&ranking::pagerank(&p0, alpha, None)?, split)?.delta;
        let ppr = ranking::detection_gaps(&ranking::pagerank(&p0, alpha, Some(&seeds))?, split)?.delta;
        worst = worst.max((r.delta0_pr - pr).abs()).max((r.delta0_ppr.unwrap() - ppr).abs());
        bound_ok &= r.delta0_pr_lower <= pr + 1e-12;
    }
    outcome(worst <= 1e-10 && bound_ok, format!("100 instances: max |closed - direct| = {worst:.1e}; lower bound holds: {bound_ok}"))
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

// 7. finite-sample scaling of the D3 estimate
fn finite_sample_scaling() -> Result<Outcome> {
    let dict = dictionary::build_monomials_2d(2, false)?.subset(&[0, 1, 2])?;
    let exact = toy_analytic_k3(&System::toy())?;
    let ms = [100usize, 1000, 10000];
    let mut means = Vec::new();
    for &m in &ms {
        let mut acc = 0.0;
        for seed in 0..20 {
            let (px, py) = toy_snapshots(m, seed, &dict)?;
            let k = edmd::edmd(&px, &py, &dict.names())?;
            acc += inf_norm(&(k.k - &exact));
        }
        means.push(acc / 20.0);
    }
    let lx: Vec<f64> = ms.iter().map(|&m| (m as f64).log10()).collect();
    let ly: Vec<f64> = means.iter().map(|e| e.max(f64::MIN_POSITIVE).log10()).collect();
    let slope = ls_slope(&lx, &ly);
    outcome(
        (-0.7..=-0.3).contains(&slope),
        format!(
            "mean errors {:.1e}, {:.1e}, {:.1e}; slope {slope:.3} (want [-0.7, -0.3]); D3 is exactly invariant, so errors sit at roundoff",
            means[0], means[1], means[2]
        ),
    )
}

fn experiment(name: &str) -> Result<ExperimentReport> {
    let Preset::Experiment(cfg) = builtin_preset(name)? else { unreachable!() };
    pipeline::run_experiment(&cfg, None)
}

// 8. Duffing selection quality
fn duffing_quality() -> Result<Outcome> {
    let rep = experiment("duffing")?;
    let errs: Vec<f64> = rep.replicates.iter().map(|r| r.one_step(Method::Ppr, 5).unwrap()).collect();
    let (mean, _) = pipeline::mean_sd(&errs);
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let dominated = rep
        .replicates
        .iter()
        .filter(|r| [5, 10, 20, 40].iter().all(|&n| r.one_step(Method::Ppr, n).unwrap() <= r.one_step(Method::Random, n).unwrap()))
        .count();
    outcome(
        worst <= 1e-6 && dominated >= 18,
        format!("N=5 PPR error mean {mean:.2e}, max {worst:.2e} (<= 1e-6); PPR <= Unordered at all N in {dominated}/20 (>= 18)"),
    )
}

// 9. Ramachandran desk scale
fn ramachandran_desk() -> Result<Outcome> {
    let rep = experiment("ramachandran-desk")?;
    let ratios: Vec<f64> =
        rep.replicates.iter().map(|r| r.one_step(Method::Ppr, 5).unwrap() / r.one_step(Method::Random, 5).unwrap()).collect();
    let (mean, sd) = pipeline::mean_sd(&ratios);
    let top4 = rep.replicates.iter().filter(|r| {
        let mut ranks = r.seed_ranks.clone();
        ranks.sort();
        ranks == [1, 2, 3, 4]
    });
    let top4 = top4.count();
    outcome(
        mean <= 0.6 && top4 == rep.replicates.len(),
        format!("PPR/Random at N=5: {mean:.3} +- {sd:.3} (<= 0.6); coordinates at ranks 1-4 in {top4}/{}", rep.replicates.len()),
    )
}

// 10. PPR mass outside the invariant block
fn invariant_ppr_exactness() -> Result<Outcome> {
    let dict = dictionary::build_monomials_2d(3, false)?;
    let inside = dict.indices_of(&["x1", "x2", "x1^2"])?;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (px, py) = toy_snapshots(100, seed, &dict)?;
        let k = edmd::edmd(&px, &py, &dict.names())?;
        let pi = ranking::pagerank(&ranking::transition_matrix(&k)?, 0.85, Some(&inside[..2]))?;
        let outside: f64 = (0..dict.len()).filter(|i| !inside.contains(i)).map(|i| pi.scores[i]).sum();
        worst = worst.max(outside);
    }
    outcome(worst <= 1e-10, format!("20 seeds, alpha = 0.85: max mass outside {{x1, x2, x1^2}} = {worst:.2e} (<= 1e-10)"))
}

// 11. Lorenz pseudo-eigenfunction, qualitative
fn lorenz_desk() -> Result<Outcome> {
    let rep = experiment("lorenz-desk")?;
    let offsets: Vec<f64> = rep
        .replicates
        .iter()
        .map(|r| r.eigen.iter().find(|e| e.method == Method::Ppr && e.n == 30).map_or(f64::INFINITY, |e| e.offset))
        .collect();
    let hits = offsets.iter().filter(|&&o| o < 1.0).count();
    let shown: Vec<String> = offsets.iter().map(|o| format!("{o:.2}")).collect();
    outcome(hits >= 3, format!("|freq - 6| at N=30 per replicate: [{}]; within 1 rad/s in {hits}/5 (>= 3)", shown.join(", ")))
}

fn main() {
    let criteria = [
        Criterion { id: "1", title: "toy zero block", budget: Some(Duration::from_secs(1)), gating: true, run: toy_zero_block },
        Criterion { id: "2", title: "permuted zero blocks", budget: None, gating: true, run: permuted_zero_blocks },
        Criterion { id: "3", title: "example A window", budget: Some(Duration::from_secs(5)), gating: true, run: example_a_window },
        Criterion { id: "4", title: "example B window", budget: None, gating: true, run: example_b_window },
        Criterion { id: "5", title: "lemma property suite", budget: Some(Duration::from_secs(30)), gating: true, run: lemma_suite },
        Criterion { id: "6", title: "closed-form gap consistency", budget: None, gating: true, run: closed_form_gaps },
        Criterion { id: "7", title: "finite-sample scaling", budget: Some(Duration::from_secs(10)), gating: true, run: finite_sample_scaling },
        Criterion { id: "8", title: "duffing selection quality", budget: Some(Duration::from_secs(120)), gating: true, run: duffing_quality },
        Criterion { id: "9", title: "ramachandran desk scale", budget: Some(Duration::from_secs(300)), gating: true, run: ramachandran_desk },
        Criterion { id: "10", title: "invariant-case PPR exactness", budget: None, gating: true, run: invariant_ppr_exactness },
        Criterion { id: "11", title: "lorenz pseudo-eigenfunction", budget: None, gating: false, run: lorenz_desk },
    ];
    let only: Option<Vec<String>> = std::env::var("KOOPMAN_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|t| t.trim().to_string()).collect());

    let mut failed = Vec::new();
    let mut gating = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == c.id)) {
            continue;
        }
        gating += usize::from(c.gating);
        let start = Instant::now();
        let res = (c.run)();
        let took = start.elapsed();
        let (mut pass, detail) = match res {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error {}: {e}", e.kind())),
        };
        let timing = match c.budget {
            Some(b) => {
                pass &= took <= b;
                format!("{:.2}s (budget {}s)", took.as_secs_f64(), b.as_secs())
            }
            None => format!("{:.2}s", took.as_secs_f64()),
        };
        let tag = match (pass, c.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (non-gating)",
        };
        println!("[{tag}] {:>2} {}: {detail}; {timing}", c.id, c.title);
        if !pass && c.gating {
            failed.push(c.id);
        }
    }
    println!("acceptance: {}/{gating} gating criteria met; failed: [{}]", gating - failed.len(), failed.join(", "));
    if !failed.is_empty() && std::env::var("KOOPMAN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
