//! `koopman`: simulate, fit, rank, select and certify from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 numerical failure, 3 verification failure.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use koopman_core::dictionary::Dictionary;
use koopman_core::edmd::{self, KoopmanMatrix};
use koopman_core::numerics::{Matrix, RankPolicy};
use koopman_core::pipeline::{self, DictionarySpec, Preset, PresetReport, SelectParams, WindowConfig};
use koopman_core::ranking::{self, Example, GapKind};
use koopman_core::systems::{self, fmt_f64, BoxRegion, Sampling, SnapshotSet, System};
use koopman_core::Error;
use serde::Serialize;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "koopman", version, about = "Koopman-invariant sub-dictionary selection with personalized PageRank")]
struct Cli {
    /// Base RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (KOOPMAN_OUT takes precedence).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON preset file for `experiment` or `window`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample snapshot pairs from a benchmark system.
    Simulate(SimulateArgs),
    /// Fit K on a snapshot set and a dictionary.
    Edmd(EdmdArgs),
    /// (Personalized) PageRank scores for a saved K.
    Rank(RankArgs),
    /// Rank, keep the top N and refit.
    Select(SelectArgs),
    /// Largest damping for which detection is certified.
    Window(WindowArgs),
    /// Random sweep of the perturbation and leakage inequalities.
    Verify(VerifyArgs),
    /// Run a built-in preset (or `--config` file) end to end.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SystemName {
    Toy,
    Duffing,
    Vdp,
    Lorenz,
    Ramachandran,
}

impl SystemName {
    fn system(self) -> System {
        match self {
            SystemName::Toy => System::toy(),
            SystemName::Duffing => System::duffing(),
            SystemName::Vdp => System::van_der_pol(),
            SystemName::Lorenz => System::lorenz(),
            SystemName::Ramachandran => System::ramachandran(),
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, conflicts_with = "system_file")]
    system: Option<SystemName>,
    /// System as JSON (same schema as in presets).
    #[arg(long)]
    system_file: Option<PathBuf>,
    /// Number of pairs.
    #[arg(long, default_value_t = 1000)]
    m: usize,
    /// Lower corner of the sampling cube (i.i.d. sampling).
    #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
    lo: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    hi: f64,
    /// Sample consecutive pairs along one trajectory starting here.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0, requires = "x0")]
    burn_in: usize,
    #[arg(long, default_value_t = 1, requires = "x0")]
    stride: usize,
    /// File stem inside the output directory.
    #[arg(long, default_value = "snapshots")]
    name: String,
}

#[derive(Args, Debug, Clone)]
struct DictArgs {
    /// `monomials:<deg>`, `monomials1:<deg>` (with constant), `laguerre:<order>`,
    /// `identity`, `ramachandran`, `delay:<levels>:<stride>`, or a JSON spec.
    #[arg(long, default_value = "monomials:3")]
    dict: String,
}

impl DictArgs {
    fn spec(&self) -> Result<DictionarySpec, Failure> {
        let s = self.dict.trim();
        if s.starts_with('{') {
            return serde_json::from_str(s).map_err(|e| Failure::Usage(format!("--dict: {e}")));
        }
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<usize, Failure> {
            parts
                .get(i)
                .ok_or_else(|| Failure::Usage(format!("--dict '{s}' is missing a parameter")))?
                .parse()
                .map_err(|_| Failure::Usage(format!("--dict '{s}': bad number")))
        };
        Ok(match parts[0] {
            "monomials" => DictionarySpec::Monomials { max_degree: num(1)? as u32, include_constant: false },
            "monomials1" => DictionarySpec::Monomials { max_degree: num(1)? as u32, include_constant: true },
            "laguerre" => DictionarySpec::Laguerre { max_order: num(1)? },
            "identity" => DictionarySpec::Identity,
            "ramachandran" => DictionarySpec::Ramachandran,
            "delay" => DictionarySpec::DelayEmbedding { n_delay: num(1)?, stride: num(2)? },
            other => return Err(Failure::Usage(format!("unknown dictionary '{other}'"))),
        })
    }
}

#[derive(Args, Debug)]
struct EdmdArgs {
    /// Snapshot CSV; the JSON sidecar is found next to it.
    #[arg(long)]
    snapshots: PathBuf,
    #[command(flatten)]
    dict: DictArgs,
    #[arg(long, value_enum, default_value = "strict")]
    policy: PolicyArg,
    /// Also report the `K21` block for this split.
    #[arg(long)]
    split: Option<usize>,
    #[arg(long, default_value = "k")]
    name: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Strict,
    MinNorm,
}

impl From<PolicyArg> for RankPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Strict => RankPolicy::Strict,
            PolicyArg::MinNorm => RankPolicy::MinNorm,
        }
    }
}

#[derive(Args, Debug)]
struct RankArgs {
    /// K as written by `edmd`.
    #[arg(long)]
    k: PathBuf,
    #[arg(long, default_value_t = 0.85)]
    alpha: f64,
    /// Seed observable names; none means standard PageRank.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<String>,
    /// Certify detection of the first N kept observables.
    #[arg(long)]
    split: Option<usize>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[command(flatten)]
    dict: DictArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.85)]
    alpha: f64,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<String>,
    /// Observable names that must be kept.
    #[arg(long, value_delimiter = ',')]
    forced: Vec<String>,
    #[arg(long, value_enum, default_value = "strict")]
    policy: PolicyArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExampleArg {
    A,
    B,
}

#[derive(Args, Debug)]
struct WindowArgs {
    #[arg(long, value_enum, conflicts_with = "k")]
    example: Option<ExampleArg>,
    /// Leakage values for the example chains.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// A saved K instead of an example.
    #[arg(long, requires = "split")]
    k: Option<PathBuf>,
    #[arg(long)]
    split: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<String>,
    #[arg(long, default_value_t = ranking::DEFAULT_WINDOW_TOL)]
    tol: f64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.85,0.95")]
    alphas: Vec<f64>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Built-in preset name or path to a preset JSON file.
    preset: Option<String>,
}

enum Failure {
    Usage(String),
    Numerical(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Numerical(e)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("Io: {e}"))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    threads: Option<usize>,
    started: u64,
}

impl Ctx {
    fn manifest(&self, command: &str, config: &impl Serialize, seeds: Vec<u64>) -> Result<RunManifest, Failure> {
        let value = serde_json::to_value(config).map_err(Error::from)?;
        Ok(RunManifest::new(command, &value, seeds, self.threads, self.started))
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    let out = std::env::var_os("KOOPMAN_OUT").map(PathBuf::from).unwrap_or(cli.out);
    let ctx = Ctx { seed: cli.seed, out, threads: cli.threads, started: manifest::now_unix() };
    if cli.config.is_some() && !matches!(cli.command, Command::Experiment(_) | Command::Window(_)) {
        return Err(Failure::Usage("--config applies to `experiment` and `window` only".into()));
    }
    match cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Edmd(a) => fit(&ctx, a),
        Command::Rank(a) => rank(&ctx, a),
        Command::Select(a) => select(&ctx, a),
        Command::Window(a) => window(&ctx, a, cli.config.as_deref()),
        Command::Verify(a) => verify(&ctx, a),
        Command::Experiment(a) => experiment(&ctx, a, cli.config.as_deref()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn sidecar(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn finish(ctx: &Ctx, m: RunManifest, command: &str, files: &[PathBuf]) -> Outcome {
    let path = m.finish(&ctx.out, &format!("{command}.manifest.json"), Some(files))?;
    for f in files {
        println!("wrote {}", f.display());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> Outcome {
    let system = match (&a.system, &a.system_file) {
        (Some(name), _) => name.system(),
        (None, Some(path)) => serde_json::from_str(&fs::read_to_string(path)?).map_err(Error::from)?,
        (None, None) => return Err(Failure::Usage("give --system or --system-file".into())),
    };
    let set = match &a.x0 {
        Some(x0) => {
            let total = a.burn_in + a.m * a.stride + 1;
            systems::sample_trajectory(&system, x0, total, a.burn_in, a.stride, ctx.seed)?
        }
        None => systems::sample_iid(&system, &BoxRegion::cube(system.dim(), a.lo, a.hi), a.m, ctx.seed)?,
    };
    fs::create_dir_all(&ctx.out)?;
    let csv = ctx.out.join(format!("{}.csv", a.name));
    set.write(&csv, &sidecar(&csv))?;
    let m = ctx.manifest("simulate", &set.meta(), vec![ctx.seed])?;
    finish(ctx, m, "simulate", &[sidecar(&csv), csv])
}

fn load_snapshots(path: &Path) -> Result<SnapshotSet, Failure> {
    Ok(SnapshotSet::read(path, &sidecar(path))?)
}

/// `Psi(X)` and `Psi(Y)`; delay dictionaries need an unstrided trajectory.
fn evaluate(dict: &Dictionary, set: &SnapshotSet) -> Result<(Matrix, Matrix), Failure> {
    if !dict.requires_trajectory() {
        return Ok((dict.evaluate(&set.x)?, dict.evaluate(&set.y)?));
    }
    if !matches!(set.sampling, Sampling::Trajectory { stride: 1, .. }) {
        return Err(Error::RequiresTrajectory(dict.builder.clone()).into());
    }
    let n = set.len();
    let mut frames = set.x.clone().insert_row(n, 0.0);
    frames.row_mut(n).copy_from(&set.y.row(n - 1));
    Ok(dict.evaluate_delay(&frames)?)
}

fn fit(ctx: &Ctx, a: EdmdArgs) -> Outcome {
    let set = load_snapshots(&a.snapshots)?;
    let spec = a.dict.spec()?;
    let dict = spec.build(set.dim())?;
    let (px, py) = evaluate(&dict, &set)?;
    let mut k = edmd::edmd_with(&px, &py, &dict.names(), a.policy.into())?;
    fs::create_dir_all(&ctx.out)?;
    let manifest_path = ctx.out.join(format!("{}_dictionary.json", a.name));
    write_json(&manifest_path, &dict.manifest())?;
    let hash = manifest::sha256_hex(&fs::read(&manifest_path)?);
    let mut files = vec![manifest_path];
    if let Some(n) = a.split {
        k = k.with_split(n)?;
        let report = k.block_report(n)?;
        let path = ctx.out.join(format!("{}_blocks.json", a.name));
        write_json(&path, &report)?;
        println!(
            "||K21||_F = {} (structural zero: {})",
            fmt_f64(report.offdiag_frobenius),
            report.structural_zero
        );
        files.push(path);
    }
    let csv = ctx.out.join(format!("{}.csv", a.name));
    k.write(&csv, &sidecar(&csv), Some(hash))?;
    files.extend([csv.clone(), sidecar(&csv)]);
    let config = serde_json::json!({ "snapshots": set.meta(), "dictionary": spec, "policy": RankPolicy::from(a.policy), "split": a.split });
    let m = ctx.manifest("edmd", &config, vec![set.seed])?;
    finish(ctx, m, "edmd", &files)
}

fn seed_indices(names: &[String], seeds: &[String]) -> Result<Vec<usize>, Failure> {
    seeds
        .iter()
        .map(|s| names.iter().position(|n| n == s).ok_or_else(|| Error::UnknownObservable(s.clone()).into()))
        .collect()
}

fn rank(ctx: &Ctx, a: RankArgs) -> Outcome {
    let k = KoopmanMatrix::read(&a.k)?;
    let seeds = seed_indices(&k.names, &a.seeds)?;
    let seeds = (!seeds.is_empty()).then_some(seeds);
    let chain = ranking::transition_matrix(&k)?;
    let ppr = ranking::pagerank(&chain, a.alpha, seeds.as_deref())?;
    fs::create_dir_all(&ctx.out)?;
    let json = ctx.out.join("ppr.json");
    write_json(&json, &ppr)?;
    let csv = ctx.out.join("ppr_scores.csv");
    let header: Vec<String> = ["rank", "index", "name", "score"].iter().map(|s| s.to_string()).collect();
    systems::write_records(&csv, &header, ppr.ranking.len(), |r| {
        let i = ppr.ranking[r];
        vec![(r + 1).to_string(), i.to_string(), k.names[i].clone(), fmt_f64(ppr.scores[i])]
    })?;
    let mut files = vec![json, csv];
    if !chain.dropped.is_empty() {
        let dropped: Vec<&str> = chain.dropped.iter().map(|&i| k.names[i].as_str()).collect();
        println!("dropped zero rows: {}", dropped.join(", "));
    }
    if let Some(n) = a.split {
        let report = ranking::detection_certificate(&chain, n, a.alpha, seeds.as_deref())?;
        println!(
            "split {n}: ||P12|| = {}, PR certified {}, PPR certified {}",
            fmt_f64(report.p12_inf),
            report.pr_pass.unwrap_or(false),
            report.ppr_pass.map_or("n/a".into(), |p| p.to_string())
        );
        let path = ctx.out.join("certificate.json");
        write_json(&path, &report)?;
        files.push(path);
    }
    for (r, &i) in ppr.ranking.iter().take(10).enumerate() {
        println!("{:>3}  {:<24} {}", r + 1, k.names[i], fmt_f64(ppr.scores[i]));
    }
    let config = serde_json::json!({ "k": manifest::sha256_hex(&fs::read(&a.k)?), "alpha": a.alpha, "seeds": a.seeds, "split": a.split });
    let m = ctx.manifest("rank", &config, Vec::new())?;
    finish(ctx, m, "rank", &files)
}

fn select(ctx: &Ctx, a: SelectArgs) -> Outcome {
    let set = load_snapshots(&a.snapshots)?;
    let spec = a.dict.spec()?;
    let dict = spec.build(set.dim())?;
    let (px, py) = evaluate(&dict, &set)?;
    let k_full = edmd::edmd_with(&px, &py, &dict.names(), a.policy.into())?;
    let params = SelectParams {
        n: a.n,
        alpha: a.alpha,
        seeds: a.seeds.clone(),
        forced: dict.indices_of(&a.forced)?,
        policy: a.policy.into(),
    };
    let result = pipeline::select(&k_full, &px, &py, &params)?;
    fs::create_dir_all(&ctx.out)?;
    let json = ctx.out.join("selection.json");
    write_json(&json, &result)?;
    let csv = ctx.out.join("k_sub.csv");
    result.k_sub.write(&csv, &sidecar(&csv), None)?;
    println!("selected: {}", result.sub_dictionary.join(", "));
    for s in &result.substitutions {
        println!("forced {} in place of {}", dict.names()[s.added], dict.names()[s.removed]);
    }
    let config = serde_json::json!({ "snapshots": set.meta(), "dictionary": spec, "params": params });
    let m = ctx.manifest("select", &config, vec![set.seed])?;
    finish(ctx, m, "select", &[json, csv.clone(), sidecar(&csv)])
}

fn window(ctx: &Ctx, a: WindowArgs, config: Option<&Path>) -> Outcome {
    if let Some(path) = config {
        return match Preset::load(path)? {
            Preset::Window(cfg) => run_window_config(ctx, &cfg),
            Preset::Experiment(_) => Err(Failure::Usage(format!("{} is not a window preset", path.display()))),
        };
    }
    if let Some(ex) = a.example {
        if a.eps.is_empty() {
            return Err(Failure::Usage("--example needs --eps".into()));
        }
        let example = match ex {
            ExampleArg::A => Example::A,
            ExampleArg::B => Example::B,
        };
        let cfg = WindowConfig {
            name: format!("example-{}", if matches!(ex, ExampleArg::A) { "a" } else { "b" }),
            example,
            beta: a.beta,
            eps_grid: a.eps,
            tol: a.tol,
        };
        return run_window_config(ctx, &cfg);
    }
    let (Some(path), Some(n)) = (&a.k, a.split) else {
        return Err(Failure::Usage("give --example or --k with --split".into()));
    };
    let k = KoopmanMatrix::read(path)?;
    let seeds = seed_indices(&k.names, &a.seeds)?;
    let chain = ranking::transition_matrix(&k)?;
    let pr = ranking::alpha_star(&chain, n, None, GapKind::Pr, a.tol)?;
    let ppr = if seeds.is_empty() { None } else { Some(ranking::alpha_star(&chain, n, Some(&seeds), GapKind::Ppr, a.tol)?) };
    fs::create_dir_all(&ctx.out)?;
    let csv = ctx.out.join("window.csv");
    let header: Vec<String> = ["split", "alpha_star_pr", "alpha_star_ppr"].iter().map(|s| s.to_string()).collect();
    systems::write_records(&csv, &header, 1, |_| vec![n.to_string(), fmt_f64(pr), ppr.map(fmt_f64).unwrap_or_default()])?;
    print!("{}", fs::read_to_string(&csv)?);
    let config = serde_json::json!({ "k": manifest::sha256_hex(&fs::read(path)?), "split": n, "seeds": a.seeds, "tol": a.tol });
    let m = ctx.manifest("window", &config, Vec::new())?;
    finish(ctx, m, "window", &[csv])
}

fn run_window_config(ctx: &Ctx, cfg: &WindowConfig) -> Outcome {
    let report = pipeline::run_window(cfg, Some(&ctx.out))?;
    let dir = ctx.out.join(&cfg.name).join("0");
    print!("{}", fs::read_to_string(dir.join("window.csv"))?);
    println!("closure: pr {} ppr {}", fmt_f64(report.closure_pr), fmt_f64(report.closure_ppr));
    let m = ctx.manifest("window", cfg, Vec::new())?;
    let path = m.finish(&ctx.out.join(&cfg.name), "manifest.json", None)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn verify(ctx: &Ctx, a: VerifyArgs) -> Outcome {
    let report = ranking::perturbation_suite(a.instances, ctx.seed, &a.alphas)?;
    for c in &report.checks {
        println!(
            "{:<28} {:>6} evaluations  min margin {:>12.4e}  {}",
            c.name,
            c.evaluations,
            c.min_margin,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("verify.json");
    write_json(&path, &report)?;
    let m = ctx.manifest("verify", &a.alphas, vec![ctx.seed])?;
    finish(ctx, m, "verify", &[path])?;
    match report.first_violation() {
        None => Ok(()),
        Some(c) => Err(Failure::Verification(format!(
            "{}: {}",
            c.name,
            c.first_violation.as_deref().unwrap_or("margin below tolerance")
        ))),
    }
}

fn experiment(ctx: &Ctx, a: ExperimentArgs, config: Option<&Path>) -> Outcome {
    let preset = match (&a.preset, config) {
        (Some(_), Some(_)) => return Err(Failure::Usage("give a preset name or --config, not both".into())),
        (None, Some(path)) => Preset::load(path)?,
        (Some(name), None) if Path::new(name).is_file() => Preset::load(Path::new(name))?,
        (Some(name), None) => pipeline::builtin_preset(name)?,
        (None, None) => {
            return Err(Failure::Usage(format!("name a preset ({})", pipeline::PRESET_NAMES.join(", "))));
        }
    };
    let preset = match &preset {
        Preset::Experiment(_) => preset.with_seed(ctx.seed),
        Preset::Window(_) => preset,
    };
    let report = pipeline::run_preset(&preset, Some(&ctx.out))?;
    let dir = ctx.out.join(preset.name());
    let seeds = match (&report, &preset) {
        (PresetReport::Experiment(r), _) => r.replicates.iter().map(|r| r.seed).collect(),
        _ => Vec::new(),
    };
    match &report {
        PresetReport::Experiment(r) => {
            println!("{:<12} {:>4} {:>14} {:>14}", "method", "N", "mean", "sd");
            for s in &r.summary {
                println!("{:<12} {:>4} {:>14.6e} {:>14.6e}", format!("{:?}", s.method).to_lowercase(), s.n, s.mean, s.sd);
            }
            for rep in &r.replicates {
                if let Some(b) = &rep.block_report {
                    println!(
                        "replicate {}: split {} ||K21||_F = {} (structural zero: {})",
                        rep.replicate,
                        b.split,
                        fmt_f64(b.offdiag_frobenius),
                        b.structural_zero
                    );
                }
            }
        }
        PresetReport::Window(w) => {
            print!("{}", fs::read_to_string(dir.join("0").join("window.csv"))?);
            println!("closure: pr {} ppr {}", fmt_f64(w.closure_pr), fmt_f64(w.closure_ppr));
        }
    }
    let m = match &preset {
        Preset::Experiment(c) => ctx.manifest("experiment", c, seeds)?,
        Preset::Window(c) => ctx.manifest("experiment", c, seeds)?,
    };
    let path = m.finish(&dir, "manifest.json", None)?;
    println!("wrote {}", path.display());
    Ok(())
}
