//! Command-line front end: `gen`, `solve`, and the four experiment runners.
//!
//! Flags are parsed and validated before any computation. Validation
//! failures exit 1 with a single diagnostic line; a lemma-suite failure
//! exits 2.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::builders::{
    build_adjacency, build_generator, build_jump_kernel, build_kernel, exit_rates, WeightedDigraph,
};
use crate::error::{Error, Result};
use crate::experiments::{
    run_experiment, write_atomic, ExperimentConfig, ExperimentKind, DEFAULT_SEED, MAX_N,
};
use crate::matrix::Matrix;
use crate::solvers::{
    pi_from_jump, residual, stationary_direct, stationary_kernel_power, stationary_tree_oracle,
    Method, SolveReport, TreeMode, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::weights::{sample_edge_matrix, sample_vertex_weights, RngStream, VertexWeightSpec, WeightLaw};

/// Environment variable supplying the default master seed.
pub const SEED_ENV: &str = "RANDMARKOV_SEED";
pub const DEFAULT_PRECISION: usize = 12;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_LEMMA_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "randmarkov", version, about = "Invariant distributions of random Markov chains on weighted complete digraphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample an adjacency matrix and write it as a text dump.
    Gen(GenArgs),
    /// Compute the invariant distribution of one sampled (or dumped) chain.
    Solve(SolveArgs),
    /// Generator invariant distribution against exit-rate and vertex-weight references.
    Fig1(ExperimentArgs),
    /// Uniformity of the kernel invariant distributions, including heavy tails.
    Fig2(ExperimentArgs),
    /// Log-log decay rates of the generator TV distances.
    Rate(ExperimentArgs),
    /// Concentration statistics with pass/fail verdicts.
    Lemmas(ExperimentArgs),
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Number of vertices.
    #[arg(long)]
    n: Option<usize>,
    /// Edge-weight law: exp:<rate>, invpow:<alpha>, const:<c>, bern:<p>:<law>.
    #[arg(long, default_value = "exp:1")]
    law: String,
    /// Vertex weights: const:<c>, iid:<law>, explicit:<v1,v2,...>.
    #[arg(long, default_value = "const:1")]
    theta: String,
    /// Master seed (default from RANDMARKOV_SEED, else 42).
    #[arg(long)]
    seed: Option<String>,
    /// Accept a degenerate (constant) edge law.
    #[arg(long)]
    fixture: bool,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    sample: SampleArgs,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Significant digits for matrix entries.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    threads: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Chain {
    /// Generator Q.
    Generator,
    /// Kernel P.
    Kernel,
    /// Jump kernel Q̂.
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolveMethod {
    Power,
    Direct,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleMode {
    Cofactor,
    Enumeration,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    sample: SampleArgs,
    /// Read the adjacency matrix from a dump written by `gen`.
    #[arg(long, conflicts_with = "n")]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "generator")]
    chain: Chain,
    #[arg(long, value_enum, default_value = "power")]
    method: SolveMethod,
    /// Tree-oracle mode; only meaningful with --method tree.
    #[arg(long, value_enum)]
    mode: Option<OracleMode>,
    #[arg(long)]
    tol: Option<String>,
    /// Significant digits for printed probabilities.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    threads: Option<String>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// key=value config file, or a manifest from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    threads: Option<String>,
    /// Single-panel size.
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    law: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// Comma-separated sizes.
    #[arg(long)]
    n_grid: Option<String>,
    /// Comma-separated tail exponents.
    #[arg(long)]
    alpha_grid: Option<String>,
    #[arg(long)]
    rate_exponent: Option<String>,
    /// Reuse one vertex-weight draw per size across trials.
    #[arg(long)]
    fixed_theta: bool,
    /// Accept a degenerate (constant) edge law.
    #[arg(long)]
    fixture: bool,
}

/// A validation failure tied to a flag, a config line, or neither.
#[derive(Debug)]
struct Invalid(String);

fn flag_err(flag: &str, e: impl std::fmt::Display) -> Invalid {
    Invalid(format!("--{flag}: {e}"))
}

fn parse_flag<T: std::str::FromStr>(flag: &str, v: &str) -> std::result::Result<T, Invalid>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| flag_err(flag, format!("`{v}`: {e}")))
}

fn resolve_seed(flag: Option<&str>) -> std::result::Result<u64, Invalid> {
    if let Some(s) = flag {
        return parse_flag("seed", s);
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Invalid(format!("{SEED_ENV}: `{s}` is not a valid seed"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn resolve_precision(flag: Option<&str>) -> std::result::Result<usize, Invalid> {
    let p = match flag {
        Some(s) => parse_flag::<usize>("precision", s)?,
        None => DEFAULT_PRECISION,
    };
    if !(1..=17).contains(&p) {
        return Err(flag_err("precision", format!("must lie in [1, 17], got {p}")));
    }
    Ok(p)
}

fn resolve_threads(flag: Option<&str>) -> std::result::Result<Option<usize>, Invalid> {
    match flag {
        None => Ok(None),
        Some(s) => {
            let k: usize = parse_flag("threads", s)?;
            if k == 0 {
                return Err(flag_err("threads", "must be >= 1"));
            }
            Ok(Some(k))
        }
    }
}

fn resolve_tol(flag: Option<&str>) -> std::result::Result<f64, Invalid> {
    let t = match flag {
        Some(s) => parse_flag::<f64>("tol", s)?,
        None => DEFAULT_TOL,
    };
    if !(t > 0.0 && t.is_finite()) {
        return Err(flag_err("tol", format!("must be > 0, got {t}")));
    }
    Ok(t)
}

/// Formats `v` rounded to `digits` significant digits, in shortest form.
pub fn format_sig(v: f64, digits: usize) -> String {
    if !v.is_finite() || v == 0.0 {
        return v.to_string();
    }
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), v)
        .parse()
        .unwrap_or(v);
    rounded.to_string()
}

struct Sample {
    n: usize,
    law: WeightLaw,
    theta: VertexWeightSpec,
    seed: u64,
}

fn resolve_sample(s: &SampleArgs) -> std::result::Result<Sample, Invalid> {
    let n = s.n.ok_or_else(|| Invalid("missing required flag --n".into()))?;
    if !(2..=MAX_N).contains(&n) {
        return Err(flag_err("n", format!("must lie in [2, {MAX_N}], got {n}")));
    }
    let law: WeightLaw = s.law.parse().map_err(|e| flag_err("law", e))?;
    if law.is_degenerate() && !s.fixture {
        return Err(flag_err("law", Error::DegenerateLaw(law.to_string())));
    }
    let theta: VertexWeightSpec = s.theta.parse().map_err(|e| flag_err("theta", e))?;
    if let VertexWeightSpec::Explicit(v) = &theta {
        if v.len() != n {
            return Err(flag_err("theta", format!("{} weights given for n = {n}", v.len())));
        }
    }
    Ok(Sample {
        n,
        law,
        theta,
        seed: resolve_seed(s.seed.as_deref())?,
    })
}

fn sample_graph(s: &Sample) -> Result<WeightedDigraph> {
    let stream = RngStream::new(s.seed, "cli/sample", 0, s.n as u64);
    let x = sample_edge_matrix(&s.law, s.n, &stream.lane(0))?;
    let theta = sample_vertex_weights(&s.theta, s.n, &stream.lane(1))?;
    build_adjacency(&theta, x)
}

/// Text dump of an adjacency matrix: header `n θ-spec law seed`, then `n`
/// rows of whitespace-separated entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixDump {
    pub theta: String,
    pub law: String,
    pub seed: u64,
    pub adjacency: Matrix,
}

impl MatrixDump {
    pub fn render(&self, digits: usize) -> String {
        let n = self.adjacency.n();
        let mut s = format!("{n} {} {} {}\n", self.theta, self.law, self.seed);
        for row in self.adjacency.rows() {
            let cells: Vec<String> = row.iter().map(|v| format_sig(*v, digits)).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Config(format!("dump line {line}: {msg}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty dump".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(1, "header must be `n theta law seed`".into()));
        }
        let n: usize = fields[0].parse().map_err(|_| bad(1, format!("bad size `{}`", fields[0])))?;
        let seed: u64 = fields[3].parse().map_err(|_| bad(1, format!("bad seed `{}`", fields[3])))?;
        let mut data = Vec::with_capacity(n * n);
        let mut rows = 0;
        for (idx, line) in lines {
            rows += 1;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| bad(idx + 1, format!("bad entry `{tok}`")))?,
                );
            }
            if data.len() - before != n {
                return Err(bad(idx + 1, format!("expected {n} entries, got {}", data.len() - before)));
            }
        }
        if rows != n {
            return Err(bad(1, format!("expected {n} rows, got {rows}")));
        }
        Ok(MatrixDump {
            theta: fields[1].to_string(),
            law: fields[2].to_string(),
            seed,
            adjacency: Matrix::from_vec(n, data)?,
        })
    }
}

/// Parses a config file. Either `key = value` lines (blank lines and `#`
/// comments ignored) or a JSON manifest written by an earlier run, whose
/// `config` object is read back.
pub fn parse_config_text(text: &str) -> Result<(Option<ExperimentKind>, BTreeMap<String, String>)> {
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let kind = v
            .get("experiment")
            .and_then(|e| e.as_str())
            .map(str::parse)
            .transpose()?;
        let obj = v
            .get("config")
            .and_then(|c| c.as_object())
            .ok_or_else(|| Error::Config("manifest has no `config` object".into()))?;
        let mut map = BTreeMap::new();
        for (k, val) in obj {
            let s = val
                .as_str()
                .ok_or_else(|| Error::Config(format!("manifest key `{k}` is not a string")))?;
            map.insert(k.clone(), s.to_string());
        }
        return Ok((kind, map));
    }
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", i + 1)));
        }
        map.insert(k.to_string(), v.to_string());
    }
    Ok((None, map))
}

/// Reads a config file and applies it over the defaults for `kind`.
pub fn load_config(path: &Path, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::defaults(kind);
    apply_config_text(&mut cfg, &text)?;
    Ok(cfg)
}

fn apply_config_text(cfg: &mut ExperimentConfig, text: &str) -> Result<()> {
    let (file_kind, map) = parse_config_text(text)?;
    if let Some(k) = file_kind {
        if k != cfg.experiment {
            return Err(Error::Config(format!(
                "manifest is for `{k}`, not `{}`",
                cfg.experiment
            )));
        }
    }
    for (k, v) in &map {
        cfg.apply(k, v)?;
    }
    Ok(())
}

fn resolve_experiment(
    kind: ExperimentKind,
    a: &ExperimentArgs,
) -> std::result::Result<ExperimentConfig, Invalid> {
    let mut cfg = ExperimentConfig::defaults(kind);
    if a.seed.is_none() {
        cfg.master_seed = resolve_seed(None)?;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| flag_err("config", format!("{}: {e}", path.display())))?;
        apply_config_text(&mut cfg, &text).map_err(|e| flag_err("config", e))?;
    }
    let flags = [
        ("n", "n", &a.n),
        ("law", "law", &a.law),
        ("theta", "theta", &a.theta),
        ("seed", "seed", &a.seed),
        ("trials", "trials", &a.trials),
        ("tol", "tol", &a.tol),
        ("n-grid", "n_grid", &a.n_grid),
        ("alpha-grid", "alpha_grid", &a.alpha_grid),
        ("rate-exponent", "rate_exponent", &a.rate_exponent),
    ];
    for (flag, key, value) in flags {
        if let Some(v) = value {
            cfg.apply(key, v).map_err(|e| flag_err(flag, e))?;
        }
    }
    if a.fixed_theta {
        cfg.fixed_theta = true;
    }
    if a.fixture {
        cfg.fixture = true;
    }
    cfg.validate().map_err(|e| Invalid(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn one_line(s: &str) -> String {
    s.lines().next().unwrap_or("").trim().to_string()
}

/// Parses `argv` (program name first), runs the subcommand, and returns
/// the process exit code. Results go to `out`, diagnostics and progress to
/// `err`.
pub fn run(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let _ = writeln!(err, "{}", one_line(&e.to_string()));
            return EXIT_INVALID;
        }
    };
    match dispatch(cli, out, err) {
        Ok(code) => code,
        Err(Outcome::Invalid(Invalid(msg))) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_INVALID
        }
        Err(Outcome::Failed(e)) => {
            let _ = writeln!(err, "error: {}", one_line(&e.to_string()));
            EXIT_INVALID
        }
    }
}

/// `run` over the process arguments and standard streams.
pub fn parse_and_dispatch(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}

enum Outcome {
    Invalid(Invalid),
    Failed(Error),
}

impl From<Invalid> for Outcome {
    fn from(e: Invalid) -> Self {
        Outcome::Invalid(e)
    }
}

impl From<Error> for Outcome {
    fn from(e: Error) -> Self {
        Outcome::Failed(e)
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<i32, Outcome> {
    match cli.command {
        Command::Gen(a) => run_gen(a, out),
        Command::Solve(a) => run_solve(a, out),
        Command::Fig1(a) => run_exp(ExperimentKind::Fig1, a, out, err),
        Command::Fig2(a) => run_exp(ExperimentKind::Fig2, a, out, err),
        Command::Rate(a) => run_exp(ExperimentKind::Rate, a, out, err),
        Command::Lemmas(a) => run_exp(ExperimentKind::Lemmas, a, out, err),
    }
}

fn io_err(e: std::io::Error) -> Outcome {
    Outcome::Failed(e.into())
}

fn run_gen(a: GenArgs, out: &mut dyn Write) -> std::result::Result<i32, Outcome> {
    let s = resolve_sample(&a.sample)?;
    let digits = resolve_precision(a.precision.as_deref())?;
    let threads = resolve_threads(a.threads.as_deref())?;
    let g = with_pool(threads, || sample_graph(&s))??;
    let dump = MatrixDump {
        theta: s.theta.to_string(),
        law: s.law.to_string(),
        seed: s.seed,
        adjacency: g.adjacency().clone(),
    };
    fs::create_dir_all(&a.out_dir).map_err(io_err)?;
    let path = a.out_dir.join(format!("gen_n{}_seed{}.txt", s.n, s.seed));
    write_atomic(&path, dump.render(digits).as_bytes())?;
    writeln!(out, "{}", path.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn run_solve(a: SolveArgs, out: &mut dyn Write) -> std::result::Result<i32, Outcome> {
    let digits = resolve_precision(a.precision.as_deref())?;
    let tol = resolve_tol(a.tol.as_deref())?;
    let threads = resolve_threads(a.threads.as_deref())?;
    if a.mode.is_some() && a.method != SolveMethod::Tree {
        return Err(flag_err("mode", "only valid with --method tree").into());
    }
    let graph = match &a.input {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| flag_err("input", format!("{}: {e}", path.display())))?;
            let dump = MatrixDump::parse(&text).map_err(|e| flag_err("input", e))?;
            WeightedDigraph::from_adjacency(dump.adjacency).map_err(|e| flag_err("input", e))?
        }
        None => {
            let s = resolve_sample(&a.sample)?;
            sample_graph(&s)?
        }
    };
    let mode = match a.mode.unwrap_or(OracleMode::Cofactor) {
        OracleMode::Cofactor => TreeMode::Cofactor,
        OracleMode::Enumeration => TreeMode::Enumeration,
    };
    let report = with_pool(threads, || solve_chain(&graph, a.chain, a.method, mode, tol))??;
    let chain = match a.chain {
        Chain::Generator => "generator",
        Chain::Kernel => "kernel",
        Chain::Jump => "jump",
    };
    let w = |out: &mut dyn Write| -> std::io::Result<()> {
        writeln!(out, "chain {chain}")?;
        writeln!(out, "method {}", report.method)?;
        writeln!(out, "iterations {}", report.iterations)?;
        writeln!(out, "residual {}", format_sig(report.residual, 3))?;
        for (i, p) in report.pi.as_slice().iter().enumerate() {
            writeln!(out, "pi[{i}] {}", format_sig(*p, digits))?;
        }
        Ok(())
    };
    w(out).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn solve_chain(
    g: &WeightedDigraph,
    chain: Chain,
    method: SolveMethod,
    mode: TreeMode,
    tol: f64,
) -> Result<SolveReport> {
    match chain {
        Chain::Generator => {
            let q = build_generator(g);
            match method {
                SolveMethod::Power => {
                    let jump = build_jump_kernel(g)?;
                    let r = stationary_kernel_power(&jump, tol, DEFAULT_MAX_ITER)?;
                    let pi = pi_from_jump(&r.pi, &exit_rates(g))?;
                    let res = residual(&q, pi.as_slice());
                    Ok(SolveReport {
                        pi,
                        method: Method::ViaJump,
                        iterations: r.iterations,
                        residual: res,
                    })
                }
                SolveMethod::Direct => stationary_direct(&q),
                SolveMethod::Tree => stationary_tree_oracle(&q, mode),
            }
        }
        Chain::Kernel | Chain::Jump => {
            let k = if chain == Chain::Kernel {
                build_kernel(g)?
            } else {
                build_jump_kernel(g)?
            };
            match method {
                SolveMethod::Power => stationary_kernel_power(&k, tol, DEFAULT_MAX_ITER),
                SolveMethod::Direct => stationary_direct(&k),
                SolveMethod::Tree => stationary_tree_oracle(&k, mode),
            }
        }
    }
}

fn run_exp(
    kind: ExperimentKind,
    a: ExperimentArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::result::Result<i32, Outcome> {
    let threads = resolve_threads(a.threads.as_deref())?;
    let cfg = resolve_experiment(kind, &a)?;
    let start = Instant::now();
    let (tx, rx) = std::sync::mpsc::channel::<String>();
    let tx = std::sync::Mutex::new(tx);
    let progress = move |msg: &str| {
        if let Ok(t) = tx.lock() {
            let _ = t.send(msg.to_string());
        }
    };
    let result = with_pool(threads, || run_experiment(&cfg, &progress))?;
    for msg in rx.try_iter() {
        let _ = writeln!(err, "{msg}");
    }
    let output = result?;
    for w in &output.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let paths = output.write_to(&a.out_dir, start.elapsed().as_secs_f64())?;
    for p in &paths {
        writeln!(out, "{}", p.display()).map_err(io_err)?;
    }
    if let Some(t) = &output.lemma_table {
        for r in &t.rows {
            writeln!(
                out,
                "{} n={} param={} statistic={} threshold={} verdict={}",
                r.lemma,
                r.n.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
                r.param.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
                format_sig(r.statistic, 6),
                r.threshold,
                r.verdict
            )
            .map_err(io_err)?;
        }
        if !t.all_passed() {
            return Ok(EXIT_LEMMA_FAILURE);
        }
    }
    Ok(EXIT_OK)
}
