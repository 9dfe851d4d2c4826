use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aggmed::admm::{fit, SolverOptions};
use aggmed::benchmark::{run_benchmark, BenchmarkConfig, Condition, Tuning};
use aggmed::io::{self, BenchmarkOutput, CvOutput, FitReport, OutputFormat, RunConfig, TruthOutput};
use aggmed::model::{residualize_covariates, standardize_columns, PenaltyConfig};
use aggmed::simulation::{generate_dataset, Regime, SimConfig};
use aggmed::tuning::{cv_select, CvGrid, DEFAULT_GRID};
use aggmed::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "aggmed", version, about = "Sparse aggregated mediation analysis")]
struct Cli {
    /// TOML file with defaults for any subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "AGGMED_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit weights and coefficients, optionally after cross-validation.
    Fit(FitArgs),
    /// Cross-validate the penalty grid only.
    Cv(FitArgs),
    /// Write a simulated dataset and its truth.
    Simulate(SimArgs),
    /// Replicated simulate/tune/fit runs.
    Benchmark(BenchArgs),
    /// Built-in numerical self-checks.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Tsv,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => OutputFormat::Json,
            Format::Tsv => OutputFormat::Tsv,
            Format::Both => OutputFormat::Both,
        }
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Restarts for the fold fits during tuning (default 1).
    #[arg(long)]
    cv_restarts: Option<usize>,
}

#[derive(Args, Clone)]
struct PenaltyArgs {
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_b: Option<f64>,
    #[arg(long)]
    lambda_n: Option<f64>,
    /// Multiplier applied to lambda_a and lambda_b.
    #[arg(long)]
    c_lambda: Option<f64>,
    /// `default`, a comma list used for all three penalties, or `a:..;b:..;n:..`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Standardize CV folds with full-data statistics.
    #[arg(long)]
    global_standardization: bool,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    m: Option<PathBuf>,
    #[arg(long)]
    y: Option<PathBuf>,
    /// Covariates to regress out of X, M and Y.
    #[arg(long)]
    c: Option<PathBuf>,
    #[command(flatten)]
    penalty: PenaltyArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Clone)]
struct SimFlags {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    exposures: Option<usize>,
    #[arg(long)]
    mediators: Option<usize>,
    #[arg(long)]
    rho_x: Option<f64>,
    #[arg(long)]
    rho_m: Option<f64>,
    /// Active exposures and mediators in the truth (default 5).
    #[arg(long)]
    signals: Option<usize>,
    /// `complete` or `partial[:MP]`.
    #[arg(long)]
    regime: Option<String>,
}

#[derive(Args, Clone)]
struct SimArgs {
    #[command(flatten)]
    sim: SimFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct BenchArgs {
    #[command(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    penalty: PenaltyArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad grid value {t:?}"))))
        .collect::<Result<_>>()?;
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(v)
}

fn parse_grid(spec: &str, mut grid: CvGrid) -> Result<CvGrid> {
    let spec = spec.trim();
    if spec == "default" {
        grid.lambda_a_values = DEFAULT_GRID.to_vec();
        grid.lambda_b_values = DEFAULT_GRID.to_vec();
        grid.lambda_n_values = DEFAULT_GRID.to_vec();
        return Ok(grid);
    }
    if !spec.contains(':') {
        let v = parse_list(spec)?;
        grid.lambda_a_values = v.clone();
        grid.lambda_b_values = v.clone();
        grid.lambda_n_values = v;
        return Ok(grid);
    }
    for part in spec.split(';') {
        let (key, vals) = part.split_once(':').ok_or_else(|| Error::Config(format!("bad grid part {part:?}")))?;
        let v = parse_list(vals)?;
        match key.trim() {
            "a" => grid.lambda_a_values = v,
            "b" => grid.lambda_b_values = v,
            "n" => grid.lambda_n_values = v,
            k => return Err(Error::Config(format!("unknown grid axis {k:?}"))),
        }
    }
    Ok(grid)
}

fn parse_regime(s: &str) -> Result<Regime> {
    match s.split_once(':') {
        None if s == "complete" => Ok(Regime::Complete),
        None if s == "partial" => Ok(Regime::Partial { target_mp: 0.5 }),
        Some(("partial", v)) => {
            let t = v.parse().map_err(|_| Error::Config(format!("bad target MP {v:?}")))?;
            Ok(Regime::Partial { target_mp: t })
        }
        _ => Err(Error::Config(format!("unknown regime {s:?}"))),
    }
}

fn apply_solver(mut o: SolverOptions, a: &SolverArgs) -> SolverOptions {
    if let Some(v) = a.restarts {
        o.restarts = v;
    }
    if let Some(v) = a.seed {
        o.seed = v;
    }
    if let Some(v) = a.max_iter {
        o.max_iter = v;
    }
    o
}

fn apply_penalty(mut p: PenaltyConfig, a: &PenaltyArgs, s: &SolverArgs) -> PenaltyConfig {
    if let Some(v) = a.lambda_a {
        p.lambda_a = v;
    }
    if let Some(v) = a.lambda_b {
        p.lambda_b = v;
    }
    if let Some(v) = a.lambda_n {
        p.lambda_n = v;
    }
    if let Some(v) = a.c_lambda {
        p.c_lambda = v;
    }
    if let Some(v) = s.rho {
        p.rho = v;
    }
    p
}

/// The CV grid requested by flags or config, if any.
fn requested_grid(cfg: &RunConfig, a: &PenaltyArgs, base: PenaltyConfig, seed: u64) -> Result<Option<CvGrid>> {
    let mut grid = match (&a.grid, &cfg.grid) {
        (Some(spec), g) => parse_grid(spec, g.clone().unwrap_or_default())?,
        (None, Some(g)) => g.clone(),
        (None, None) => return Ok(None),
    };
    if let Some(k) = a.folds {
        grid.k_folds = k;
    }
    if a.global_standardization {
        grid.global_standardization = true;
    }
    grid.base = PenaltyConfig { lambda_a: 0.0, lambda_b: 0.0, lambda_n: 0.0, ..base };
    if cfg.grid.is_none() {
        grid.fold_seed = seed;
    }
    Ok(Some(grid))
}

fn apply_sim(mut s: SimConfig, f: &SimFlags) -> Result<SimConfig> {
    if let Some(v) = f.n {
        s.n = v;
    }
    if let Some(v) = f.exposures {
        s.m = v;
    }
    if let Some(v) = f.mediators {
        s.q = v;
    }
    if let Some(v) = f.rho_x {
        s.rho_x = v;
    }
    if let Some(v) = f.rho_m {
        s.rho_m = v;
    }
    if let Some(v) = f.signals {
        s.s = v;
    }
    if let Some(r) = &f.regime {
        s.regime = parse_regime(r)?;
    }
    Ok(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn required(p: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::Config(format!("missing --{name} path")))
}

fn run_fit(cfg: RunConfig, a: &FitArgs, cv_only: bool) -> Result<()> {
    let cfg = RunConfig {
        x: a.x.clone().or(cfg.x),
        m: a.m.clone().or(cfg.m),
        y: a.y.clone().or(cfg.y),
        c: a.c.clone().or(cfg.c),
        out: a.out.clone().or(cfg.out),
        format: a.format.map(Into::into).unwrap_or(cfg.format),
        ..cfg
    };
    let (x, m, y) = (required(&cfg.x, "x")?, required(&cfg.m, "m")?, required(&cfg.y, "y")?);
    cfg.check_paths()?;
    let opts = apply_solver(cfg.solver.clone(), &a.solver);
    let pen = apply_penalty(cfg.penalty, &a.penalty, &a.solver);
    let grid = requested_grid(&cfg, &a.penalty, pen, opts.seed)?;
    let (raw, cov) = io::load_dataset(&x, &m, &y, cfg.c.as_deref())?;
    let raw = match cov {
        Some(c) => residualize_covariates(&raw, &c)?,
        None => raw,
    };
    let cv = match (&grid, cv_only) {
        (Some(g), _) => {
            let mut fold_opts = opts.for_folds();
            if let Some(r) = a.solver.cv_restarts {
                fold_opts.restarts = r;
            }
            Some(cv_select(&raw, g, &fold_opts)?)
        }
        (None, true) => return Err(Error::Config("cv needs --grid or a [grid] section".into())),
        (None, false) => None,
    };
    if cv_only {
        let text = io::to_json(&CvOutput { schema_version: io::CV_SCHEMA, report: cv.as_ref().expect("cv ran") })?;
        return emit(&cfg.out, "cv.json", &text);
    }
    let pen = cv.as_ref().map(|r| r.selected).unwrap_or(pen);
    let d = standardize_columns(&raw)?;
    let result = fit(&d, &pen, &opts)?;
    let report = FitReport::new(&d, &pen, &result, cv);
    eprint!("{}", report.summary());
    let text = io::to_json(&report)?;
    emit(&cfg.out, "fit.json", &text)
}

fn emit(out: &Option<PathBuf>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => write_file(&dir.join(name), text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_simulate(cfg: RunConfig, a: &SimArgs) -> Result<()> {
    let mut sim = apply_sim(cfg.sim, &a.sim)?;
    if let Some(s) = a.seed {
        sim.seed = s;
    }
    let (d, truth) = generate_dataset(&sim)?;
    io::write_dataset(&a.out, &d)?;
    let text = io::to_json(&TruthOutput { schema_version: io::TRUTH_SCHEMA, config: &sim, truth: &truth })?;
    write_file(&a.out.join("truth.json"), &text)
}

fn run_bench(cfg: RunConfig, a: &BenchArgs) -> Result<()> {
    let mut bc = cfg.benchmark.clone().unwrap_or_else(|| BenchmarkConfig {
        conditions: vec![Condition { label: "simulated".into(), sim: cfg.sim }],
        solver: cfg.solver.clone(),
        ..Default::default()
    });
    let any_sim_flag = [a.sim.n, a.sim.exposures, a.sim.mediators].iter().any(Option::is_some)
        || a.sim.rho_x.is_some()
        || a.sim.rho_m.is_some()
        || a.sim.signals.is_some()
        || a.sim.regime.is_some();
    if any_sim_flag {
        for c in &mut bc.conditions {
            c.sim = apply_sim(c.sim, &a.sim)?;
        }
    }
    if let Some(r) = a.replicates {
        bc.replicates = r;
    }
    if let Some(s) = a.solver.seed {
        bc.seed = s;
    }
    bc.solver = apply_solver(bc.solver, &a.solver);
    if let Some(r) = a.solver.cv_restarts {
        bc.cv_solver = Some(SolverOptions { restarts: r, ..bc.solver.for_folds() });
    }
    let fixed = a.penalty.lambda_a.is_some() || a.penalty.lambda_b.is_some() || a.penalty.lambda_n.is_some();
    let base = match &bc.tuning {
        Tuning::Fixed { penalty } => *penalty,
        Tuning::Cv { grid } => grid.base,
    };
    let pen = apply_penalty(base, &a.penalty, &a.solver);
    if fixed {
        bc.tuning = Tuning::Fixed { penalty: pen };
    } else if let Some(g) = requested_grid(&cfg, &a.penalty, pen, bc.seed)? {
        bc.tuning = Tuning::Cv { grid: g };
    } else if let Tuning::Cv { grid } = &mut bc.tuning {
        grid.base = PenaltyConfig { lambda_a: 0.0, lambda_b: 0.0, lambda_n: 0.0, ..pen };
        if let Some(k) = a.penalty.folds {
            grid.k_folds = k;
        }
        grid.global_standardization |= a.penalty.global_standardization;
    } else if let Tuning::Fixed { penalty } = &mut bc.tuning {
        *penalty = pen;
    }
    let report = run_benchmark(&bc)?;
    let format: OutputFormat = a.format.map(Into::into).unwrap_or(cfg.format);
    let out = a.out.clone().or(cfg.out);
    let tsv = io::benchmark_tsv(&report);
    eprint!("{tsv}");
    if format.json() {
        let text = io::to_json(&BenchmarkOutput { schema_version: io::BENCHMARK_SCHEMA, config: &bc, report: &report })?;
        emit(&out, "benchmark.json", &text)?;
    }
    if format.tsv() {
        emit(&out, "benchmark.tsv", &tsv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.cmd {
        Command::Fit(a) => run_fit(cfg, a, false),
        Command::Cv(a) => run_fit(cfg, a, true),
        Command::Simulate(a) => run_simulate(cfg, a),
        Command::Benchmark(a) => run_bench(cfg, a),
        Command::Verify => {
            let checks = verify::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            match checks.iter().filter(|c| !c.passed).count() {
                0 => Ok(()),
                k => Err(Error::SelfCheckFailed(k)),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
