//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Two end-to-end checks follow the numbered criteria: support recovery
//! through the CSV path, and a tuned fit at the n=710, m=21, q=635 shape
//! under a 30 minute ceiling. They are numbered 101 and 102 for filtering.
//!
//! `AGGMED_ACCEPTANCE_ONLY=6,9` restricts the run to the listed criteria
//! (criteria 7 and 8 then only see whatever benchmarks ran).

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use aggmed::admm::{fit, screen_hessian, SolverOptions};
use aggmed::benchmark::{run_benchmark, BenchmarkConfig, BenchmarkReport, Condition, Tuning};
use aggmed::io::{benchmark_tsv, to_json, BenchmarkOutput, BENCHMARK_SCHEMA};
use aggmed::metrics::BenchmarkRow;
use aggmed::model::{standardize_columns, AggregationWeights, Normalization, PenaltyConfig};
use aggmed::oracle::{angular_error, fd_hessian, finite_diff_grad, grid_search_min, identify_from_moments};
use aggmed::profile::{compute_aggregates, profile_coefficients, Moments};
use aggmed::simulation::{generate_dataset, Regime, SimConfig};
use aggmed::io::{load_dataset, write_dataset};
use aggmed::tuning::{cv_select, CvGrid};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 20_240_611;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn line(o: &Outcome) -> String {
    let tag = if o.id < 100 { format!("criterion {:>2}", o.id) } else { "check       ".to_string() };
    format!("{tag} {} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail)
}

struct Suite {
    only: Option<Vec<usize>>,
    out_dir: PathBuf,
    corpus: Vec<BenchmarkReport>,
    results: Vec<Outcome>,
    start: Instant,
}

impl Suite {
    fn wants(&self, id: usize) -> bool {
        self.only.as_ref().is_none_or(|v| v.contains(&id))
    }

    fn record(&mut self, o: Outcome) {
        println!("{}  [{:.0}s]", line(&o), self.start.elapsed().as_secs_f64());
        std::io::stdout().flush().ok();
        self.results.push(o);
    }

    fn bench(&mut self, tag: &str, cfg: &BenchmarkConfig) -> BenchmarkReport {
        let t = Instant::now();
        let rep = run_benchmark(cfg).expect("benchmark configuration is valid");
        let out = BenchmarkOutput { schema_version: BENCHMARK_SCHEMA, config: cfg, report: &rep };
        fs::write(self.out_dir.join(format!("{tag}.json")), to_json(&out).unwrap()).unwrap();
        fs::write(self.out_dir.join(format!("{tag}.tsv")), benchmark_tsv(&rep)).unwrap();
        println!("    {tag}: {} replicates in {:.0}s", rep.records.len(), t.elapsed().as_secs_f64());
        for s in &rep.summaries {
            if s.n_failed > 0 {
                println!("    {tag}/{}: {} failed replicates", s.label, s.n_failed);
            }
        }
        self.corpus.push(rep.clone());
        rep
    }
}

fn cv_solver() -> SolverOptions {
    SolverOptions::default().for_folds()
}

fn study_condition(n: usize, k: usize, rho: f64, regime: Regime) -> SimConfig {
    SimConfig { n, m: k, q: k, rho_x: rho, rho_m: rho, sigma_y2: 1.0, s: 5, regime, ..Default::default() }
}

fn cv_config(label: &str, sim: SimConfig, replicates: usize) -> BenchmarkConfig {
    BenchmarkConfig {
        conditions: vec![Condition { label: label.into(), sim }],
        replicates,
        seed: SEED,
        tuning: Tuning::Cv { grid: CvGrid::default() },
        solver: SolverOptions::default(),
        cv_solver: Some(cv_solver()),
    }
}

fn row(rep: &BenchmarkReport) -> Option<BenchmarkRow> {
    rep.summaries[0].row.clone()
}

fn describe(r: &BenchmarkRow) -> String {
    format!(
        "MP {:.4} ({:.4}), bias {:.4}, precision {:.4}, recall {:.4}, F1 {:.4}, accuracy {:.4}",
        r.mp_mean, r.mp_sd, r.abs_bias, r.precision, r.recall, r.f1, r.accuracy
    )
}

fn headline(suite: &mut Suite) {
    if suite.wants(1) {
        let rep = suite.bench("c1_rho03", &cv_config("m=q=20 rho=0.3", study_condition(200, 20, 0.3, Regime::Complete), 100));
        let o = match row(&rep) {
            Some(r) => Outcome {
                id: 1,
                name: "complete mediation, rho 0.3",
                passed: (r.mp_mean - 0.9679).abs() <= 0.05 && r.recall >= 0.95 && r.precision >= 0.90,
                detail: describe(&r),
            },
            None => Outcome { id: 1, name: "complete mediation, rho 0.3", passed: false, detail: "all replicates failed".into() },
        };
        suite.record(o);
    }
    if suite.wants(2) {
        let rep = suite.bench("c2_rho0", &cv_config("m=q=20 rho=0", study_condition(200, 20, 0.0, Regime::Complete), 100));
        let o = match row(&rep) {
            Some(r) => Outcome {
                id: 2,
                name: "complete mediation, uncorrelated",
                passed: (r.mp_mean - 0.8746).abs() <= 0.07 && r.recall >= 0.95 && r.precision >= 0.45,
                detail: describe(&r),
            },
            None => Outcome { id: 2, name: "complete mediation, uncorrelated", passed: false, detail: "all replicates failed".into() },
        };
        suite.record(o);
    }
    if suite.wants(3) {
        let sim = study_condition(200, 20, 0.3, Regime::Partial { target_mp: 0.5 });
        let rep = suite.bench("c3_partial", &cv_config("partial rho=0.3", sim, 100));
        let o = match row(&rep) {
            Some(r) => Outcome {
                id: 3,
                name: "partial mediation",
                passed: (r.mp_mean - 0.4933).abs() <= 0.05 && r.abs_bias <= 0.06,
                detail: describe(&r),
            },
            None => Outcome { id: 3, name: "partial mediation", passed: false, detail: "all replicates failed".into() },
        };
        suite.record(o);
    }
    if suite.wants(4) {
        let rep = suite.bench("c4_m50", &cv_config("m=q=50 rho=0.3", study_condition(200, 50, 0.3, Regime::Complete), 50));
        let o = match row(&rep) {
            Some(r) => Outcome {
                id: 4,
                name: "larger problem m=q=50",
                passed: r.precision >= 0.95
                    && r.recall >= 0.95
                    && r.f1 >= 0.95
                    && r.accuracy >= 0.95
                    && (r.mp_mean - 0.9872).abs() <= 0.05,
                detail: describe(&r),
            },
            None => Outcome { id: 4, name: "larger problem m=q=50", passed: false, detail: "all replicates failed".into() },
        };
        suite.record(o);
    }
}

fn penalty_scaling(suite: &mut Suite) {
    if !suite.wants(5) {
        return;
    }
    let mut recalls = Vec::new();
    for c in [1.0, 2.0, 5.0, 10.0, 15.0] {
        let cfg = BenchmarkConfig {
            conditions: vec![Condition { label: format!("C={c}"), sim: study_condition(200, 20, 0.3, Regime::Complete) }],
            replicates: 100,
            seed: SEED,
            tuning: Tuning::Fixed { penalty: PenaltyConfig { c_lambda: c, ..PenaltyConfig::new(0.15, 0.15, 0.10) } },
            solver: SolverOptions::default(),
            cv_solver: None,
        };
        let rep = suite.bench(&format!("c5_c{c}"), &cfg);
        recalls.push((c, row(&rep).map(|r| r.recall).unwrap_or(f64::NAN)));
    }
    let base = recalls[0].1;
    let kept = recalls[..3].iter().all(|(_, r)| *r >= 0.9);
    let dropped = recalls[3..].iter().all(|(_, r)| *r <= base - 0.2);
    let detail = recalls.iter().map(|(c, r)| format!("C={c}: recall {r:.4}")).collect::<Vec<_>>().join(", ");
    suite.record(Outcome { id: 5, name: "penalty scaling", passed: kept && dropped, detail });
}

fn oracle_equivalence(suite: &mut Suite) {
    if !suite.wants(6) {
        return;
    }
    let penalties = [
        PenaltyConfig::new(0.02, 0.02, 0.0),
        PenaltyConfig::new(0.05, 0.1, 0.0),
        PenaltyConfig::new(0.1, 0.1, 0.05),
        PenaltyConfig::new(0.05, 0.05, 0.1),
    ];
    let (mut compared, mut passed, mut worst) = (0, 0, f64::NEG_INFINITY);
    for i in 0..50u64 {
        let cfg = SimConfig { n: 50, m: 2, q: 2, s: 1, seed: SEED ^ (1000 + i), ..Default::default() };
        let d = standardize_columns(&generate_dataset(&cfg).unwrap().0).unwrap();
        let p = penalties[i as usize % penalties.len()];
        let Ok(g) = grid_search_min(&d, &p, 360) else { continue };
        compared += 1;
        let opts = SolverOptions { seed: i, ..Default::default() };
        if let Ok(r) = fit(&d, &p, &opts) {
            worst = worst.max(r.objective - g.objective);
            if r.objective <= g.objective + 1e-3 {
                passed += 1;
            }
        }
    }
    suite.record(Outcome {
        id: 6,
        name: "oracle equivalence",
        passed: compared == 50 && passed == compared,
        detail: format!("{passed}/{compared} within 1e-3 of the grid minimum, largest excess {worst:.2e}"),
    });
}

fn descent_and_stationarity(suite: &mut Suite) {
    let records: Vec<_> = suite.corpus.iter().flat_map(|r| r.records.iter().cloned()).collect();
    if suite.wants(7) {
        let events: usize = records.iter().map(|r| r.non_descent_events).sum();
        let inc = records.iter().filter_map(|r| r.max_sweep_increase).fold(f64::NEG_INFINITY, f64::max);
        suite.record(Outcome {
            id: 7,
            name: "descent invariant",
            passed: !records.is_empty() && events == 0 && inc <= 1e-8,
            detail: format!("{} replicates, {events} non-descent events, largest sweep increase {inc:.2e}", records.len()),
        });
    }
    if suite.wants(8) {
        let ok: Vec<_> = records.iter().filter(|r| r.ok).collect();
        let worst = ok.iter().map(|r| r.stationarity.unwrap_or(f64::NAN)).fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
        let over = ok.iter().filter(|r| !(r.stationarity.unwrap_or(f64::NAN) <= 1e-4)).count();
        suite.record(Outcome {
            id: 8,
            name: "stationarity",
            passed: !ok.is_empty() && over == 0,
            detail: format!("{} accepted solutions, {over} above 1e-4, largest {worst:.2e}", ok.len()),
        });
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, k, k);
    &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5
}

fn identifiability(suite: &mut Suite) {
    if !suite.wants(9) {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut pass, mut worst_pop, mut worst_sample) = (0, 0.0f64, 0.0f64);
    let n = 100_000;
    for _ in 0..100 {
        let (m, q) = (rng.random_range(2..7), rng.random_range(2..7));
        // unit directions, constant path coefficients
        let a0 = DVector::<f64>::from_fn(m, |_, _| StandardNormal.sample(&mut rng)).normalize();
        let b0 = DVector::<f64>::from_fn(q, |_, _| StandardNormal.sample(&mut rng)).normalize();
        let alpha: f64 = rng.random_range(0.3..1.5);
        let (gamma, eta): (f64, f64) = (rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));
        let sx = spd(&mut rng, m);
        let se = spd(&mut rng, q);
        // M = X Aᵀ + E with Aᵀ = α a0 b0ᵀ / ‖b0‖², so M b0 = α X a0 + E b0
        let at: DMatrix<f64> = &a0 * b0.transpose() * (alpha / b0.norm_squared());
        let sxm = &sx * &at;
        let smm = at.transpose() * &sx * &at + &se;
        let sxy = &sx * &a0 * (gamma + alpha * eta);
        let smy = sxm.transpose() * &a0 * gamma + &smm * &b0 * eta;
        let pop = identify_from_moments(&sxm, &sxy, &smy, &sx, &smm, 1e-6, 1e-3)
            .map(|id| angular_error(&id.a_dir, &a0).max(angular_error(&id.b_dir, &b0)))
            .unwrap_or(f64::INFINITY);

        let lx = sx.clone().cholesky().unwrap().l();
        let le = se.clone().cholesky().unwrap().l();
        let x = normal_matrix(&mut rng, n, m) * lx.transpose();
        let med = &x * &at + normal_matrix(&mut rng, n, q) * le.transpose();
        let noise = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let y = &x * &a0 * gamma + &med * &b0 * eta + noise;
        let k = n as f64;
        let sample = identify_from_moments(
            &(x.tr_mul(&med) / k),
            &(x.tr_mul(&y) / k),
            &(med.tr_mul(&y) / k),
            &(x.tr_mul(&x) / k),
            &(med.tr_mul(&med) / k),
            0.2,
            1e-3,
        )
        .map(|id| angular_error(&id.a_dir, &a0).max(angular_error(&id.b_dir, &b0)))
        .unwrap_or(f64::INFINITY);
        worst_pop = worst_pop.max(pop);
        worst_sample = worst_sample.max(sample);
        if pop <= 1e-8 && sample <= 0.02 {
            pass += 1;
        }
    }
    suite.record(Outcome {
        id: 9,
        name: "identifiability round trip",
        passed: pass >= 99,
        detail: format!("{pass}/100 draws, worst population error {worst_pop:.2e}, worst n=1e5 error {worst_sample:.2e}"),
    });
}

fn derivative_checks(suite: &mut Suite) {
    if !suite.wants(10) {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 10);
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let cfg = SimConfig { n: 80, m: 3, q: 3, s: 1, seed: SEED + i, ..Default::default() };
        let d = standardize_columns(&generate_dataset(&cfg).unwrap().0).unwrap();
        let mo = Moments::new(&d);
        let a = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
        let b = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
        let (a, b) = mo.normalize(&a, &b).unwrap();
        let ln = [0.0, 0.1][i as usize % 2];
        let (ga, gb) = mo.grad(&a, &b, ln);
        let f = |v: &DVector<f64>| {
            let (x, y) = (v.rows(0, 3).into_owned(), v.rows(3, 3).into_owned());
            mo.normalize(&x, &y).map(|(x, y)| mo.smooth(&mo.scalars(&x, &y), ln)).unwrap_or(f64::NAN)
        };
        let v = DVector::from_iterator(6, a.iter().chain(b.iter()).cloned());
        let err = match finite_diff_grad(f, &v, 1e-6) {
            Ok(fd) => (0..6).map(|j| (fd[j] - if j < 3 { ga[j] } else { gb[j - 3] }).abs()).fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    let saddle = |v: &DVector<f64>| v[0] * v[0] - v[1] * v[1];
    let min_eig = fd_hessian(saddle, &DVector::zeros(2), 1e-4).map(|h| screen_hessian(&h)).map(|s| s.min_eigenvalue).unwrap_or(f64::NAN);
    let flagged = fd_hessian(saddle, &DVector::zeros(2), 1e-4).map(|h| !screen_hessian(&h).is_local_min).unwrap_or(false);
    suite.record(Outcome {
        id: 10,
        name: "gradient and Hessian checks",
        passed: worst < 1e-6 && min_eig < -1.0 && flagged,
        detail: format!("max gradient error {worst:.2e} over 10 instances, saddle min eigenvalue {min_eig:.4}"),
    });
}

fn mp_invariance(suite: &mut Suite) {
    if !suite.wants(11) {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 11);
    let pen = PenaltyConfig::default();
    let (mut triples, mut worst, mut draws) = (0, 0.0f64, 0u64);
    while triples < 100 && draws < 1000 {
        draws += 1;
        let (m, q) = (rng.random_range(2..8), rng.random_range(2..8));
        let cfg = SimConfig { n: 60, m, q, s: 1, seed: SEED + draws, ..Default::default() };
        let d = standardize_columns(&generate_dataset(&cfg).unwrap().0).unwrap();
        let a = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let b = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
        let mp = |a: &DVector<f64>, b: &DVector<f64>, nm: Normalization| -> Option<f64> {
            let w = AggregationWeights { a: a.clone(), b: b.clone(), normalization: nm };
            let (xs, ms, _) = compute_aggregates(&d, &w).ok()?;
            profile_coefficients(&xs, &ms, &d.y, &pen).ok().map(|c| c.mp_hat)
        };
        let Some(base) = mp(&a, &b, Normalization::AggregateUnit) else { continue };
        triples += 1;
        for v in [
            mp(&a, &b, Normalization::WeightUnit),
            mp(&-&a, &-&b, Normalization::AggregateUnit),
            mp(&-&a, &-&b, Normalization::WeightUnit),
        ] {
            worst = worst.max(v.map(|v| (v - base).abs()).unwrap_or(f64::INFINITY));
        }
    }
    suite.record(Outcome {
        id: 11,
        name: "MP scale invariance",
        passed: triples == 100 && worst <= 1e-10,
        detail: format!("{triples} triples, max deviation {worst:.2e}"),
    });
}

fn determinism(suite: &mut Suite) {
    if !suite.wants(12) {
        return;
    }
    // every condition type of the corpus, at reduced replicate counts
    let cv = BenchmarkConfig {
        conditions: vec![
            Condition { label: "rho=0.3".into(), sim: study_condition(200, 20, 0.3, Regime::Complete) },
            Condition { label: "rho=0".into(), sim: study_condition(200, 20, 0.0, Regime::Complete) },
            Condition { label: "partial".into(), sim: study_condition(200, 20, 0.3, Regime::Partial { target_mp: 0.5 }) },
            Condition { label: "m=q=50".into(), sim: study_condition(200, 50, 0.3, Regime::Complete) },
        ],
        replicates: 3,
        ..cv_config("", SimConfig::default(), 3)
    };
    let fixed = BenchmarkConfig {
        conditions: vec![Condition { label: "C=5".into(), sim: study_condition(200, 20, 0.3, Regime::Complete) }],
        replicates: 10,
        seed: SEED,
        tuning: Tuning::Fixed { penalty: PenaltyConfig { c_lambda: 5.0, ..PenaltyConfig::new(0.15, 0.15, 0.10) } },
        solver: SolverOptions::default(),
        cv_solver: None,
    };
    let emit = |cfg: &BenchmarkConfig| -> (String, String) {
        let rep = run_benchmark(cfg).expect("valid configuration");
        (to_json(&BenchmarkOutput { schema_version: BENCHMARK_SCHEMA, config: cfg, report: &rep }).unwrap(), benchmark_tsv(&rep))
    };
    let mut same = true;
    let mut bytes = 0;
    for cfg in [&cv, &fixed] {
        let (j1, t1) = emit(cfg);
        let (j2, t2) = emit(cfg);
        same &= j1.as_bytes() == j2.as_bytes() && t1 == t2;
        bytes += j1.len();
    }
    suite.record(Outcome {
        id: 12,
        name: "determinism",
        passed: same,
        detail: format!("two runs of 5 conditions, {bytes} JSON bytes per run, identical: {same}"),
    });
}

fn tuned_fit(raw: &aggmed::Dataset, seed: u64) -> aggmed::Result<aggmed::FitResult> {
    let solver = SolverOptions { seed, ..Default::default() };
    let grid = CvGrid { fold_seed: seed, ..Default::default() };
    let cv = cv_select(raw, &grid, &solver.for_folds())?;
    fit(&standardize_columns(raw)?, &cv.selected, &solver)
}

fn end_to_end(suite: &mut Suite) {
    if suite.wants(101) {
        let sim = SimConfig { seed: SEED, ..study_condition(200, 20, 0.3, Regime::Complete) };
        let (raw, _) = generate_dataset(&sim).unwrap();
        let dir = suite.out_dir.join("roundtrip");
        write_dataset(&dir, &raw).unwrap();
        let (back, _) = load_dataset(&dir.join("X.csv"), &dir.join("M.csv"), &dir.join("Y.csv"), None).unwrap();
        let want: Vec<usize> = (0..5).collect();
        let o = match tuned_fit(&back, SEED) {
            Ok(r) => Outcome {
                id: 101,
                name: "simulate, export, fit recovers support 1..5",
                passed: back == raw && r.support_a == want && r.support_b == want,
                detail: format!("exposures {:?}, mediators {:?}", one_based(&r.support_a), one_based(&r.support_b)),
            },
            Err(e) => Outcome { id: 101, name: "simulate, export, fit recovers support 1..5", passed: false, detail: e.to_string() },
        };
        suite.record(o);
    }
    if suite.wants(102) {
        let sim = SimConfig { n: 710, m: 21, q: 635, seed: SEED, ..Default::default() };
        let (raw, _) = generate_dataset(&sim).unwrap();
        let t = Instant::now();
        let res = tuned_fit(&raw, SEED);
        let secs = t.elapsed().as_secs_f64();
        let o = Outcome {
            id: 102,
            name: "n=710, m=21, q=635 tuned fit",
            passed: res.is_ok() && secs <= 1800.0,
            detail: match res {
                Ok(r) => format!("{secs:.0}s including 125-cell 5-fold CV, {} exposures and {} mediators selected", r.support_a.len(), r.support_b.len()),
                Err(e) => format!("{e} after {secs:.0}s"),
            },
        };
        suite.record(o);
    }
}

fn one_based(v: &[usize]) -> Vec<usize> {
    v.iter().map(|i| i + 1).collect()
}

fn main() -> ExitCode {
    let only = std::env::var("AGGMED_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect::<Vec<usize>>());
    let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&out_dir).unwrap();
    let mut suite = Suite { only, out_dir, corpus: Vec::new(), results: Vec::new(), start: Instant::now() };
    println!("acceptance suite, benchmark outputs in {}", suite.out_dir.display());

    oracle_equivalence(&mut suite);
    identifiability(&mut suite);
    derivative_checks(&mut suite);
    mp_invariance(&mut suite);
    headline(&mut suite);
    penalty_scaling(&mut suite);
    descent_and_stationarity(&mut suite);
    determinism(&mut suite);
    end_to_end(&mut suite);

    suite.results.sort_by_key(|o| o.id);
    println!("\nsummary ({:.0}s)", suite.start.elapsed().as_secs_f64());
    for o in &suite.results {
        println!("{}", line(o));
    }
    let failed = suite.results.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", suite.results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
