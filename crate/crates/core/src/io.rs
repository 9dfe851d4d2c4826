//! CSV exchange, JSON reports, benchmark tables and run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::SolverOptions;
use crate::benchmark::{BenchmarkConfig, BenchmarkReport};
use crate::error::{Error, Result};
use crate::model::{validate_dataset, Dataset, FitResult, PenaltyConfig, ProfiledCoefficients, StopReason};
use crate::simulation::{SimConfig, SimTruth};
use crate::tuning::{CvGrid, CvReport};

pub const FIT_SCHEMA: &str = "aggmed.fit/1";
pub const CV_SCHEMA: &str = "aggmed.cv/1";
pub const BENCHMARK_SCHEMA: &str = "aggmed.benchmark/1";
pub const TRUTH_SCHEMA: &str = "aggmed.truth/1";

/// A numeric table with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub names: Vec<String>,
    pub data: DMatrix<f64>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Parses CSV text; rows and columns in errors are 1-based data positions.
pub fn parse_csv_matrix(text: &str) -> Result<LabeledMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::ParseError { row: 0, col: 0, msg: e.to_string() })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let ncol = names.len();
    let mut values = Vec::new();
    let mut nrow = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::ParseError { row: r + 1, col: 0, msg: e.to_string() })?;
        if rec.len() != ncol {
            return Err(Error::RaggedRows { row: r + 1, found: rec.len(), expected: ncol });
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::ParseError { row: r + 1, col: c + 1, msg: format!("not a number: {field:?}") })?;
            if !v.is_finite() {
                return Err(Error::ParseError { row: r + 1, col: c + 1, msg: format!("non-finite value: {field:?}") });
            }
            values.push(v);
        }
        nrow += 1;
    }
    if nrow == 0 || ncol == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(LabeledMatrix { names, data: DMatrix::from_row_slice(nrow, ncol, &values) })
}

pub fn load_csv_matrix(path: &Path) -> Result<LabeledMatrix> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_csv_matrix(&text)
}

/// 17 significant digits, enough to round-trip every f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_string(names: &[String], data: &DMatrix<f64>) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for i in 0..data.nrows() {
        let row: Vec<String> = (0..data.ncols()).map(|j| format_f64(data[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv_matrix(path: &Path, names: &[String], data: &DMatrix<f64>) -> Result<()> {
    if names.len() != data.ncols() {
        return Err(Error::DimensionMismatch(format!("{} names for {} columns", names.len(), data.ncols())));
    }
    fs::write(path, csv_string(names, data)).map_err(|e| io_err(path, e))
}

/// Loads X, M, Y and optional covariates; Y must have exactly one column.
pub fn load_dataset(x: &Path, m: &Path, y: &Path, c: Option<&Path>) -> Result<(Dataset, Option<DMatrix<f64>>)> {
    let lx = load_csv_matrix(x)?;
    let lm = load_csv_matrix(m)?;
    let ly = load_csv_matrix(y)?;
    if ly.data.ncols() != 1 {
        return Err(Error::DimensionMismatch(format!("outcome file has {} columns, expected 1", ly.data.ncols())));
    }
    let yv = DVector::from_column_slice(ly.data.column(0).as_slice());
    let d = validate_dataset(lx.data, lm.data, yv)?.with_names(lx.names, lm.names)?;
    let cov = match c {
        Some(p) => {
            let lc = load_csv_matrix(p)?;
            if lc.data.nrows() != d.n() {
                return Err(Error::DimensionMismatch(format!("covariates have {} rows, data {}", lc.data.nrows(), d.n())));
            }
            Some(lc.data)
        }
        None => None,
    };
    Ok((d, cov))
}

pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_csv_matrix(&dir.join("X.csv"), &d.x_names, &d.x)?;
    write_csv_matrix(&dir.join("M.csv"), &d.m_names, &d.m)?;
    write_csv_matrix(&dir.join("Y.csv"), &["Y".to_string()], &DMatrix::from_column_slice(d.n(), 1, d.y.as_slice()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledWeight {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub restarts_used: usize,
    pub chosen_restart: usize,
    pub restart_objectives: Vec<Option<f64>>,
    pub is_local_min: bool,
    pub min_hessian_eigenvalue: f64,
    pub stationarity: f64,
    pub max_sweep_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub schema_version: &'static str,
    pub n: usize,
    pub penalty: PenaltyConfig,
    pub weights_a: Vec<LabeledWeight>,
    pub weights_b: Vec<LabeledWeight>,
    pub normalization: &'static str,
    pub coefficients: ProfiledCoefficients,
    pub mediation_proportion: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub primal_residual_final: f64,
    pub dual_residual_final: f64,
    pub support_a: Vec<String>,
    pub support_b: Vec<String>,
    pub diagnostics: FitDiagnostics,
    pub cv: Option<CvReport>,
}

impl FitReport {
    pub fn new(d: &Dataset, pen: &PenaltyConfig, r: &FitResult, cv: Option<CvReport>) -> Self {
        let label = |names: &[String], v: &DVector<f64>| -> Vec<LabeledWeight> {
            names.iter().zip(v.iter()).map(|(n, x)| LabeledWeight { name: n.clone(), value: *x }).collect()
        };
        FitReport {
            schema_version: FIT_SCHEMA,
            n: d.n(),
            penalty: *pen,
            weights_a: label(&d.x_names, &r.weights.a),
            weights_b: label(&d.m_names, &r.weights.b),
            normalization: "aggregate_unit",
            coefficients: r.coefficients,
            mediation_proportion: r.coefficients.mp_hat,
            objective: r.objective,
            iterations: r.iterations,
            converged: r.converged,
            stop_reason: r.stop_reason,
            primal_residual_final: r.primal_residual_final,
            dual_residual_final: r.dual_residual_final,
            support_a: r.support_a.iter().map(|&i| d.x_names[i].clone()).collect(),
            support_b: r.support_b.iter().map(|&i| d.m_names[i].clone()).collect(),
            diagnostics: FitDiagnostics {
                restarts_used: r.restarts_used,
                chosen_restart: r.chosen_restart,
                restart_objectives: r.restart_objectives.clone(),
                is_local_min: r.is_local_min,
                min_hessian_eigenvalue: r.min_hessian_eigenvalue,
                stationarity: r.stationarity,
                max_sweep_increase: r.max_sweep_increase,
            },
            cv,
        }
    }

    /// Plain-text summary for terminals.
    pub fn summary(&self) -> String {
        let c = &self.coefficients;
        let mut s = format!(
            "n = {}  lambda = ({}, {}, {})\nMP = {:.4}  tau = {:.4}  alpha = {:.4}  gamma = {:.4}  eta = {:.4}\n",
            self.n, self.penalty.lambda_a, self.penalty.lambda_b, self.penalty.lambda_n, c.mp_hat, c.tau_hat, c.alpha_hat, c.gamma_hat, c.eta_hat
        );
        s += &format!(
            "objective = {:.6}  iterations = {}  stop = {:?}  stationarity = {:.2e}  local min = {}\n",
            self.objective, self.iterations, self.stop_reason, self.diagnostics.stationarity, self.diagnostics.is_local_min
        );
        s += &format!("exposures selected ({}): {}\n", self.support_a.len(), self.support_a.join(" "));
        s += &format!("mediators selected ({}): {}\n", self.support_b.len(), self.support_b.join(" "));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvOutput<'a> {
    pub schema_version: &'static str,
    pub report: &'a CvReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkOutput<'a> {
    pub schema_version: &'static str,
    pub config: &'a BenchmarkConfig,
    pub report: &'a BenchmarkReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthOutput<'a> {
    pub schema_version: &'static str,
    pub config: &'a SimConfig,
    pub truth: &'a SimTruth,
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub const TSV_HEADER: &str = "Condition\tMP (SD)\tAbs. bias\tPrecision\tRecall\tF1\tAccuracy";

/// Benchmark rows in the published table layout.
pub fn benchmark_tsv(report: &BenchmarkReport) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for s in &report.summaries {
        match &s.row {
            Some(r) => out.push_str(&format!(
                "{}\t{:.4} ({:.4})\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                r.condition, r.mp_mean, r.mp_sd, r.abs_bias, r.precision, r.recall, r.f1, r.accuracy
            )),
            None => out.push_str(&format!("{}\tNA\tNA\tNA\tNA\tNA\tNA\n", s.label)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Tsv,
    Both,
}

impl OutputFormat {
    pub fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }
    pub fn tsv(self) -> bool {
        matches!(self, OutputFormat::Tsv | OutputFormat::Both)
    }
}

/// File-level settings; command-line flags override them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub x: Option<PathBuf>,
    pub m: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub c: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    pub penalty: PenaltyConfig,
    pub solver: SolverOptions,
    pub grid: Option<CvGrid>,
    pub sim: SimConfig,
    pub benchmark: Option<BenchmarkConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Every referenced input must exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.x, &self.m, &self.y, &self.c].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("input file not found: {}", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_small_table() {
        let m = parse_csv_matrix("a,b\n1,2\n3,4\n5,6\n").unwrap();
        assert_eq!(m.names, vec!["a", "b"]);
        assert_eq!(m.data, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }

    #[test]
    fn na_is_located() {
        let e = parse_csv_matrix("a,b\n1,2\n3,NA\n").unwrap_err();
        assert!(matches!(e, Error::ParseError { row: 2, col: 2, .. }), "{e:?}");
    }

    #[test]
    fn ragged_rows_rejected() {
        let e = parse_csv_matrix("a,b\n1,2\n3\n").unwrap_err();
        assert_eq!(e, Error::RaggedRows { row: 2, found: 1, expected: 2 });
    }

    #[test]
    fn float_text_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308, 5e-324, 123456789.123456789] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn tsv_header_order() {
        assert_eq!(TSV_HEADER.split('\t').collect::<Vec<_>>(), ["Condition", "MP (SD)", "Abs. bias", "Precision", "Recall", "F1", "Accuracy"]);
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = RunConfig::from_toml("[penalty]\nlambda_a = 0.3\n").unwrap();
        assert_eq!(c.penalty.lambda_a, 0.3);
        assert_eq!(c.penalty.rho, 1.0);
        assert_eq!(c.solver.restarts, 10);
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
    }
}
