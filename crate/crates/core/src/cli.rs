//! Command-line front end: `fit`, `simulate` and `analytic`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::covariance::standard_errors;
use crate::error::{GmmError, Result};
use crate::estimate::{fit_gmm, GmmFit, WeightSpec};
use crate::linalg::{sym_inverse, InversePolicy};
use crate::model::{DataSet, LinearIv};
use crate::montecarlo::{analytic_example, fmt_sig, named_weight, parse_configs, parse_grid, run_grid};
use crate::resample::{
    dr_bootstrap, hh_bootstrap, me_bootstrap, percentile_ci, replicate_seed, split_sample, BootstrapOptions,
};
use crate::solver::SolverOptions;

#[derive(Debug, Parser)]
#[command(name = "misgmm", version, about = "GMM estimation under moment misspecification")]
pub struct Cli {
    /// Worker threads for resampling and simulation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit linear IV GMM and the misspecification-aware estimators on a CSV file.
    Fit(FitArgs),
    /// Run Monte Carlo designs from a JSON configuration.
    Simulate(SimulateArgs),
    /// Tabulate the closed-form two-instrument example over a ρ grid.
    Analytic(AnalyticArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum OutputFormat {
    Csv,
    Markdown,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub outcome: String,
    /// Comma-separated endogenous regressors.
    #[arg(long, value_delimiter = ',', required = true)]
    pub endog: Vec<String>,
    /// Comma-separated excluded instruments.
    #[arg(long, value_delimiter = ',', required = true)]
    pub iv: Vec<String>,
    /// Exogenous controls; they enter both the regressors and the instruments.
    #[arg(long, value_delimiter = ',')]
    pub controls: Vec<String>,
    /// Weight panels: identity, zz, s11, s112 or fixed:<path>.
    #[arg(long, value_delimiter = ',', default_value = "identity,zz,s112")]
    pub weight: Vec<String>,
    /// Estimators beyond GMM: me_boot, rss, dr, hh (or all).
    #[arg(long, value_delimiter = ',', default_value = "me_boot,rss,dr")]
    pub estimators: Vec<String>,
    #[arg(long = "B", alias = "b", default_value_t = 500)]
    pub b: usize,
    #[arg(long = "S", alias = "s", default_value_t = 50)]
    pub s: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: OutputFormat,
    /// Do not append a constant to regressors and instruments.
    #[arg(long)]
    pub no_intercept: bool,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for results.csv, table.txt and metadata.json.
    #[arg(long, default_value = "misgmm-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyticArgs {
    /// `a:b:step` or a single value, inside (−1, 1).
    #[arg(long, default_value = "-0.9:0.9:0.1", allow_hyphen_values = true)]
    pub rho_grid: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for an error: 2 for bad input, 3 for numerical failure.
pub fn exit_code(err: &GmmError) -> i32 {
    if err.is_input_error() {
        2
    } else {
        3
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(GmmError::Input("--threads must be positive".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| GmmError::Input(format!("thread pool: {e}")))?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Fit(args) => {
            let report = cmd_fit(args)?;
            let text = render_report(&report, args.format)?;
            emit(args.out.as_deref(), &text)
        }
        Command::Simulate(args) => {
            let table = cmd_simulate(&args.config, &args.out_dir)?;
            print!("{table}");
            Ok(())
        }
        Command::Analytic(args) => emit(args.out.as_deref(), &cmd_analytic(&args.rho_grid)?),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Numeric columns of a CSV file, rows with missing cells removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "N/A" | "NaN" | "nan" | ".")
}

/// Read the named columns; every name must be present in the header.
pub fn read_table<R: Read>(input: R, columns: &[String]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?.clone();
    let positions: Vec<usize> = columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h.trim() == c)
                .ok_or_else(|| GmmError::Input(format!("column {c:?} not found in header")))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let cells: Vec<&str> = positions.iter().map(|&i| record.get(i).unwrap_or("")).collect();
        if cells.iter().any(|c| is_missing(c)) {
            dropped += 1;
            continue;
        }
        let row = cells
            .iter()
            .zip(columns)
            .map(|(cell, name)| {
                cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    GmmError::Input(format!("row {}: column {name:?} has non-numeric value {cell:?}", line + 2))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table {
        names: columns.to_vec(),
        rows,
        dropped,
    })
}

/// Write a table back to CSV at full precision.
pub fn write_table<W: Write>(table: &Table, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.names)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Regressor and instrument layout of a linear IV specification.
#[derive(Debug, Clone, PartialEq)]
pub struct IvLayout {
    pub outcome: String,
    pub endog: Vec<String>,
    pub iv: Vec<String>,
    pub controls: Vec<String>,
    pub intercept: bool,
}

impl IvLayout {
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<&String> = std::iter::once(&self.outcome)
            .chain(&self.endog)
            .chain(&self.iv)
            .chain(&self.controls)
            .collect();
        let total = all.len();
        all.sort();
        all.dedup();
        if all.len() != total {
            return Err(GmmError::Input(
                "outcome, endogenous, instrument and control columns must be distinct".into(),
            ));
        }
        if self.endog.is_empty() || self.iv.is_empty() {
            return Err(GmmError::Input("need at least one endogenous regressor and one instrument".into()));
        }
        if self.iv.len() < self.endog.len() {
            return Err(GmmError::Input(format!(
                "order condition fails: {} instruments for {} endogenous regressors",
                self.iv.len(),
                self.endog.len()
            )));
        }
        Ok(())
    }

    pub fn columns(&self) -> Vec<String> {
        std::iter::once(self.outcome.clone())
            .chain(self.endog.iter().cloned())
            .chain(self.iv.iter().cloned())
            .chain(self.controls.iter().cloned())
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.endog.len() + self.controls.len() + usize::from(self.intercept)
    }

    pub fn n_moments(&self) -> usize {
        self.iv.len() + self.controls.len() + usize::from(self.intercept)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.endog.iter().chain(&self.controls).cloned().collect();
        if self.intercept {
            names.push("(intercept)".into());
        }
        names
    }

    /// Rows `[y, endog, controls, 1, iv, controls, 1]` from a table read with `columns()`.
    pub fn dataset(&self, table: &Table) -> Result<DataSet> {
        let (ne, ni) = (self.endog.len(), self.iv.len());
        let rows: Vec<Vec<f64>> = table
            .rows
            .iter()
            .map(|r| {
                let endog = &r[1..1 + ne];
                let iv = &r[1 + ne..1 + ne + ni];
                let controls = &r[1 + ne + ni..];
                let mut out = vec![r[0]];
                out.extend_from_slice(endog);
                out.extend_from_slice(controls);
                if self.intercept {
                    out.push(1.0);
                }
                out.extend_from_slice(iv);
                out.extend_from_slice(controls);
                if self.intercept {
                    out.push(1.0);
                }
                out
            })
            .collect();
        if rows.is_empty() {
            return Err(GmmError::InsufficientData("no complete rows".into()));
        }
        DataSet::from_rows(&rows)
    }

    pub fn model(&self) -> Result<LinearIv> {
        LinearIv::new(self.n_params(), self.n_moments())
    }
}

/// Parse one weight token; `fixed:<path>` reads a headerless numeric CSV.
pub fn parse_weight(token: &str) -> Result<WeightSpec> {
    match token.trim().strip_prefix("fixed:") {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                rows.push(
                    rec.iter()
                        .map(|c| {
                            c.trim()
                                .parse::<f64>()
                                .map_err(|_| GmmError::Input(format!("bad weight entry {c:?} in {path}")))
                        })
                        .collect::<Result<_>>()?,
                );
            }
            let m = rows.len();
            if m == 0 || rows.iter().any(|r| r.len() != m) {
                return Err(GmmError::Input(format!("weight file {path} is not a square matrix")));
            }
            let flat: Vec<f64> = rows.concat();
            WeightSpec::fixed(DMatrix::from_row_slice(m, m, &flat))
        }
        None => named_weight(token),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitEstimators {
    pub me_boot: bool,
    pub rss: bool,
    pub dr: bool,
    pub hh: bool,
}

pub fn parse_fit_estimators(list: &[String]) -> Result<FitEstimators> {
    let mut e = FitEstimators {
        me_boot: false,
        rss: false,
        dr: false,
        hh: false,
    };
    for item in list {
        match item.trim().to_ascii_lowercase().as_str() {
            "" | "gmm" | "none" => {}
            "me_boot" | "me" => e.me_boot = true,
            "rss" | "rss_me" => e.rss = true,
            "dr" => e.dr = true,
            "hh" => e.hh = true,
            "all" => {
                e = FitEstimators {
                    me_boot: true,
                    rss: true,
                    dr: true,
                    hh: true,
                }
            }
            other => return Err(GmmError::Input(format!("unknown estimator {other:?}"))),
        }
    }
    Ok(e)
}

/// Per-parameter entries of one weight panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub estimate: f64,
    pub se_conventional: f64,
    pub se_robust: f64,
    pub se_me_bound: f64,
    pub me_boot_sd: Option<f64>,
    pub rss_median: Option<f64>,
    pub rss_se: Option<f64>,
    pub dr_ci: Option<(f64, f64)>,
    pub hh_ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FTest {
    pub name: String,
    pub f: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Panel {
    pub weight: String,
    pub params: Vec<ParamRow>,
    pub j_stat: f64,
    pub j_pvalue: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub n: usize,
    pub dropped_rows: usize,
    pub alpha: f64,
    pub b: usize,
    pub s: usize,
    pub seed: u64,
    pub first_stage: Vec<FTest>,
    pub reset: Option<FTest>,
    pub panels: Vec<Panel>,
}

/// OLS coefficients and residuals.
fn ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    let xtx_inv = sym_inverse(&(x.transpose() * x), InversePolicy::Strict, "X'X")?;
    let beta = &xtx_inv * (x.transpose() * y);
    let resid = y - x * &beta;
    Ok((beta, resid, xtx_inv))
}

/// Heteroskedasticity-robust (HC0) Wald test that the listed coefficients
/// are zero, reported as `W/q` against `F(q, n − k)`.
pub fn robust_f_test(y: &DVector<f64>, x: &DMatrix<f64>, tested: &[usize]) -> Result<(f64, f64)> {
    let (n, k) = x.shape();
    let q = tested.len();
    if n <= k || q == 0 {
        return Err(GmmError::InsufficientData(format!("F test needs n > {k} rows")));
    }
    let (beta, resid, xtx_inv) = ols(y, x)?;
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat += &xi * xi.transpose() * (resid[i] * resid[i]);
    }
    let v = &xtx_inv * meat * &xtx_inv;
    let b = DVector::from_iterator(q, tested.iter().map(|&j| beta[j]));
    let vr = DMatrix::from_fn(q, q, |a, c| v[(tested[a], tested[c])]);
    let wald = (b.transpose() * sym_inverse(&vr, InversePolicy::Strict, "robust coefficient variance")? * &b)[(0, 0)];
    let f = wald / q as f64;
    let dist = FisherSnedecor::new(q as f64, (n - k) as f64)
        .map_err(|e| GmmError::Input(format!("F distribution: {e}")))?;
    Ok((f, (1.0 - dist.cdf(f)).clamp(0.0, 1.0)))
}

/// First-stage F per endogenous regressor and the RESET test on powers 2 to 4
/// of the standardized first-stage fitted value of the first regressor.
fn diagnostics(layout: &IvLayout, data: &DataSet) -> Result<(Vec<FTest>, Option<FTest>)> {
    let (ne, n) = (layout.endog.len(), data.n());
    let p = layout.n_params();
    let m = layout.n_moments();
    let z = DMatrix::from_fn(n, m, |i, j| data.row(i)[1 + p + j]);
    let excluded: Vec<usize> = (0..layout.iv.len()).collect();
    let mut first_stage = Vec::with_capacity(ne);
    let mut fitted = Vec::with_capacity(ne);
    for k in 0..ne {
        let x = DVector::from_fn(n, |i, _| data.row(i)[1 + k]);
        let (f, pv) = robust_f_test(&x, &z, &excluded)?;
        first_stage.push(FTest {
            name: layout.endog[k].clone(),
            f,
            p_value: pv,
        });
        let (beta, _, _) = ols(&x, &z)?;
        fitted.push(&z * beta);
    }
    let d = &fitted[0];
    let mean = d.mean();
    let sd = (d.map(|v| (v - mean).powi(2)).sum() / (n as f64 - 1.0)).sqrt();
    let reset = if sd > 0.0 {
        let std = d.map(|v| (v - mean) / sd);
        let exog = p - ne;
        let cols = ne + exog + 3;
        let xr = DMatrix::from_fn(n, cols, |i, j| {
            if j < ne {
                fitted[j][i]
            } else if j < ne + exog {
                data.row(i)[1 + j]
            } else {
                std[i].powi((j - ne - exog + 2) as i32)
            }
        });
        let y = DVector::from_fn(n, |i, _| data.row(i)[0]);
        robust_f_test(&y, &xr, &[cols - 3, cols - 2, cols - 1])
            .map(|(f, pv)| FTest {
                name: "RESET".into(),
                f,
                p_value: pv,
            })
            .map_err(|e| log::warn!("RESET unavailable: {e}"))
            .ok()
    } else {
        None
    };
    Ok((first_stage, reset))
}

fn panel(
    layout: &IvLayout,
    model: &LinearIv,
    data: &DataSet,
    spec: &WeightSpec,
    est: FitEstimators,
    args: &FitArgs,
) -> Result<Panel> {
    let solver = SolverOptions::default();
    let fit: GmmFit = fit_gmm(spec, model, data, &solver)?;
    let n = data.n();
    let conv = standard_errors(&fit.var_conventional, n);
    let rob = standard_errors(&fit.var_robust, n);
    let me = standard_errors(&fit.var_me_bound, n);
    let boot_seed = replicate_seed(args.seed, 1);
    let me_draws = if est.me_boot {
        Some(me_bootstrap(model, data, &fit, &BootstrapOptions::new(args.b, replicate_seed(args.seed, 0)))?)
    } else {
        None
    };
    let dr = if est.dr {
        Some(dr_bootstrap(model, data, &fit, &BootstrapOptions::new(args.b, boot_seed))?)
    } else {
        None
    };
    let hh = if est.hh {
        Some(hh_bootstrap(model, data, spec, &fit, &BootstrapOptions::new(args.b, boot_seed))?)
    } else {
        None
    };
    let rss = if est.rss {
        Some(split_sample(model, data, spec, args.s, replicate_seed(args.seed, 2), &solver)?)
    } else {
        None
    };
    let names = layout.param_names();
    let mut params = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        params.push(ParamRow {
            name,
            estimate: fit.theta[k],
            se_conventional: conv[k],
            se_robust: rob[k],
            se_me_bound: me[k],
            me_boot_sd: me_draws.as_ref().map(|d| d.sd(k)).transpose()?,
            rss_median: rss.as_ref().map(|r| r.median[k]),
            rss_se: rss.as_ref().map(|r| r.median_variance[k].max(0.0).sqrt()),
            dr_ci: dr.as_ref().map(|d| percentile_ci(d, args.alpha, k)).transpose()?,
            hh_ci: hh.as_ref().map(|d| percentile_ci(d, args.alpha, k)).transpose()?,
        });
    }
    Ok(Panel {
        weight: weight_token_label(spec),
        params,
        j_stat: fit.j_stat,
        j_pvalue: fit.j_pvalue,
    })
}

fn weight_token_label(spec: &WeightSpec) -> String {
    spec.label().to_string()
}

pub fn cmd_fit(args: &FitArgs) -> Result<FitReport> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(GmmError::Input(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let layout = IvLayout {
        outcome: args.outcome.clone(),
        endog: args.endog.clone(),
        iv: args.iv.clone(),
        controls: args.controls.clone(),
        intercept: !args.no_intercept,
    };
    layout.validate()?;
    let est = parse_fit_estimators(&args.estimators)?;
    let specs: Vec<WeightSpec> = args.weight.iter().map(|w| parse_weight(w)).collect::<Result<_>>()?;
    if specs.is_empty() {
        return Err(GmmError::Input("--weight lists no weights".into()));
    }
    let file = fs::File::open(&args.data)?;
    let table = read_table(file, &layout.columns())?;
    if table.dropped > 0 {
        log::info!("dropped {} rows with missing values", table.dropped);
    }
    let data = layout.dataset(&table)?;
    if data.n() <= layout.n_moments() {
        return Err(GmmError::InsufficientData(format!(
            "{} complete rows for {} moments",
            data.n(),
            layout.n_moments()
        )));
    }
    let model = layout.model()?;
    let (first_stage, reset) = diagnostics(&layout, &data)?;
    let panels = specs
        .iter()
        .map(|spec| panel(&layout, &model, &data, spec, est, args))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitReport {
        n: data.n(),
        dropped_rows: table.dropped,
        alpha: args.alpha,
        b: args.b,
        s: args.s,
        seed: args.seed,
        first_stage,
        reset,
        panels,
    })
}

fn opt_sig(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

fn ci_sig(v: Option<(f64, f64)>) -> String {
    v.map(|(lo, hi)| format!("[{}, {}]", fmt_sig(lo), fmt_sig(hi)))
        .unwrap_or_default()
}

pub fn render_report(report: &FitReport, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        OutputFormat::Csv => report_csv(report),
        OutputFormat::Markdown => Ok(report_markdown(report)),
    }
}

fn report_csv(report: &FitReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["weight", "parameter", "statistic", "value"])?;
    let full = |v: f64| v.to_string();
    for panel in &report.panels {
        for r in &panel.params {
            let mut rec = |stat: &str, v: Option<f64>| -> Result<()> {
                if let Some(v) = v {
                    w.write_record([panel.weight.as_str(), r.name.as_str(), stat, &full(v)])?;
                }
                Ok(())
            };
            rec("estimate", Some(r.estimate))?;
            rec("se_conventional", Some(r.se_conventional))?;
            rec("se_robust", Some(r.se_robust))?;
            rec("se_me_bound", Some(r.se_me_bound))?;
            rec("me_boot_sd", r.me_boot_sd)?;
            rec("rss_median", r.rss_median)?;
            rec("rss_se", r.rss_se)?;
            rec("dr_ci_lo", r.dr_ci.map(|c| c.0))?;
            rec("dr_ci_hi", r.dr_ci.map(|c| c.1))?;
            rec("hh_ci_lo", r.hh_ci.map(|c| c.0))?;
            rec("hh_ci_hi", r.hh_ci.map(|c| c.1))?;
        }
        w.write_record([panel.weight.as_str(), "", "j_stat", &full(panel.j_stat)])?;
        if let Some(p) = panel.j_pvalue {
            w.write_record([panel.weight.as_str(), "", "j_pvalue", &full(p)])?;
        }
    }
    for f in &report.first_stage {
        w.write_record(["", f.name.as_str(), "first_stage_f", &full(f.f)])?;
        w.write_record(["", f.name.as_str(), "first_stage_p", &full(f.p_value)])?;
    }
    if let Some(r) = &report.reset {
        w.write_record(["", "", "reset_f", &full(r.f)])?;
        w.write_record(["", "", "reset_p", &full(r.p_value)])?;
    }
    w.write_record(["", "", "n", &report.n.to_string()])?;
    w.write_record(["", "", "dropped_rows", &report.dropped_rows.to_string()])?;
    let bytes = w.into_inner().map_err(|e| GmmError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn report_markdown(report: &FitReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let level = format!("{}%", (1e4 * 100.0 * (1.0 - report.alpha)).round() / 1e4);
    for panel in &report.panels {
        let _ = writeln!(out, "### W = {}\n", panel.weight);
        let header: Vec<&str> = panel.params.iter().map(|r| r.name.as_str()).collect();
        let _ = writeln!(out, "| | {} |", header.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(header.len()));
        let line = |label: &str, f: &dyn Fn(&ParamRow) -> String| -> String {
            let cells: Vec<String> = panel.params.iter().map(f).collect();
            format!("| {label} | {} |\n", cells.join(" | "))
        };
        out += &line("Estimate", &|r| fmt_sig(r.estimate));
        out += &line("Conventional SE", &|r| fmt_sig(r.se_conventional));
        out += &line("Robust SE", &|r| fmt_sig(r.se_robust));
        out += &line("ME bound SE", &|r| fmt_sig(r.se_me_bound));
        if panel.params.iter().any(|r| r.me_boot_sd.is_some()) {
            out += &line("ME-GMM boot SD", &|r| opt_sig(r.me_boot_sd));
        }
        if panel.params.iter().any(|r| r.rss_median.is_some()) {
            out += &line("RSS median", &|r| opt_sig(r.rss_median));
            out += &line("RSS SE", &|r| opt_sig(r.rss_se));
        }
        if panel.params.iter().any(|r| r.dr_ci.is_some()) {
            out += &line(&format!("DR {level} CI"), &|r| ci_sig(r.dr_ci));
        }
        if panel.params.iter().any(|r| r.hh_ci.is_some()) {
            out += &line(&format!("HH {level} CI"), &|r| ci_sig(r.hh_ci));
        }
        match panel.j_pvalue {
            Some(p) => {
                let _ = writeln!(out, "\nJ = {} (p = {})\n", fmt_sig(panel.j_stat), fmt_sig(p));
            }
            None => {
                let _ = writeln!(out, "\nJ test undefined (just identified)\n");
            }
        }
    }
    let _ = writeln!(out, "### Diagnostics\n");
    for f in &report.first_stage {
        let _ = writeln!(out, "- First-stage F ({}): {} (p = {})", f.name, fmt_sig(f.f), fmt_sig(f.p_value));
    }
    if let Some(r) = &report.reset {
        let _ = writeln!(out, "- RESET F: {} (p = {})", fmt_sig(r.f), fmt_sig(r.p_value));
    }
    let _ = writeln!(out, "- n = {} ({} rows dropped for missing values)", report.n, report.dropped_rows);
    out
}

/// Run every design in a config file and write results.csv, table.txt and
/// metadata.json. Returns the text table.
pub fn cmd_simulate(config: &Path, out_dir: &Path) -> Result<String> {
    let text = fs::read_to_string(config)?;
    let configs = parse_configs(&text)?;
    let result = run_grid(&configs)?;
    fs::create_dir_all(out_dir)?;
    let mut csv_bytes = Vec::new();
    result.write_csv(&mut csv_bytes)?;
    fs::write(out_dir.join("results.csv"), csv_bytes)?;
    let table = result.text_table();
    fs::write(out_dir.join("table.txt"), &table)?;
    fs::write(
        out_dir.join("metadata.json"),
        serde_json::to_string_pretty(&result.metadata())? + "\n",
    )?;
    Ok(table)
}

pub fn cmd_analytic(grid: &str) -> Result<String> {
    let rhos = parse_grid(grid)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rho", "theta_w", "v_gmm", "v_me", "w1", "w2", "efficiency_gain"])?;
    for rho in rhos {
        let a = analytic_example(rho)?;
        w.write_record(
            [a.rho, a.theta_w, a.v_gmm, a.v_me, a.w1, a.w2, a.efficiency_gain].map(|v| v.to_string()),
        )?;
    }
    let bytes = w.into_inner().map_err(|e| GmmError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
