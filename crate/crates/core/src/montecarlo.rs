//! Simulation designs, analytic ground truth and the Monte Carlo driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::SigmaParts;
use crate::error::{GmmError, Result};
use crate::estimate::{build_weight_with, fit_gmm, solve_gmm_with, WeightKind, WeightSpec};
use crate::linalg::{inverse, sym_inverse, InversePolicy};
use crate::me::{normal_critical, oracle_me_from_fit, Recentering, RecenteringSource};
use crate::model::{DataSet, LinearIv};
use crate::resample::{
    dr_bootstrap, hh_bootstrap, percentile_ci, replicate_seed, sample_sd, split_sample, BootstrapOptions,
};
use crate::solver::SolverOptions;

/// Gaussian linear IV design with one endogenous regressor and two instruments:
/// `Y = Xθ + Z'γ + ε`, `X = Z'Π + v`, `Z ~ N(0, I)`, `corr(ε, v) = ρ_εv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDesign {
    pub theta: f64,
    pub pi: DVector<f64>,
    pub gamma: DVector<f64>,
    /// Correlation of the structural and first-stage errors (unit variances).
    pub error_corr: f64,
}

impl LinearDesign {
    /// Simulation design: `θ = 1`, `γ = (0, δ)`, `Π = (π, 2π)`.
    pub fn section7(delta: f64, pi: f64) -> Self {
        Self {
            theta: 1.0,
            pi: DVector::from_vec(vec![pi, 2.0 * pi]),
            gamma: DVector::from_vec(vec![0.0, delta]),
            error_corr: 0.5,
        }
    }

    /// Closed-form example: `θ0 = 0`, `Π = (1, 2)`, `γ = (0, 1)`.
    pub fn analytic() -> Self {
        Self {
            theta: 0.0,
            pi: DVector::from_vec(vec![1.0, 2.0]),
            gamma: DVector::from_vec(vec![0.0, 1.0]),
            error_corr: 0.5,
        }
    }

    pub fn m(&self) -> usize {
        self.pi.len()
    }

    pub fn model(&self) -> LinearIv {
        LinearIv::new(1, self.m()).expect("m ≥ 1")
    }

    /// Rows `[y, x, z_1..z_m]`.
    pub fn generate<R: Rng>(&self, n: usize, rng: &mut R) -> DataSet {
        let m = self.m();
        let cols = 2 + m;
        let s = (1.0 - self.error_corr * self.error_corr).sqrt();
        let mut values = Vec::with_capacity(n * cols);
        let mut z = vec![0.0; m];
        for _ in 0..n {
            for zj in z.iter_mut() {
                *zj = rng.sample(StandardNormal);
            }
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let eps = e1;
            let v = self.error_corr * e1 + s * e2;
            let x = z.iter().zip(self.pi.iter()).map(|(a, b)| a * b).sum::<f64>() + v;
            let y = x * self.theta + z.iter().zip(self.gamma.iter()).map(|(a, b)| a * b).sum::<f64>() + eps;
            values.push(y);
            values.push(x);
            values.extend_from_slice(&z);
        }
        DataSet::from_row_major(cols, values).expect("generated data are finite")
    }

    /// Pseudo-true value for a fixed population weight.
    pub fn pseudo_true(&self, w: &DMatrix<f64>) -> Result<f64> {
        let pi = DMatrix::from_column_slice(self.m(), 1, self.pi.as_slice());
        pseudo_true_linear(&pi, &self.gamma, &DVector::from_element(1, self.theta), w).map(|v| v[0])
    }

    /// Population recentering `(E g(θ_W), vec E G')` at a pseudo-true value.
    pub fn recentering(&self, theta_w: f64) -> Recentering {
        let g1 = &self.pi * (self.theta - theta_w) + &self.gamma;
        Recentering::new(g1, -&self.pi, RecenteringSource::Oracle)
    }

    /// Population centered covariance of `ψ(X, θ)` from Gaussian fourth moments.
    ///
    /// Each component of `ψ` has the form `Z_j (Z'c + ℓ'(ε, v))`, whose
    /// covariances follow from `E[Z_j Z_k Z_l Z_r]` for standard normals.
    pub fn population_sigma(&self, theta: f64) -> Result<SigmaParts> {
        let m = self.m();
        let d0 = self.theta - theta;
        let omega = DMatrix::from_row_slice(2, 2, &[1.0, self.error_corr, self.error_corr, 1.0]);
        let mut comps: Vec<(usize, DVector<f64>, DVector<f64>)> = Vec::with_capacity(2 * m);
        for j in 0..m {
            comps.push((j, &self.pi * d0 + &self.gamma, DVector::from_vec(vec![1.0, d0])));
        }
        for j in 0..m {
            comps.push((j, -&self.pi, DVector::from_vec(vec![0.0, -1.0])));
        }
        let d = comps.len();
        let mut sigma = DMatrix::zeros(d, d);
        for (a, (ja, ca, la)) in comps.iter().enumerate() {
            for (b, (jb, cb, lb)) in comps.iter().enumerate() {
                let same = if ja == jb { ca.dot(cb) + (la.transpose() * &omega * lb)[(0, 0)] } else { 0.0 };
                sigma[(a, b)] = same + ca[*jb] * cb[*ja];
            }
        }
        SigmaParts::from_sigma(sigma, m, 1, DVector::from_element(1, theta))
    }

    /// Population analog of the one-pilot weight pipeline.
    pub fn population_weight(&self, spec: &WeightSpec) -> Result<DMatrix<f64>> {
        let m = self.m();
        match &spec.kind {
            WeightKind::Identity | WeightKind::InstrumentGram => Ok(DMatrix::identity(m, m)),
            WeightKind::Fixed(w) => Ok(w.clone()),
            kind @ (WeightKind::Sigma11Inv | WeightKind::Sigma112Inv) => {
                let pilot_spec = spec.preliminary.as_deref().cloned().unwrap_or_else(WeightSpec::identity);
                let w0 = self.population_weight(&pilot_spec)?;
                let sigma = self.population_sigma(self.pseudo_true(&w0)?)?;
                crate::estimate::weight_from_sigma(kind, &sigma)
            }
        }
    }
}

/// First-stage coefficient giving concentration `μ²/m = target` with two
/// instruments, `Π = (π, 2π)` and unit first-stage variance: `5 n π² = 2 target`.
pub fn concentration_to_pi(target: f64, n: usize) -> Result<f64> {
    if !(target > 0.0) || n == 0 {
        return Err(GmmError::Input(format!(
            "concentration target must be positive, got {target}"
        )));
    }
    Ok((2.0 * target / (5.0 * n as f64)).sqrt())
}

/// `θ_W = (Π'WΠ)⁻¹ Π'W (Πθ + γ)` under `E[ZZ'] = I`.
pub fn pseudo_true_linear(
    pi: &DMatrix<f64>,
    gamma: &DVector<f64>,
    theta: &DVector<f64>,
    w: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let pw = pi.transpose() * w;
    let bread = inverse(&(&pw * pi), InversePolicy::Strict, "Π'WΠ")?;
    Ok(bread * (pw * (pi * theta + gamma)))
}

/// Closed-form quantities of the analytic example at weight `[[1, ρ], [ρ, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyticPoint {
    pub rho: f64,
    pub theta_w: f64,
    pub v_gmm: f64,
    pub v_me: f64,
    /// Weights on the single-instrument estimands.
    pub w1: f64,
    pub w2: f64,
    pub efficiency_gain: f64,
}

pub fn analytic_example(rho: f64) -> Result<AnalyticPoint> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(GmmError::Input(format!("ρ must lie in (−1, 1), got {rho}")));
    }
    let den = 5.0 + 4.0 * rho;
    let theta_w = (rho + 2.0) / den;
    let poly = 56.0 * rho.powi(4) + 131.0 * rho.powi(3) + 210.0 * rho.powi(2) + 232.0 * rho + 100.0;
    let v_gmm = 2.0 * poly / den.powi(4);
    let v_me = 969.0 / 6116.0;
    Ok(AnalyticPoint {
        rho,
        theta_w,
        v_gmm,
        v_me,
        w1: (1.0 + 2.0 * rho) / den,
        w2: 2.0 * (rho + 2.0) / den,
        efficiency_gain: 1.0 - v_me / v_gmm,
    })
}

/// Parse `a:b:step` into an inclusive grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| GmmError::Input(format!("bad number {s:?} in grid {spec:?}")))
    };
    match parts.as_slice() {
        [single] => Ok(vec![parse(single)?]),
        [a, b, step] => {
            let (a, b, step) = (parse(a)?, parse(b)?, parse(step)?);
            if !(step > 0.0) || b < a {
                return Err(GmmError::Input(format!("grid {spec:?} needs a ≤ b and step > 0")));
            }
            let count = ((b - a) / step + 1e-9).floor() as usize;
            Ok((0..=count).map(|i| a + i as f64 * step).collect())
        }
        _ => Err(GmmError::Input(format!("grid {spec:?} is not a:b:step"))),
    }
}

/// Sample size of the plug-in oracle for data-dependent pseudo-true values.
pub const ORACLE_N: usize = 1_000_000;
const ORACLE_MAX_N: usize = 20_000_000;

/// Pseudo-true value for a data-dependent weight from one very large sample.
pub fn pseudo_true_datadependent(config: &SimConfig, spec: &WeightSpec) -> Result<f64> {
    pseudo_true_plugin(config, spec, ORACLE_N)
}

pub fn pseudo_true_plugin(config: &SimConfig, spec: &WeightSpec, n: usize) -> Result<f64> {
    if n > ORACLE_MAX_N {
        return Err(GmmError::Input(format!(
            "oracle sample of {n} rows exceeds the {ORACLE_MAX_N}-row memory guard"
        )));
    }
    let design = config.design()?;
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(config.seed, u64::MAX));
    let data = design.generate(n, &mut rng);
    let fit = fit_gmm(spec, &design.model(), &data, &SolverOptions::default())?;
    Ok(fit.theta[0])
}

/// Estimators the simulation driver can score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    GmmConv,
    GmmRobust,
    OracleMe,
    RssMe,
    Hh,
    Dr,
}

impl Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Estimator::GmmConv => "GMM conv",
            Estimator::GmmRobust => "GMM robust",
            Estimator::OracleMe => "Oracle ME",
            Estimator::RssMe => "RSS ME median",
            Estimator::Hh => "HH boot",
            Estimator::Dr => "DR boot",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Estimator::GmmConv => "gmm_conv",
            Estimator::GmmRobust => "gmm_robust",
            Estimator::OracleMe => "oracle_me",
            Estimator::RssMe => "rss_me",
            Estimator::Hh => "hh",
            Estimator::Dr => "dr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "gmm_conv" => Ok(Estimator::GmmConv),
            "gmm_robust" => Ok(Estimator::GmmRobust),
            "oracle_me" | "oracleme" => Ok(Estimator::OracleMe),
            "rss_me" | "rss" => Ok(Estimator::RssMe),
            "hh" => Ok(Estimator::Hh),
            "dr" => Ok(Estimator::Dr),
            other => Err(GmmError::Input(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Weight field of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightField {
    Named(String),
    Fixed { fixed: Vec<Vec<f64>> },
}

impl WeightField {
    pub fn to_spec(&self) -> Result<WeightSpec> {
        match self {
            WeightField::Named(s) => named_weight(s),
            WeightField::Fixed { fixed } => {
                let m = fixed.len();
                if m == 0 || fixed.iter().any(|r| r.len() != m) {
                    return Err(GmmError::Input("weight.fixed must be a square matrix".into()));
                }
                let flat: Vec<f64> = fixed.iter().flatten().cloned().collect();
                WeightSpec::fixed(DMatrix::from_row_slice(m, m, &flat))
            }
        }
    }
}

/// `identity | zz | s11 | s112`.
pub fn named_weight(s: &str) -> Result<WeightSpec> {
    match s.trim().to_ascii_lowercase().as_str() {
        "identity" | "i" => Ok(WeightSpec::identity()),
        "zz" | "tsls" | "instrument_gram" => Ok(WeightSpec::instrument_gram()),
        "s11" => Ok(WeightSpec::sigma11_inv()),
        "s112" => Ok(WeightSpec::sigma112_inv()),
        other => Err(GmmError::Input(format!(
            "unknown weight {other:?} (expected identity, zz, s11, s112 or fixed)"
        ))),
    }
}

fn default_alpha() -> f64 {
    0.05
}

fn default_reference_n() -> usize {
    200
}

/// One Monte Carlo design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub delta: f64,
    /// Target `μ²/m` at `reference_n` observations.
    pub concentration: f64,
    pub weight: WeightField,
    pub estimators: Vec<Estimator>,
    pub replications: usize,
    #[serde(alias = "B")]
    pub b: usize,
    #[serde(alias = "S")]
    pub s: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Sample size at which the concentration target is calibrated.
    #[serde(default = "default_reference_n")]
    pub reference_n: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(GmmError::Input(format!("field `{field}`: {msg}")));
        if self.n < 50 {
            return fail("n", format!("must be at least 50, got {}", self.n));
        }
        if !(self.delta >= 0.0) {
            return fail("delta", format!("must be non-negative, got {}", self.delta));
        }
        if !(self.concentration > 0.0) {
            return fail("concentration", format!("must be positive, got {}", self.concentration));
        }
        if self.estimators.is_empty() {
            return fail("estimators", "must list at least one estimator".into());
        }
        if self.replications == 0 {
            return fail("replications", "must be positive".into());
        }
        let boots = self.estimators.iter().any(|e| matches!(e, Estimator::Hh | Estimator::Dr));
        if boots && self.b < crate::resample::MIN_DRAWS {
            return fail("b", format!("bootstrap estimators need b ≥ {}", crate::resample::MIN_DRAWS));
        }
        if self.estimators.contains(&Estimator::RssMe) && self.s == 0 {
            return fail("s", "split-sample estimator needs s ≥ 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha", format!("must lie in (0, 1), got {}", self.alpha));
        }
        if self.reference_n == 0 {
            return fail("reference_n", "must be positive".into());
        }
        self.weight
            .to_spec()
            .map_err(|e| GmmError::Input(format!("field `weight`: {e}")))?;
        if self.replications < 100 {
            log::warn!("{} replications is below the 100 used for reported tables", self.replications);
        }
        Ok(())
    }

    pub fn pi(&self) -> Result<f64> {
        concentration_to_pi(self.concentration, self.reference_n)
    }

    pub fn design(&self) -> Result<LinearDesign> {
        Ok(LinearDesign::section7(self.delta, self.pi()?))
    }

    pub fn weight_spec(&self) -> Result<WeightSpec> {
        self.weight.to_spec()
    }

    /// Whether this cell is the correctly specified benchmark used to normalize SDs.
    pub fn is_benchmark(&self) -> bool {
        self.delta == 0.0
            && self.n == self.reference_n
            && matches!(&self.weight, WeightField::Named(s) if s.eq_ignore_ascii_case("identity"))
    }
}

/// Parse a configuration file holding one design point or an array of them.
pub fn parse_configs(text: &str) -> Result<Vec<SimConfig>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let configs: Vec<SimConfig> = match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                serde_json::from_value(v).map_err(|e| GmmError::Input(format!("config[{i}]: {e}")))
            })
            .collect::<Result<_>>()?,
        v => vec![serde_json::from_value(v).map_err(|e| GmmError::Input(format!("config: {e}")))?],
    };
    if configs.is_empty() {
        return Err(GmmError::Input("configuration holds no design points".into()));
    }
    for (i, c) in configs.iter().enumerate() {
        c.validate()
            .map_err(|e| GmmError::Input(format!("config[{i}]: {e}")))?;
    }
    Ok(configs)
}

/// Metrics of one estimator in one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorRow {
    pub estimator: Estimator,
    /// Monte Carlo SD of point estimates, or the average bootstrap SD.
    pub sd: f64,
    /// `sd` divided by the benchmark SD, when a benchmark is available.
    pub sd_normalized: Option<f64>,
    pub coverage: f64,
    pub median_length: f64,
    pub mean_length: f64,
    /// Monte Carlo SD of the point estimates (same as `sd` for point estimators).
    pub point_sd: f64,
    pub successes: usize,
    pub failures: usize,
    /// Discarded bootstrap replicates summed over replications.
    pub discarded_draws: usize,
}

/// Result of one design point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub n: usize,
    pub delta: f64,
    pub concentration: f64,
    pub weight: String,
    pub pi: f64,
    pub pseudo_true: f64,
    pub replications: usize,
    pub b: usize,
    pub s: usize,
    pub alpha: f64,
    pub seed: u64,
    pub rows: Vec<EstimatorRow>,
}

impl CellResult {
    pub fn row(&self, e: Estimator) -> Option<&EstimatorRow> {
        self.rows.iter().find(|r| r.estimator == e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub cells: Vec<CellResult>,
    /// Benchmark GMM SD used for normalization; `None` when no benchmark cell ran.
    pub normalization: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct Outcome {
    point: f64,
    sd: f64,
    covered: bool,
    length: f64,
    discarded: usize,
}

fn replication(
    config: &SimConfig,
    design: &LinearDesign,
    spec: &WeightSpec,
    theta_w: f64,
    r: usize,
) -> Vec<(Estimator, std::result::Result<Outcome, String>)> {
    let model = design.model();
    let rep_seed = replicate_seed(config.seed, r as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(rep_seed, 0));
    let data = design.generate(config.n, &mut rng);
    let solver = SolverOptions::default();
    let z = normal_critical(config.alpha).expect("validated alpha");
    let n = config.n as f64;
    let fit = build_weight_with(spec, &model, &data, &solver).and_then(|(w, _)| solve_gmm_with(&model, &data, &w, &solver));
    let wald = |theta: f64, var: f64| -> Outcome {
        let half = z * (var / n).max(0.0).sqrt();
        Outcome {
            point: theta,
            sd: (var / n).max(0.0).sqrt(),
            covered: (theta - theta_w).abs() <= half,
            length: 2.0 * half,
            discarded: 0,
        }
    };
    let mut boot = BootstrapOptions::new(config.b, replicate_seed(rep_seed, 1));
    boot.solver = solver.clone();
    config
        .estimators
        .iter()
        .map(|&e| {
            let out = match &fit {
                Err(err) => Err(err.to_string()),
                Ok(fit) => {
                    let theta = fit.theta[0];
                    match e {
                        Estimator::GmmConv => Ok(wald(theta, fit.var_conventional[(0, 0)])),
                        Estimator::GmmRobust => Ok(wald(theta, fit.var_robust[(0, 0)])),
                        Estimator::OracleMe => oracle_me_from_fit(&model, &data, fit, &design.recentering(theta_w), &solver)
                            .map(|est| wald(est.theta[0], est.variance[(0, 0)]))
                            .map_err(|e| e.to_string()),
                        Estimator::RssMe => split_sample(&model, &data, spec, config.s, replicate_seed(rep_seed, 2), &solver)
                            .and_then(|res| {
                                let (lo, hi) = res.median_ci(config.alpha, 0)?;
                                Ok(Outcome {
                                    point: res.median[0],
                                    sd: res.median_variance[0].max(0.0).sqrt(),
                                    covered: lo <= theta_w && theta_w <= hi,
                                    length: hi - lo,
                                    discarded: res.redraws,
                                })
                            })
                            .map_err(|e| e.to_string()),
                        Estimator::Hh | Estimator::Dr => {
                            let draws = if e == Estimator::Hh {
                                hh_bootstrap(&model, &data, spec, fit, &boot)
                            } else {
                                dr_bootstrap(&model, &data, fit, &boot)
                            };
                            draws
                                .and_then(|d| {
                                    let (lo, hi) = percentile_ci(&d, config.alpha, 0)?;
                                    Ok(Outcome {
                                        point: theta,
                                        sd: d.sd(0)?,
                                        covered: lo <= theta_w && theta_w <= hi,
                                        length: hi - lo,
                                        discarded: d.failures,
                                    })
                                })
                                .map_err(|e| e.to_string())
                        }
                    }
                }
            };
            (e, out)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Run one design point. Replications run in parallel; aggregation is in
/// replication order, so results do not depend on the worker count.
pub fn run_mc(config: &SimConfig) -> Result<CellResult> {
    config.validate()?;
    let design = config.design()?;
    let spec = config.weight_spec()?;
    let theta_w = if spec.needs_pilot() {
        pseudo_true_datadependent(config, &spec)?
    } else {
        design.pseudo_true(&design.population_weight(&spec)?)?
    };
    let per_rep: Vec<Vec<(Estimator, std::result::Result<Outcome, String>)>> = (0..config.replications)
        .into_par_iter()
        .map(|r| replication(config, &design, &spec, theta_w, r))
        .collect();
    let mut rows = Vec::with_capacity(config.estimators.len());
    for (k, &e) in config.estimators.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failures = 0;
        for rep in &per_rep {
            match &rep[k].1 {
                Ok(o) => ok.push(o.clone()),
                Err(msg) => {
                    failures += 1;
                    log::debug!("{} failed: {msg}", e.key());
                }
            }
        }
        if ok.len() < 2 {
            return Err(GmmError::NonConvergence(format!(
                "{} succeeded in only {} of {} replications",
                e.key(),
                ok.len(),
                config.replications
            )));
        }
        let points: Vec<f64> = ok.iter().map(|o| o.point).collect();
        let lengths: Vec<f64> = ok.iter().map(|o| o.length).collect();
        let point_sd = sample_sd(&points);
        let sd = match e {
            Estimator::Hh | Estimator::Dr => mean(&ok.iter().map(|o| o.sd).collect::<Vec<_>>()),
            _ => point_sd,
        };
        rows.push(EstimatorRow {
            estimator: e,
            sd,
            sd_normalized: None,
            coverage: ok.iter().filter(|o| o.covered).count() as f64 / ok.len() as f64,
            median_length: crate::resample::median(&lengths),
            mean_length: mean(&lengths),
            point_sd,
            successes: ok.len(),
            failures,
            discarded_draws: ok.iter().map(|o| o.discarded).sum(),
        });
    }
    Ok(CellResult {
        n: config.n,
        delta: config.delta,
        concentration: config.concentration,
        weight: weight_label(&config.weight),
        pi: config.pi()?,
        pseudo_true: theta_w,
        replications: config.replications,
        b: config.b,
        s: config.s,
        alpha: config.alpha,
        seed: config.seed,
        rows,
    })
}

fn weight_label(w: &WeightField) -> String {
    match w {
        WeightField::Named(s) => s.to_ascii_lowercase(),
        WeightField::Fixed { .. } => "fixed".into(),
    }
}

/// Run every design point and normalize SDs by the benchmark cell when present.
pub fn run_grid(configs: &[SimConfig]) -> Result<SimResult> {
    let mut cells = Vec::with_capacity(configs.len());
    for c in configs {
        cells.push(run_mc(c)?);
    }
    let normalization = configs.iter().zip(&cells).find_map(|(c, cell)| {
        if !c.is_benchmark() {
            return None;
        }
        cell.row(Estimator::GmmRobust)
            .or_else(|| cell.row(Estimator::GmmConv))
            .map(|r| r.point_sd)
    });
    if let Some(norm) = normalization {
        for cell in &mut cells {
            for row in &mut cell.rows {
                row.sd_normalized = Some(row.sd / norm);
            }
        }
    } else {
        log::warn!("no benchmark cell (δ = 0, n = reference_n, identity weight); SDs are unnormalized");
    }
    Ok(SimResult { cells, normalization })
}

/// Format with six significant digits.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

impl SimResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "n",
            "delta",
            "concentration",
            "weight",
            "estimator",
            "sd",
            "sd_normalized",
            "coverage",
            "median_length",
            "mean_length",
            "point_sd",
            "successes",
            "failures",
            "discarded_draws",
            "pseudo_true",
            "pi",
        ])?;
        for c in &self.cells {
            for r in &c.rows {
                w.write_record([
                    c.n.to_string(),
                    c.delta.to_string(),
                    c.concentration.to_string(),
                    c.weight.clone(),
                    r.estimator.key().to_string(),
                    r.sd.to_string(),
                    r.sd_normalized.map(|v| v.to_string()).unwrap_or_default(),
                    r.coverage.to_string(),
                    r.median_length.to_string(),
                    r.mean_length.to_string(),
                    r.point_sd.to_string(),
                    r.successes.to_string(),
                    r.failures.to_string(),
                    r.discarded_draws.to_string(),
                    c.pseudo_true.to_string(),
                    c.pi.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text table: one panel per (n, weight, concentration), rows are
    /// estimators and each δ contributes an (SD, Cov, Len) column triple.
    pub fn text_table(&self) -> String {
        let mut panels: BTreeMap<(usize, String, String), Vec<&CellResult>> = BTreeMap::new();
        for c in &self.cells {
            panels
                .entry((c.n, c.weight.clone(), fmt_sig(c.concentration)))
                .or_default()
                .push(c);
        }
        let mut out = String::new();
        let sd_label = if self.normalization.is_some() { "SD" } else { "SD*" };
        for ((n, weight, conc), mut cells) in panels {
            cells.sort_by(|a, b| a.delta.total_cmp(&b.delta));
            let _ = writeln!(out, "n = {n}, W = {weight}, concentration = {conc}");
            let mut header = format!("{:<16}", "");
            for c in &cells {
                header += &format!(" | {:^32}", format!("delta = {}", fmt_sig(c.delta)));
            }
            let _ = writeln!(out, "{header}");
            let mut sub = format!("{:<16}", "estimator");
            for _ in &cells {
                sub += &format!(" | {:>10} {:>10} {:>10}", sd_label, "Cov", "Len");
            }
            let _ = writeln!(out, "{sub}");
            let mut estimators: Vec<Estimator> = cells.iter().flat_map(|c| c.rows.iter().map(|r| r.estimator)).collect();
            estimators.sort();
            estimators.dedup();
            for e in estimators {
                let mut line = format!("{:<16}", e.label());
                for c in &cells {
                    match c.row(e) {
                        Some(r) => {
                            let sd = r.sd_normalized.unwrap_or(r.sd);
                            line += &format!(
                                " | {:>10} {:>10} {:>10}",
                                fmt_sig(sd),
                                fmt_sig(r.coverage),
                                fmt_sig(r.median_length)
                            );
                        }
                        None => line += &format!(" | {:>10} {:>10} {:>10}", "", "", ""),
                    }
                }
                let _ = writeln!(out, "{line}");
            }
            let _ = writeln!(out);
        }
        if self.normalization.is_none() {
            let _ = writeln!(out, "SD* = unnormalized (no correctly specified benchmark cell in this run)");
        }
        out
    }

    /// Run metadata: seeds, version and scale relative to 2000 reps, B = 1000, S = 100.
    pub fn metadata(&self) -> serde_json::Value {
        let cells: Vec<serde_json::Value> = self
            .cells
            .iter()
            .map(|c| {
                serde_json::json!({
                    "n": c.n,
                    "delta": c.delta,
                    "weight": c.weight,
                    "concentration": c.concentration,
                    "seed": c.seed,
                    "replications": c.replications,
                    "b": c.b,
                    "s": c.s,
                    "alpha": c.alpha,
                    "pi": c.pi,
                    "pseudo_true": c.pseudo_true,
                    "scale": {
                        "replications": c.replications as f64 / 2000.0,
                        "b": c.b as f64 / 1000.0,
                        "s": c.s as f64 / 100.0,
                    },
                })
            })
            .collect();
        serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "normalization": self.normalization,
            "normalized": self.normalization.is_some(),
            "cells": cells,
        })
    }
}

/// Mean of `ZZ'` over a dataset laid out as `[y, x, z...]`.
pub fn instrument_second_moment(data: &DataSet, m: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(m, m);
    for row in data.rows() {
        let z = DVector::from_column_slice(&row[2..2 + m]);
        acc += &z * z.transpose();
    }
    acc / data.n() as f64
}

/// Inverse of the population `Σ11,2` of a linear design (θ-invariant).
pub fn population_me_weight(design: &LinearDesign) -> Result<DMatrix<f64>> {
    let s = design.population_sigma(design.theta)?;
    sym_inverse(&s.s11_2, InversePolicy::Strict, "Σ11,2")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{a_matrices, var_me_bound, var_misspec_robust};
    use crate::estimate::solve_gmm;

    fn w_rho(rho: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])
    }

    /// Population robust variance and ME bound through the generic formulas.
    fn population_variances(design: &LinearDesign, w: &DMatrix<f64>) -> (f64, f64, f64) {
        let theta_w = design.pseudo_true(w).unwrap();
        let sigma = design.population_sigma(theta_w).unwrap();
        let g = &design.pi * (design.theta - theta_w) + &design.gamma;
        let jac = DMatrix::from_column_slice(2, 1, (-&design.pi).as_slice());
        let a = a_matrices(&g, &jac, &DMatrix::zeros(2, 1), w).unwrap();
        let robust = var_misspec_robust(&a, &sigma).unwrap()[(0, 0)];
        let me = var_me_bound(&a.gamma, &sigma, true).unwrap()[(0, 0)];
        (theta_w, robust, me)
    }

    #[test]
    fn analytic_closed_forms_match_population_oracle() {
        let design = LinearDesign::analytic();
        for rho in [-0.9, -0.5, 0.0, 0.5] {
            let (theta_w, robust, me) = population_variances(&design, &w_rho(rho));
            let a = analytic_example(rho).unwrap();
            assert!((theta_w - a.theta_w).abs() < 1e-12);
            assert!((robust - a.v_gmm).abs() < 1e-9, "ρ = {rho}: {robust} vs {}", a.v_gmm);
            assert!((me - a.v_me).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_values() {
        let a = analytic_example(0.0).unwrap();
        assert!((a.v_gmm - 0.32).abs() < 1e-12);
        assert!((a.theta_w - 0.4).abs() < 1e-12);
        assert!((a.w1 - 0.2).abs() < 1e-12 && (a.w2 - 0.8).abs() < 1e-12);
        assert!(a.efficiency_gain > 0.5);
        assert!((analytic_example(-0.5).unwrap().theta_w - 0.5).abs() < 1e-12);
        assert!(analytic_example(1.0).is_err());
        for i in 1..100 {
            let rho = -1.0 + 2.0 * i as f64 / 100.0;
            let a = analytic_example(rho).unwrap();
            assert!(a.v_gmm > a.v_me);
            // θ_W = w1 θ1 + w2 θ2 with θ1 = 0, θ2 = 1/2.
            assert!((a.theta_w - 0.5 * a.w2).abs() < 1e-12);
            assert!((a.w1 + a.w2 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pi_calibration() {
        assert!((concentration_to_pi(50.0, 200).unwrap() - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((concentration_to_pi(10.0, 200).unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(concentration_to_pi(0.0, 200).is_err());
    }

    #[test]
    fn first_stage_f_near_target() {
        let pi = concentration_to_pi(50.0, 200).unwrap();
        let design = LinearDesign::section7(0.0, pi);
        let mut total = 0.0;
        let reps = 200;
        for r in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(r);
            let data = design.generate(200, &mut rng);
            total += first_stage_f(&data);
        }
        let avg = total / reps as f64;
        assert!((avg - 51.0).abs() < 0.2 * 51.0, "average F {avg}");
    }

    fn first_stage_f(data: &DataSet) -> f64 {
        // Homoskedastic F for H0: both instrument coefficients are zero (no intercept).
        let n = data.n();
        let zz = instrument_second_moment(data, 2) * n as f64;
        let mut zx = DVector::zeros(2);
        let mut xx = 0.0;
        for r in data.rows() {
            zx += DVector::from_vec(vec![r[2] * r[1], r[3] * r[1]]);
            xx += r[1] * r[1];
        }
        let coef = zz.clone().try_inverse().unwrap() * &zx;
        let explained = coef.dot(&zx);
        let rss = xx - explained;
        (explained / 2.0) / (rss / (n - 2) as f64)
    }

    #[test]
    fn generated_moments() {
        let design = LinearDesign::section7(1.0, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = design.generate(100_000, &mut rng);
        let zz = instrument_second_moment(&data, 2);
        assert!((zz - DMatrix::identity(2, 2)).amax() < 0.02);
        // Recover ε and v from the known structure.
        let (mut see, mut svv, mut sev) = (0.0, 0.0, 0.0);
        for r in data.rows() {
            let v = r[1] - 0.3 * r[2] - 0.6 * r[3];
            let e = r[0] - r[1] - r[3];
            see += e * e;
            svv += v * v;
            sev += e * v;
        }
        let corr = sev / (see * svv).sqrt();
        assert!((corr - 0.5).abs() < 0.02);
    }

    #[test]
    fn pseudo_true_examples() {
        let d0 = LinearDesign::section7(0.0, 0.3);
        for w in [DMatrix::identity(2, 2), w_rho(0.4)] {
            assert!((d0.pseudo_true(&w).unwrap() - 1.0).abs() < 1e-12);
        }
        let a = LinearDesign::analytic();
        assert!((a.pseudo_true(&w_rho(0.0)).unwrap() - 0.4).abs() < 1e-12);
        assert!((a.pseudo_true(&w_rho(-0.5)).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn parse_rho_grid() {
        assert_eq!(parse_grid("0").unwrap(), vec![0.0]);
        let g = parse_grid("-0.5:0.5:0.25").unwrap();
        assert_eq!(g.len(), 5);
        assert!((g[4] - 0.5).abs() < 1e-12);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("a:b").is_err());
    }

    fn base_config() -> SimConfig {
        SimConfig {
            n: 200,
            delta: 0.0,
            concentration: 50.0,
            weight: WeightField::Named("identity".into()),
            estimators: vec![Estimator::GmmConv, Estimator::GmmRobust],
            replications: 100,
            b: 100,
            s: 5,
            seed: 1,
            alpha: 0.05,
            reference_n: 200,
        }
    }

    #[test]
    fn config_parsing_and_schema_errors() {
        let text = r#"{"n": 200, "delta": 1, "concentration": 50, "weight": "s112",
            "estimators": ["gmm_conv", "dr"], "replications": 100, "B": 50, "S": 10, "seed": 7}"#;
        let cfgs = parse_configs(text).unwrap();
        assert_eq!(cfgs[0].b, 50);
        assert_eq!(cfgs[0].alpha, 0.05);
        assert_eq!(cfgs[0].reference_n, 200);
        let empty = text.replace(r#"["gmm_conv", "dr"]"#, "[]");
        let err = parse_configs(&empty).unwrap_err().to_string();
        assert!(err.contains("estimators"), "{err}");
        let fixed = text.replace(r#""s112""#, r#"{"fixed": [[1, 0], [0, 2]]}"#);
        assert!(parse_configs(&fixed).is_ok());
        let unknown = text.replace(r#""seed": 7"#, r#""seed": 7, "colour": 1"#);
        assert!(parse_configs(&unknown).is_err());
        let arr = format!("[{text}, {text}]");
        assert_eq!(parse_configs(&arr).unwrap().len(), 2);
    }

    #[test]
    fn benchmark_normalizes_to_one() {
        let res = run_grid(&[base_config()]).unwrap();
        let norm = res.normalization.unwrap();
        let row = res.cells[0].row(Estimator::GmmRobust).unwrap();
        assert!((row.sd_normalized.unwrap() - 1.0).abs() < 1e-12);
        assert!(norm > 0.0);
        let table = res.text_table();
        assert!(table.contains("GMM robust"));
    }

    #[test]
    fn unnormalized_without_benchmark() {
        let mut c = base_config();
        c.delta = 1.0;
        let res = run_grid(&[c]).unwrap();
        assert!(res.normalization.is_none());
        assert!(res.text_table().contains("SD*"));
    }

    #[test]
    fn run_mc_is_reproducible() {
        let mut c = base_config();
        c.estimators = vec![Estimator::GmmRobust, Estimator::OracleMe, Estimator::Dr];
        c.replications = 20;
        c.b = 30;
        let a = run_mc(&c).unwrap();
        let b = run_mc(&c).unwrap();
        assert_eq!(a, b);
        let mut buf1 = Vec::new();
        let mut buf2 = Vec::new();
        SimResult { cells: vec![a], normalization: None }.write_csv(&mut buf1).unwrap();
        SimResult { cells: vec![b], normalization: None }.write_csv(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn population_weight_pipeline_matches_plugin() {
        let mut c = base_config();
        c.delta = 1.0;
        let design = c.design().unwrap();
        for spec in [WeightSpec::sigma11_inv(), WeightSpec::sigma112_inv()] {
            let exact = design.pseudo_true(&design.population_weight(&spec).unwrap()).unwrap();
            let plug = pseudo_true_plugin(&c, &spec, 200_000).unwrap();
            assert!((exact - plug).abs() < 0.02, "{exact} vs {plug}");
        }
        let ident = pseudo_true_plugin(&c, &WeightSpec::identity(), 200_000).unwrap();
        assert!((ident - design.pseudo_true(&DMatrix::identity(2, 2)).unwrap()).abs() < 0.02);
    }

    #[test]
    fn data_dependent_pseudo_true_examples() {
        let mut c = base_config();
        let plug = pseudo_true_plugin(&c, &WeightSpec::sigma112_inv(), 200_000).unwrap();
        assert!((plug - 1.0).abs() < 0.005);
        c.delta = 2.0;
        let design = c.design().unwrap();
        // Single-instrument estimands: θ + γ_j / Π_j.
        let t1 = 1.0;
        let t2 = 1.0 + 2.0 / design.pi[1];
        let plug = pseudo_true_plugin(&c, &WeightSpec::sigma112_inv(), 200_000).unwrap();
        assert!(t1 < plug && plug < t2, "{t1} < {plug} < {t2}");
        assert!(pseudo_true_plugin(&c, &WeightSpec::identity(), ORACLE_MAX_N + 1).is_err());
    }

    #[test]
    fn me_weight_population_is_theta_invariant() {
        let design = LinearDesign::section7(1.0, 0.3);
        let a = design.population_sigma(0.2).unwrap().s11_2;
        let b = design.population_sigma(1.7).unwrap().s11_2;
        assert!((a - b).amax() < 1e-12);
        assert!(population_me_weight(&design).is_ok());
    }

    #[test]
    fn sample_and_population_sigma_agree() {
        let design = LinearDesign::section7(1.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data = design.generate(200_000, &mut rng);
        let model = design.model();
        let fit = solve_gmm(&model, &data, &DMatrix::identity(2, 2)).unwrap();
        let pop = design.population_sigma(fit.theta[0]).unwrap();
        assert!((fit.sigma.sigma.clone() - pop.sigma).amax() < 0.1);
    }

    #[test]
    fn fmt_six_significant() {
        assert_eq!(fmt_sig(0.158437), "0.158437");
        assert_eq!(fmt_sig(1234.5678), "1234.57");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(12.0), "12.0000");
        assert_eq!(fmt_sig(1.5e-7), "1.50000e-7");
    }
}
