//! Recentered bootstraps, the repeated split-sample ME estimator and
//! interval summaries of replicate draws.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covariance::{a_matrices, gamma_matrix, sigma_hat, var_misspec_robust};
use crate::error::{GmmError, Result};
use crate::estimate::{build_weight_with, fit_gmm, gmm_theta, GmmFit, WeightKind, WeightSpec};
use crate::linalg::{inverse, kron_row_identity, stack_rows, InversePolicy};
use crate::me::{linear_me_closed_form, me_gmm, normal_critical, oracle_me_from_fit, Recentering, RecenteringSource};
use crate::model::{sample_means, DataSet, MomentModel};
use crate::solver::{find_root, RootEval, SolverOptions};

/// Which procedure produced a set of draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawKind {
    HallHorowitz,
    MeGmm,
    DoubleRecentered,
    SplitSample,
}

impl DrawKind {
    pub fn label(&self) -> &'static str {
        match self {
            DrawKind::HallHorowitz => "hh",
            DrawKind::MeGmm => "me",
            DrawKind::DoubleRecentered => "dr",
            DrawKind::SplitSample => "split",
        }
    }
}

/// Replicate estimates in replicate order. Failed replicates stay as `None`
/// so that draw `b` always comes from index stream `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawSet {
    pub draws: Vec<Option<DVector<f64>>>,
    /// Replicate-sample robust standard errors, when requested.
    pub replicate_se: Option<Vec<Option<DVector<f64>>>>,
    pub kind: DrawKind,
    pub base_seed: u64,
    pub failures: usize,
}

/// Share of failed replicates beyond which a draw set is flagged.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

impl DrawSet {
    pub fn replicates(&self) -> usize {
        self.draws.len()
    }

    pub fn surviving(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.draws.iter().flatten()
    }

    /// Surviving values of one coordinate.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.surviving().map(|d| d[k]).collect()
    }

    pub fn is_reliable(&self) -> bool {
        !self.draws.is_empty() && (self.failures as f64) <= MAX_FAILURE_SHARE * self.draws.len() as f64
    }

    /// Sample standard deviation of one coordinate over surviving draws.
    pub fn sd(&self, k: usize) -> Result<f64> {
        let v = self.coordinate(k);
        if v.len() < 2 {
            return Err(GmmError::InsufficientData("fewer than two surviving draws".into()));
        }
        Ok(sample_sd(&v))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let p = self.surviving().next().map(|d| d.len()).unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["replicate".to_string()];
        header.extend((1..=p).map(|k| format!("theta_{k}")));
        header.push("converged".into());
        w.write_record(&header)?;
        for (b, d) in self.draws.iter().enumerate() {
            let mut rec = vec![b.to_string()];
            match d {
                Some(v) => rec.extend(v.iter().map(|x| x.to_string())),
                None => rec.extend((0..p).map(|_| String::new())),
            }
            rec.push(d.is_some().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Replicate seed derived from a base seed and a replicate index.
pub fn replicate_seed(base: u64, b: u64) -> u64 {
    let mut z = base ^ b.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn replicate_rng(base: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(replicate_seed(base, b))
}

/// `n` i.i.d. uniform draws from `0..n` (zero-based row indices).
pub fn resample_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstrap settings shared by the three procedures.
#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub b: usize,
    pub seed: u64,
    /// Keep the Jacobian-recentering term of the double-recentered equation.
    pub jacobian_correction: bool,
    /// Also record replicate-sample robust standard errors (for percentile-t).
    pub replicate_se: bool,
    pub solver: SolverOptions,
}

impl BootstrapOptions {
    pub fn new(b: usize, seed: u64) -> Self {
        Self {
            b,
            seed,
            jacobian_correction: true,
            replicate_se: false,
            solver: SolverOptions::default(),
        }
    }
}

/// Moments shifted by a constant: `g(x, θ) − c`.
struct Shifted<'a> {
    inner: &'a dyn MomentModel,
    shift: &'a DVector<f64>,
}

impl MomentModel for Shifted<'_> {
    fn n_moments(&self) -> usize {
        self.inner.n_moments()
    }
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn is_linear(&self) -> bool {
        self.inner.is_linear()
    }
    fn row_len(&self) -> usize {
        self.inner.row_len()
    }
    fn moments_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.moments_into(row, theta, out);
        for (o, c) in out.iter_mut().zip(self.shift.iter()) {
            *o -= c;
        }
    }
    fn jacobian_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.jacobian_into(row, theta, out);
    }
    fn curvature_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.curvature_into(row, theta, out);
    }
    fn instruments<'a>(&self, row: &'a [f64]) -> Option<&'a [f64]> {
        self.inner.instruments(row)
    }
}

fn run_replicates<F>(data: &DataSet, opts: &BootstrapOptions, kind: DrawKind, f: F) -> Result<DrawSet>
where
    F: Fn(&DataSet) -> Result<(DVector<f64>, Option<DVector<f64>>)> + Sync,
{
    if opts.b == 0 {
        return Err(GmmError::Input("bootstrap needs at least one replicate".into()));
    }
    let n = data.n();
    let results: Vec<Option<(DVector<f64>, Option<DVector<f64>>)>> = (0..opts.b)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(opts.seed, b as u64);
            let idx = resample_indices(n, &mut rng);
            let star = data.select(&idx);
            match f(&star) {
                Ok(r) if r.0.iter().all(|v| v.is_finite()) => Some(r),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("{} replicate {b} discarded: {e}", kind.label());
                    None
                }
            }
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    let draws = results.iter().map(|r| r.as_ref().map(|x| x.0.clone())).collect();
    let replicate_se = if opts.replicate_se {
        Some(results.into_iter().map(|r| r.and_then(|x| x.1)).collect())
    } else {
        None
    };
    let set = DrawSet {
        draws,
        replicate_se,
        kind,
        base_seed: opts.seed,
        failures,
    };
    if !set.is_reliable() {
        log::warn!(
            "{} bootstrap discarded {failures} of {} replicates",
            kind.label(),
            opts.b
        );
    }
    Ok(set)
}

/// Robust standard errors of a fixed-weight GMM problem evaluated at `θ`.
fn robust_se_at(model: &dyn MomentModel, data: &DataSet, w: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let s = sample_means(model, data, theta.as_slice())?;
    let sigma = sigma_hat(model, data, theta.as_slice())?;
    let a = a_matrices(&s.g, &s.jac, &s.curv, w)?;
    let v = var_misspec_robust(&a, &sigma)?;
    Ok(crate::covariance::standard_errors(&v, data.n()))
}

/// Hall-Horowitz bootstrap: only the moments are recentered at `g_n(θ̂)`.
///
/// Data-dependent weights are re-estimated on each bootstrap sample.
pub fn hh_bootstrap(
    model: &dyn MomentModel,
    data: &DataSet,
    spec: &WeightSpec,
    fit: &GmmFit,
    opts: &BootstrapOptions,
) -> Result<DrawSet> {
    let shift = fit.g.clone();
    let solver = opts.solver.clone().with_start(fit.theta.as_slice());
    run_replicates(data, opts, DrawKind::HallHorowitz, |star| {
        let shifted = Shifted {
            inner: model,
            shift: &shift,
        };
        let w = if spec.is_data_dependent() {
            build_weight_with(spec, &shifted, star, &solver)?.0
        } else {
            fit.w.clone()
        };
        let theta = gmm_theta(&shifted, star, &w, &solver)?;
        let se = if opts.replicate_se {
            Some(robust_se_at(&shifted, star, &w, &theta)?)
        } else {
            None
        };
        Ok((theta, se))
    })
}

/// Bootstrap of the ME criterion: both blocks recentered at `ψ_n(θ̂)`,
/// weighted by the original-sample `Σ̂(θ̂)⁻¹`.
pub fn me_bootstrap(
    model: &dyn MomentModel,
    data: &DataSet,
    fit: &GmmFit,
    opts: &BootstrapOptions,
) -> Result<DrawSet> {
    let gamma = Recentering::plug_in(fit);
    let p = fit.p();
    let solver = opts.solver.clone().with_start(fit.theta.as_slice());
    let delta = crate::linalg::sym_inverse(&fit.sigma.sigma, InversePolicy::PseudoFallback, "Σ")?;
    let d11 = crate::linalg::sym_inverse(&fit.sigma.s11_2, InversePolicy::PseudoFallback, "Σ11,2")?;
    let s22_inv = crate::linalg::sym_inverse(&fit.sigma.s22, InversePolicy::PseudoFallback, "Σ22")?;
    let d12 = -(&d11 * &fit.sigma.s12 * s22_inv);
    run_replicates(data, opts, DrawKind::MeGmm, |star| {
        let theta = if model.is_linear() {
            let s = sample_means(model, star, &vec![0.0; p])?;
            linear_me_closed_form(&s.g, &s.jac, &stack_rows(&s.jac), &d11, &d12, &gamma)?
        } else {
            me_gmm(model, star, &delta, &gamma, &solver)?
        };
        Ok((theta, None))
    })
}

/// Double-recentered bootstrap: solve `A_n (ψ*_n(θ) − ψ_n(θ̂)) = 0` with
/// `A_n = [G_n'W, (W g_n)' ⊗ I_p]` from the original sample.
///
/// With `jacobian_correction = false` the second block of `A_n` is dropped.
pub fn dr_bootstrap(
    model: &dyn MomentModel,
    data: &DataSet,
    fit: &GmmFit,
    opts: &BootstrapOptions,
) -> Result<DrawSet> {
    let (m, p) = (fit.m(), fit.p());
    let w = fit.w.clone();
    let mut a_n = fit.a.a.clone();
    if !opts.jacobian_correction {
        a_n.view_mut((0, m), (p, m * p)).fill(0.0);
    }
    let target = fit.psi_mean();
    let solver = opts.solver.clone();
    let gw = fit.jac.transpose() * &w;
    let kron = kron_row_identity(&(&w * &fit.g), p);
    let c = if opts.jacobian_correction { 1.0 } else { 0.0 };
    run_replicates(data, opts, DrawKind::DoubleRecentered, |star| {
        let theta = if model.is_linear() {
            let s = sample_means(model, star, &vec![0.0; p])?;
            let bread = inverse(&(&gw * &s.jac), InversePolicy::Strict, "G_n'WG*")?;
            let correction = (&s.jac - &fit.jac).transpose() * (&w * &fit.g) * c;
            -(bread * (&gw * (&s.g - &fit.g) + correction))
        } else {
            let resid = |theta: &DVector<f64>| -> Result<RootEval> {
                let s = sample_means(model, star, theta.as_slice())?;
                let r = &a_n * (&s.psi - &target);
                let jac = &gw * &s.jac + &kron * &s.curv * c;
                Ok(RootEval {
                    resid: r,
                    jac,
                    scale: 1.0 + s.g.amax(),
                })
            };
            find_root(resid, fit.theta.clone(), &solver)?.x
        };
        let se = if opts.replicate_se {
            Some(robust_se_at(model, star, &w, &theta)?)
        } else {
            None
        };
        Ok((theta, se))
    })
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Minimum number of surviving draws for interval summaries.
pub const MIN_DRAWS: usize = 20;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(GmmError::Input(format!("α must lie in (0, 1), got {alpha}")))
    }
}

/// Equal-tailed percentile interval of raw values.
pub fn percentile_interval(values: &[f64], alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    if values.len() < MIN_DRAWS {
        return Err(GmmError::InsufficientData(format!(
            "{} draws, need at least {MIN_DRAWS}",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&v, alpha / 2.0), quantile_sorted(&v, 1.0 - alpha / 2.0)))
}

pub fn percentile_ci(draws: &DrawSet, alpha: f64, k: usize) -> Result<(f64, f64)> {
    percentile_interval(&draws.coordinate(k), alpha)
}

/// `1.4826 · median|x − median(x)|`.
pub fn robust_sd_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(GmmError::InsufficientData("no draws".into()));
    }
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    Ok(1.4826 * median(&dev))
}

pub fn robust_sd(draws: &DrawSet, k: usize) -> Result<f64> {
    let v = draws.coordinate(k);
    if v.len() < MIN_DRAWS {
        return Err(GmmError::InsufficientData(format!(
            "{} draws, need at least {MIN_DRAWS}",
            v.len()
        )));
    }
    robust_sd_of(&v)
}

/// Percentile-t interval from studentized draws `(θ*_b − θ̂) / se*_b`.
pub fn percentile_t_ci(draws: &DrawSet, center: f64, se: f64, alpha: f64, k: usize) -> Result<(f64, f64)> {
    let ses = draws
        .replicate_se
        .as_ref()
        .ok_or_else(|| GmmError::Input("draw set has no replicate standard errors".into()))?;
    let t: Vec<f64> = draws
        .draws
        .iter()
        .zip(ses)
        .filter_map(|(d, s)| match (d, s) {
            (Some(d), Some(s)) if s[k] > 0.0 => Some((d[k] - center) / s[k]),
            _ => None,
        })
        .collect();
    let (q_lo, q_hi) = percentile_interval(&t, alpha)?;
    Ok((center - q_hi * se, center - q_lo * se))
}

/// Aggregated repeated split-sample estimate.
#[derive(Debug, Clone)]
pub struct SplitSampleResult {
    pub draws: DrawSet,
    /// Per-split sampling variances (diagonal of `V̂_ME / n_1`).
    pub variances: Vec<DVector<f64>>,
    pub mean: DVector<f64>,
    /// Standard deviation of the split estimates.
    pub sd: DVector<f64>,
    /// Average per-split sampling variance.
    pub mean_variance: DVector<f64>,
    pub median: DVector<f64>,
    /// `median_s {V_s + (θ_s − θ_med)²}`.
    pub median_variance: DVector<f64>,
    /// Split redraws caused by rank failures.
    pub redraws: usize,
}

impl SplitSampleResult {
    pub fn median_ci(&self, alpha: f64, k: usize) -> Result<(f64, f64)> {
        let z = normal_critical(alpha)?;
        let half = z * self.median_variance[k].max(0.0).sqrt();
        Ok((self.median[k] - half, self.median[k] + half))
    }

    pub fn mean_ci(&self, alpha: f64, k: usize) -> Result<(f64, f64)> {
        let z = normal_critical(alpha)?;
        let half = z * self.mean_variance[k].max(0.0).sqrt();
        Ok((self.mean[k] - half, self.mean[k] + half))
    }
}

/// Random partition of `0..n` into halves of sizes `⌈n/2⌉` and `⌊n/2⌋`.
pub fn split_halves<R: Rng>(n: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let second = idx.split_off(n.div_ceil(2));
    (idx, second)
}

const MAX_SPLIT_ATTEMPTS: usize = 10;

fn one_split(
    model: &dyn MomentModel,
    data: &DataSet,
    spec: &WeightSpec,
    rng: &mut ChaCha8Rng,
    solver: &SolverOptions,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (first, second) = split_halves(data.n(), rng);
    let half1 = data.select(&first);
    let half2 = data.select(&second);
    let fit2 = fit_gmm(spec, model, &half2, solver)?;
    let mut gamma = Recentering::plug_in(&fit2);
    gamma.source = RecenteringSource::SplitEstimate;
    if model.is_linear() && spec.kind == WeightKind::Sigma112Inv {
        gamma.gamma1.fill(0.0);
    }
    let fit1 = fit_gmm(spec, model, &half1, solver)?;
    let est = oracle_me_from_fit(model, &half1, &fit1, &gamma, solver)?;
    let n1 = half1.n() as f64;
    let var = DVector::from_iterator(est.theta.len(), (0..est.theta.len()).map(|k| est.variance[(k, k)] / n1));
    if est.theta.iter().chain(var.iter()).any(|v| !v.is_finite()) {
        return Err(GmmError::Singular("non-finite split estimate".into()));
    }
    Ok((est.theta, var))
}

/// Repeated split-sample ME estimator.
///
/// Each repetition estimates the recentering from one half and solves the
/// ME estimator on the other. Splits that fail are redrawn up to ten times.
pub fn split_sample(
    model: &dyn MomentModel,
    data: &DataSet,
    spec: &WeightSpec,
    s: usize,
    seed: u64,
    solver: &SolverOptions,
) -> Result<SplitSampleResult> {
    if data.n() < 4 {
        return Err(GmmError::InsufficientData("split-sample needs n ≥ 4".into()));
    }
    if s == 0 {
        return Err(GmmError::Input("split-sample needs S ≥ 1".into()));
    }
    let results: Vec<Result<(DVector<f64>, DVector<f64>, usize)>> = (0..s)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(seed, rep as u64);
            let mut last = None;
            for attempt in 0..MAX_SPLIT_ATTEMPTS {
                match one_split(model, data, spec, &mut rng, solver) {
                    Ok((t, v)) => return Ok((t, v, attempt)),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect();
    let mut thetas = Vec::with_capacity(s);
    let mut vars = Vec::with_capacity(s);
    let mut redraws = 0;
    for r in results {
        let (t, v, a) = r?;
        thetas.push(t);
        vars.push(v);
        redraws += a;
    }
    let p = thetas[0].len();
    let col = |k: usize| -> Vec<f64> { thetas.iter().map(|t| t[k]).collect() };
    let mean = DVector::from_iterator(p, (0..p).map(|k| col(k).iter().sum::<f64>() / s as f64));
    let sd = DVector::from_iterator(p, (0..p).map(|k| if s > 1 { sample_sd(&col(k)) } else { 0.0 }));
    let mean_variance = DVector::from_iterator(p, (0..p).map(|k| vars.iter().map(|v| v[k]).sum::<f64>() / s as f64));
    let med = DVector::from_iterator(p, (0..p).map(|k| median(&col(k))));
    let median_variance = DVector::from_iterator(
        p,
        (0..p).map(|k| {
            let adj: Vec<f64> = thetas
                .iter()
                .zip(&vars)
                .map(|(t, v)| v[k] + (t[k] - med[k]).powi(2))
                .collect();
            median(&adj)
        }),
    );
    Ok(SplitSampleResult {
        draws: DrawSet {
            draws: thetas.into_iter().map(Some).collect(),
            replicate_se: None,
            kind: DrawKind::SplitSample,
            base_seed: seed,
            failures: 0,
        },
        variances: vars,
        mean,
        sd,
        mean_variance,
        median: med,
        median_variance,
        redraws,
    })
}

/// `Γ = [G; F]` of the bootstrap sample at a point, exposed for diagnostics.
pub fn bootstrap_gamma(model: &dyn MomentModel, star: &DataSet, theta: &[f64]) -> Result<DMatrix<f64>> {
    let s = sample_means(model, star, theta)?;
    Ok(gamma_matrix(&s.jac, &s.curv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::solve_gmm;
    use crate::model::{ExpIv, LinearIv};
    use rand_distr::{Distribution, StandardNormal};

    fn iv_rows(n: usize, seed: u64, m: usize, delta: f64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
                let v: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = z.iter().enumerate().map(|(j, zj)| 0.5 * (j + 1) as f64 * zj).sum::<f64>() + v;
                let y = x + delta * z[m - 1] + 0.5 * v + e;
                let mut r = vec![y, x];
                r.extend(z);
                r
            })
            .collect();
        DataSet::from_rows(&rows).unwrap()
    }

    #[test]
    fn indices_single_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(resample_indices(1, &mut rng), vec![0; 1]);
        let a = resample_indices(50, &mut replicate_rng(9, 3));
        let b = resample_indices(50, &mut replicate_rng(9, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn index_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut count = 0usize;
        let total = 100_000;
        for _ in 0..total / 4 {
            count += resample_indices(4, &mut rng).iter().filter(|&&i| i == 0).count();
        }
        let freq = count as f64 / total as f64;
        assert!((freq - 0.25).abs() < 0.01);
    }

    #[test]
    fn repeated_row_gives_constant_draws() {
        let model = LinearIv::new(1, 1).unwrap();
        let data = DataSet::from_rows(&vec![vec![2.0, 1.0, 1.0]; 10]).unwrap();
        let fit = solve_gmm(&model, &data, &DMatrix::identity(1, 1)).unwrap();
        let opts = BootstrapOptions::new(25, 3);
        for set in [
            hh_bootstrap(&model, &data, &WeightSpec::identity(), &fit, &opts).unwrap(),
            me_bootstrap(&model, &data, &fit, &opts).unwrap(),
            dr_bootstrap(&model, &data, &fit, &opts).unwrap(),
        ] {
            for d in set.surviving() {
                assert!((d[0] - fit.theta[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dr_equals_hh_when_just_identified() {
        let model = LinearIv::new(1, 1).unwrap();
        let data = iv_rows(200, 4, 1, 0.0);
        let fit = solve_gmm(&model, &data, &DMatrix::identity(1, 1)).unwrap();
        let opts = BootstrapOptions::new(50, 11);
        let hh = hh_bootstrap(&model, &data, &WeightSpec::identity(), &fit, &opts).unwrap();
        let dr = dr_bootstrap(&model, &data, &fit, &opts).unwrap();
        for (a, b) in hh.surviving().zip(dr.surviving()) {
            assert!((a[0] - b[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn dr_without_correction_nests_hh_at_exact_identification() {
        let model = LinearIv::new(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..150)
            .map(|_| {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                let v: f64 = StandardNormal.sample(&mut rng);
                let x1 = z1 + 0.3 * v;
                let x2 = z2 - 0.5 * z1;
                vec![x1 - x2 + v, x1, x2, z1, z2]
            })
            .collect();
        let data = DataSet::from_rows(&rows).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let fit = solve_gmm(&model, &data, &w).unwrap();
        let mut opts = BootstrapOptions::new(30, 6);
        opts.jacobian_correction = false;
        let spec = WeightSpec::fixed(w).unwrap();
        let hh = hh_bootstrap(&model, &data, &spec, &fit, &opts).unwrap();
        let dr = dr_bootstrap(&model, &data, &fit, &opts).unwrap();
        for (a, b) in hh.surviving().zip(dr.surviving()) {
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn dr_linear_closed_form_solves_estimating_equation() {
        let model = LinearIv::new(1, 3).unwrap();
        let data = iv_rows(120, 7, 3, 0.8);
        let fit = solve_gmm(&model, &data, &DMatrix::identity(3, 3)).unwrap();
        let opts = BootstrapOptions::new(10, 8);
        let dr = dr_bootstrap(&model, &data, &fit, &opts).unwrap();
        let target = fit.psi_mean();
        for (b, d) in dr.draws.iter().enumerate() {
            let idx = resample_indices(data.n(), &mut replicate_rng(8, b as u64));
            let star = data.select(&idx);
            let s = sample_means(&model, &star, d.as_ref().unwrap().as_slice()).unwrap();
            let h = &fit.a.a * (&s.psi - &target);
            assert!(h.amax() < 1e-10);
        }
    }

    #[test]
    fn nonlinear_dr_solves_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                let u: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = 0.5 * z1 + 0.4 * z2 + 0.3 * u;
                vec![(0.3 * x + 0.1 * z2).exp() + 0.2 * e, x, z1, z2]
            })
            .collect();
        let data = DataSet::from_rows(&rows).unwrap();
        let model = ExpIv::new(1, 2).unwrap();
        let fit = solve_gmm(&model, &data, &DMatrix::identity(2, 2)).unwrap();
        let mut opts = BootstrapOptions::new(8, 10);
        opts.replicate_se = true;
        let dr = dr_bootstrap(&model, &data, &fit, &opts).unwrap();
        assert_eq!(dr.failures, 0);
        let target = fit.psi_mean();
        for (b, d) in dr.draws.iter().enumerate() {
            let star = data.select(&resample_indices(data.n(), &mut replicate_rng(10, b as u64)));
            let s = sample_means(&model, &star, d.as_ref().unwrap().as_slice()).unwrap();
            assert!((&fit.a.a * (&s.psi - &target)).amax() < 1e-9);
        }
        assert!(dr.replicate_se.as_ref().unwrap().iter().all(|s| s.is_some()));
        let me = me_bootstrap(&model, &data, &fit, &opts).unwrap();
        assert_eq!(me.failures, 0);
    }

    #[test]
    fn bootstrap_recentering_has_zero_mean() {
        // Enumerate every bootstrap sample of a 4-row dataset.
        let model = LinearIv::new(1, 2).unwrap();
        let data = iv_rows(4, 12, 2, 1.0);
        let fit = solve_gmm(&model, &data, &DMatrix::identity(2, 2)).unwrap();
        let target = fit.psi_mean();
        let n = 4usize;
        let mut acc = DVector::zeros(target.len());
        let mut count = 0.0;
        for code in 0..n.pow(n as u32) {
            let mut c = code;
            let idx: Vec<usize> = (0..n)
                .map(|_| {
                    let i = c % n;
                    c /= n;
                    i
                })
                .collect();
            let s = sample_means(&model, &data.select(&idx), fit.theta.as_slice()).unwrap();
            acc += s.psi - &target;
            count += 1.0;
        }
        assert!((acc / count).amax() < 1e-12);
    }

    #[test]
    fn seeds_are_thread_count_invariant() {
        let model = LinearIv::new(1, 2).unwrap();
        let data = iv_rows(100, 13, 2, 1.0);
        let fit = solve_gmm(&model, &data, &DMatrix::identity(2, 2)).unwrap();
        let opts = BootstrapOptions::new(40, 14);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| dr_bootstrap(&model, &data, &fit, &opts).unwrap());
        let b = four.install(|| dr_bootstrap(&model, &data, &fit, &opts).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        let (lo, hi) = percentile_interval(&v, 0.10).unwrap();
        assert!((lo - 5.95).abs() < 1e-12);
        assert!((hi - 95.05).abs() < 1e-12);
        let c = vec![3.0; 30];
        assert_eq!(percentile_interval(&c, 0.05).unwrap(), (3.0, 3.0));
        assert_eq!(robust_sd_of(&c).unwrap(), 0.0);
        assert!(percentile_interval(&v[..10], 0.05).is_err());
    }

    #[test]
    fn robust_sd_of_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let v: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!((robust_sd_of(&v).unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn split_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (a, b) = split_halves(11, &mut rng);
        assert_eq!(a.len(), 6);
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = a.iter().chain(&b).cloned().collect();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn split_sample_exact_fit() {
        let model = LinearIv::new(1, 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let z1 = (i as f64 * 0.37).sin();
                let z2 = (i as f64 * 0.91).cos();
                let x = z1 + 0.5 * z2 + 0.3 * (i as f64 * 1.3).sin();
                vec![1.5 * x, x, z1, z2]
            })
            .collect();
        let data = DataSet::from_rows(&rows).unwrap();
        let r = split_sample(&model, &data, &WeightSpec::identity(), 1, 17, &SolverOptions::default()).unwrap();
        assert!((r.mean[0] - 1.5).abs() < 1e-10);
    }

    #[test]
    fn split_sample_aggregates() {
        let model = LinearIv::new(1, 2).unwrap();
        let data = iv_rows(400, 18, 2, 1.0);
        let r = split_sample(&model, &data, &WeightSpec::sigma112_inv(), 20, 19, &SolverOptions::default()).unwrap();
        assert_eq!(r.draws.replicates(), 20);
        let (lo, hi) = r.median_ci(0.05, 0).unwrap();
        assert!(lo < r.median[0] && r.median[0] < hi);
        assert!(r.median_variance[0] >= r.variances.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min));
        let mut buf = Vec::new();
        r.draws.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("replicate,theta_1,converged"));
    }

    #[test]
    fn percentile_t_uses_replicate_se() {
        let model = LinearIv::new(1, 2).unwrap();
        let data = iv_rows(200, 20, 2, 0.5);
        let fit = solve_gmm(&model, &data, &DMatrix::identity(2, 2)).unwrap();
        let mut opts = BootstrapOptions::new(100, 21);
        opts.replicate_se = true;
        let dr = dr_bootstrap(&model, &data, &fit, &opts).unwrap();
        let se = (fit.var_robust[(0, 0)] / fit.n as f64).sqrt();
        let (lo, hi) = percentile_t_ci(&dr, fit.theta[0], se, 0.05, 0).unwrap();
        assert!(lo < fit.theta[0] && fit.theta[0] < hi);
    }
}
