//! Misspecification-efficient (ME) estimators and the sensitivity analysis
//! over unknown recentering values.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{gamma_matrix, second_moment_about, standard_errors, var_me_bound, SigmaParts};
use crate::error::{GmmError, Result};
use crate::estimate::{solve_gmm_with, GmmFit};
use crate::linalg::{inverse, stack_rows, sym_inverse, symmetrize, unstack_rows, InversePolicy};
use crate::model::{sample_means, DataSet, MomentModel};
use crate::solver::{minimize, Eval, SolverOptions};

/// Where a recentering value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecenteringSource {
    Oracle,
    SplitEstimate,
    GridPoint,
    PlugIn,
}

/// Population means of the moments and of the row-stacked Jacobian at the
/// pseudo-true value.
#[derive(Debug, Clone, PartialEq)]
pub struct Recentering {
    /// Moment mean (degree of misspecification), length `m`.
    pub gamma1: DVector<f64>,
    /// Row-stacked Jacobian mean (identification strength), length `m p`.
    pub gamma2: DVector<f64>,
    pub source: RecenteringSource,
}

impl Recentering {
    pub fn new(gamma1: DVector<f64>, gamma2: DVector<f64>, source: RecenteringSource) -> Self {
        Self {
            gamma1,
            gamma2,
            source,
        }
    }

    /// Sample means at a fitted estimate.
    pub fn plug_in(fit: &GmmFit) -> Self {
        Self::new(fit.g.clone(), stack_rows(&fit.jac), RecenteringSource::PlugIn)
    }

    pub fn stacked(&self) -> DVector<f64> {
        let m = self.gamma1.len();
        let mut out = DVector::zeros(m + self.gamma2.len());
        out.rows_mut(0, m).copy_from(&self.gamma1);
        out.rows_mut(m, self.gamma2.len()).copy_from(&self.gamma2);
        out
    }

    pub fn check(&self, m: usize, p: usize) -> Result<()> {
        if self.gamma1.len() != m || self.gamma2.len() != m * p {
            return Err(GmmError::Dimension(format!(
                "recentering has lengths ({}, {}), expected ({m}, {})",
                self.gamma1.len(),
                self.gamma2.len(),
                m * p
            )));
        }
        Ok(())
    }
}

/// An ME point estimate with its asymptotic variance.
#[derive(Debug, Clone)]
pub struct MeEstimate {
    pub theta: DVector<f64>,
    /// Asymptotic variance; divide by `n` for the sampling variance.
    pub variance: DMatrix<f64>,
    pub n: usize,
}

impl MeEstimate {
    pub fn se(&self) -> DVector<f64> {
        standard_errors(&self.variance, self.n)
    }
}

/// `Λ* = Γ'Σ⁻¹`.
pub fn lambda_star(gamma: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s_inv = sym_inverse(sigma, InversePolicy::PseudoFallback, "Σ")?;
    Ok(gamma.transpose() * s_inv)
}

/// Blocks of `Λ*` for a linear model: `(G'S11_2⁻¹, −G'S11_2⁻¹ S12 S22⁻¹)`.
pub fn lambda_star_linear(jac: &DMatrix<f64>, sigma: &SigmaParts) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s11_2_inv = sym_inverse(&sigma.s11_2, InversePolicy::PseudoFallback, "Σ11,2")?;
    let s22_inv = sym_inverse(&sigma.s22, InversePolicy::PseudoFallback, "Σ22")?;
    let b1 = jac.transpose() * &s11_2_inv;
    let b2 = -(&b1 * &sigma.s12 * s22_inv);
    Ok((b1, b2))
}

/// Weight blocks `(Δ11, Δ12)` of `Σ⁻¹` written through the Schur complement.
fn efficient_blocks(sigma: &SigmaParts) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d11 = sym_inverse(&sigma.s11_2, InversePolicy::PseudoFallback, "Σ11,2")?;
    let s22_inv = sym_inverse(&sigma.s22, InversePolicy::PseudoFallback, "Σ22")?;
    let d12 = -(&d11 * &sigma.s12 * s22_inv);
    Ok((d11, d12))
}

/// Closed-form minimizer of `(ψ_n(θ) − γ)'Δ(ψ_n(θ) − γ)` for moments affine in `θ`.
///
/// `a` is `g_n(0)`, `jac` the (constant) sample Jacobian and `vec_jac` its
/// row-stacking.
pub fn linear_me_closed_form(
    a: &DVector<f64>,
    jac: &DMatrix<f64>,
    vec_jac: &DVector<f64>,
    d11: &DMatrix<f64>,
    d12: &DMatrix<f64>,
    gamma: &Recentering,
) -> Result<DVector<f64>> {
    let gd = jac.transpose() * d11;
    let bread = inverse(&(&gd * jac), InversePolicy::Strict, "G'Δ11G")?;
    let rhs = &gd * (a - &gamma.gamma1) + jac.transpose() * d12 * (vec_jac - &gamma.gamma2);
    Ok(-(bread * rhs))
}

/// Minimize `(ψ_n(θ) − γ)'Δ(ψ_n(θ) − γ)`.
pub fn me_gmm(
    model: &dyn MomentModel,
    data: &DataSet,
    delta: &DMatrix<f64>,
    gamma: &Recentering,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let (m, p) = (model.n_moments(), model.n_params());
    gamma.check(m, p)?;
    let d = model.aug_len();
    if delta.shape() != (d, d) {
        return Err(GmmError::Dimension(format!(
            "Δ is {:?}, expected {d}×{d}",
            delta.shape()
        )));
    }
    let delta = symmetrize(delta);
    if model.is_linear() {
        let s = sample_means(model, data, &vec![0.0; p])?;
        let d11 = delta.view((0, 0), (m, m)).into_owned();
        let d12 = delta.view((0, m), (m, m * p)).into_owned();
        return linear_me_closed_form(&s.g, &s.jac, &stack_rows(&s.jac), &d11, &d12, gamma);
    }
    let target = gamma.stacked();
    let gradient = |theta: &DVector<f64>| -> Result<(f64, DVector<f64>, f64)> {
        let s = sample_means(model, data, theta.as_slice())?;
        let r = &s.psi - &target;
        let dr = &delta * &r;
        let big_gamma = gamma_matrix(&s.jac, &s.curv);
        Ok((r.dot(&dr), big_gamma.transpose() * dr * 2.0, r.amax()))
    };
    let objective = |theta: &DVector<f64>| -> Result<Eval> {
        let (value, grad, rmax) = gradient(theta)?;
        let mut hess = DMatrix::zeros(p, p);
        let mut t = theta.clone();
        for l in 0..p {
            let h = crate::model::fd_step(theta[l]);
            t[l] = theta[l] + h;
            let up = gradient(&t)?.1;
            t[l] = theta[l] - h;
            let dn = gradient(&t)?.1;
            t[l] = theta[l];
            hess.set_column(l, &((up - dn) / (2.0 * h)));
        }
        Ok(Eval {
            value,
            grad,
            hess: symmetrize(&hess),
            scale: 2.0 * (1.0 + rmax),
        })
    };
    let start = opts.start_vector(p)?;
    // Finite-difference Hessians limit attainable precision; accept the stall floor.
    Ok(minimize(objective, start, opts)?.x)
}

/// ME estimator given a pilot fit: `Δ = Σ̂(θ̂_W)⁻¹`, warm start at `θ̂_W`.
pub fn oracle_me_from_fit(
    model: &dyn MomentModel,
    data: &DataSet,
    fit: &GmmFit,
    gamma: &Recentering,
    opts: &SolverOptions,
) -> Result<MeEstimate> {
    let (m, p) = (model.n_moments(), model.n_params());
    gamma.check(m, p)?;
    let theta = if model.is_linear() {
        let (d11, d12) = efficient_blocks(&fit.sigma)?;
        let a = &fit.g - &fit.jac * &fit.theta;
        linear_me_closed_form(&a, &fit.jac, &stack_rows(&fit.jac), &d11, &d12, gamma)?
    } else {
        let delta = sym_inverse(&fit.sigma.sigma, InversePolicy::PseudoFallback, "Σ")?;
        let warm = opts.clone().with_start(fit.theta.as_slice());
        me_gmm(model, data, &delta, gamma, &warm)?
    };
    Ok(MeEstimate {
        theta,
        variance: fit.var_me_bound.clone(),
        n: fit.n,
    })
}

/// ME estimator with a known recentering; `W` fixes the target pseudo-true value.
pub fn oracle_me(
    model: &dyn MomentModel,
    data: &DataSet,
    w: &DMatrix<f64>,
    gamma: &Recentering,
    opts: &SolverOptions,
) -> Result<MeEstimate> {
    let fit = solve_gmm_with(model, data, w, opts)?;
    oracle_me_from_fit(model, data, &fit, gamma, opts)
}

/// ME estimate at a hypothesized recentering, with its variance `V_ME(W; γ)`.
///
/// Linear models use `(γ2' S11_2⁻¹ γ2)⁻¹`. Otherwise the sandwich with
/// `Σ_γ = n⁻¹Σψ_iψ_i' − γγ'` at the new estimate is used.
pub fn me_gamma(
    model: &dyn MomentModel,
    data: &DataSet,
    fit: &GmmFit,
    gamma: &Recentering,
    opts: &SolverOptions,
) -> Result<MeEstimate> {
    let (m, p) = (model.n_moments(), model.n_params());
    let est = oracle_me_from_fit(model, data, fit, gamma, opts)?;
    let g2 = unstack_rows(&gamma.gamma2, m, p);
    let variance = if model.is_linear() {
        let big_gamma = gamma_matrix(&g2, &DMatrix::zeros(m * p, p));
        var_me_bound(&big_gamma, &fit.sigma, true)?
    } else {
        let s = sample_means(model, data, est.theta.as_slice())?;
        let big_gamma = gamma_matrix(&g2, &s.curv);
        let target = gamma.stacked();
        let raw = second_moment_about(model, data, est.theta.as_slice(), &DVector::zeros(m * (p + 1)))?;
        let sigma_gamma = raw - &target * target.transpose();
        let s_inv = sym_inverse(&fit.sigma.sigma, InversePolicy::PseudoFallback, "Σ")?;
        let gs = big_gamma.transpose() * &s_inv;
        let bread = inverse(&(&gs * &big_gamma), InversePolicy::Strict, "Γ'Σ⁻¹Γ")?;
        symmetrize(&(&bread * &gs * sigma_gamma * gs.transpose() * bread.transpose()))
    };
    Ok(MeEstimate {
        theta: est.theta,
        variance,
        n: est.n,
    })
}

/// Support of the unknown recentering values for the sensitivity analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaSpace {
    /// Upper bound on `‖γ1‖`.
    pub gamma1_max: f64,
    /// Lower and upper bounds on `‖γ2‖`.
    pub gamma2_min: f64,
    pub gamma2_max: f64,
    /// Constraint matrix in `γ2' W γ1 = 0`.
    pub w: DMatrix<f64>,
    pub grid_resolution: usize,
    pub seed: u64,
}

impl GammaSpace {
    pub fn new(gamma1_max: f64, gamma2_min: f64, gamma2_max: f64, w: DMatrix<f64>) -> Result<Self> {
        if !(gamma1_max >= 0.0 && gamma2_min > 0.0 && gamma2_min <= gamma2_max) {
            return Err(GmmError::Input(format!(
                "need γ1_max ≥ 0 and 0 < γ2_min ≤ γ2_max, got {gamma1_max}, {gamma2_min}, {gamma2_max}"
            )));
        }
        Ok(Self {
            gamma1_max,
            gamma2_min,
            gamma2_max,
            w,
            grid_resolution: 200,
            seed: 0,
        })
    }

    /// Random grid for a scalar parameter (`p = 1`, so `γ2` has length `m`).
    ///
    /// `γ2` directions are uniform on the sphere with norms spread over
    /// `[γ2_min, γ2_max]`; `γ1` lies in the null space of `γ2'W` with norms
    /// spread over `[0, γ1_max]`.
    pub fn grid(&self, skip_gamma1: bool) -> Result<Vec<Recentering>> {
        let m = self.w.nrows();
        if self.w.shape() != (m, m) || m == 0 {
            return Err(GmmError::Dimension("constraint matrix must be square".into()));
        }
        if self.grid_resolution == 0 {
            return Err(GmmError::Input("empty γ grid".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let unit = Uniform::new_inclusive(0.0, 1.0).expect("valid range");
        let k = self.grid_resolution;
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let frac = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            let dir = random_direction(m, &mut rng);
            let g2 = dir * (self.gamma2_min + frac * (self.gamma2_max - self.gamma2_min));
            let mut g1 = DVector::zeros(m);
            if !skip_gamma1 && self.gamma1_max > 0.0 && m > 1 {
                let a = &self.w.transpose() * &g2;
                let mut u: DVector<f64> = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
                let aa = a.dot(&a);
                if aa > 0.0 {
                    u -= &a * (a.dot(&u) / aa);
                }
                let norm = u.norm();
                if norm > 0.0 {
                    g1 = u / norm * (self.gamma1_max * unit.sample(&mut rng));
                }
            }
            out.push(Recentering::new(g1, g2, RecenteringSource::GridPoint));
        }
        Ok(out)
    }
}

fn random_direction(m: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// One line of the sensitivity table.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub id: usize,
    pub gamma1_norm: f64,
    pub gamma2_norm: f64,
    pub theta: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnionCi {
    pub lo: f64,
    pub hi: f64,
    pub rows: Vec<SensitivityRow>,
}

/// Two-sided normal critical value `z_{1−α/2}`.
pub fn normal_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GmmError::Input(format!("α must lie in (0, 1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// True when the fit's weight is (numerically) the inverse of its own `Σ11,2`.
pub fn weight_is_me_efficient(fit: &GmmFit) -> bool {
    let prod = &fit.w * &fit.sigma.s11_2;
    let m = fit.m();
    (prod - DMatrix::identity(m, m)).amax() < 1e-8
}

/// Hull of the per-`γ` Wald intervals over an explicit set of recentering values.
pub fn union_ci_over(
    model: &dyn MomentModel,
    data: &DataSet,
    fit: &GmmFit,
    grid: &[Recentering],
    alpha: f64,
    opts: &SolverOptions,
) -> Result<UnionCi> {
    if model.n_params() != 1 {
        return Err(GmmError::Unsupported("union intervals need a scalar parameter".into()));
    }
    if grid.is_empty() {
        return Err(GmmError::Input("empty γ grid".into()));
    }
    let z = normal_critical(alpha)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (id, gamma) in grid.iter().enumerate() {
        let est = me_gamma(model, data, fit, gamma, opts)?;
        let theta = est.theta[0];
        let se = est.se()[0];
        rows.push(SensitivityRow {
            id,
            gamma1_norm: gamma.gamma1.norm(),
            gamma2_norm: gamma.gamma2.norm(),
            theta,
            se,
            lo: theta - z * se,
            hi: theta + z * se,
        });
    }
    let lo = rows.iter().map(|r| r.lo).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.hi).fold(f64::NEG_INFINITY, f64::max);
    Ok(UnionCi { lo, hi, rows })
}

/// Union interval over the random grid of a [`GammaSpace`].
///
/// For linear models whose weight is the ME-efficient one, `γ1` is set to
/// zero because it drops out of the estimator.
pub fn union_ci(
    model: &dyn MomentModel,
    data: &DataSet,
    fit: &GmmFit,
    space: &GammaSpace,
    alpha: f64,
    opts: &SolverOptions,
) -> Result<UnionCi> {
    if model.n_params() != 1 {
        return Err(GmmError::Unsupported("union intervals need a scalar parameter".into()));
    }
    let skip = model.is_linear() && weight_is_me_efficient(fit);
    let grid = space.grid(skip)?;
    union_ci_over(model, data, fit, &grid, alpha, opts)
}

pub fn write_sensitivity_csv<W: Write>(rows: &[SensitivityRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "gamma1_norm", "gamma2_norm", "theta", "se", "ci_lo", "ci_hi"])?;
    for r in rows {
        w.write_record([
            r.id.to_string(),
            r.gamma1_norm.to_string(),
            r.gamma2_norm.to_string(),
            r.theta.to_string(),
            r.se.to_string(),
            r.lo.to_string(),
            r.hi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
