//! One-step GMM: weight construction, criterion minimization and the J test.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::covariance::{
    a_matrices, sigma_hat, var_conventional, var_me_bound, var_misspec_robust, AMatrices, SigmaParts,
};
use crate::error::{GmmError, Result};
use crate::linalg::{check_spd, inverse, kron_row_identity, sym_inverse, symmetrize, InversePolicy, COND_CAP};
use crate::model::{check_data, sample_means, DataSet, MomentModel};
use crate::solver::{minimize_multistart, Eval, SolverOptions};

/// Which weighting matrix to use.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightKind {
    Identity,
    /// `(Z'Z/n)⁻¹`; needs a model that exposes instruments.
    InstrumentGram,
    /// Inverse moment variance at a pilot fit.
    Sigma11Inv,
    /// Inverse of the moment variance net of the Jacobian, at a pilot fit.
    Sigma112Inv,
    Fixed(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    pub kind: WeightKind,
    /// Pilot weight for data-dependent kinds; `None` means identity.
    pub preliminary: Option<Box<WeightSpec>>,
}

impl WeightSpec {
    pub fn new(kind: WeightKind) -> Self {
        Self {
            kind,
            preliminary: None,
        }
    }

    pub fn identity() -> Self {
        Self::new(WeightKind::Identity)
    }

    pub fn instrument_gram() -> Self {
        Self::new(WeightKind::InstrumentGram)
    }

    pub fn sigma11_inv() -> Self {
        Self::new(WeightKind::Sigma11Inv)
    }

    pub fn sigma112_inv() -> Self {
        Self::new(WeightKind::Sigma112Inv)
    }

    pub fn fixed(w: DMatrix<f64>) -> Result<Self> {
        check_spd(&w, "fixed weight")?;
        Ok(Self::new(WeightKind::Fixed(w)))
    }

    pub fn with_preliminary(mut self, pilot: WeightSpec) -> Self {
        self.preliminary = Some(Box::new(pilot));
        self
    }

    pub fn is_data_dependent(&self) -> bool {
        !matches!(self.kind, WeightKind::Identity | WeightKind::Fixed(_))
    }

    /// Whether the weight needs a pilot estimate.
    pub fn needs_pilot(&self) -> bool {
        matches!(self.kind, WeightKind::Sigma11Inv | WeightKind::Sigma112Inv)
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            WeightKind::Identity => "identity",
            WeightKind::InstrumentGram => "zz",
            WeightKind::Sigma11Inv => "s11",
            WeightKind::Sigma112Inv => "s112",
            WeightKind::Fixed(_) => "fixed",
        }
    }
}

/// A fitted GMM estimate with its diagnostics and variance estimates.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub theta: DVector<f64>,
    pub w: DMatrix<f64>,
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub curv: DMatrix<f64>,
    pub j_stat: f64,
    /// `None` when just identified.
    pub j_pvalue: Option<f64>,
    pub sigma: SigmaParts,
    pub a: AMatrices,
    pub var_conventional: DMatrix<f64>,
    pub var_robust: DMatrix<f64>,
    pub var_me_bound: DMatrix<f64>,
    pub n: usize,
    pub is_linear: bool,
}

impl GmmFit {
    pub fn m(&self) -> usize {
        self.g.len()
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }

    /// `‖G'Wg‖∞` at the estimate.
    pub fn foc_norm(&self) -> f64 {
        (self.jac.transpose() * &self.w * &self.g).amax()
    }

    /// `ψ_n(θ̂) = [g_n; vec(G_n')]`.
    pub fn psi_mean(&self) -> DVector<f64> {
        let m = self.m();
        let p = self.p();
        let mut out = DVector::zeros(m * (p + 1));
        out.rows_mut(0, m).copy_from(&self.g);
        out.rows_mut(m, m * p)
            .copy_from(&crate::linalg::stack_rows(&self.jac));
        out
    }
}

/// Largest-to-smallest eigenvalue ratio of a symmetric matrix.
fn sym_condition(a: &DMatrix<f64>) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(a));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `(n⁻¹ Σ z_i z_i')⁻¹`.
pub fn instrument_gram_weight(model: &dyn MomentModel, data: &DataSet) -> Result<DMatrix<f64>> {
    check_data(model, data)?;
    let m = model.n_moments();
    let mut gram = DMatrix::zeros(m, m);
    for row in data.rows() {
        let z = model.instruments(row).ok_or_else(|| {
            GmmError::Unsupported("instrument Gram weight needs a model with instruments".into())
        })?;
        let z = DVector::from_column_slice(z);
        gram += &z * z.transpose();
    }
    gram /= data.n() as f64;
    let cond = sym_condition(&gram);
    if cond > COND_CAP {
        return Err(GmmError::Singular(format!(
            "instrument Gram matrix has condition number {cond:.3e}"
        )));
    }
    sym_inverse(&gram, InversePolicy::Strict, "Z'Z/n")
}

/// Resolve a weight specification on a dataset.
///
/// Data-dependent kinds return the pilot fit they were computed from.
pub fn build_weight(
    spec: &WeightSpec,
    model: &dyn MomentModel,
    data: &DataSet,
) -> Result<(DMatrix<f64>, Option<GmmFit>)> {
    build_weight_with(spec, model, data, &SolverOptions::default())
}

pub fn build_weight_with(
    spec: &WeightSpec,
    model: &dyn MomentModel,
    data: &DataSet,
    opts: &SolverOptions,
) -> Result<(DMatrix<f64>, Option<GmmFit>)> {
    let m = model.n_moments();
    match &spec.kind {
        WeightKind::Identity => Ok((DMatrix::identity(m, m), None)),
        WeightKind::InstrumentGram => Ok((instrument_gram_weight(model, data)?, None)),
        WeightKind::Fixed(w) => {
            if w.shape() != (m, m) {
                return Err(GmmError::Dimension(format!(
                    "fixed weight is {:?}, model has {m} moments",
                    w.shape()
                )));
            }
            check_spd(w, "fixed weight")?;
            Ok((w.clone(), None))
        }
        WeightKind::Sigma11Inv | WeightKind::Sigma112Inv => {
            let pilot_spec = spec.preliminary.as_deref().cloned().unwrap_or_else(WeightSpec::identity);
            if pilot_spec.needs_pilot() {
                return Err(GmmError::Unsupported(
                    "the pilot weight must not itself require a pilot".into(),
                ));
            }
            let (w0, _) = build_weight_with(&pilot_spec, model, data, opts)?;
            let pilot = solve_gmm_with(model, data, &w0, opts)?;
            let w = weight_from_sigma(&spec.kind, &pilot.sigma)?;
            Ok((w, Some(pilot)))
        }
    }
}

/// Invert the relevant Σ block for a data-dependent weight kind.
pub fn weight_from_sigma(kind: &WeightKind, sigma: &SigmaParts) -> Result<DMatrix<f64>> {
    let (block, what) = match kind {
        WeightKind::Sigma11Inv => (&sigma.s11, "Σ11"),
        WeightKind::Sigma112Inv => (&sigma.s11_2, "Σ11,2"),
        _ => return Err(GmmError::Unsupported("weight kind is not Σ-based".into())),
    };
    Ok(symmetrize(&sym_inverse(block, InversePolicy::PseudoFallback, what)?))
}

/// Resolve the weight and fit in one call.
pub fn fit_gmm(
    spec: &WeightSpec,
    model: &dyn MomentModel,
    data: &DataSet,
    opts: &SolverOptions,
) -> Result<GmmFit> {
    let (w, _) = build_weight_with(spec, model, data, opts)?;
    solve_gmm_with(model, data, &w, opts)
}

pub fn solve_gmm(model: &dyn MomentModel, data: &DataSet, w: &DMatrix<f64>) -> Result<GmmFit> {
    solve_gmm_with(model, data, w, &SolverOptions::default())
}

/// Minimizer of `g_n(θ)' W g_n(θ)` only, without the variance bookkeeping.
pub fn gmm_theta(
    model: &dyn MomentModel,
    data: &DataSet,
    w: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    check_data(model, data)?;
    let (m, p) = (model.n_moments(), model.n_params());
    if w.shape() != (m, m) {
        return Err(GmmError::Dimension(format!(
            "weight is {:?}, model has {m} moments",
            w.shape()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(GmmError::Input("weight has non-finite entries".into()));
    }
    if model.is_linear() {
        let zero = vec![0.0; p];
        let at0 = sample_means(model, data, &zero)?;
        return linear_gmm(&at0.g, &at0.jac, w);
    }
    let objective = |theta: &DVector<f64>| -> Result<Eval> {
        let s = sample_means(model, data, theta.as_slice())?;
        let wg = w * &s.g;
        let gw = s.jac.transpose() * w;
        let hess = (&gw * &s.jac + kron_row_identity(&wg, p) * &s.curv) * 2.0;
        Ok(Eval {
            value: s.g.dot(&wg),
            grad: s.jac.transpose() * &wg * 2.0,
            hess: symmetrize(&hess),
            scale: 2.0 * (1.0 + s.g.amax()),
        })
    };
    Ok(minimize_multistart(objective, opts, p)?.x)
}

/// Closed form for moments affine in `θ`: `g_n(θ) = a + Gθ`.
pub fn linear_gmm(a: &DVector<f64>, jac: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    let gw = jac.transpose() * w;
    let bread = inverse(&(&gw * jac), InversePolicy::Strict, "X'ZWZ'X")?;
    Ok(-(bread * (gw * a)))
}

pub fn solve_gmm_with(
    model: &dyn MomentModel,
    data: &DataSet,
    w: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<GmmFit> {
    let theta = gmm_theta(model, data, w, opts)?;
    finish_fit(model, data, w, theta)
}

/// Populate the diagnostics of a fit at a given estimate.
pub fn finish_fit(
    model: &dyn MomentModel,
    data: &DataSet,
    w: &DMatrix<f64>,
    theta: DVector<f64>,
) -> Result<GmmFit> {
    let (m, p) = (model.n_moments(), model.n_params());
    let n = data.n();
    let s = sample_means(model, data, theta.as_slice())?;
    let sigma = sigma_hat(model, data, theta.as_slice())?;
    let a = a_matrices(&s.g, &s.jac, &s.curv, w)?;
    let var_conv = var_conventional(&s.jac, w, &sigma.s11)?;
    let var_rob = var_misspec_robust(&a, &sigma)?;
    // An exact fit has a degenerate Σ; the bound is then reported as NaN.
    let var_me = var_me_bound(&a.gamma, &sigma, model.is_linear()).unwrap_or_else(|e| {
        log::warn!("efficiency bound unavailable: {e}");
        DMatrix::from_element(p, p, f64::NAN)
    });
    let j_stat = (n as f64 * s.g.dot(&(w * &s.g))).max(0.0);
    let j_pvalue = if m > p {
        Some(chi2_upper(j_stat, (m - p) as f64))
    } else {
        None
    };
    Ok(GmmFit {
        theta,
        w: w.clone(),
        g: s.g,
        jac: s.jac,
        curv: s.curv,
        j_stat,
        j_pvalue,
        sigma,
        a,
        var_conventional: var_conv,
        var_robust: var_rob,
        var_me_bound: var_me,
        n,
        is_linear: model.is_linear(),
    })
}

/// Upper tail of a chi-square distribution.
pub fn chi2_upper(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df).expect("positive degrees of freedom");
    (1.0 - dist.cdf(x)).clamp(0.0, 1.0)
}

/// Overidentification statistic and its chi-square(m − p) p-value.
pub fn j_test(fit: &GmmFit) -> Result<(f64, f64)> {
    if fit.m() <= fit.p() {
        return Err(GmmError::JustIdentified);
    }
    Ok((fit.j_stat, chi2_upper(fit.j_stat, (fit.m() - fit.p()) as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpIv, LinearIv};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iv_data(n: usize, seed: u64, m: usize, slope: f64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                let v: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                let x = z.iter().enumerate().map(|(j, zj)| (j + 1) as f64 * zj).sum::<f64>() + v;
                let y = slope * x + 0.5 * v + e;
                let mut r = vec![y, x];
                r.extend(z);
                r
            })
            .collect();
        DataSet::from_rows(&rows).unwrap()
    }

    #[test]
    fn identity_weight() {
        let model = LinearIv::new(1, 2).unwrap();
        let data = iv_data(10, 1, 2, 1.0);
        let (w, pilot) = build_weight(&WeightSpec::identity(), &model, &data).unwrap();
        assert_eq!(w, DMatrix::identity(2, 2));
        assert!(pilot.is_none());
    }

    #[test]
    fn instrument_gram_near_identity() {
        let model = LinearIv::new(1, 2).unwrap();
        let data = iv_data(20_000, 2, 2, 1.0);
        let (w, _) = build_weight(&WeightSpec::instrument_gram(), &model, &data).unwrap();
        assert!((w - DMatrix::identity(2, 2)).amax() < 0.05);
    }

    #[test]
    fn singular_gram_is_an_error() {
        let model = LinearIv::new(1, 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0, i as f64, 2.0 * i as f64]).collect();
        let data = DataSet::from_rows(&rows).unwrap();
        assert!(build_weight(&WeightSpec::instrument_gram(), &model, &data).is_err());
    }

    #[test]
    fn non_pd_fixed_weight_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(WeightSpec::fixed(bad).is_err());
    }

    #[test]
    fn just_identified_ratio_form() {
        let model = LinearIv::new(1, 1).unwrap();
        let data = iv_data(50, 3, 1, 1.0);
        let (mut zy, mut zx) = (0.0, 0.0);
        for r in data.rows() {
            zy += r[2] * r[0];
            zx += r[2] * r[1];
        }
        for wv in [0.3, 1.0, 17.0] {
            let fit = solve_gmm(&model, &data, &DMatrix::from_element(1, 1, wv)).unwrap();
            assert!((fit.theta[0] - zy / zx).abs() < 1e-12);
            assert!(fit.j_stat.abs() < 1e-20);
            assert!(matches!(j_test(&fit), Err(GmmError::JustIdentified)));
        }
    }

    #[test]
    fn exact_fit_recovers_slope() {
        let model = LinearIv::new(1, 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let z1 = (i as f64 * 0.37).sin();
                let z2 = (i as f64 * 0.91).cos();
                let x = z1 + 0.5 * z2 + 0.1 * i as f64;
                vec![2.0 * x, x, z1, z2]
            })
            .collect();
        let data = DataSet::from_rows(&rows).unwrap();
        let fit = solve_gmm(&model, &data, &DMatrix::identity(2, 2)).unwrap();
        assert!((fit.theta[0] - 2.0).abs() < 1e-12);
        assert!(fit.j_stat < 1e-20);
    }

    #[test]
    fn weight_scaling_and_foc() {
        let model = LinearIv::new(1, 3).unwrap();
        let data = iv_data(200, 4, 3, 0.7);
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let a = solve_gmm(&model, &data, &w).unwrap();
        let b = solve_gmm(&model, &data, &(&w * 3.5)).unwrap();
        assert!((a.theta[0] - b.theta[0]).abs() < 1e-12);
        assert!((b.j_stat - 3.5 * a.j_stat).abs() < 1e-9 * (1.0 + a.j_stat));
        assert!(a.foc_norm() <= 1e-8 * (1.0 + a.g.amax()));
    }

    #[test]
    fn j_pvalue_values() {
        assert_eq!(chi2_upper(0.0, 1.0), 1.0);
        assert!((chi2_upper(3.8415, 1.0) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn data_dependent_weights_return_pilot() {
        let model = LinearIv::new(1, 2).unwrap();
        let data = iv_data(300, 5, 2, 1.0);
        for spec in [WeightSpec::sigma11_inv(), WeightSpec::sigma112_inv()] {
            let (w, pilot) = build_weight(&spec, &model, &data).unwrap();
            let pilot = pilot.unwrap();
            let block = if spec.kind == WeightKind::Sigma11Inv {
                &pilot.sigma.s11
            } else {
                &pilot.sigma.s11_2
            };
            assert!((&w * block - DMatrix::identity(2, 2)).amax() < 1e-9);
        }
        let nested = WeightSpec::sigma11_inv().with_preliminary(WeightSpec::sigma112_inv());
        assert!(matches!(
            build_weight(&nested, &model, &data),
            Err(GmmError::Unsupported(_))
        ));
    }

    #[test]
    fn exponential_model_newton() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                let x = 0.5 * z1 + 0.3 * z2 + 0.3 * rng.sample::<f64, _>(StandardNormal);
                let y = (0.4 * x).exp() * (1.0 + 0.2 * rng.sample::<f64, _>(StandardNormal));
                vec![y, x, z1, z2]
            })
            .collect();
        let data = DataSet::from_rows(&rows).unwrap();
        let model = ExpIv::new(1, 2).unwrap();
        let fit = solve_gmm(&model, &data, &DMatrix::identity(2, 2)).unwrap();
        assert!((fit.theta[0] - 0.4).abs() < 0.1);
        assert!(fit.foc_norm() <= 1e-8 * (1.0 + fit.g.amax()));
        let (j, pv) = j_test(&fit).unwrap();
        assert!(j >= 0.0 && (0.0..=1.0).contains(&pv));
    }

    #[test]
    fn variances_are_symmetric_psd() {
        let model = LinearIv::new(1, 2).unwrap();
        let data = iv_data(400, 7, 2, 1.0);
        let fit = solve_gmm(&model, &data, &DMatrix::identity(2, 2)).unwrap();
        for v in [&fit.var_conventional, &fit.var_robust, &fit.var_me_bound] {
            assert!(v[(0, 0)] > 0.0);
        }
        assert!(fit.var_me_bound[(0, 0)] <= fit.var_robust[(0, 0)] + 1e-12);
    }
}
