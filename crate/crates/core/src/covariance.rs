//! Centered covariance of the augmented moments and the variance formulas
//! built from it.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};
use crate::linalg::{inverse, kron_row_identity, stack_rows, sym_inverse, symmetrize, InversePolicy};
use crate::model::{check_data, DataSet, MomentModel};

/// Centered covariance `Σ` of `ψ` and its partitioned blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaParts {
    pub sigma: DMatrix<f64>,
    pub s11: DMatrix<f64>,
    pub s12: DMatrix<f64>,
    pub s22: DMatrix<f64>,
    /// `S11 − S12 S22⁻¹ S21`: moment variance net of the Jacobian.
    pub s11_2: DMatrix<f64>,
    /// `S22 − S21 S11⁻¹ S12`.
    pub s22_1: DMatrix<f64>,
    pub theta_at: DVector<f64>,
    pub m: usize,
    pub p: usize,
}

impl SigmaParts {
    /// Slice a full `m(p+1)` square covariance into its blocks.
    pub fn from_sigma(sigma: DMatrix<f64>, m: usize, p: usize, theta_at: DVector<f64>) -> Result<Self> {
        let d = m * (p + 1);
        if sigma.shape() != (d, d) {
            return Err(GmmError::Dimension(format!(
                "Σ is {:?}, expected {d}×{d}",
                sigma.shape()
            )));
        }
        let sigma = symmetrize(&sigma);
        let mp = m * p;
        let s11 = sigma.view((0, 0), (m, m)).into_owned();
        let s12 = sigma.view((0, m), (m, mp)).into_owned();
        let s22 = sigma.view((m, m), (mp, mp)).into_owned();
        let s22_inv = sym_inverse(&s22, InversePolicy::PseudoFallback, "Σ22")?;
        let s11_inv = sym_inverse(&s11, InversePolicy::PseudoFallback, "Σ11")?;
        let s11_2 = symmetrize(&(&s11 - &s12 * &s22_inv * s12.transpose()));
        let s22_1 = symmetrize(&(&s22 - s12.transpose() * &s11_inv * &s12));
        Ok(Self {
            sigma,
            s11,
            s12,
            s22,
            s11_2,
            s22_1,
            theta_at,
            m,
            p,
        })
    }

    pub fn s21(&self) -> DMatrix<f64> {
        self.s12.transpose()
    }
}

fn psi_deviation_products(
    model: &dyn MomentModel,
    data: &DataSet,
    theta: &[f64],
    shift: Option<&DVector<f64>>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = model.aug_len();
    let m = model.n_moments();
    let n = data.n();
    let mut rows = vec![0.0; n * d];
    for (row, chunk) in data.rows().zip(rows.chunks_exact_mut(d)) {
        let (g, jac) = chunk.split_at_mut(m);
        model.moments_into(row, theta, g);
        model.jacobian_into(row, theta, jac);
    }
    // Shift by a reference point so that constant data give exactly zero.
    let reference: Vec<f64> = match shift {
        Some(s) => s.as_slice().to_vec(),
        None => rows[..d].to_vec(),
    };
    for chunk in rows.chunks_exact_mut(d) {
        for (v, r) in chunk.iter_mut().zip(&reference) {
            *v -= r;
        }
    }
    let dev = DMatrix::from_row_slice(n, d, &rows);
    let mean = dev.row_mean().transpose();
    let cross = dev.tr_mul(&dev) / n as f64;
    Ok((cross, mean))
}

/// Centered sample covariance of `ψ(x_i, θ)` with its blocks.
pub fn sigma_hat(model: &dyn MomentModel, data: &DataSet, theta: &[f64]) -> Result<SigmaParts> {
    model.check_theta(theta)?;
    check_data(model, data)?;
    if data.n() < 2 {
        return Err(GmmError::InsufficientData(
            "centered covariance needs at least two observations".into(),
        ));
    }
    let (cross, mean) = psi_deviation_products(model, data, theta, None)?;
    let sigma = cross - &mean * mean.transpose();
    SigmaParts::from_sigma(
        sigma,
        model.n_moments(),
        model.n_params(),
        DVector::from_column_slice(theta),
    )
}

/// Second moment of `ψ` about a fixed center `c`: `n⁻¹ Σ (ψ_i − c)(ψ_i − c)'`.
pub fn second_moment_about(
    model: &dyn MomentModel,
    data: &DataSet,
    theta: &[f64],
    center: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    model.check_theta(theta)?;
    check_data(model, data)?;
    if center.len() != model.aug_len() {
        return Err(GmmError::Dimension(format!(
            "center has length {}, expected {}",
            center.len(),
            model.aug_len()
        )));
    }
    let (cross, _) = psi_deviation_products(model, data, theta, Some(center))?;
    Ok(symmetrize(&cross))
}

/// The stacked first-order-condition matrices at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct AMatrices {
    /// `[G'W, (Wg)' ⊗ I_p]`, `p × m(p+1)`.
    pub a: DMatrix<f64>,
    /// `[G; F]`, `m(p+1) × p`.
    pub gamma: DMatrix<f64>,
    /// `A Γ`.
    pub h: DMatrix<f64>,
}

/// Stack `[G; F]`.
pub fn gamma_matrix(jac: &DMatrix<f64>, curv: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, p) = jac.shape();
    let mut out = DMatrix::zeros(m * (p + 1), p);
    out.view_mut((0, 0), (m, p)).copy_from(jac);
    out.view_mut((m, 0), (m * p, p)).copy_from(curv);
    out
}

pub fn a_matrices(
    g: &DVector<f64>,
    jac: &DMatrix<f64>,
    curv: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<AMatrices> {
    let (m, p) = jac.shape();
    if g.len() != m || w.shape() != (m, m) || curv.shape() != (m * p, p) {
        return Err(GmmError::Dimension("inconsistent g, G, F, W shapes".into()));
    }
    let mut a = DMatrix::zeros(p, m * (p + 1));
    a.view_mut((0, 0), (p, m)).copy_from(&(jac.transpose() * w));
    a.view_mut((0, m), (p, m * p))
        .copy_from(&kron_row_identity(&(w * g), p));
    let gamma = gamma_matrix(jac, curv);
    let h = &a * &gamma;
    Ok(AMatrices { a, gamma, h })
}

/// `(G'WG)⁻¹ G'W S11 W G (G'WG)⁻¹`.
pub fn var_conventional(jac: &DMatrix<f64>, w: &DMatrix<f64>, s11: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gw = jac.transpose() * w;
    let bread = inverse(&(&gw * jac), InversePolicy::Strict, "G'WG")?;
    let meat = &gw * s11 * gw.transpose();
    Ok(symmetrize(&(&bread * meat * bread.transpose())))
}

/// `H⁻¹ A Σ A' H⁻ᵀ`.
pub fn var_misspec_robust(a: &AMatrices, sigma: &SigmaParts) -> Result<DMatrix<f64>> {
    let h_inv = inverse(&a.h, InversePolicy::Strict, "H = AΓ")?;
    let meat = &a.a * &sigma.sigma * a.a.transpose();
    Ok(symmetrize(&(&h_inv * meat * h_inv.transpose())))
}

/// Efficiency bound. Linear models use `(G' S11_2⁻¹ G)⁻¹`; otherwise `(Γ'Σ⁻¹Γ)⁻¹`.
pub fn var_me_bound(gamma: &DMatrix<f64>, sigma: &SigmaParts, is_linear: bool) -> Result<DMatrix<f64>> {
    if is_linear {
        let jac = gamma.rows(0, sigma.m).into_owned();
        var_me_linear(&jac, sigma)
    } else {
        var_me_general(gamma, &sigma.sigma)
    }
}

pub fn var_me_linear(jac: &DMatrix<f64>, sigma: &SigmaParts) -> Result<DMatrix<f64>> {
    let w = sym_inverse(&sigma.s11_2, InversePolicy::PseudoFallback, "Σ11,2")?;
    let info = jac.transpose() * w * jac;
    Ok(symmetrize(&inverse(&info, InversePolicy::Strict, "G'Σ11,2⁻¹G")?))
}

pub fn var_me_general(gamma: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s_inv = sym_inverse(sigma, InversePolicy::PseudoFallback, "Σ")?;
    let info = gamma.transpose() * s_inv * gamma;
    Ok(symmetrize(&inverse(&info, InversePolicy::Strict, "Γ'Σ⁻¹Γ")?))
}

/// Information split into a moment part and a residual-curvature part:
/// `G'S11⁻¹G + F_G' S22_1⁻¹ F_G` with `F_G = F − S21 S11⁻¹ G`.
pub fn me_information_decomposed(gamma: &DMatrix<f64>, sigma: &SigmaParts) -> Result<DMatrix<f64>> {
    let (m, p) = (sigma.m, sigma.p);
    let jac = gamma.rows(0, m).into_owned();
    let curv = gamma.rows(m, m * p).into_owned();
    let s11_inv = sym_inverse(&sigma.s11, InversePolicy::PseudoFallback, "Σ11")?;
    let s22_1_inv = sym_inverse(&sigma.s22_1, InversePolicy::PseudoFallback, "Σ22,1")?;
    let f_g = curv - sigma.s21() * &s11_inv * &jac;
    Ok(symmetrize(
        &(jac.transpose() * &s11_inv * &jac + f_g.transpose() * s22_1_inv * f_g),
    ))
}

pub fn var_me_decomposed(gamma: &DMatrix<f64>, sigma: &SigmaParts) -> Result<DMatrix<f64>> {
    let info = me_information_decomposed(gamma, sigma)?;
    Ok(symmetrize(&inverse(&info, InversePolicy::Strict, "decomposed information")?))
}

/// `(ΛΓ)⁻¹ ΛΣΛ' (ΛΓ)⁻ᵀ` for an arbitrary combination matrix `Λ`.
pub fn var_m_of_lambda(lambda: &DMatrix<f64>, gamma: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    if lambda.ncols() != d || gamma.nrows() != d || lambda.nrows() != gamma.ncols() {
        return Err(GmmError::Dimension("inconsistent Λ, Γ, Σ shapes".into()));
    }
    let bread = inverse(&(lambda * gamma), InversePolicy::Strict, "ΛΓ")?;
    let meat = lambda * sigma * lambda.transpose();
    Ok(symmetrize(&(&bread * meat * bread.transpose())))
}

/// Least-favorable bound over a finite set of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformBound {
    /// Per-coordinate supremum of the bound's diagonal.
    pub sup_variance: Vec<f64>,
    /// Index of the attaining candidate, per coordinate (first one on ties).
    pub argmax: Vec<usize>,
}

pub fn uniform_me_bound(fits: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<UniformBound> {
    let (_, first) = fits
        .first()
        .ok_or_else(|| GmmError::Input("empty candidate set".into()))?;
    let p = first.nrows();
    let mut sup = vec![f64::NEG_INFINITY; p];
    let mut arg = vec![0; p];
    for (i, (_, v)) in fits.iter().enumerate() {
        if v.shape() != (p, p) {
            return Err(GmmError::Dimension("candidate bounds differ in size".into()));
        }
        for k in 0..p {
            if v[(k, k)] > sup[k] {
                sup[k] = v[(k, k)];
                arg[k] = i;
            }
        }
    }
    Ok(UniformBound {
        sup_variance: sup,
        argmax: arg,
    })
}

/// Standard errors `sqrt(diag(V) / n)`.
pub fn standard_errors(v: &DMatrix<f64>, n: usize) -> DVector<f64> {
    DVector::from_iterator(
        v.nrows(),
        (0..v.nrows()).map(|k| (v[(k, k)].max(0.0) / n as f64).sqrt()),
    )
}

/// Row-stacked `vec(G')` of a Jacobian, re-exported for callers assembling `γ`.
pub fn vec_jacobian(jac: &DMatrix<f64>) -> DVector<f64> {
    stack_rows(jac)
}
