//! Moment models and the augmented moment vector.
//!
//! A model evaluates, for one raw observation row and a parameter vector,
//! the moments `g(x, θ)` (length `m`), the Jacobian `G(x, θ) = ∂g/∂θ'`
//! (`m × p`) and the curvature `F(x, θ) = ∂vec(G')/∂θ'` (`m p × p`).
//!
//! `vec(G')` is always row-stacked: entry `j p + k` is `G[j, k]`. The
//! augmented vector is `ψ = [g; vec(G')]` of length `m (p + 1)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};

/// Observations stored row-major. Every row has the same arity.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    cols: usize,
    values: Vec<f64>,
}

impl DataSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| GmmError::InsufficientData("dataset has no rows".into()))?;
        let cols = first.len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(GmmError::Dimension(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::from_row_major(cols, values)
    }

    pub fn from_row_major(cols: usize, values: Vec<f64>) -> Result<Self> {
        if cols == 0 || values.is_empty() {
            return Err(GmmError::InsufficientData("dataset has no rows".into()));
        }
        if values.len() % cols != 0 {
            return Err(GmmError::Dimension(format!(
                "{} values do not fill rows of width {cols}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GmmError::Input("dataset contains missing or non-finite values".into()));
        }
        Ok(Self { cols, values })
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// New dataset made of the given rows (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> DataSet {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        DataSet {
            cols: self.cols,
            values,
        }
    }
}

/// Stack of `g` and row-stacked `vec(G')`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedVec {
    m: usize,
    values: DVector<f64>,
}

impl AugmentedVec {
    pub fn new(m: usize, p: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != m * (p + 1) {
            return Err(GmmError::Dimension(format!(
                "augmented vector has length {}, expected {}",
                values.len(),
                m * (p + 1)
            )));
        }
        Ok(Self { m, values })
    }

    pub fn moments(&self) -> DVector<f64> {
        self.values.rows(0, self.m).into_owned()
    }

    pub fn jacobian_block(&self) -> DVector<f64> {
        self.values.rows(self.m, self.values.len() - self.m).into_owned()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A per-observation moment function with analytic derivatives.
///
/// Implementations write into caller-provided buffers so that sample means
/// over many rows allocate nothing per row. Buffers are row-major.
pub trait MomentModel: Send + Sync {
    fn n_moments(&self) -> usize;
    fn n_params(&self) -> usize;
    /// `G` does not depend on `θ` and `F` is identically zero.
    fn is_linear(&self) -> bool;
    /// Number of raw values each observation row carries.
    fn row_len(&self) -> usize;

    fn moments_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]);
    fn jacobian_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]);
    fn curvature_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]);

    /// Instrument vector of the row, for models that have one.
    fn instruments<'a>(&self, _row: &'a [f64]) -> Option<&'a [f64]> {
        None
    }

    fn aug_len(&self) -> usize {
        self.n_moments() * (self.n_params() + 1)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(GmmError::Dimension(format!(
                "θ has length {}, model has {} parameters",
                theta.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.row_len() {
            return Err(GmmError::Dimension(format!(
                "observation has {} values, model expects {}",
                row.len(),
                self.row_len()
            )));
        }
        Ok(())
    }

    fn eval_g(&self, row: &[f64], theta: &[f64]) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        self.check_row(row)?;
        let mut out = vec![0.0; self.n_moments()];
        self.moments_into(row, theta, &mut out);
        Ok(DVector::from_vec(out))
    }

    fn eval_jacobian(&self, row: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.check_row(row)?;
        let (m, p) = (self.n_moments(), self.n_params());
        let mut out = vec![0.0; m * p];
        self.jacobian_into(row, theta, &mut out);
        Ok(DMatrix::from_row_slice(m, p, &out))
    }

    fn eval_curvature(&self, row: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.check_row(row)?;
        let (m, p) = (self.n_moments(), self.n_params());
        let mut out = vec![0.0; m * p * p];
        self.curvature_into(row, theta, &mut out);
        Ok(DMatrix::from_row_slice(m * p, p, &out))
    }

    fn eval_psi(&self, row: &[f64], theta: &[f64]) -> Result<AugmentedVec> {
        self.check_theta(theta)?;
        self.check_row(row)?;
        let m = self.n_moments();
        let mut out = vec![0.0; self.aug_len()];
        let (g, jac) = out.split_at_mut(m);
        self.moments_into(row, theta, g);
        self.jacobian_into(row, theta, jac);
        AugmentedVec::new(m, self.n_params(), DVector::from_vec(out))
    }
}

fn split_row(row: &[f64], p: usize) -> (f64, &[f64], &[f64]) {
    (row[0], &row[1..1 + p], &row[1 + p..])
}

/// Linear instrumental variables: `g(x, θ) = z (y − x'θ)`.
///
/// Row layout: `[y, x_1..x_p, z_1..z_m]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIv {
    p: usize,
    m: usize,
}

impl LinearIv {
    pub fn new(p: usize, m: usize) -> Result<Self> {
        if p == 0 || m < p {
            return Err(GmmError::Dimension(format!(
                "need m ≥ p ≥ 1, got m = {m}, p = {p}"
            )));
        }
        Ok(Self { p, m })
    }
}

impl MomentModel for LinearIv {
    fn n_moments(&self) -> usize {
        self.m
    }
    fn n_params(&self) -> usize {
        self.p
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn row_len(&self) -> usize {
        1 + self.p + self.m
    }

    fn moments_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (y, x, z) = split_row(row, self.p);
        let resid = y - x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
        for (o, zj) in out.iter_mut().zip(z) {
            *o = zj * resid;
        }
    }

    fn jacobian_into(&self, row: &[f64], _theta: &[f64], out: &mut [f64]) {
        let (_, x, z) = split_row(row, self.p);
        for (j, zj) in z.iter().enumerate() {
            for (k, xk) in x.iter().enumerate() {
                out[j * self.p + k] = -zj * xk;
            }
        }
    }

    fn curvature_into(&self, _row: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn instruments<'a>(&self, row: &'a [f64]) -> Option<&'a [f64]> {
        Some(&row[1 + self.p..])
    }
}

/// Exponential-mean instrumental variables: `g(x, θ) = z (y − exp(x'θ))`.
///
/// Row layout: `[y, x_1..x_p, z_1..z_m]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpIv {
    p: usize,
    m: usize,
}

impl ExpIv {
    pub fn new(p: usize, m: usize) -> Result<Self> {
        if p == 0 || m < p {
            return Err(GmmError::Dimension(format!(
                "need m ≥ p ≥ 1, got m = {m}, p = {p}"
            )));
        }
        Ok(Self { p, m })
    }

    fn index(x: &[f64], theta: &[f64]) -> f64 {
        x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>().exp()
    }
}

impl MomentModel for ExpIv {
    fn n_moments(&self) -> usize {
        self.m
    }
    fn n_params(&self) -> usize {
        self.p
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn row_len(&self) -> usize {
        1 + self.p + self.m
    }

    fn moments_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (y, x, z) = split_row(row, self.p);
        let resid = y - Self::index(x, theta);
        for (o, zj) in out.iter_mut().zip(z) {
            *o = zj * resid;
        }
    }

    fn jacobian_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (_, x, z) = split_row(row, self.p);
        let mu = Self::index(x, theta);
        for (j, zj) in z.iter().enumerate() {
            for (k, xk) in x.iter().enumerate() {
                out[j * self.p + k] = -zj * xk * mu;
            }
        }
    }

    fn curvature_into(&self, row: &[f64], theta: &[f64], out: &mut [f64]) {
        let (_, x, z) = split_row(row, self.p);
        let p = self.p;
        let mu = Self::index(x, theta);
        for (j, zj) in z.iter().enumerate() {
            for k in 0..p {
                for l in 0..p {
                    out[(j * p + k) * p + l] = -zj * x[k] * x[l] * mu;
                }
            }
        }
    }

    fn instruments<'a>(&self, row: &'a [f64]) -> Option<&'a [f64]> {
        Some(&row[1 + self.p..])
    }
}

/// Sample averages of the moment, Jacobian, curvature and augmented vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeans {
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub curv: DMatrix<f64>,
    pub psi: DVector<f64>,
}

pub(crate) fn check_data(model: &dyn MomentModel, data: &DataSet) -> Result<()> {
    if data.cols() != model.row_len() {
        return Err(GmmError::Dimension(format!(
            "dataset rows have {} values, model expects {}",
            data.cols(),
            model.row_len()
        )));
    }
    Ok(())
}

pub fn sample_means(model: &dyn MomentModel, data: &DataSet, theta: &[f64]) -> Result<SampleMeans> {
    model.check_theta(theta)?;
    check_data(model, data)?;
    let (m, p) = (model.n_moments(), model.n_params());
    let n = data.n();
    let mut g_acc = vec![0.0; m];
    let mut j_acc = vec![0.0; m * p];
    let mut f_acc = vec![0.0; m * p * p];
    let mut g_buf = vec![0.0; m];
    let mut j_buf = vec![0.0; m * p];
    let mut f_buf = vec![0.0; m * p * p];
    let linear = model.is_linear();
    for row in data.rows() {
        model.moments_into(row, theta, &mut g_buf);
        model.jacobian_into(row, theta, &mut j_buf);
        add_into(&mut g_acc, &g_buf);
        add_into(&mut j_acc, &j_buf);
        if !linear {
            model.curvature_into(row, theta, &mut f_buf);
            add_into(&mut f_acc, &f_buf);
        }
    }
    let inv_n = 1.0 / n as f64;
    let g = DVector::from_vec(g_acc) * inv_n;
    let jac_flat = DVector::from_vec(j_acc) * inv_n;
    let jac = DMatrix::from_row_slice(m, p, jac_flat.as_slice());
    let curv = DMatrix::from_row_slice(m * p, p, &f_acc) * inv_n;
    let mut psi = DVector::zeros(m * (p + 1));
    psi.rows_mut(0, m).copy_from(&g);
    psi.rows_mut(m, m * p).copy_from(&jac_flat);
    Ok(SampleMeans { g, jac, curv, psi })
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// `n × m(p+1)` matrix whose rows are `ψ(x_i, θ)'`.
pub fn psi_rows(model: &dyn MomentModel, data: &DataSet, theta: &[f64]) -> Result<DMatrix<f64>> {
    model.check_theta(theta)?;
    check_data(model, data)?;
    let m = model.n_moments();
    let d = model.aug_len();
    let n = data.n();
    let mut out = vec![0.0; n * d];
    for (row, chunk) in data.rows().zip(out.chunks_exact_mut(d)) {
        let (g, jac) = chunk.split_at_mut(m);
        model.moments_into(row, theta, g);
        model.jacobian_into(row, theta, jac);
    }
    Ok(DMatrix::from_row_slice(n, d, &out))
}

/// Central-difference step used by the derivative validators.
pub fn fd_step(theta_j: f64) -> f64 {
    1e-5 * (1.0 + theta_j.abs())
}

/// Central finite differences of `g` with respect to `θ` (an `m × p` matrix).
pub fn fd_jacobian(model: &dyn MomentModel, row: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
    let (m, p) = (model.n_moments(), model.n_params());
    let mut out = DMatrix::zeros(m, p);
    let mut t = theta.to_vec();
    for l in 0..p {
        let h = fd_step(theta[l]);
        t[l] = theta[l] + h;
        let up = model.eval_g(row, &t)?;
        t[l] = theta[l] - h;
        let dn = model.eval_g(row, &t)?;
        t[l] = theta[l];
        out.set_column(l, &((up - dn) / (2.0 * h)));
    }
    Ok(out)
}

/// Central finite differences of the analytic row-stacked `vec(G')` (an `m p × p` matrix).
pub fn fd_curvature(model: &dyn MomentModel, row: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
    let (m, p) = (model.n_moments(), model.n_params());
    let mut out = DMatrix::zeros(m * p, p);
    let mut t = theta.to_vec();
    for l in 0..p {
        let h = fd_step(theta[l]);
        t[l] = theta[l] + h;
        let up = crate::linalg::stack_rows(&model.eval_jacobian(row, &t)?);
        t[l] = theta[l] - h;
        let dn = crate::linalg::stack_rows(&model.eval_jacobian(row, &t)?);
        t[l] = theta[l];
        out.set_column(l, &((up - dn) / (2.0 * h)));
    }
    Ok(out)
}

/// Relative discrepancy `‖a − b‖∞ / max(‖b‖∞, 1)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Worst relative errors of the analytic `G` and `F` against finite differences.
pub fn derivative_check(model: &dyn MomentModel, row: &[f64], theta: &[f64]) -> Result<(f64, f64)> {
    let g_err = relative_error(&model.eval_jacobian(row, theta)?, &fd_jacobian(model, row, theta)?);
    let f_err = relative_error(&model.eval_curvature(row, theta)?, &fd_curvature(model, row, theta)?);
    Ok((g_err, f_err))
}
