//! Damped Newton iterations for smooth minimization and root finding.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};
use crate::linalg::{inverse, min_eigenvalue, InversePolicy};

/// Newton tuning knobs shared by every iterative estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Convergence threshold on the scaled gradient (or residual) sup-norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point; `None` means the zero vector.
    pub start: Option<Vec<f64>>,
    /// Half-width of the multistart box around the start, per coordinate.
    pub grid_radius: f64,
    /// Points per coordinate of the multistart grid.
    pub grid_points: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            start: None,
            grid_radius: 3.0,
            grid_points: 9,
        }
    }
}

impl SolverOptions {
    pub fn with_start(mut self, start: &[f64]) -> Self {
        self.start = Some(start.to_vec());
        self
    }

    pub(crate) fn start_vector(&self, p: usize) -> Result<DVector<f64>> {
        match &self.start {
            None => Ok(DVector::zeros(p)),
            Some(s) if s.len() == p => Ok(DVector::from_column_slice(s)),
            Some(s) => Err(GmmError::Dimension(format!(
                "start has length {}, expected {p}",
                s.len()
            ))),
        }
    }
}

/// Objective value with gradient and Hessian at a point.
pub struct Eval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    /// Convergence is declared when `‖grad‖∞ ≤ tol · scale`.
    pub scale: f64,
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Residual vector with its Jacobian.
pub struct RootEval {
    pub resid: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub scale: f64,
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;
/// Looser FOC threshold accepted when the line search stalls at machine precision.
const STALL_TOL: f64 = 1e-8;

fn descent_direction(e: &Eval) -> DVector<f64> {
    let p = e.grad.len();
    let hess_ok = e.hess.iter().all(|v| v.is_finite()) && min_eigenvalue(&e.hess) > 0.0;
    if hess_ok {
        if let Ok(inv) = inverse(&e.hess, InversePolicy::Strict, "Hessian") {
            let d = -(inv * &e.grad);
            if d.dot(&e.grad) < 0.0 {
                return d;
            }
        }
    }
    // Levenberg-style shift toward steepest descent when the Hessian is indefinite.
    let shift = (-min_eigenvalue(&e.hess)).max(0.0) + 1e-8 * (1.0 + e.hess.amax());
    let shifted = &e.hess + DMatrix::identity(p, p) * shift;
    match inverse(&shifted, InversePolicy::Strict, "shifted Hessian") {
        Ok(inv) => -(inv * &e.grad),
        Err(_) => -e.grad.clone(),
    }
}

/// Minimize with Newton steps and Armijo backtracking.
pub fn minimize<F>(f: F, start: DVector<f64>, opts: &SolverOptions) -> Result<Solution>
where
    F: Fn(&DVector<f64>) -> Result<Eval>,
{
    let mut x = start;
    let mut e = f(&x)?;
    for it in 0..opts.max_iter {
        if !e.value.is_finite() {
            break;
        }
        if e.grad.amax() <= opts.tol * e.scale {
            return Ok(Solution {
                x,
                value: e.value,
                iterations: it,
            });
        }
        let d = descent_direction(&e);
        let slope = e.grad.dot(&d);
        let mut step = 1.0;
        let mut accepted = None;
        while step >= MIN_STEP {
            let cand = &x + &d * step;
            if let Ok(ce) = f(&cand) {
                if ce.value.is_finite() && ce.value <= e.value + ARMIJO * step * slope {
                    accepted = Some((cand, ce));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, ce)) => {
                x = cand;
                e = ce;
            }
            None => {
                if e.grad.amax() <= STALL_TOL * e.scale {
                    return Ok(Solution {
                        x,
                        value: e.value,
                        iterations: it,
                    });
                }
                return Err(GmmError::NonConvergence(format!(
                    "line search failed at iteration {it} (gradient {:.3e})",
                    e.grad.amax()
                )));
            }
        }
    }
    if e.value.is_finite() && e.grad.amax() <= STALL_TOL * e.scale {
        return Ok(Solution {
            x,
            value: e.value,
            iterations: opts.max_iter,
        });
    }
    Err(GmmError::NonConvergence(format!(
        "no convergence within {} iterations",
        opts.max_iter
    )))
}

/// Solve `r(x) = 0` with Newton steps and backtracking on `‖r‖²`.
pub fn find_root<F>(f: F, start: DVector<f64>, opts: &SolverOptions) -> Result<Solution>
where
    F: Fn(&DVector<f64>) -> Result<RootEval>,
{
    let mut x = start;
    let mut e = f(&x)?;
    for it in 0..opts.max_iter {
        let norm2 = e.resid.norm_squared();
        if !norm2.is_finite() {
            break;
        }
        if e.resid.amax() <= opts.tol * e.scale {
            return Ok(Solution {
                x,
                value: norm2,
                iterations: it,
            });
        }
        let inv = inverse(&e.jac, InversePolicy::Strict, "root Jacobian")?;
        let d = -(inv * &e.resid);
        let mut step = 1.0;
        let mut accepted = None;
        while step >= MIN_STEP {
            let cand = &x + &d * step;
            if let Ok(ce) = f(&cand) {
                let c2 = ce.resid.norm_squared();
                if c2.is_finite() && c2 <= (1.0 - 2.0 * ARMIJO * step) * norm2 {
                    accepted = Some((cand, ce));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, ce)) => {
                x = cand;
                e = ce;
            }
            None => {
                if e.resid.amax() <= STALL_TOL * e.scale {
                    return Ok(Solution {
                        x,
                        value: norm2,
                        iterations: it,
                    });
                }
                return Err(GmmError::NonConvergence(format!(
                    "root search stalled at iteration {it} (residual {:.3e})",
                    e.resid.amax()
                )));
            }
        }
    }
    if e.resid.amax() <= STALL_TOL * e.scale {
        return Ok(Solution {
            x,
            value: e.resid.norm_squared(),
            iterations: opts.max_iter,
        });
    }
    Err(GmmError::NonConvergence(format!(
        "no root within {} iterations",
        opts.max_iter
    )))
}

/// Lexicographic comparison used to break ties deterministically.
pub(crate) fn lex_less(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Grid of `k^p` points over `center ± radius`, in lexicographic order.
pub(crate) fn grid_points(center: &DVector<f64>, radius: f64, k: usize) -> Vec<DVector<f64>> {
    let p = center.len();
    let k = k.max(2);
    let total = k.checked_pow(p as u32).unwrap_or(usize::MAX);
    if total > 100_000 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut pt = DVector::zeros(p);
        for j in (0..p).rev() {
            let c = rem % k;
            rem /= k;
            pt[j] = center[j] - radius + 2.0 * radius * c as f64 / (k - 1) as f64;
        }
        out.push(pt);
    }
    out
}

/// Minimize from the start, falling back to a multistart grid on failure.
///
/// Grid starts are ranked by their objective value; the converged solution
/// with the lowest objective wins, ties going to the lexicographically
/// smallest point.
pub fn minimize_multistart<F>(f: F, opts: &SolverOptions, p: usize) -> Result<Solution>
where
    F: Fn(&DVector<f64>) -> Result<Eval>,
{
    let start = opts.start_vector(p)?;
    let first_err = match minimize(&f, start.clone(), opts) {
        Ok(s) => return Ok(s),
        Err(e) => e,
    };
    log::debug!("primary Newton solve failed ({first_err}); trying multistart grid");
    let mut ranked: Vec<(f64, DVector<f64>)> = grid_points(&start, opts.grid_radius, opts.grid_points)
        .into_iter()
        .filter_map(|pt| match f(&pt) {
            Ok(e) if e.value.is_finite() => Some((e.value, pt)),
            _ => None,
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| {
            if lex_less(&a.1, &b.1) {
                std::cmp::Ordering::Less
            } else if lex_less(&b.1, &a.1) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        })
    });
    let mut best: Option<Solution> = None;
    for (_, pt) in ranked.into_iter().take(8) {
        if let Ok(s) = minimize(&f, pt, opts) {
            let better = match &best {
                None => true,
                Some(b) => s.value < b.value || (s.value == b.value && lex_less(&s.x, &b.x)),
            };
            if better {
                best = Some(s);
            }
        }
    }
    best.ok_or(first_err)
}
