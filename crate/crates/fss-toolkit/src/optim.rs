//! Damped least-squares (Levenberg–Marquardt) minimizer shared by the peak
//! and curve fitters.
//!
//! Schedule: λ starts at 1e-3, ×10 on a rejected step, ÷10 on an accepted
//! one; convergence when the relative cost decrease of an accepted step
//! falls below 1e-10 or after 200 iterations. The normal equations use
//! Marquardt scaling (λ on the diagonal of JᵀJ), which keeps mixed-unit
//! parameter vectors well conditioned.

use nalgebra::{DMatrix, DVector};

/// A weighted least-squares problem: residuals r(x) and their Jacobian.
/// The cost minimized is Σ rᵢ².
pub trait LeastSquaresProblem {
    fn n_residuals(&self) -> usize;
    fn n_params(&self) -> usize;
    /// Fill `out` (length `n_residuals`) with residuals at `params`.
    fn residuals(&self, params: &[f64], out: &mut [f64]);
    /// Fill `out` (n_residuals × n_params) with ∂rᵢ/∂xⱼ at `params`.
    fn jacobian(&self, params: &[f64], out: &mut DMatrix<f64>);
}

#[derive(Debug, Clone, Copy)]
pub struct LevMarOptions {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub cost_rel_tol: f64,
    pub max_iter: usize,
}

impl Default for LevMarOptions {
    fn default() -> Self {
        Self {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            cost_rel_tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LevMarFit {
    pub params: Vec<f64>,
    /// Final cost Σ rᵢ².
    pub cost: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// JᵀJ at the solution (Gauss–Newton curvature).
    pub jtj: DMatrix<f64>,
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Minimize Σ rᵢ(x)² starting from `x0`.
pub fn levmar<P: LeastSquaresProblem>(
    problem: &P,
    x0: &[f64],
    opts: &LevMarOptions,
) -> LevMarFit {
    let n = problem.n_residuals();
    let k = problem.n_params();
    assert_eq!(x0.len(), k, "initial guess has wrong length");

    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    let mut r_trial = vec![0.0; n];
    let mut jac = DMatrix::zeros(n, k);

    problem.residuals(&x, &mut r);
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        // Unusable start: report as non-converged at the initial point.
        problem.jacobian(&x, &mut jac);
        let jtj = jac.transpose() * &jac;
        return LevMarFit { params: x, cost, n_iter: 0, converged: false, jtj };
    }

    let mut lambda = opts.lambda0;
    let mut converged = false;
    let mut n_iter = 0;

    for iter in 0..opts.max_iter {
        n_iter = iter + 1;
        problem.jacobian(&x, &mut jac);
        let jtj = jac.transpose() * &jac;
        let residual_vec = DVector::from_column_slice(&r);
        let grad = jac.transpose() * residual_vec;

        // Essentially-zero cost: nothing left to minimize.
        if cost <= 1e-300 {
            converged = true;
            break;
        }

        let mut accepted = false;
        // Inner damping loop: raise λ until a step is accepted or damping
        // saturates.
        for _ in 0..64 {
            let mut damped = jtj.clone();
            for i in 0..k {
                let d = damped[(i, i)];
                damped[(i, i)] = d + lambda * d.max(1e-300);
            }
            let step = match damped.clone().cholesky() {
                Some(chol) => chol.solve(&grad),
                None => match damped.lu().solve(&grad) {
                    Some(s) => s,
                    None => {
                        lambda *= opts.lambda_up;
                        continue;
                    }
                },
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, si)| xi - si).collect();
            problem.residuals(&trial, &mut r_trial);
            let trial_cost = cost_of(&r_trial);
            if trial_cost.is_finite() && trial_cost < cost {
                let rel_drop = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                x = trial;
                r.copy_from_slice(&r_trial);
                cost = trial_cost;
                lambda = (lambda / opts.lambda_down).max(1e-12);
                accepted = true;
                if rel_drop < opts.cost_rel_tol {
                    converged = true;
                }
                break;
            }
            lambda *= opts.lambda_up;
            if lambda > 1e12 {
                break;
            }
        }

        if !accepted {
            // Damping saturated without improvement: treat the current point
            // as the (local) optimum.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    problem.jacobian(&x, &mut jac);
    let jtj = jac.transpose() * &jac;
    LevMarFit { params: x, cost, n_iter, converged, jtj }
}

/// Parameter covariance from the curvature at the optimum: (JᵀJ)⁻¹ scaled
/// by max(1, χ²_red). Uses an SVD pseudo-inverse so degenerate directions
/// yield large-but-finite variances instead of failures.
pub fn covariance_from_jtj(jtj: &DMatrix<f64>, chi2_reduced: f64) -> DMatrix<f64> {
    let k = jtj.nrows();
    let svd = jtj.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = max_sv * 1e-12;
    let inv = svd
        .pseudo_inverse(tol.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(k, k));
    inv * chi2_reduced.max(1.0)
}
