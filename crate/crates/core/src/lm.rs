//! Dense Levenberg-Marquardt with Marquardt diagonal scaling.
//!
//! Steps solve `(J^T J + lambda * D) dx = -J^T r` where `D` is the diagonal
//! of `J^T J` (floored so insensitive parameters stay well posed). A step is
//! accepted only if it lowers the cost, so accepted iterates are monotone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait LeastSquaresProblem {
    /// Residual vector, or `None` if `x` is infeasible.
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>>;

    fn jacobian(&self, x: &DVector<f64>, r: &DVector<f64>) -> DMatrix<f64>;

    /// Quantity compared against the convergence tolerance.
    fn error_measure(&self, r: &DVector<f64>) -> f64 {
        (r.norm_squared() / r.len().max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Damping {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_cap: f64,
}

impl Default for Damping {
    fn default() -> Self {
        Self { lambda_init: 1e-3, lambda_up: 10.0, lambda_down: 10.0, lambda_cap: 1e10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmSettings {
    pub max_iter: usize,
    pub damping: Damping,
    /// Stop once `error_measure` falls below this.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    LambdaCap,
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub x: DVector<f64>,
    pub residuals: DVector<f64>,
    pub cost: f64,
    pub error_measure: f64,
    pub iterations: usize,
    pub stop: StopReason,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Solves `(A + lambda * diag(A)) x = b`; `None` if the damped matrix is not
/// positive definite.
pub fn damped_solve(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let floor = (max_diag * 1e-12).max(1e-300);
    let mut m = a.clone();
    for i in 0..n {
        m[(i, i)] += lambda * a[(i, i)].max(floor);
    }
    let chol = m.cholesky()?;
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: DVector<f64>,
    settings: &LmSettings,
) -> Result<LmReport> {
    let mut x = x0;
    let mut r = problem
        .residuals(&x)
        .ok_or_else(|| Error::InvalidArgument("initial point is infeasible".into()))?;
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = settings.damping.lambda_init;
    let mut history = vec![cost];
    let mut iterations = 0;
    let stop = loop {
        if problem.error_measure(&r) < settings.tolerance {
            break StopReason::Converged;
        }
        if iterations >= settings.max_iter {
            break StopReason::MaxIterations;
        }
        iterations += 1;
        let j = problem.jacobian(&x, &r);
        let jt = j.transpose();
        let a = &jt * &j;
        let g = -(&jt * &r);
        let mut accepted = false;
        while lambda <= settings.damping.lambda_cap {
            if let Some(dx) = damped_solve(&a, &g, lambda) {
                let trial = &x + &dx;
                if let Some(rt) = problem.residuals(&trial) {
                    let ct = 0.5 * rt.norm_squared();
                    if ct < cost {
                        x = trial;
                        r = rt;
                        cost = ct;
                        history.push(cost);
                        lambda = (lambda / settings.damping.lambda_down).max(1e-12);
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= settings.damping.lambda_up;
        }
        if !accepted {
            break StopReason::LambdaCap;
        }
    };
    Ok(LmReport {
        error_measure: problem.error_measure(&r),
        x,
        residuals: r,
        cost,
        iterations,
        stop,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
            Some(DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]))
        }

        fn jacobian(&self, x: &DVector<f64>, _r: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
        }
    }

    fn settings() -> LmSettings {
        LmSettings { max_iter: 200, damping: Damping::default(), tolerance: 1e-12 }
    }

    #[test]
    fn solves_rosenbrock() {
        let rep = minimize(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &settings()).unwrap();
        assert_eq!(rep.stop, StopReason::Converged);
        assert!((rep.x[0] - 1.0).abs() < 1e-8 && (rep.x[1] - 1.0).abs() < 1e-8);
        assert!(rep.cost_history.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_iterations_returns_start() {
        let s = LmSettings { max_iter: 0, ..settings() };
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let rep = minimize(&Rosenbrock, x0.clone(), &s).unwrap();
        assert_eq!(rep.x, x0);
        assert_eq!(rep.stop, StopReason::MaxIterations);
    }

    struct Infeasible;

    impl LeastSquaresProblem for Infeasible {
        fn residuals(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
            None
        }

        fn jacobian(&self, _x: &DVector<f64>, _r: &DVector<f64>) -> DMatrix<f64> {
            unreachable!()
        }
    }

    #[test]
    fn infeasible_start_is_an_error() {
        assert!(minimize(&Infeasible, DVector::zeros(1), &settings()).is_err());
    }
}
