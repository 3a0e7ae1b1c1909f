//! Implicit steps as minimization of an incremental potential
//! `phi(v) = 1/2 |v - v_tilde|_M^2 + Pi(q_hat + c v)`.

use nalgebra::DVector;

use super::{NewtonConfig, StepOutcome, StepStats};
use crate::error::{Error, NewtonError, Result};
use crate::linalg::{SparseOperator, SymmetricSolver};
use crate::system::{join_state, split_state, SecondOrderSystem};

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;

/// Backward Euler via `min 1/2 |v1 - v0|_M^2 + Pi(q0 + h v1)`.
pub fn optimize_be<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    u0: &DVector<f64>,
    h: f64,
    cfg: &NewtonConfig,
) -> Result<StepOutcome> {
    let n = sys.ndof();
    Error::check_dim(2 * n, u0.len())?;
    let (q0, v0) = split_state(u0, n);
    minimize(sys, &q0, &v0, h, cfg)
}

/// BDF2 via `min 1/2 |v1 - v_tilde|_M^2 + Pi(q_hat + 2h/3 v1)` with
/// `q_hat = q0 + (q0 - q_{-1})/3` and `v_tilde = v0 + (v0 - v_{-1})/3`.
pub fn optimize_bdf2<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    u0: &DVector<f64>,
    u_prev: &DVector<f64>,
    h: f64,
    cfg: &NewtonConfig,
) -> Result<StepOutcome> {
    let n = sys.ndof();
    Error::check_dim(2 * n, u0.len())?;
    Error::check_dim(2 * n, u_prev.len())?;
    let base = u0 + (u0 - u_prev) / 3.0;
    let (q_hat, v_tilde) = split_state(&base, n);
    minimize(sys, &q_hat, &v_tilde, 2.0 * h / 3.0, cfg)
}

fn minimize<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    q_hat: &DVector<f64>,
    v_tilde: &DVector<f64>,
    c: f64,
    cfg: &NewtonConfig,
) -> Result<StepOutcome> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {c}")));
    }
    cfg.validate()?;
    let n = sys.ndof();
    let m = sys.mass();
    let free: Vec<usize> = (0..n).filter(|&i| sys.free_mask()[i]).collect();
    let zero = DVector::zeros(n);
    let mut stats = StepStats::default();

    let positions = |v: &DVector<f64>| {
        let mut q = q_hat.clone();
        for &i in &free {
            q[i] += c * v[i];
        }
        q
    };
    let objective = |v: &DVector<f64>, q: &DVector<f64>| -> Result<f64> {
        let dv = v - v_tilde;
        let kinetic: f64 = free.iter().map(|&i| m[i] * dv[i] * dv[i]).sum();
        Ok(0.5 * kinetic + sys.potential(q)?)
    };
    // M^-1 grad phi on free DOFs; equals the residual of the implicit step.
    let scaled_gradient = |v: &DVector<f64>, q: &DVector<f64>| -> Result<DVector<f64>> {
        let f = sys.force(0.0, q, &zero)?;
        Ok(DVector::from_fn(free.len(), |k, _| {
            let i = free[k];
            v[i] - v_tilde[i] - c * f[i] / m[i]
        }))
    };

    let mut v = v_tilde.clone();
    let mut q = positions(&v);
    if !sys.admissible_positions(&q) {
        return Err(Error::InvalidParameter("initial guess of the optimizer is not admissible".into()));
    }
    let mut phi = objective(&v, &q)?;
    let mut r = scaled_gradient(&v, &q)?;
    stats.rhs_evals += 1;
    let target = cfg.abs_tol.max(cfg.rel_tol * r.norm());
    let m_f = DVector::from_iterator(free.len(), free.iter().map(|&i| m[i]));

    for iter in 0..cfg.max_iters {
        if r.norm() <= target {
            stats.newton_iterations = iter;
            return Ok(outcome(q, v, stats));
        }
        let g = r.component_mul(&m_f);
        let (k, _) = sys.tangent(&q, &zero)?;
        stats.jacobian_evals += 1;
        let hess = k
            .restrict(&free)
            .scaled(c * c)
            .linear_combination(1.0, &SparseOperator::from_diagonal(&m_f), 1.0)?;
        let mut p = match SymmetricSolver::new(&hess, sys.linear_solver()).and_then(|s| s.solve(&g)) {
            Ok(p) => -p,
            Err(_) => -r.clone(),
        };
        stats.factorizations += 1;
        stats.linear_solves += 1;
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            p = -r.clone();
            slope = g.dot(&p);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            if alpha * p.norm() < MIN_STEP {
                break;
            }
            let mut v_try = v.clone();
            for (k, &i) in free.iter().enumerate() {
                v_try[i] += alpha * p[k];
            }
            let q_try = positions(&v_try);
            if sys.admissible_positions(&q_try) {
                let phi_try = objective(&v_try, &q_try)?;
                if phi_try <= phi + ARMIJO * alpha * slope {
                    accepted = Some((v_try, q_try, phi_try));
                    break;
                }
            }
            alpha *= cfg.backtrack;
        }
        match accepted {
            Some((v1, q1, phi1)) => {
                v = v1;
                q = q1;
                phi = phi1;
                r = scaled_gradient(&v, &q)?;
                stats.rhs_evals += 1;
            }
            None if r.norm() <= 1e3 * target => {
                stats.newton_iterations = iter;
                return Ok(outcome(q, v, stats));
            }
            None => {
                return Err(NewtonError::Stalled {
                    iterations: iter,
                    residual: r.norm(),
                    last: Box::new(join_state(&q, &v)),
                }
                .into())
            }
        }
    }
    if r.norm() <= target {
        stats.newton_iterations = cfg.max_iters;
        return Ok(outcome(q, v, stats));
    }
    Err(NewtonError::MaxIterations {
        iterations: cfg.max_iters,
        residual: r.norm(),
        last: Box::new(join_state(&q, &v)),
    }
    .into())
}

fn outcome(q: DVector<f64>, v: DVector<f64>, stats: StepStats) -> StepOutcome {
    StepOutcome {
        u: join_state(&q, &v),
        stage: None,
        stats,
        divergence_flag: false,
    }
}
