use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, NewtonError, Result};
use crate::linalg::LinearSolve;

/// Row scaling `B` of the merit function `1/2 |B g|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeritScaling {
    #[default]
    Identity,
    /// Inverse row norms of the linearized system.
    DiagonalRows,
    /// Inverse of the Jacobian at the initial guess.
    FrozenJacobianInverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    pub max_iters: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub scaling: MeritScaling,
    /// Step reduction factor of the backtracking line search.
    pub backtrack: f64,
    pub max_halvings: usize,
    /// Reuse the Jacobian factorization of the initial guess.
    pub chord: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            scaling: MeritScaling::Identity,
            backtrack: 0.5,
            max_halvings: 40,
            chord: false,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter(
                "Newton needs max_iters >= 1 and positive tolerances".into(),
            ));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "backtracking factor must lie in (0, 1), got {}",
                self.backtrack
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub factorizations: usize,
    pub residual_evals: usize,
}

const MIN_STEP: f64 = 1e-12;
const ARMIJO: f64 = 1e-4;

/// Newton's method with backtracking on `1/2 |B g|^2`.
///
/// `jacobian` returns a prepared solver for `g'(x)`; `admissible` filters
/// trial points of the line search.
pub fn newton_solve<R, J>(residual: R, jacobian: J, guess: DVector<f64>, cfg: &NewtonConfig) -> Result<NewtonSolution>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Result<Box<dyn LinearSolve>>,
{
    newton_solve_filtered(residual, jacobian, |_| true, guess, cfg)
}

pub fn newton_solve_filtered<R, J, A>(
    mut residual: R,
    mut jacobian: J,
    admissible: A,
    guess: DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<NewtonSolution>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Result<Box<dyn LinearSolve>>,
    A: Fn(&DVector<f64>) -> bool,
{
    cfg.validate()?;
    let mut x = guess;
    let mut g = residual(&x)?;
    let mut evals = 1;
    let g0 = g.norm();
    let target = cfg.abs_tol.max(cfg.rel_tol * g0);
    let done = |x: DVector<f64>, it: usize, r: f64, f: usize, e: usize| NewtonSolution {
        x,
        iterations: it,
        residual_norm: r,
        factorizations: f,
        residual_evals: e,
    };
    if g0 <= target {
        return Ok(done(x, 0, g0, 0, evals));
    }

    let mut factor: Option<Rc<dyn LinearSolve>> = None;
    let mut frozen: Option<Rc<dyn LinearSolve>> = None;
    let mut factorizations = 0;
    for it in 1..=cfg.max_iters {
        if factor.is_none() || !cfg.chord {
            factor = Some(Rc::from(jacobian(&x)?));
            factorizations += 1;
        }
        let lin = factor.clone().expect("factor present");
        if cfg.scaling == MeritScaling::FrozenJacobianInverse && frozen.is_none() {
            frozen = Some(lin.clone());
        }
        let dx = -lin.solve(&g)?;
        let scale = match cfg.scaling {
            MeritScaling::DiagonalRows => lin
                .row_norms()
                .map(|r| r.map(|v| if v > 0.0 { 1.0 / v } else { 1.0 })),
            _ => None,
        };
        let merit = |g: &DVector<f64>| -> Result<f64> {
            Ok(0.5
                * match (cfg.scaling, &scale, &frozen) {
                    (MeritScaling::DiagonalRows, Some(s), _) => g.component_mul(s).norm_squared(),
                    (MeritScaling::FrozenJacobianInverse, _, Some(f)) => f.solve(g)?.norm_squared(),
                    _ => g.norm_squared(),
                })
        };
        let phi0 = merit(&g)?;
        let step_norm = dx.norm();
        let mut alpha = 1.0;
        let mut halvings = 0;
        loop {
            let trial = &x + &dx * alpha;
            if admissible(&trial) {
                let gt = residual(&trial)?;
                evals += 1;
                let accept = gt.norm() <= target || merit(&gt)? <= (1.0 - 2.0 * ARMIJO * alpha) * phi0;
                if accept {
                    x = trial;
                    g = gt;
                    break;
                }
            }
            alpha *= cfg.backtrack;
            halvings += 1;
            if alpha * step_norm < MIN_STEP || halvings > cfg.max_halvings {
                let r = g.norm();
                // Round-off floor just above tolerance.
                if r <= 1e3 * target {
                    log::debug!("Newton accepted at round-off floor (residual {r:e}, target {target:e})");
                    return Ok(done(x, it, r, factorizations, evals));
                }
                return Err(NewtonError::Stalled {
                    iterations: it,
                    residual: r,
                    last: Box::new(x),
                }
                .into());
            }
        }
        let r = g.norm();
        if r <= target {
            return Ok(done(x, it, r, factorizations, evals));
        }
    }
    Err(NewtonError::MaxIterations {
        iterations: cfg.max_iters,
        residual: g.norm(),
        last: Box::new(x),
    }
    .into())
}

/// Gauss-Newton on `1/2 |g|^2` for dense Jacobians. Converges to roots when
/// they exist; otherwise stalls at a stationary point of the merit.
pub fn newton_least_squares<R, J>(
    mut residual: R,
    mut jacobian: J,
    guess: DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<NewtonSolution>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    cfg.validate()?;
    let mut x = guess;
    let mut g = residual(&x)?;
    let mut evals = 1;
    let target = cfg.abs_tol.max(cfg.rel_tol * g.norm());
    let stalled = |it: usize, g: &DVector<f64>, x: DVector<f64>| -> Error {
        NewtonError::Stalled {
            iterations: it,
            residual: g.norm(),
            last: Box::new(x),
        }
        .into()
    };
    for it in 1..=cfg.max_iters {
        if g.norm() <= target {
            return Ok(NewtonSolution {
                x,
                iterations: it - 1,
                residual_norm: g.norm(),
                factorizations: it - 1,
                residual_evals: evals,
            });
        }
        let jm = jacobian(&x)?;
        let grad = jm.transpose() * &g;
        if grad.norm() <= f64::EPSILON * g.norm() {
            return Err(stalled(it, &g, x));
        }
        let dx = -jm
            .svd(true, true)
            .solve(&g, 1e-14)
            .map_err(|e| Error::LinearSolve(e.to_string()))?;
        let phi0 = 0.5 * g.norm_squared();
        let slope = grad.dot(&dx);
        let mut alpha = 1.0;
        loop {
            let trial = &x + &dx * alpha;
            let gt = residual(&trial)?;
            evals += 1;
            let phi_t = 0.5 * gt.norm_squared();
            // Minimizer of the quadratic through phi0, slope and phi_t.
            let quad = -slope * alpha * alpha / (2.0 * (phi_t - phi0 - slope * alpha));
            if phi_t <= phi0 + ARMIJO * alpha * slope {
                // Merit no longer decreases in floating point.
                if phi_t >= phi0 {
                    return Err(stalled(it, &g, x));
                }
                x = trial;
                g = gt;
                if alpha < 1.0 && quad.is_finite() && quad > 0.0 && quad < alpha {
                    let refined = &x + &dx * (quad - alpha);
                    let gr = residual(&refined)?;
                    evals += 1;
                    if gr.norm() < g.norm() {
                        x = refined;
                        g = gr;
                    }
                }
                break;
            }
            alpha = if quad.is_finite() {
                quad.clamp(0.1 * alpha, cfg.backtrack * alpha)
            } else {
                0.1 * alpha
            };
            if alpha * dx.norm() < MIN_STEP {
                return Err(stalled(it, &g, x));
            }
        }
        if alpha * dx.norm() < MIN_STEP {
            return Err(stalled(it, &g, x));
        }
    }
    if g.norm() <= target {
        return Ok(NewtonSolution {
            x,
            iterations: cfg.max_iters,
            residual_norm: g.norm(),
            factorizations: cfg.max_iters,
            residual_evals: evals,
        });
    }
    Err(NewtonError::MaxIterations {
        iterations: cfg.max_iters,
        residual: g.norm(),
        last: Box::new(x),
    }
    .into())
}
