//! `phi1(Z) = Z^-1 (exp(Z) - I)` evaluations and the exponential Rosenbrock-Euler step.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stepper::{StepOutcome, StepStats};
use crate::system::{Jacobian, OdeSystem};

/// `phi1(Z)` as the top-right block of `exp([[Z, I], [0, 0]])`.
pub fn phi1_dense(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    assert_eq!(n, z.ncols(), "phi1 needs a square matrix");
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(z);
    aug.view_mut((0, n), (n, n)).fill_with_identity();
    aug.exp().view((0, n), (n, n)).into_owned()
}

/// `h phi1(h A) w` through `exp([[hA, w], [0, 0]])`.
pub fn phi1_dense_action(a: &DMatrix<f64>, w: &DVector<f64>, h: f64) -> DVector<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * h));
    aug.view_mut((0, n), (n, 1)).copy_from(w);
    aug.exp().column(n).rows(0, n).into_owned() * h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KrylovConfig {
    /// Maximum Arnoldi dimension.
    pub max_dim: usize,
    /// Relative tolerance on the residual estimate.
    pub tol: f64,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        Self { max_dim: 30, tol: 1e-10 }
    }
}

impl KrylovConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_dim == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("Krylov needs max_dim >= 1 and tol > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct KrylovResult {
    pub value: DVector<f64>,
    pub dim: usize,
    /// `beta h_{m+1,m} |e_m^T h phi1(h H_m) e_1|`; zero after a happy breakdown.
    pub error_estimate: f64,
    pub converged: bool,
}

/// `h phi1(h A) w` by a single Arnoldi sweep with modified Gram-Schmidt.
pub fn phi1_action_krylov<A>(apply: A, w: &DVector<f64>, h: f64, cfg: &KrylovConfig) -> Result<KrylovResult>
where
    A: Fn(&DVector<f64>) -> DVector<f64>,
{
    cfg.validate()?;
    let n = w.len();
    let beta = w.norm();
    if beta == 0.0 || h == 0.0 {
        return Ok(KrylovResult {
            value: DVector::zeros(n),
            dim: 0,
            error_estimate: 0.0,
            converged: true,
        });
    }
    let m_max = cfg.max_dim.min(n);
    let mut basis: Vec<DVector<f64>> = vec![w / beta];
    let mut hess = DMatrix::<f64>::zeros(m_max + 1, m_max);
    let mut scale = 0.0f64;
    let mut best: Option<KrylovResult> = None;
    for j in 0..m_max {
        let mut x = apply(&basis[j]);
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for (i, v) in basis.iter().enumerate() {
                let c = v.dot(&x);
                hess[(i, j)] += c;
                x.axpy(-c, v, 1.0);
            }
        }
        let next = x.norm();
        hess[(j + 1, j)] = next;
        scale = scale.max(hess.column(j).norm());
        let dim = j + 1;
        let small = hess.view((0, 0), (dim, dim)).into_owned();
        let e1 = DVector::from_fn(dim, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let coeffs = phi1_dense_action(&small, &e1, h);
        let breakdown = next <= 1e-12 * scale.max(f64::MIN_POSITIVE);
        let estimate = if breakdown { 0.0 } else { beta * next * coeffs[dim - 1].abs() };
        let mut value = DVector::zeros(n);
        for (i, v) in basis.iter().enumerate() {
            value.axpy(beta * coeffs[i], v, 1.0);
        }
        let converged = breakdown || estimate <= cfg.tol * value.norm().max(f64::MIN_POSITIVE);
        let result = KrylovResult {
            value,
            dim,
            error_estimate: estimate,
            converged,
        };
        if converged || dim == m_max {
            if !converged {
                log::warn!("Krylov phi1 reached dimension {dim} with error estimate {estimate:e}");
            }
            return Ok(result);
        }
        best = Some(result);
        basis.push(x / next);
    }
    Ok(best.expect("at least one Arnoldi step"))
}

/// Exponential Rosenbrock-Euler: `u1 = u0 + h phi1(h J(u0)) F(u0)`.
pub fn ere_step<S: OdeSystem>(sys: &S, t0: f64, u0: &DVector<f64>, h: f64, cfg: &KrylovConfig) -> Result<StepOutcome> {
    Error::check_dim(sys.dim(), u0.len())?;
    let f0 = sys.rhs(t0, u0)?;
    let jac = sys.jacobian(t0, u0)?;
    let k = phi1_action_krylov(|w| jac.apply(w), &f0, h, cfg)?;
    let stats = StepStats {
        rhs_evals: 1,
        jacobian_evals: 1,
        krylov_dim: k.dim,
        ..Default::default()
    };
    Ok(StepOutcome {
        u: u0 + k.value,
        stage: None,
        stats,
        divergence_flag: false,
    })
}

/// Exact `h phi1(h A_i)` for `A_i = [[0, 1], [-lambda_i, 0]]`.
///
/// Negative `lambda_i` use hyperbolic functions.
pub fn phi1_modal(lambdas: &[f64], h: f64) -> Vec<Matrix2<f64>> {
    lambdas.iter().map(|&l| phi1_mode(l, h)).collect()
}

fn phi1_mode(lambda: f64, h: f64) -> Matrix2<f64> {
    // With x = lambda h^2: s = h S(x), r = h^2 C(x), c - 1 = -x C(x), where
    // S(x) = sin(w h)/(w h) and C(x) = (1 - cos(w h))/(w h)^2 extend to x <= 0.
    let x = lambda * h * h;
    let (s, c) = if x.abs() < 1e-3 {
        (
            1.0 - x / 6.0 + x * x / 120.0 - x * x * x / 5040.0,
            0.5 - x / 24.0 + x * x / 720.0 - x * x * x / 40320.0,
        )
    } else if x > 0.0 {
        let th = x.sqrt();
        (th.sin() / th, (1.0 - th.cos()) / x)
    } else {
        let th = (-x).sqrt();
        (th.sinh() / th, (th.cosh() - 1.0) / (-x))
    };
    Matrix2::new(h * s, h * h * c, -x * c, h * s)
}
