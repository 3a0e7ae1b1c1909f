//! Small reference systems with closed-form behaviour.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::SparseOperator;
use crate::system::{DenseJacobian, LinearSecondOrder, OdeSystem};

/// `u' = A u + b(t)` with constant `A`.
#[derive(Debug, Clone)]
pub struct LinearOde {
    pub a: DMatrix<f64>,
    pub forcing: Forcing,
}

/// Time-dependent source term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Forcing {
    None,
    /// `sin t` added to every component.
    Sine,
    /// `2 t` added to every component.
    Ramp,
}

impl Forcing {
    fn at(self, t: f64) -> f64 {
        match self {
            Forcing::None => 0.0,
            Forcing::Sine => t.sin(),
            Forcing::Ramp => 2.0 * t,
        }
    }
}

impl LinearOde {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a, forcing: Forcing::None }
    }

    /// Dahlquist test equation `u' = lambda u`.
    pub fn scalar(lambda: f64) -> Self {
        Self::new(DMatrix::from_element(1, 1, lambda))
    }

    /// `u' = -u + sin t`.
    pub fn forced_decay() -> Self {
        Self {
            a: DMatrix::from_element(1, 1, -1.0),
            forcing: Forcing::Sine,
        }
    }

    /// Exact solution of [`LinearOde::forced_decay`].
    pub fn forced_decay_exact(u0: f64, t: f64) -> f64 {
        (u0 + 0.5) * (-t).exp() + 0.5 * (t.sin() - t.cos())
    }

    /// `u' = 2 t`, solved exactly by methods of order two.
    pub fn ramp() -> Self {
        Self {
            a: DMatrix::zeros(1, 1),
            forcing: Forcing::Ramp,
        }
    }

    /// Undamped oscillator `x'' = -omega^2 x` as `u = (x, x')`.
    pub fn oscillator(omega: f64) -> Self {
        Self::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -omega * omega, 0.0]))
    }
}

impl OdeSystem for LinearOde {
    type Jac = DenseJacobian;

    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn rhs(&self, t: f64, u: &DVector<f64>) -> Result<DVector<f64>> {
        crate::Error::check_dim(self.dim(), u.len())?;
        Ok(&self.a * u + DVector::from_element(u.len(), self.forcing.at(t)))
    }

    fn jacobian(&self, _t: f64, _u: &DVector<f64>) -> Result<DenseJacobian> {
        Ok(DenseJacobian(self.a.clone()))
    }
}

/// Two uncoupled unit-mass springs with stiffness `k_soft` and `k_stiff`.
pub fn two_mode_rig(k_soft: f64, k_stiff: f64) -> Result<LinearSecondOrder> {
    LinearSecondOrder::new(
        DVector::from_element(2, 1.0),
        SparseOperator::from_diagonal(&DVector::from_vec(vec![k_soft, k_stiff])),
    )
}

/// Single spring with mass `m` and stiffness `k`.
pub fn spring(m: f64, k: f64) -> Result<LinearSecondOrder> {
    LinearSecondOrder::new(
        DVector::from_element(1, m),
        SparseOperator::from_diagonal(&DVector::from_element(1, k)),
    )
}
