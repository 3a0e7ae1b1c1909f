//! Additive split `F = G + H` with `G` the modal-subspace part and the
//! matching Jacobians `J_G`, `J_H = J - J_G`.

use nalgebra::{DMatrix, DVector};

use super::eigen::ModalSplit;
use super::smw::{LowRankBlock, LowRankCorrection};
use crate::error::{Error, Result};
use crate::expo::phi1_modal;
use crate::linalg::LinearSolverKind;
use crate::system::{eval_f_at, eval_j, BlockJacobian, Jacobian, SecondOrderSystem};

#[derive(Debug, Clone)]
pub struct ForceSplit {
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    pub h: DVector<f64>,
}

/// `G = (X X^T M v; X X^T f)` and `H = F - G`.
pub fn split_forces<S: SecondOrderSystem + ?Sized>(sys: &S, t: f64, u: &DVector<f64>, ms: &ModalSplit) -> Result<ForceSplit> {
    Error::check_dim(sys.ndof(), ms.ndof())?;
    let f = eval_f_at(sys, t, u)?;
    let g = project(ms, &ms.mass_vectors(sys.mass()), &f);
    let h = &f - &g;
    Ok(ForceSplit { f, g, h })
}

/// `blockdiag(X X^T M, X X^T M) w`.
pub(crate) fn project(ms: &ModalSplit, mx: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let n = ms.ndof();
    let (a, b) = reduce(mx, w);
    let mut out = DVector::zeros(2 * n);
    out.rows_mut(0, n).copy_from(&(&ms.vectors * a));
    out.rows_mut(n, n).copy_from(&(&ms.vectors * b));
    out
}

/// `(X^T M w_q, X^T M w_v)`.
fn reduce(mx: &DMatrix<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = mx.nrows();
    (
        mx.tr_mul(&w.rows(0, n).into_owned()),
        mx.tr_mul(&w.rows(n, n).into_owned()),
    )
}

/// `J_G = [[0, X X^T M], [-X K_r X^T M, 0]]` with `K_r = X^T K X`, and
/// `J_H = J - J_G` with `J` the full block Jacobian (damping stays in `J_H`).
#[derive(Debug, Clone)]
pub struct ModalJacobians {
    pub full: BlockJacobian,
    pub x: DMatrix<f64>,
    pub mx: DMatrix<f64>,
    pub kr: DMatrix<f64>,
    /// Eigen-decomposition `K_r = Q diag(mu) Q^T`.
    rot: DMatrix<f64>,
    mu: DVector<f64>,
}

impl ModalJacobians {
    pub fn new(full: BlockJacobian, ms: &ModalSplit) -> Result<Self> {
        let mut kx = DMatrix::zeros(ms.ndof(), ms.s());
        for j in 0..ms.s() {
            kx.set_column(j, &full.stiffness().mul_vec(&ms.vectors.column(j).into_owned()));
        }
        let kr = ms.vectors.tr_mul(&kx);
        Self::with_reduced_stiffness(full, ms, kr)
    }

    /// Uses a given `K_r`, e.g. frozen from an earlier state.
    pub fn with_reduced_stiffness(full: BlockJacobian, ms: &ModalSplit, kr: DMatrix<f64>) -> Result<Self> {
        Error::check_dim(full.ndof(), ms.ndof())?;
        Error::check_dim(ms.s(), kr.nrows())?;
        let kr = (&kr + kr.transpose()) * 0.5;
        let (rot, mu) = if ms.s() == 0 {
            (DMatrix::zeros(0, 0), DVector::zeros(0))
        } else {
            let eig = kr.clone().symmetric_eigen();
            (eig.eigenvectors, eig.eigenvalues)
        };
        let mx = ms.mass_vectors(full.mass());
        Ok(Self {
            full,
            x: ms.vectors.clone(),
            mx,
            kr,
            rot,
            mu,
        })
    }

    pub fn ndof(&self) -> usize {
        self.full.ndof()
    }

    pub fn s(&self) -> usize {
        self.x.ncols()
    }

    /// Modes of `K_r` with negative stiffness.
    pub fn negative_modes(&self) -> usize {
        self.mu.iter().filter(|&&m| m < 0.0).count()
    }

    pub fn apply_g(&self, w: &DVector<f64>) -> DVector<f64> {
        let n = self.ndof();
        let (a, b) = reduce(&self.mx, w);
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&(&self.x * b));
        out.rows_mut(n, n).copy_from(&(-(&self.x * (&self.kr * a))));
        out
    }

    pub fn apply_h(&self, w: &DVector<f64>) -> DVector<f64> {
        self.full.apply(w) - self.apply_g(w)
    }

    pub fn dense_g(&self) -> DMatrix<f64> {
        let n = self.ndof();
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        let p = &self.x * self.mx.transpose();
        j.view_mut((0, n), (n, n)).copy_from(&p);
        j.view_mut((n, 0), (n, n))
            .copy_from(&(-(&self.x * &self.kr * self.mx.transpose())));
        j
    }

    pub fn dense_h(&self) -> DMatrix<f64> {
        self.full.to_dense() - self.dense_g()
    }

    /// `G` of the state whose `F` is given.
    pub fn project(&self, f: &DVector<f64>) -> DVector<f64> {
        let n = self.ndof();
        let (a, b) = reduce(&self.mx, f);
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&(&self.x * a));
        out.rows_mut(n, n).copy_from(&(&self.x * b));
        out
    }

    /// `h phi1(h J_G) G`, evaluated mode by mode in the subspace.
    pub fn phi1_g(&self, f: &DVector<f64>, h: f64) -> DVector<f64> {
        let n = self.ndof();
        let mut out = DVector::zeros(2 * n);
        if self.s() == 0 {
            return out;
        }
        let (a, b) = reduce(&self.mx, f);
        let a = self.rot.tr_mul(&a);
        let b = self.rot.tr_mul(&b);
        let blocks = phi1_modal(self.mu.as_slice(), h);
        let mut ra = DVector::zeros(self.s());
        let mut rb = DVector::zeros(self.s());
        for (i, p) in blocks.iter().enumerate() {
            ra[i] = p[(0, 0)] * a[i] + p[(0, 1)] * b[i];
            rb[i] = p[(1, 0)] * a[i] + p[(1, 1)] * b[i];
        }
        out.rows_mut(0, n).copy_from(&(&self.x * (&self.rot * ra)));
        out.rows_mut(n, n).copy_from(&(&self.x * (&self.rot * rb)));
        out
    }

    /// `I - c J_H = (I - c J) + c (Y1 Z1^T + Y2 Z2^T)`.
    pub fn shifted_h(&self, c: f64, kind: LinearSolverKind) -> Result<LowRankCorrection> {
        let base = self.full.factor_shifted(c, kind)?;
        LowRankCorrection::new(base, c, self.low_rank_blocks())
    }

    /// `J_G = Y1 Z1^T + Y2 Z2^T` with `Y1 = [X; 0]`, `Z1 = [0; M X]`,
    /// `Y2 = [0; -X K_r]`, `Z2 = [M X; 0]`.
    pub fn low_rank_blocks(&self) -> Vec<LowRankBlock> {
        let (n, s) = (self.ndof(), self.s());
        if s == 0 {
            return Vec::new();
        }
        let stack = |top: Option<&DMatrix<f64>>, bottom: Option<&DMatrix<f64>>| {
            let mut m = DMatrix::zeros(2 * n, s);
            if let Some(t) = top {
                m.view_mut((0, 0), (n, s)).copy_from(t);
            }
            if let Some(b) = bottom {
                m.view_mut((n, 0), (n, s)).copy_from(b);
            }
            m
        };
        let xk = -(&self.x * &self.kr);
        vec![
            LowRankBlock {
                name: "Y1 Z1^T (modal velocity coupling)",
                y: stack(Some(&self.x), None),
                z: stack(None, Some(&self.mx)),
            },
            LowRankBlock {
                name: "Y2 Z2^T (modal stiffness coupling)",
                y: stack(None, Some(&xk)),
                z: stack(Some(&self.mx), None),
            },
        ]
    }
}

/// `J_G` and `J_H` of the model at `u`.
pub fn build_jg_jh<S: SecondOrderSystem + ?Sized>(sys: &S, u: &DVector<f64>, ms: &ModalSplit) -> Result<ModalJacobians> {
    ModalJacobians::new(eval_j(sys, u)?, ms)
}
