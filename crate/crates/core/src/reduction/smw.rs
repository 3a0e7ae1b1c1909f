//! Sherman-Morrison-Woodbury solves with `A + c (Y1 Z1^T + Y2 Z2^T + ...)`.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::linalg::LinearSolve;

/// Named skinny pair `(Y, Z)` contributing `Y Z^T`.
#[derive(Debug, Clone)]
pub struct LowRankBlock {
    pub name: &'static str,
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

/// `A + c sum_k Y_k Z_k^T` with a prepared solver for `A`.
pub struct LowRankCorrection {
    base: Box<dyn LinearSolve>,
    scale: f64,
    blocks: Vec<LowRankBlock>,
    /// `V = [Z_1 .. Z_k]`.
    v: DMatrix<f64>,
    /// `A^-1 U` with `U = c [Y_1 .. Y_k]`.
    a_inv_u: DMatrix<f64>,
    capacitance: Option<LU<f64, Dyn, Dyn>>,
}

impl LowRankCorrection {
    pub fn new(base: Box<dyn LinearSolve>, scale: f64, blocks: Vec<LowRankBlock>) -> Result<Self> {
        let n = base.dim();
        for b in &blocks {
            Error::check_dim(n, b.y.nrows())?;
            Error::check_dim(n, b.z.nrows())?;
            Error::check_dim(b.y.ncols(), b.z.ncols())?;
        }
        let rank: usize = blocks.iter().map(|b| b.y.ncols()).sum();
        let mut u = DMatrix::zeros(n, rank);
        let mut v = DMatrix::zeros(n, rank);
        let mut col = 0;
        for b in &blocks {
            let r = b.y.ncols();
            u.columns_mut(col, r).copy_from(&(&b.y * scale));
            v.columns_mut(col, r).copy_from(&b.z);
            col += r;
        }
        let mut a_inv_u = DMatrix::zeros(n, rank);
        for j in 0..rank {
            if u.column(j).iter().any(|&x| x != 0.0) {
                a_inv_u.set_column(j, &base.solve(&u.column(j).into_owned())?);
            }
        }
        let capacitance = if rank == 0 {
            None
        } else {
            let cap = DMatrix::identity(rank, rank) + v.transpose() * &a_inv_u;
            let norm = cap.amax().max(1.0);
            let lu = cap.lu();
            let diag = lu.u().diagonal();
            if let Some((pivot, _)) = diag
                .iter()
                .enumerate()
                .find(|(_, d)| !(d.abs() > 1e-13 * norm))
            {
                let mut start = 0;
                let block = blocks
                    .iter()
                    .find(|b| {
                        start += b.y.ncols();
                        pivot < start
                    })
                    .map_or("unknown", |b| b.name);
                return Err(Error::SingularCapacitance { block, pivot });
            }
            Some(lu)
        };
        Ok(Self {
            base,
            scale,
            blocks,
            v,
            a_inv_u,
            capacitance,
        })
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn blocks(&self) -> &[LowRankBlock] {
        &self.blocks
    }

    /// `x = A^-1 r - A^-1 U (I + V^T A^-1 U)^-1 V^T A^-1 r`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let x0 = self.base.solve(rhs)?;
        match &self.capacitance {
            None => Ok(x0),
            Some(lu) => {
                let t = lu
                    .solve(&(self.v.transpose() * &x0))
                    .ok_or_else(|| Error::LinearSolve("capacitance solve failed".into()))?;
                Ok(x0 - &self.a_inv_u * t)
            }
        }
    }
}

impl LinearSolve for LowRankCorrection {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        LowRankCorrection::solve(self, rhs)
    }
}

pub fn smw_solve(corr: &LowRankCorrection, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    corr.solve(rhs)
}
