//! Smallest generalized eigenpairs `K x = lambda M x` on the free DOFs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dense_generalized_symmetric_eigen, normalize_signs, LinearSolverKind, SparseOperator, SymmetricSolver};
use crate::system::SecondOrderSystem;

/// Free-DOF counts up to this size use the dense eigensolver.
pub const DENSE_EIGEN_LIMIT: usize = 300;

/// When the modal basis is recomputed during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    #[default]
    Once,
    EveryStep,
    EveryNSteps(usize),
}

impl RefreshPolicy {
    /// Whether step `index` (counted from 1) triggers a recomputation.
    pub fn due(self, index: usize) -> bool {
        match self {
            RefreshPolicy::Once => false,
            RefreshPolicy::EveryStep => true,
            RefreshPolicy::EveryNSteps(k) => k > 0 && index.is_multiple_of(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMethod {
    #[default]
    Auto,
    Dense,
    SubspaceIteration,
}

/// `s` generalized eigenpairs, zero on pinned rows, `X^T M X = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSplit {
    pub vectors: DMatrix<f64>,
    /// Ascending.
    pub values: DVector<f64>,
    pub policy: RefreshPolicy,
}

impl ModalSplit {
    pub fn empty(ndof: usize) -> Self {
        Self {
            vectors: DMatrix::zeros(ndof, 0),
            values: DVector::zeros(0),
            policy: RefreshPolicy::Once,
        }
    }

    pub fn with_policy(mut self, policy: RefreshPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn s(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ndof(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn mass_vectors(&self, mass: &DVector<f64>) -> DMatrix<f64> {
        let mut mx = self.vectors.clone();
        for (i, mut row) in mx.row_iter_mut().enumerate() {
            row *= mass[i];
        }
        mx
    }

    /// `|X^T M X - I|_F`.
    pub fn orthonormality_defect(&self, mass: &DVector<f64>) -> f64 {
        let s = self.s();
        (self.vectors.transpose() * self.mass_vectors(mass) - DMatrix::identity(s, s)).norm()
    }

    /// Largest `|K x_i - lambda_i M x_i| / |K|_F` over the columns, on free rows.
    pub fn residual(&self, k: &SparseOperator, mass: &DVector<f64>, free: &[bool]) -> f64 {
        let kn = k.frobenius_norm().max(f64::MIN_POSITIVE);
        (0..self.s())
            .map(|j| {
                let x = self.vectors.column(j).into_owned();
                let mut r = k.mul_vec(&x) - x.component_mul(mass) * self.values[j];
                for (i, &f) in free.iter().enumerate() {
                    if !f {
                        r[i] = 0.0;
                    }
                }
                r.norm() / kn
            })
            .fold(0.0, f64::max)
    }

    /// Largest principal angle between the two M-orthonormal bases.
    pub fn subspace_angle(&self, other: &ModalSplit, mass: &DVector<f64>) -> f64 {
        if self.s() == 0 || other.s() == 0 {
            return 0.0;
        }
        let c = self.vectors.transpose() * other.mass_vectors(mass);
        let sv = c.svd(false, false).singular_values;
        let smallest = sv.iter().take(self.s().min(other.s())).fold(f64::INFINITY, |a, &b| a.min(b));
        smallest.clamp(-1.0, 1.0).acos()
    }

    /// Largest relative eigenvalue change.
    pub fn drift(&self, other: &ModalSplit) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs() / a.abs().max(1e-12))
            .fold(0.0, f64::max)
    }
}

/// The `s` algebraically smallest eigenpairs of `K x = lambda M x` with `M`
/// diagonal, restricted to `free` DOFs.
pub fn smallest_eigpairs(k: &SparseOperator, mass: &DVector<f64>, free: &[bool], s: usize) -> Result<ModalSplit> {
    smallest_eigpairs_with(k, mass, free, s, EigenMethod::Auto)
}

pub fn smallest_eigpairs_with(
    k: &SparseOperator,
    mass: &DVector<f64>,
    free: &[bool],
    s: usize,
    method: EigenMethod,
) -> Result<ModalSplit> {
    let n = mass.len();
    Error::check_dim(n, k.dim())?;
    Error::check_dim(n, free.len())?;
    let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    let nf = idx.len();
    if s > nf {
        return Err(Error::InvalidParameter(format!("requested {s} modes but only {nf} free DOFs")));
    }
    if s == 0 {
        return Ok(ModalSplit::empty(n));
    }
    let kf = k.restrict(&idx);
    let mf = DVector::from_iterator(nf, idx.iter().map(|&i| mass[i]));
    let use_dense = match method {
        EigenMethod::Auto => nf <= DENSE_EIGEN_LIMIT,
        EigenMethod::Dense => true,
        EigenMethod::SubspaceIteration => false,
    };
    let (values, xf) = if use_dense {
        let (vals, vecs) = dense_generalized_symmetric_eigen(&symmetrized(&kf), &DMatrix::from_diagonal(&mf))?;
        (vals.rows(0, s).into_owned(), vecs.columns(0, s).into_owned())
    } else {
        subspace_iteration(&kf, &mf, s)?
    };
    let mut vectors = DMatrix::zeros(n, s);
    for (r, &i) in idx.iter().enumerate() {
        vectors.row_mut(i).copy_from(&xf.row(r));
    }
    normalize_signs(&mut vectors);
    Ok(ModalSplit {
        vectors,
        values,
        policy: RefreshPolicy::Once,
    })
}

/// Eigenpairs of the model's tangent stiffness at positions `q`.
pub fn modal_split_at<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    q: &DVector<f64>,
    s: usize,
    policy: RefreshPolicy,
) -> Result<ModalSplit> {
    let (k, _) = sys.tangent(q, &DVector::zeros(sys.ndof()))?;
    Ok(smallest_eigpairs(&k, sys.mass(), sys.free_mask(), s)?.with_policy(policy))
}

fn symmetrized(k: &SparseOperator) -> DMatrix<f64> {
    let d = k.to_dense();
    (&d + d.transpose()) * 0.5
}

const SUBSPACE_MAX_ITERS: usize = 500;
const SUBSPACE_TOL: f64 = 1e-10;

/// Shift-invert block iteration with Rayleigh-Ritz in the M inner product.
fn subspace_iteration(k: &SparseOperator, m: &DVector<f64>, s: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.len();
    let p = (2 * s).max(s + 8).min(n);
    let ratio = DVector::from_fn(n, |i, _| k.get(i, i) / m[i]);
    let scale = ratio.iter().map(|r| r.abs()).sum::<f64>() / n as f64;
    let shift = -1e-3 * scale.max(f64::MIN_POSITIVE);
    let shifted = k.linear_combination(1.0, &SparseOperator::from_diagonal(m), -shift)?;
    let solver = SymmetricSolver::new(&shifted, LinearSolverKind::Direct)?;
    let sqrt_m = m.map(f64::sqrt);
    let knorm = k.frobenius_norm().max(f64::MIN_POSITIVE);

    let mut x = DMatrix::from_fn(n, p, |i, j| ((i + 1) as f64 * (0.37 + j as f64 * 0.91)).sin() + if i % p == j { 1.0 } else { 0.0 });
    for it in 0..SUBSPACE_MAX_ITERS {
        let mut y = DMatrix::zeros(n, p);
        for j in 0..p {
            let rhs = x.column(j).component_mul(m);
            y.set_column(j, &solver.solve(&rhs)?);
        }
        // M-orthonormalize through the QR factor of M^{1/2} Y.
        let mut w = y.clone();
        for (i, mut row) in w.row_iter_mut().enumerate() {
            row *= sqrt_m[i];
        }
        let q = w.qr().q();
        let mut basis = q;
        for (i, mut row) in basis.row_iter_mut().enumerate() {
            row /= sqrt_m[i];
        }
        let kb = DMatrix::from_columns(&(0..p).map(|j| k.mul_vec(&basis.column(j).into_owned())).collect::<Vec<_>>());
        let kr = basis.transpose() * &kb;
        let kr = (&kr + kr.transpose()) * 0.5;
        let eig = kr.symmetric_eigen();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let v = DMatrix::from_fn(p, p, |r, c| eig.eigenvectors[(r, order[c])]);
        let values = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
        x = &basis * &v;
        let kx = &kb * &v;
        let worst = (0..s)
            .map(|j| {
                let r = kx.column(j) - x.column(j).component_mul(m) * values[j];
                r.norm() / knorm
            })
            .fold(0.0, f64::max);
        if worst <= SUBSPACE_TOL {
            log::debug!("subspace iteration converged in {} sweeps", it + 1);
            return Ok((values.rows(0, s).into_owned(), x.columns(0, s).into_owned()));
        }
    }
    Err(Error::Eigen(format!(
        "subspace iteration did not converge in {SUBSPACE_MAX_ITERS} sweeps"
    )))
}
