//! Sparse matrix plumbing and the linear-solver abstraction shared by the
//! integrators.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square sparse matrix in compressed-column form.
///
/// Used for mass, stiffness and damping operators, all of which are
/// symmetric in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    csc: CscMatrix<f64>,
}

impl SparseOperator {
    pub fn zeros(n: usize) -> Self {
        Self {
            csc: CscMatrix::zeros(n, n),
        }
    }

    /// Builds an `n x n` operator, summing duplicate entries.
    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut coo = CooMatrix::new(n, n);
        for (i, j, v) in triplets {
            coo.push(i, j, v);
        }
        Self {
            csc: CscMatrix::from(&coo),
        }
    }

    pub fn from_diagonal(diag: &DVector<f64>) -> Self {
        Self::from_triplets(diag.len(), diag.iter().enumerate().map(|(i, &d)| (i, i, d)))
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let n = m.nrows();
        let mut trip = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let v = m[(i, j)];
                if v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, trip)
    }

    pub fn dim(&self) -> usize {
        self.csc.nrows()
    }

    pub fn csc(&self) -> &CscMatrix<f64> {
        &self.csc
    }

    pub fn nnz(&self) -> usize {
        self.csc.nnz()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.csc.triplet_iter().map(|(i, j, &v)| (i, j, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.csc
            .get_entry(i, j)
            .map(|e| e.into_value())
            .unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.get(i, i))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim());
        let mut y = DVector::zeros(self.dim());
        self.mul_vec_acc(x, 1.0, &mut y);
        y
    }

    /// `y += alpha * A x`
    pub fn mul_vec_acc(&self, x: &DVector<f64>, alpha: f64, y: &mut DVector<f64>) {
        let (offsets, rows, vals) = self.csc.csc_data();
        for j in 0..self.dim() {
            let xj = alpha * x[j];
            if xj == 0.0 {
                continue;
            }
            for k in offsets[j]..offsets[j + 1] {
                y[rows[k]] += vals[k] * xj;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    /// `a * self + b * other`
    pub fn linear_combination(&self, a: f64, other: &SparseOperator, b: f64) -> Result<Self> {
        Error::check_dim(self.dim(), other.dim())?;
        let trip = self
            .triplets()
            .map(|(i, j, v)| (i, j, a * v))
            .chain(other.triplets().map(|(i, j, v)| (i, j, b * v)));
        Ok(Self::from_triplets(self.dim(), trip))
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self::from_triplets(self.dim(), self.triplets().map(|(i, j, v)| (i, j, a * v)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.csc.values().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest `|A_ij - A_ji|` relative to the largest entry magnitude.
    pub fn symmetry_defect(&self) -> f64 {
        let scale = self
            .csc
            .values()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let worst = self
            .triplets()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0f64, f64::max);
        worst / scale
    }

    /// Principal submatrix on the given (sorted) index set.
    pub fn restrict(&self, keep: &[usize]) -> SparseOperator {
        let mut map = vec![usize::MAX; self.dim()];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let trip = self.triplets().filter_map(|(i, j, v)| {
            let (a, b) = (map[i], map[j]);
            (a != usize::MAX && b != usize::MAX).then_some((a, b, v))
        });
        SparseOperator::from_triplets(keep.len(), trip)
    }
}

/// Which algorithm factors the symmetric systems `M + cD + c^2 K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LinearSolverKind {
    /// Sparse Cholesky, falling back to dense LU when the matrix is not SPD.
    #[default]
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    ConjugateGradient { tol: f64, max_iter: usize },
}

/// A prepared solver for one fixed matrix.
pub trait LinearSolve {
    fn dim(&self) -> usize;
    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>>;

    /// Row infinity-norms of the factored matrix, if cheaply available.
    fn row_norms(&self) -> Option<DVector<f64>> {
        None
    }
}

pub struct DenseLu {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    row_norms: DVector<f64>,
}

impl DenseLu {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let row_norms = DVector::from_fn(m.nrows(), |i, _| m.row(i).amax());
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let lu = m.lu();
        let u = lu.u();
        let min_pivot = u.diagonal().iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
        if u.nrows() > 0 && !(min_pivot > 1e-14 * scale) {
            return Err(Error::LinearSolve(format!(
                "matrix is singular to working precision (min pivot {min_pivot:e})"
            )));
        }
        Ok(Self { lu, row_norms })
    }
}

impl LinearSolve for DenseLu {
    fn dim(&self) -> usize {
        self.row_norms.len()
    }

    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_dim(self.dim(), rhs.len())?;
        self.lu
            .solve(rhs)
            .ok_or_else(|| Error::LinearSolve("singular LU factor".into()))
    }

    fn row_norms(&self) -> Option<DVector<f64>> {
        Some(self.row_norms.clone())
    }
}

/// Solver for a sparse symmetric matrix.
pub enum SymmetricSolver {
    Cholesky(CscCholesky<f64>),
    Dense(DenseLu),
    Cg {
        matrix: SparseOperator,
        inv_diag: DVector<f64>,
        tol: f64,
        max_iter: usize,
    },
}

impl SymmetricSolver {
    pub fn new(matrix: &SparseOperator, kind: LinearSolverKind) -> Result<Self> {
        match kind {
            LinearSolverKind::Direct => {
                if matrix.dim() == 0 {
                    return Ok(SymmetricSolver::Dense(DenseLu::new(DMatrix::zeros(0, 0))?));
                }
                match CscCholesky::factor(matrix.csc()) {
                    Ok(chol) => Ok(SymmetricSolver::Cholesky(chol)),
                    Err(_) => {
                        log::debug!("matrix not SPD, falling back to dense LU (n = {})", matrix.dim());
                        Ok(SymmetricSolver::Dense(DenseLu::new(matrix.to_dense())?))
                    }
                }
            }
            LinearSolverKind::ConjugateGradient { tol, max_iter } => {
                let inv_diag = matrix.diagonal().map(|d| if d != 0.0 { 1.0 / d } else { 1.0 });
                Ok(SymmetricSolver::Cg {
                    matrix: matrix.clone(),
                    inv_diag,
                    tol,
                    max_iter,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SymmetricSolver::Cholesky(c) => c.l().nrows(),
            SymmetricSolver::Dense(d) => d.dim(),
            SymmetricSolver::Cg { matrix, .. } => matrix.dim(),
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_dim(self.dim(), rhs.len())?;
        match self {
            SymmetricSolver::Cholesky(c) => {
                let x = c.solve(rhs);
                Ok(DVector::from_column_slice(x.as_slice()))
            }
            SymmetricSolver::Dense(d) => d.solve(rhs),
            SymmetricSolver::Cg {
                matrix,
                inv_diag,
                tol,
                max_iter,
            } => conjugate_gradient(matrix, inv_diag, rhs, *tol, *max_iter),
        }
    }
}

fn conjugate_gradient(
    a: &SparseOperator,
    inv_diag: &DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut z = r.component_mul(inv_diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iter {
        let ap = a.mul_vec(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(Error::LinearSolve(
                "conjugate gradients hit a direction of nonpositive curvature".into(),
            ));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        if r.norm() <= tol * bnorm {
            return Ok(x);
        }
        z = r.component_mul(inv_diag);
        let rz_new = r.dot(&z);
        p = &z + (rz_new / rz) * &p;
        rz = rz_new;
    }
    Err(Error::LinearSolve(format!(
        "conjugate gradients did not reach {tol:e} in {max_iter} iterations"
    )))
}

/// Solve a small dense symmetric generalized problem `A x = lambda B x`
/// with `B` SPD. Eigenvalues ascending, eigenvectors `B`-orthonormal.
pub fn dense_generalized_symmetric_eigen(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Eigen("metric matrix is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Eigen("singular Cholesky factor".into()))?;
    let c = &l_inv * a * l_inv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let y = DMatrix::from_fn(n, n, |r, k| eig.eigenvectors[(r, order[k])]);
    let vectors = l_inv.transpose() * y;
    Ok((values, vectors))
}

/// Flip each column so its largest-magnitude entry is positive.
pub fn normalize_signs(x: &mut DMatrix<f64>) {
    for mut col in x.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> SparseOperator {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseOperator::from_triplets(n, t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = SparseOperator::from_triplets(2, [(0, 0, 1.0), (0, 0, 2.0), (1, 0, 1.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert!(a.symmetry_defect() > 0.0);
    }

    #[test]
    fn cholesky_and_cg_agree() {
        let a = spd(20);
        let b = DVector::from_fn(20, |i, _| (i as f64).sin());
        let x1 = SymmetricSolver::new(&a, LinearSolverKind::Direct)
            .unwrap()
            .solve(&b)
            .unwrap();
        let x2 = SymmetricSolver::new(
            &a,
            LinearSolverKind::ConjugateGradient {
                tol: 1e-13,
                max_iter: 200,
            },
        )
        .unwrap()
        .solve(&b)
        .unwrap();
        assert!((&x1 - &x2).norm() < 1e-10);
        assert!((a.mul_vec(&x1) - b).norm() < 1e-12);
    }

    #[test]
    fn indefinite_falls_back_to_lu() {
        let a = SparseOperator::from_triplets(2, [(0, 0, 1.0), (1, 1, -2.0)]);
        let s = SymmetricSolver::new(&a, LinearSolverKind::Direct).unwrap();
        assert!(matches!(s, SymmetricSolver::Dense(_)));
        let x = s.solve(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((x[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn singular_dense_lu_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(DenseLu::new(m).is_err());
    }

    #[test]
    fn generalized_eigen_is_b_orthonormal() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let (vals, vecs) = dense_generalized_symmetric_eigen(&a, &b).unwrap();
        assert!(vals[0] <= vals[1]);
        let gram = vecs.transpose() * &b * &vecs;
        assert!((gram - DMatrix::identity(2, 2)).norm() < 1e-12);
        for k in 0..2 {
            let r = &a * vecs.column(k) - vals[k] * (&b * vecs.column(k));
            assert!(r.norm() < 1e-12);
        }
    }
}
