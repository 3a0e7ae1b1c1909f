use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::material::MaterialParams;
use super::mesh::TetMesh;
use crate::error::{Error, Result};
use crate::linalg::SparseOperator;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayleighParams {
    /// Multiplies K.
    pub alpha: f64,
    /// Multiplies M.
    pub beta: f64,
}

impl RayleighParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Rayleigh coefficients must be nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }
}

/// Lumped (row-sum) vertex masses repeated per coordinate.
pub fn lumped_mass(mesh: &TetMesh, density: f64) -> Result<DVector<f64>> {
    if !(density > 0.0) {
        return Err(Error::InvalidParameter(format!("density must be positive, got {density}")));
    }
    let mut m = DVector::zeros(mesh.num_dofs());
    for (tet, rest) in mesh.tets().iter().zip(mesh.rest_data()) {
        let share = density * rest.volume / 4.0;
        for &v in tet {
            for k in 0..3 {
                m[3 * v + k] += share;
            }
        }
    }
    Ok(m)
}

pub fn build_mass_matrix(mesh: &TetMesh, density: f64) -> Result<SparseOperator> {
    Ok(SparseOperator::from_diagonal(&lumped_mass(mesh, density)?))
}

fn deformation_gradient(mesh: &TetMesh, t: usize, q: &DVector<f64>) -> Matrix3<f64> {
    let tet = &mesh.tets()[t];
    let grads = &mesh.rest_data()[t].shape_grads;
    let mut f = Matrix3::zeros();
    for a in 0..4 {
        let x = Vector3::new(q[3 * tet[a]], q[3 * tet[a] + 1], q[3 * tet[a] + 2]);
        f += x * grads[a].transpose();
    }
    f
}

pub fn elastic_energy(mesh: &TetMesh, mat: &MaterialParams, q: &DVector<f64>) -> Result<f64> {
    Error::check_dim(mesh.num_dofs(), q.len())?;
    Ok((0..mesh.tets().len())
        .map(|t| mesh.rest_data()[t].volume * mat.energy_density(&deformation_gradient(mesh, t, q)))
        .sum())
}

/// `-dW/dq`, unmasked.
pub fn elastic_force(mesh: &TetMesh, mat: &MaterialParams, q: &DVector<f64>) -> Result<DVector<f64>> {
    Error::check_dim(mesh.num_dofs(), q.len())?;
    let mut f = DVector::zeros(mesh.num_dofs());
    for (t, tet) in mesh.tets().iter().enumerate() {
        let rest = &mesh.rest_data()[t];
        let p = mat.first_piola(&deformation_gradient(mesh, t, q));
        for a in 0..4 {
            let fa = p * rest.shape_grads[a] * rest.volume;
            for k in 0..3 {
                f[3 * tet[a] + k] -= fa[k];
            }
        }
    }
    Ok(f)
}

/// Tangent stiffness `K = d^2 W / dq^2`, unmasked.
pub fn stiffness_matrix(mesh: &TetMesh, mat: &MaterialParams, q: &DVector<f64>) -> Result<SparseOperator> {
    Error::check_dim(mesh.num_dofs(), q.len())?;
    let mut trip = Vec::with_capacity(144 * mesh.tets().len());
    for (t, tet) in mesh.tets().iter().enumerate() {
        let rest = &mesh.rest_data()[t];
        let c = mat.stress_derivative(&deformation_gradient(mesh, t, q));
        let g = &rest.shape_grads;
        for a in 0..4 {
            for b in 0..4 {
                for i in 0..3 {
                    for k in 0..3 {
                        let mut s = 0.0;
                        for j in 0..3 {
                            for l in 0..3 {
                                s += c[(i + 3 * j, k + 3 * l)] * g[a][j] * g[b][l];
                            }
                        }
                        trip.push((3 * tet[a] + i, 3 * tet[b] + k, s * rest.volume));
                    }
                }
            }
        }
    }
    Ok(SparseOperator::from_triplets(mesh.num_dofs(), trip))
}

/// `D = alpha K + beta M`.
pub fn rayleigh_damping(k: &SparseOperator, m: &SparseOperator, p: &RayleighParams) -> Result<SparseOperator> {
    p.validate()?;
    k.linear_combination(p.alpha, m, p.beta)
}
