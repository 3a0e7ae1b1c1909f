use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 9x9 derivative of the first Piola-Kirchhoff stress with respect to the
/// deformation gradient, in column-major vec ordering (`i + 3 j`).
pub type Matrix9 = SMatrix<f64, 9, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialModel {
    LinearElastic,
    StableNeoHookean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    pub model: MaterialModel,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
}

impl MaterialParams {
    pub fn new(model: MaterialModel, youngs_modulus: f64, poisson_ratio: f64, density: f64) -> Result<Self> {
        let p = Self {
            model,
            youngs_modulus,
            poisson_ratio,
            density,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.youngs_modulus > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Young's modulus must be positive, got {}",
                self.youngs_modulus
            )));
        }
        if !(self.poisson_ratio > 0.0 && self.poisson_ratio < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "Poisson ratio must lie in (0, 0.5), got {}",
                self.poisson_ratio
            )));
        }
        if !(self.density > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "density must be positive, got {}",
                self.density
            )));
        }
        Ok(())
    }

    /// Lamé parameters `(mu, lambda)`.
    pub fn lame(&self) -> (f64, f64) {
        let (e, nu) = (self.youngs_modulus, self.poisson_ratio);
        (e / (2.0 * (1.0 + nu)), e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))
    }

    pub fn energy_density(&self, f: &Matrix3<f64>) -> f64 {
        let (mu, lambda) = self.lame();
        match self.model {
            MaterialModel::LinearElastic => {
                let eps = small_strain(f);
                mu * eps.norm_squared() + 0.5 * lambda * eps.trace().powi(2)
            }
            MaterialModel::StableNeoHookean => {
                let alpha = 1.0 + mu / lambda;
                let j = f.determinant();
                0.5 * mu * (f.norm_squared() - 3.0) + 0.5 * lambda * (j - alpha).powi(2)
                    - 0.5 * mu * mu / lambda
            }
        }
    }

    /// First Piola-Kirchhoff stress `dPsi/dF`.
    pub fn first_piola(&self, f: &Matrix3<f64>) -> Matrix3<f64> {
        let (mu, lambda) = self.lame();
        match self.model {
            MaterialModel::LinearElastic => {
                let eps = small_strain(f);
                eps * (2.0 * mu) + Matrix3::identity() * (lambda * eps.trace())
            }
            MaterialModel::StableNeoHookean => {
                let alpha = 1.0 + mu / lambda;
                f * mu + cofactor(f) * (lambda * (f.determinant() - alpha))
            }
        }
    }

    /// `dP/dF` as a 9x9 matrix.
    pub fn stress_derivative(&self, f: &Matrix3<f64>) -> Matrix9 {
        let (mu, lambda) = self.lame();
        match self.model {
            MaterialModel::LinearElastic => {
                let mut c = Matrix9::identity() * mu;
                for i in 0..3 {
                    for j in 0..3 {
                        // mu * delta_il delta_jk term (transpose coupling).
                        c[(i + 3 * j, j + 3 * i)] += mu;
                        c[(4 * i, 4 * j)] += lambda;
                    }
                }
                c
            }
            MaterialModel::StableNeoHookean => {
                let alpha = 1.0 + mu / lambda;
                let g = cofactor(f);
                let gv = SMatrix::<f64, 9, 1>::from_column_slice(g.as_slice());
                let mut c = Matrix9::identity() * mu + gv * gv.transpose() * lambda;
                let s = lambda * (f.determinant() - alpha);
                let cols = [f.column(0).into_owned(), f.column(1).into_owned(), f.column(2).into_owned()];
                let blocks = [(0, 1, -skew(&cols[2])), (0, 2, skew(&cols[1])), (1, 2, -skew(&cols[0]))];
                for (a, b, blk) in blocks {
                    let blk = blk * s;
                    for r in 0..3 {
                        for k in 0..3 {
                            c[(3 * a + r, 3 * b + k)] += blk[(r, k)];
                            c[(3 * b + k, 3 * a + r)] += blk[(r, k)];
                        }
                    }
                }
                c
            }
        }
    }
}

fn small_strain(f: &Matrix3<f64>) -> Matrix3<f64> {
    (f + f.transpose()) * 0.5 - Matrix3::identity()
}

/// `dJ/dF`, columns `f1 x f2`, `f2 x f0`, `f0 x f1`.
pub fn cofactor(f: &Matrix3<f64>) -> Matrix3<f64> {
    let (f0, f1, f2) = (f.column(0), f.column(1), f.column(2));
    Matrix3::from_columns(&[f1.cross(&f2), f2.cross(&f0), f0.cross(&f1)])
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    v.cross_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(model: MaterialModel) -> MaterialParams {
        MaterialParams::new(model, 1e5, 0.4, 1000.0).unwrap()
    }

    fn random_f(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3))
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(MaterialParams::new(MaterialModel::LinearElastic, 0.0, 0.3, 1.0).is_err());
        assert!(MaterialParams::new(MaterialModel::LinearElastic, 1.0, 0.5, 1.0).is_err());
        assert!(MaterialParams::new(MaterialModel::LinearElastic, 1.0, 0.3, 0.0).is_err());
    }

    #[test]
    fn rest_energy_and_stress_vanish() {
        for model in [MaterialModel::LinearElastic, MaterialModel::StableNeoHookean] {
            let p = params(model);
            let i = Matrix3::identity();
            assert!(p.energy_density(&i).abs() < 1e-9);
            assert!(p.first_piola(&i).norm() < 1e-9);
        }
    }

    #[test]
    fn stress_and_tangent_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for model in [MaterialModel::LinearElastic, MaterialModel::StableNeoHookean] {
            let p = params(model);
            for _ in 0..20 {
                let f = random_f(&mut rng);
                let h = 1e-6;
                let pk = p.first_piola(&f);
                let c = p.stress_derivative(&f);
                for q in 0..9 {
                    let mut fp = f;
                    let mut fm = f;
                    fp[q] += h;
                    fm[q] -= h;
                    let fd = (p.energy_density(&fp) - p.energy_density(&fm)) / (2.0 * h);
                    assert!((fd - pk[q]).abs() <= 1e-5 * pk.norm().max(1.0), "{model:?} P[{q}]");
                    let col = (p.first_piola(&fp) - p.first_piola(&fm)) / (2.0 * h);
                    for r in 0..9 {
                        assert!((col[r] - c[(r, q)]).abs() <= 1e-4 * c.norm(), "{model:?} C[{r},{q}]");
                    }
                }
            }
        }
    }

    #[test]
    fn neo_hookean_is_rotation_invariant() {
        let p = params(MaterialModel::StableNeoHookean);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_f(&mut rng);
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let (w0, w1) = (p.energy_density(&f), p.energy_density(&(r * f)));
        assert!((w0 - w1).abs() <= 1e-10 * w0.abs().max(1.0));
    }

    #[test]
    fn neo_hookean_defined_for_inverted_elements() {
        let p = params(MaterialModel::StableNeoHookean);
        let f = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -0.5));
        assert!(p.energy_density(&f).is_finite());
        assert!(p.first_piola(&f).iter().all(|x| x.is_finite()));
    }
}
