//! Log-barrier contact against analytic implicit surfaces and smoothed
//! maximum-dissipation friction.

use nalgebra::{DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::TetMesh;

/// Analytic obstacle with a signed distance, positive on the free side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImplicitSurface {
    HalfSpace { point: [f64; 3], normal: [f64; 3] },
    /// The free side is outside the ball unless `inside` is set.
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        inside: bool,
    },
}

impl ImplicitSurface {
    pub fn half_space(point: Vector3<f64>, normal: Vector3<f64>) -> Self {
        let n = normal.normalize();
        ImplicitSurface::HalfSpace {
            point: point.into(),
            normal: n.into(),
        }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        ImplicitSurface::Sphere {
            center: center.into(),
            radius,
            inside: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ImplicitSurface::HalfSpace { normal, .. } => {
                let n = Vector3::from(*normal).norm();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!("half-space normal has length {n}, expected 1")));
                }
            }
            ImplicitSurface::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidParameter(format!("sphere radius must be positive, got {radius}")));
                }
            }
        }
        Ok(())
    }

    pub fn distance(&self, x: &Vector3<f64>) -> f64 {
        match self {
            ImplicitSurface::HalfSpace { point, normal } => (x - Vector3::from(*point)).dot(&Vector3::from(*normal)),
            ImplicitSurface::Sphere { center, radius, inside } => {
                let r = (x - Vector3::from(*center)).norm();
                if *inside {
                    radius - r
                } else {
                    r - radius
                }
            }
        }
    }

    /// Unit gradient of the distance; `None` at the sphere center.
    pub fn gradient(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        match self {
            ImplicitSurface::HalfSpace { normal, .. } => Some(Vector3::from(*normal)),
            ImplicitSurface::Sphere { center, inside, .. } => {
                let d = x - Vector3::from(*center);
                let r = d.norm();
                (r > 0.0).then(|| if *inside { -d / r } else { d / r })
            }
        }
    }

    pub fn hessian(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        match self {
            ImplicitSurface::HalfSpace { .. } => Matrix3::zeros(),
            ImplicitSurface::Sphere { center, inside, .. } => {
                let d = x - Vector3::from(*center);
                let r = d.norm();
                if r == 0.0 {
                    return Matrix3::zeros();
                }
                let n = d / r;
                let h = (Matrix3::identity() - n * n.transpose()) / r;
                if *inside {
                    -h
                } else {
                    h
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactConfig {
    pub surfaces: Vec<ImplicitSurface>,
    /// Barrier support distance.
    pub delta: f64,
    pub kappa: f64,
    #[serde(default)]
    pub mu: f64,
    /// Pre-sliding velocity scale.
    pub epsilon: f64,
}

impl ContactConfig {
    pub fn validate(&self) -> Result<()> {
        for s in &self.surfaces {
            s.validate()?;
        }
        let bad = |name: &str, v: f64| Err(Error::InvalidParameter(format!("contact {name} out of range: {v}")));
        if !(self.delta > 0.0) {
            return bad("delta", self.delta);
        }
        if !(self.kappa > 0.0) {
            return bad("kappa", self.kappa);
        }
        if !(self.mu >= 0.0) {
            return bad("mu", self.mu);
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", self.epsilon);
        }
        Ok(())
    }

    /// Gap substituted for nonpositive distances.
    pub fn min_gap(&self) -> f64 {
        1e-6 * self.delta
    }
}

/// One vertex-surface pair within the barrier support.
#[derive(Debug, Clone)]
pub struct Contact {
    pub vertex: usize,
    pub surface: usize,
    /// Gap after clamping; always positive.
    pub gap: f64,
    pub raw_gap: f64,
    pub penetrated: bool,
    /// Orthonormal frame: column 0 is the normal, columns 1-2 the tangents.
    pub frame: Matrix3<f64>,
    pub distance_hessian: Matrix3<f64>,
}

impl Contact {
    pub fn normal(&self) -> Vector3<f64> {
        self.frame.column(0).into_owned()
    }

    /// 3x2 tangent block.
    pub fn tangents(&self) -> nalgebra::Matrix3x2<f64> {
        self.frame.fixed_columns::<2>(1).into_owned()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ContactSet {
    pub contacts: Vec<Contact>,
    /// Pairs dropped because the distance gradient vanished.
    pub dropped: usize,
}

impl ContactSet {
    pub fn len(&self) -> usize {
        self.contacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contacts.is_empty()
    }

    pub fn gaps(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.contacts.iter().map(|c| c.gap))
    }

    pub fn penetrations(&self) -> usize {
        self.contacts.iter().filter(|c| c.penetrated).count()
    }
}

/// Deterministic tangent frame `[n, t1, t2]`.
pub fn tangent_frame(n: &Vector3<f64>) -> Matrix3<f64> {
    let axis = (0..3)
        .min_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs()))
        .unwrap_or(0);
    let t1 = n.cross(&Vector3::ith(axis, 1.0)).normalize();
    let t2 = n.cross(&t1);
    Matrix3::from_columns(&[*n, t1, t2])
}

fn vertex(q: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(q[3 * i], q[3 * i + 1], q[3 * i + 2])
}

/// Collects surface-vertex contacts with distance below `delta`.
pub fn gap(mesh: &TetMesh, cfg: &ContactConfig, q: &DVector<f64>) -> Result<ContactSet> {
    Error::check_dim(mesh.num_dofs(), q.len())?;
    let mut set = ContactSet::default();
    for &v in mesh.surface_vertices() {
        let x = vertex(q, v);
        for (s, surf) in cfg.surfaces.iter().enumerate() {
            let raw = surf.distance(&x);
            if raw >= cfg.delta {
                continue;
            }
            let Some(n) = surf.gradient(&x) else {
                log::warn!("dropping contact of vertex {v} with surface {s}: degenerate normal");
                set.dropped += 1;
                continue;
            };
            let penetrated = raw <= 0.0;
            set.contacts.push(Contact {
                vertex: v,
                surface: s,
                gap: if penetrated { cfg.min_gap() } else { raw },
                raw_gap: raw,
                penetrated,
                frame: tangent_frame(&n),
                distance_hessian: surf.hessian(&x),
            });
        }
    }
    Ok(set)
}

/// `b(x) = -(x - delta)^2 ln(x / delta)` on `(0, delta)`, zero beyond.
pub fn barrier_value(x: f64, delta: f64) -> f64 {
    if x >= delta {
        0.0
    } else {
        -(x - delta).powi(2) * (x / delta).ln()
    }
}

pub fn barrier_derivative(x: f64, delta: f64) -> f64 {
    if x >= delta {
        0.0
    } else {
        -2.0 * (x - delta) * (x / delta).ln() - (x - delta).powi(2) / x
    }
}

pub fn barrier_second_derivative(x: f64, delta: f64) -> f64 {
    if x >= delta {
        0.0
    } else {
        -2.0 * (x / delta).ln() - 4.0 * (x - delta) / x + (x - delta).powi(2) / (x * x)
    }
}

/// Contact multipliers `lambda_i = -kappa b'(d_i)`.
pub fn contact_lambda(cs: &ContactSet, cfg: &ContactConfig) -> DVector<f64> {
    DVector::from_iterator(
        cs.len(),
        cs.contacts.iter().map(|c| -cfg.kappa * barrier_derivative(c.gap, cfg.delta)),
    )
}

/// `kappa * sum_i b(d_i)`.
pub fn contact_energy(cs: &ContactSet, cfg: &ContactConfig) -> f64 {
    cs.contacts.iter().map(|c| cfg.kappa * barrier_value(c.gap, cfg.delta)).sum()
}

/// `f_c = lambda^T dd/dq`.
pub fn contact_force(cs: &ContactSet, cfg: &ContactConfig, ndof: usize) -> DVector<f64> {
    let lambda = contact_lambda(cs, cfg);
    let mut f = DVector::zeros(ndof);
    for (c, l) in cs.contacts.iter().zip(lambda.iter()) {
        let fc = c.normal() * *l;
        for k in 0..3 {
            f[3 * c.vertex + k] += fc[k];
        }
    }
    f
}

/// Triplets of `-df_c/dq = kappa (b'' n n^T + b' hess d)`.
pub fn contact_stiffness(cs: &ContactSet, cfg: &ContactConfig) -> Vec<(usize, usize, f64)> {
    let mut trip = Vec::with_capacity(9 * cs.len());
    for c in &cs.contacts {
        let n = c.normal();
        let blk = (n * n.transpose() * barrier_second_derivative(c.gap, cfg.delta)
            + c.distance_hessian * barrier_derivative(c.gap, cfg.delta))
            * cfg.kappa;
        push_block(&mut trip, c.vertex, &blk);
    }
    trip
}

fn push_block(trip: &mut Vec<(usize, usize, f64)>, v: usize, blk: &Matrix3<f64>) {
    for i in 0..3 {
        for j in 0..3 {
            trip.push((3 * v + i, 3 * v + j, blk[(i, j)]));
        }
    }
}

/// Maps generalized velocities to per-contact relative velocities, and
/// carries the per-contact frame `B = [B_N | B_T]`.
#[derive(Debug, Clone)]
pub struct ContactJacobian {
    pub vertices: Vec<usize>,
    pub frames: Vec<Matrix3<f64>>,
    ndof: usize,
}

impl ContactJacobian {
    pub fn num_contacts(&self) -> usize {
        self.vertices.len()
    }

    /// `J_C v`, stacked per contact.
    pub fn relative_velocity(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(3 * self.vertices.len());
        for (i, &vert) in self.vertices.iter().enumerate() {
            out.fixed_rows_mut::<3>(3 * i).copy_from(&vertex(v, vert));
        }
        out
    }

    /// `J_C^T w`.
    pub fn transpose_apply(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ndof);
        for (i, &vert) in self.vertices.iter().enumerate() {
            for k in 0..3 {
                out[3 * vert + k] += w[3 * i + k];
            }
        }
        out
    }
}

pub fn contact_jacobian(cs: &ContactSet, ndof: usize) -> ContactJacobian {
    ContactJacobian {
        vertices: cs.contacts.iter().map(|c| c.vertex).collect(),
        frames: cs.contacts.iter().map(|c| c.frame).collect(),
        ndof,
    }
}

/// `T = J_C^T B_T`.
#[derive(Debug, Clone)]
pub struct SlidingBasis {
    jc: ContactJacobian,
}

impl SlidingBasis {
    pub fn num_contacts(&self) -> usize {
        self.jc.num_contacts()
    }

    /// Tangent block of contact `i`.
    pub fn tangents(&self, i: usize) -> nalgebra::Matrix3x2<f64> {
        self.jc.frames[i].fixed_columns::<2>(1).into_owned()
    }

    /// `T fbar` for stacked 2-D tangential coordinates.
    pub fn apply(&self, fbar: &DVector<f64>) -> DVector<f64> {
        let mut w = DVector::zeros(3 * self.num_contacts());
        for i in 0..self.num_contacts() {
            let t = self.tangents(i) * Vector2::new(fbar[2 * i], fbar[2 * i + 1]);
            w.fixed_rows_mut::<3>(3 * i).copy_from(&t);
        }
        self.jc.transpose_apply(&w)
    }

    /// `T^T v`: stacked tangential relative velocities.
    pub fn transpose_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let rel = self.jc.relative_velocity(v);
        let mut out = DVector::zeros(2 * self.num_contacts());
        for i in 0..self.num_contacts() {
            let vt = self.tangents(i).transpose() * rel.fixed_rows::<3>(3 * i);
            out.fixed_rows_mut::<2>(2 * i).copy_from(&vt);
        }
        out
    }
}

pub fn sliding_basis(jc: &ContactJacobian) -> SlidingBasis {
    SlidingBasis { jc: jc.clone() }
}

/// Pre-sliding ramp `s(x) = 2x/eps - x^2/eps^2` below `eps`, one above.
pub fn s_profile(x: f64, eps: f64) -> f64 {
    if x < eps {
        let r = x / eps;
        2.0 * r - r * r
    } else {
        1.0
    }
}

pub fn s_profile_derivative(x: f64, eps: f64) -> f64 {
    if x < eps {
        2.0 / eps - 2.0 * x / (eps * eps)
    } else {
        0.0
    }
}

/// Smoothed unit direction `s(|v|) v / |v|`.
pub fn eta_smooth(vbar: &Vector2<f64>, eps: f64) -> Vector2<f64> {
    let r = vbar.norm();
    if r == 0.0 {
        Vector2::zeros()
    } else {
        vbar * (s_profile(r, eps) / r)
    }
}

/// Jacobian of [`eta_smooth`]; symmetric positive semidefinite.
pub fn eta_jacobian(vbar: &Vector2<f64>, eps: f64) -> Matrix2<f64> {
    let r = vbar.norm();
    if r == 0.0 {
        return Matrix2::identity() * (2.0 / eps);
    }
    let u = vbar / r;
    let uu = u * u.transpose();
    uu * s_profile_derivative(r, eps) + (Matrix2::identity() - uu) * (s_profile(r, eps) / r)
}

/// `f_f = -mu T Lambda eta(T^T v)`.
pub fn friction_force(cs: &ContactSet, cfg: &ContactConfig, lambda: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mut f = DVector::zeros(v.len());
    if cfg.mu == 0.0 {
        return f;
    }
    for (c, l) in cs.contacts.iter().zip(lambda.iter()) {
        let t = c.tangents();
        let vbar = t.transpose() * vertex(v, c.vertex);
        let fc = t * eta_smooth(&vbar, cfg.epsilon) * (-cfg.mu * l);
        for k in 0..3 {
            f[3 * c.vertex + k] += fc[k];
        }
    }
    f
}

/// Triplets of `-df_f/dv = mu T Lambda grad(eta) T^T`.
pub fn friction_damping(
    cs: &ContactSet,
    cfg: &ContactConfig,
    lambda: &DVector<f64>,
    v: &DVector<f64>,
) -> Vec<(usize, usize, f64)> {
    let mut trip = Vec::new();
    if cfg.mu == 0.0 {
        return trip;
    }
    for (c, l) in cs.contacts.iter().zip(lambda.iter()) {
        let t = c.tangents();
        let vbar = t.transpose() * vertex(v, c.vertex);
        let blk = t * eta_jacobian(&vbar, cfg.epsilon) * t.transpose() * (cfg.mu * l);
        push_block(&mut trip, c.vertex, &blk);
    }
    trip
}

/// Per-state contact summary.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContactDiagnostics {
    pub num_contacts: usize,
    pub min_gap: f64,
    pub max_lambda: f64,
    pub friction_power: f64,
    pub penetrations: usize,
    /// `max_i (|fbar_i| - mu lambda_i)`; nonpositive inside the cone.
    pub cone_excess: f64,
}

pub fn diagnostics(cs: &ContactSet, cfg: &ContactConfig, v: &DVector<f64>) -> ContactDiagnostics {
    let lambda = contact_lambda(cs, cfg);
    let ff = friction_force(cs, cfg, &lambda, v);
    let mut cone_excess = f64::NEG_INFINITY;
    for (c, l) in cs.contacts.iter().zip(lambda.iter()) {
        let t = c.tangents();
        let vbar = t.transpose() * vertex(v, c.vertex);
        let fbar = eta_smooth(&vbar, cfg.epsilon) * (cfg.mu * l);
        cone_excess = cone_excess.max(fbar.norm() - cfg.mu * l);
    }
    ContactDiagnostics {
        num_contacts: cs.len(),
        min_gap: cs.contacts.iter().map(|c| c.raw_gap).fold(f64::INFINITY, f64::min),
        max_lambda: lambda.iter().copied().fold(0.0, f64::max),
        friction_power: v.dot(&ff),
        penetrations: cs.penetrations(),
        cone_excess: if cs.is_empty() { 0.0 } else { cone_excess },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn floor_cfg(mu: f64) -> ContactConfig {
        ContactConfig {
            surfaces: vec![ImplicitSurface::half_space(Vector3::zeros(), Vector3::z())],
            delta: 0.1,
            kappa: 10.0,
            mu,
            epsilon: 1e-3,
        }
    }

    fn single_vertex_mesh(z: f64) -> (TetMesh, DVector<f64>) {
        let mesh = TetMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(1.0, 0.0, 1.0),
                Vector3::new(0.0, 1.0, 1.0),
                Vector3::new(0.0, 0.0, 2.0),
            ],
            vec![[0, 1, 2, 3]],
            vec![],
            Some(vec![0]),
        )
        .unwrap();
        let mut q = mesh.rest_state();
        q[2] = z;
        (mesh, q)
    }

    #[test]
    fn barrier_closed_forms() {
        let d = 0.3;
        assert_eq!(barrier_value(d, d), 0.0);
        assert_eq!(barrier_value(2.0 * d, d), 0.0);
        let half = barrier_value(d / 2.0, d);
        assert!((half - d * d / 4.0 * 2f64.ln()).abs() < 1e-15);
        assert!(barrier_value(1e-12, d) > 1e-3 && barrier_value(1e-12, d) > barrier_value(1e-6, d));
    }

    #[test]
    fn barrier_derivatives_match_finite_differences() {
        let d = 0.2;
        for i in 1..50 {
            let x = d * i as f64 / 50.0;
            let h = 1e-7 * d;
            let fd1 = (barrier_value(x + h, d) - barrier_value(x - h, d)) / (2.0 * h);
            let fd2 = (barrier_derivative(x + h, d) - barrier_derivative(x - h, d)) / (2.0 * h);
            let b1 = barrier_derivative(x, d);
            let b2 = barrier_second_derivative(x, d);
            assert!((fd1 - b1).abs() <= 1e-6 * b1.abs().max(d));
            assert!((fd2 - b2).abs() <= 1e-5 * b2.abs().max(1.0));
        }
    }

    #[test]
    fn barrier_is_c2_at_support_boundary() {
        let d = 0.5;
        let x = d * (1.0 - 1e-4);
        assert!(barrier_value(x, d) <= 1e-6);
        assert!(barrier_derivative(x, d).abs() <= 1e-6);
        assert!(barrier_second_derivative(x, d).abs() <= 1e-3);
        let xs = d * (1.0 - 1e-7);
        assert!(barrier_second_derivative(xs, d).abs() <= 1e-6);
    }

    #[test]
    fn lambda_is_monotone_and_vanishes_at_delta() {
        let cfg = floor_cfg(0.0);
        let lam = |x: f64| -cfg.kappa * barrier_derivative(x, cfg.delta);
        assert_eq!(lam(cfg.delta), 0.0);
        let grid: Vec<f64> = (1..=100).map(|i| cfg.delta * i as f64 / 101.0).collect();
        for w in grid.windows(2) {
            assert!(lam(w[0]) > lam(w[1]));
            assert!(lam(w[1]) >= 0.0);
        }
    }

    #[test]
    fn gap_inclusion_rules() {
        let cfg = floor_cfg(0.0);
        let (mesh, q) = single_vertex_mesh(cfg.delta);
        assert!(gap(&mesh, &cfg, &q).unwrap().is_empty());
        let (mesh, q) = single_vertex_mesh(cfg.delta / 2.0);
        let cs = gap(&mesh, &cfg, &q).unwrap();
        assert_eq!(cs.len(), 1);
        assert!((cs.contacts[0].gap - 0.05).abs() < 1e-15);
        let (mesh, q) = single_vertex_mesh(-0.01);
        let cs = gap(&mesh, &cfg, &q).unwrap();
        assert!(cs.contacts[0].penetrated);
        assert_eq!(cs.contacts[0].gap, cfg.min_gap());
        assert!(contact_force(&cs, &cfg, q.len()).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sphere_distance_and_gradient() {
        let s = ImplicitSurface::sphere(Vector3::zeros(), 1.0);
        let x = Vector3::new(0.9, 1.2, 0.0);
        assert!((s.distance(&x) - 0.5).abs() < 1e-15);
        let h = 1e-6;
        let g = s.gradient(&x).unwrap();
        let hs = s.hessian(&x);
        for k in 0..3 {
            let e = Vector3::ith(k, h);
            let fd = (s.distance(&(x + e)) - s.distance(&(x - e))) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6);
            let fdg = (s.gradient(&(x + e)).unwrap() - s.gradient(&(x - e)).unwrap()) / (2.0 * h);
            assert!((fdg - hs.column(k)).norm() < 1e-6);
        }
        assert!(s.gradient(&Vector3::zeros()).is_none());
    }

    #[test]
    fn force_is_barrier_gradient() {
        let mut cfg = floor_cfg(0.0);
        cfg.surfaces.push(ImplicitSurface::sphere(Vector3::new(0.0, 0.0, -2.0), 2.0));
        let mesh = TetMesh::box_grid([2, 2, 1], Vector3::new(1.0, 1.0, 0.5), Vector3::new(-0.5, -0.5, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut q = mesh.rest_state();
            for i in 0..mesh.num_vertices() {
                q[3 * i + 2] += rng.random_range(0.02..0.09);
                q[3 * i] += rng.random_range(-0.01..0.01);
            }
            let cs = gap(&mesh, &cfg, &q).unwrap();
            assert!(!cs.is_empty());
            let f = contact_force(&cs, &cfg, q.len());
            let energy = |q: &DVector<f64>| contact_energy(&gap(&mesh, &cfg, q).unwrap(), &cfg);
            let h = 1e-7;
            let mut fd = DVector::zeros(q.len());
            for k in 0..q.len() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                fd[k] = -(energy(&qp) - energy(&qm)) / (2.0 * h);
            }
            assert!((&f - &fd).norm() <= 1e-5 * f.norm());

            let k = crate::linalg::SparseOperator::from_triplets(q.len(), contact_stiffness(&cs, &cfg)).to_dense();
            let dir = DVector::from_fn(q.len(), |_, _| rng.random_range(-1.0..1.0));
            let fdk = -(contact_force(&gap(&mesh, &cfg, &(&q + &dir * h)).unwrap(), &cfg, q.len())
                - contact_force(&gap(&mesh, &cfg, &(&q - &dir * h)).unwrap(), &cfg, q.len()))
                / (2.0 * h);
            let kd = &k * &dir;
            assert!((&kd - &fdk).norm() <= 1e-4 * kd.norm());
        }
    }

    #[test]
    fn single_contact_force_along_normal() {
        let cfg = floor_cfg(0.0);
        let (mesh, q) = single_vertex_mesh(0.04);
        let cs = gap(&mesh, &cfg, &q).unwrap();
        let f = contact_force(&cs, &cfg, q.len());
        let mag = cfg.kappa * barrier_derivative(0.04, cfg.delta).abs();
        assert!((f[2] - mag).abs() < 1e-12 * mag);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.0);
    }

    #[test]
    fn frames_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let b = tangent_frame(&n);
            assert!((b.transpose() * b - Matrix3::identity()).norm() <= 1e-12);
        }
        let b = tangent_frame(&Vector3::z());
        assert_eq!(b.column(0).into_owned(), Vector3::z());
        assert_eq!(b.column(1)[2], 0.0);
        assert_eq!(b.column(2)[2], 0.0);
    }

    #[test]
    fn jacobian_and_sliding_basis() {
        let cfg = floor_cfg(0.5);
        let (mesh, q) = single_vertex_mesh(0.05);
        let cs = gap(&mesh, &cfg, &q).unwrap();
        let jc = contact_jacobian(&cs, q.len());
        let w = Vector3::new(0.3, -0.2, 0.7);
        let v = DVector::from_fn(q.len(), |i, _| w[i % 3]);
        assert_eq!(jc.relative_velocity(&v).as_slice(), w.as_slice());
        let t = sliding_basis(&jc);
        let vt = t.transpose_apply(&v);
        let frame = tangent_frame(&Vector3::z());
        assert!((vt[0] - frame.column(1).dot(&w)).abs() < 1e-15);
        assert!((Vector2::new(vt[0], vt[1]).norm() - w.xy().norm()).abs() < 1e-15);
        let mut vn = DVector::zeros(q.len());
        vn[2] = 1.0;
        assert_eq!(t.transpose_apply(&vn).norm(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fbar = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let vr = DVector::from_fn(q.len(), |_, _| rng.random_range(-1.0..1.0));
        assert!((t.apply(&fbar).dot(&vr) - fbar.dot(&t.transpose_apply(&vr))).abs() < 1e-12);
    }

    #[test]
    fn eta_profile_values() {
        let eps = 0.2;
        assert_eq!(eta_smooth(&Vector2::zeros(), eps), Vector2::zeros());
        let v = Vector2::new(0.06, 0.08);
        assert!((eta_smooth(&v, eps) - v / 0.1 * 0.75).norm() < 1e-15);
        assert!((eta_smooth(&(v * 10.0), eps).norm() - 1.0).abs() < 1e-15);
        assert_eq!(s_profile(eps, eps), 1.0);
        assert_eq!(s_profile_derivative(eps, eps), 0.0);
        let h = 1e-7;
        for v in [Vector2::new(0.01, -0.03), Vector2::new(0.3, 0.1)] {
            let jac = eta_jacobian(&v, eps);
            for k in 0..2 {
                let e = Vector2::ith(k, h);
                let fd = (eta_smooth(&(v + e), eps) - eta_smooth(&(v - e), eps)) / (2.0 * h);
                assert!((fd - jac.column(k)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn friction_is_dissipative_and_inside_cone() {
        let cfg = floor_cfg(0.4);
        let mesh = TetMesh::box_grid([2, 2, 1], Vector3::new(1.0, 1.0, 0.5), Vector3::zeros()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut q = mesh.rest_state();
            for i in 0..mesh.num_vertices() {
                q[3 * i + 2] += rng.random_range(0.01..0.2);
            }
            let v = DVector::from_fn(q.len(), |_, _| rng.random_range(-0.01..0.01));
            let cs = gap(&mesh, &cfg, &q).unwrap();
            let diag = diagnostics(&cs, &cfg, &v);
            assert!(diag.friction_power <= 0.0);
            assert!(diag.cone_excess <= 1e-12);
        }
        let (mesh, q) = single_vertex_mesh(0.05);
        let cs = gap(&mesh, &cfg, &q).unwrap();
        let lambda = contact_lambda(&cs, &cfg);
        let mut v = DVector::zeros(q.len());
        assert_eq!(friction_force(&cs, &cfg, &lambda, &v).norm(), 0.0);
        v[0] = 10.0;
        let f = friction_force(&cs, &cfg, &lambda, &v);
        assert!((f.norm() - cfg.mu * lambda[0]).abs() <= 1e-10 * f.norm());
        assert!(f[0] < 0.0);
        assert_eq!(friction_force(&cs, &floor_cfg(0.0), &lambda, &v).norm(), 0.0);
    }
}
