//! First-order form `u' = F(u)` of the semi-discrete equations of motion,
//! with `u = (q; v)`, `F(u) = (P v; P M^-1 f_tot(q, v))` and `P` the
//! projection that zeroes pinned degrees of freedom.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::contact::{self, ContactConfig, ContactSet};
use crate::error::{Error, Result};
use crate::fem::{self, MaterialModel, MaterialParams, RayleighParams, TetMesh};
use crate::linalg::{DenseLu, LinearSolve, LinearSolverKind, SparseOperator, SymmetricSolver};

/// Linearization of `F` at a state.
pub trait Jacobian {
    fn dim(&self) -> usize;
    fn apply(&self, w: &DVector<f64>) -> DVector<f64>;
    /// Prepared solver for `I - c J`.
    fn factor_shifted(&self, c: f64, kind: LinearSolverKind) -> Result<Box<dyn LinearSolve>>;
    fn to_dense(&self) -> DMatrix<f64>;
}

/// Autonomous or forced first-order system `u' = F(t, u)`.
pub trait OdeSystem {
    type Jac: Jacobian;
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, t: f64, u: &DVector<f64>) -> Result<Self::Jac>;
    /// States the nonlinear solvers may step to.
    fn admissible(&self, _u: &DVector<f64>) -> bool {
        true
    }
    fn linear_solver(&self) -> LinearSolverKind {
        LinearSolverKind::Direct
    }
}

#[derive(Debug, Clone)]
pub struct DenseJacobian(pub DMatrix<f64>);

impl Jacobian for DenseJacobian {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.0 * w
    }

    fn factor_shifted(&self, c: f64, _kind: LinearSolverKind) -> Result<Box<dyn LinearSolve>> {
        let n = self.dim();
        Ok(Box::new(DenseLu::new(DMatrix::identity(n, n) - &self.0 * c)?))
    }

    fn to_dense(&self) -> DMatrix<f64> {
        self.0.clone()
    }
}

/// `J = [[0, P], [-P M^-1 K, -P M^-1 D]]`.
#[derive(Debug, Clone)]
pub struct BlockJacobian {
    free: Vec<bool>,
    mass: DVector<f64>,
    k: SparseOperator,
    d: Option<SparseOperator>,
}

impl BlockJacobian {
    pub fn new(free: Vec<bool>, mass: DVector<f64>, k: SparseOperator, d: Option<SparseOperator>) -> Result<Self> {
        let n = mass.len();
        Error::check_dim(n, free.len())?;
        Error::check_dim(n, k.dim())?;
        if let Some(d) = &d {
            Error::check_dim(n, d.dim())?;
        }
        Ok(Self { free, mass, k, d })
    }

    pub fn ndof(&self) -> usize {
        self.mass.len()
    }

    pub fn stiffness(&self) -> &SparseOperator {
        &self.k
    }

    pub fn damping(&self) -> Option<&SparseOperator> {
        self.d.as_ref()
    }

    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn free_mask(&self) -> &[bool] {
        &self.free
    }

    fn free_indices(&self) -> Vec<usize> {
        (0..self.ndof()).filter(|&i| self.free[i]).collect()
    }
}

impl Jacobian for BlockJacobian {
    fn dim(&self) -> usize {
        2 * self.ndof()
    }

    fn apply(&self, w: &DVector<f64>) -> DVector<f64> {
        let n = self.ndof();
        let x = w.rows(0, n).into_owned();
        let y = w.rows(n, n).into_owned();
        let mut f = self.k.mul_vec(&x);
        if let Some(d) = &self.d {
            d.mul_vec_acc(&y, 1.0, &mut f);
        }
        let mut out = DVector::zeros(2 * n);
        for i in 0..n {
            if self.free[i] {
                out[i] = y[i];
                out[n + i] = -f[i] / self.mass[i];
            }
        }
        out
    }

    fn factor_shifted(&self, c: f64, kind: LinearSolverKind) -> Result<Box<dyn LinearSolve>> {
        let free = self.free_indices();
        let mut s = self.k.restrict(&free).scaled(c * c);
        if let Some(d) = &self.d {
            s = s.linear_combination(1.0, &d.restrict(&free), c)?;
        }
        let m_f = DVector::from_iterator(free.len(), free.iter().map(|&i| self.mass[i]));
        s = s.linear_combination(1.0, &SparseOperator::from_diagonal(&m_f), 1.0)?;
        let solver = SymmetricSolver::new(&s, kind)?;
        Ok(Box::new(ShiftedBlockSolver {
            c,
            jac: self.clone(),
            free,
            solver,
        }))
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let n = self.ndof();
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            if self.free[i] {
                j[(i, n + i)] = 1.0;
            }
        }
        for (r, c, v) in self.k.triplets() {
            if self.free[r] {
                j[(n + r, c)] -= v / self.mass[r];
            }
        }
        if let Some(d) = &self.d {
            for (r, c, v) in d.triplets() {
                if self.free[r] {
                    j[(n + r, n + c)] -= v / self.mass[r];
                }
            }
        }
        j
    }
}

/// Solves `(I - cJ)(x; y) = (a; b)` through the free-DOF system
/// `(M + cD + c^2 K) y_f = M b_f - c K a - c D b_fixed`, `x_f = a_f + c y_f`.
struct ShiftedBlockSolver {
    c: f64,
    jac: BlockJacobian,
    free: Vec<usize>,
    solver: SymmetricSolver,
}

impl LinearSolve for ShiftedBlockSolver {
    fn dim(&self) -> usize {
        self.jac.dim()
    }

    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_dim(self.dim(), rhs.len())?;
        let n = self.jac.ndof();
        let a = rhs.rows(0, n).into_owned();
        let b = rhs.rows(n, n).into_owned();
        let mut r = -self.jac.k.mul_vec(&a) * self.c;
        if let Some(d) = &self.jac.d {
            let b_fixed = DVector::from_fn(n, |i, _| if self.jac.free[i] { 0.0 } else { b[i] });
            d.mul_vec_acc(&b_fixed, -self.c, &mut r);
        }
        let r_f = DVector::from_iterator(
            self.free.len(),
            self.free.iter().map(|&i| self.jac.mass[i] * b[i] + r[i]),
        );
        let y_f = self.solver.solve(&r_f)?;
        let mut out = rhs.clone();
        for (k, &i) in self.free.iter().enumerate() {
            out[i] = a[i] + self.c * y_f[k];
            out[n + i] = y_f[k];
        }
        Ok(out)
    }

    fn row_norms(&self) -> Option<DVector<f64>> {
        let n = self.jac.ndof();
        let c = self.c;
        let mut norms = DVector::from_element(2 * n, 1.0);
        for i in 0..n {
            if self.jac.free[i] {
                norms[i] = c.abs().max(1.0);
            }
        }
        for (r, _, v) in self.jac.k.triplets() {
            if self.jac.free[r] {
                norms[n + r] = norms[n + r].max((c * v / self.jac.mass[r]).abs());
            }
        }
        if let Some(d) = &self.jac.d {
            for (r, col, v) in d.triplets() {
                if self.jac.free[r] {
                    let e = c * v / self.jac.mass[r] + if r == col { 1.0 } else { 0.0 };
                    norms[n + r] = norms[n + r].max(e.abs());
                }
            }
        }
        Some(norms)
    }
}

/// Mechanical system `M q'' = f_tot(q, v)` with lumped mass and pinned DOFs.
pub trait SecondOrderSystem {
    fn ndof(&self) -> usize;
    fn mass(&self) -> &DVector<f64>;
    fn free_mask(&self) -> &[bool];
    /// Reference configuration; displacements are `q - rest`.
    fn rest_positions(&self) -> DVector<f64>;
    /// Total force, unmasked.
    fn force(&self, t: f64, q: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;
    /// `(K_tot, D_tot)` with `K_tot = -df/dq` and `D_tot = -df/dv`.
    fn tangent(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<(SparseOperator, Option<SparseOperator>)>;
    /// Potential whose negative gradient is the total force; fails when
    /// velocity-dependent forces are present.
    fn potential(&self, q: &DVector<f64>) -> Result<f64>;
    fn admissible_positions(&self, _q: &DVector<f64>) -> bool {
        true
    }
    fn linear_solver(&self) -> LinearSolverKind {
        LinearSolverKind::Direct
    }
}

/// `u = (q; v)` view of a [`SecondOrderSystem`].
#[derive(Debug, Clone, Copy)]
pub struct FirstOrder<'a, S: ?Sized>(pub &'a S);

impl<S: SecondOrderSystem + ?Sized> OdeSystem for FirstOrder<'_, S> {
    type Jac = BlockJacobian;

    fn dim(&self) -> usize {
        2 * self.0.ndof()
    }

    fn rhs(&self, t: f64, u: &DVector<f64>) -> Result<DVector<f64>> {
        eval_f_at(self.0, t, u)
    }

    fn jacobian(&self, _t: f64, u: &DVector<f64>) -> Result<BlockJacobian> {
        eval_j(self.0, u)
    }

    fn admissible(&self, u: &DVector<f64>) -> bool {
        let n = self.0.ndof();
        self.0.admissible_positions(&u.rows(0, n).into_owned())
    }

    fn linear_solver(&self) -> LinearSolverKind {
        self.0.linear_solver()
    }
}

pub fn split_state(u: &DVector<f64>, n: usize) -> (DVector<f64>, DVector<f64>) {
    (u.rows(0, n).into_owned(), u.rows(n, n).into_owned())
}

pub fn join_state(q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mut u = DVector::zeros(q.len() + v.len());
    u.rows_mut(0, q.len()).copy_from(q);
    u.rows_mut(q.len(), v.len()).copy_from(v);
    u
}

pub fn eval_f<S: SecondOrderSystem + ?Sized>(sys: &S, u: &DVector<f64>) -> Result<DVector<f64>> {
    eval_f_at(sys, 0.0, u)
}

pub fn eval_f_at<S: SecondOrderSystem + ?Sized>(sys: &S, t: f64, u: &DVector<f64>) -> Result<DVector<f64>> {
    let n = sys.ndof();
    Error::check_dim(2 * n, u.len())?;
    let (q, v) = split_state(u, n);
    let f = sys.force(t, &q, &v)?;
    let (m, free) = (sys.mass(), sys.free_mask());
    let mut out = DVector::zeros(2 * n);
    for i in 0..n {
        if free[i] {
            out[i] = v[i];
            out[n + i] = f[i] / m[i];
        }
    }
    Ok(out)
}

pub fn eval_j<S: SecondOrderSystem + ?Sized>(sys: &S, u: &DVector<f64>) -> Result<BlockJacobian> {
    let n = sys.ndof();
    Error::check_dim(2 * n, u.len())?;
    let (q, v) = split_state(u, n);
    let (k, d) = sys.tangent(&q, &v)?;
    BlockJacobian::new(sys.free_mask().to_vec(), sys.mass().clone(), k, d)
}

/// `c(u) = P M^-1 (f_tot + K (q - q_rest) + D v)`, so that
/// `F(u) = J (u - u_rest) + (0; c)` with `u_rest = (q_rest; 0)`.
pub fn eval_remainder<S: SecondOrderSystem + ?Sized>(sys: &S, u: &DVector<f64>) -> Result<DVector<f64>> {
    let n = sys.ndof();
    Error::check_dim(2 * n, u.len())?;
    let (q, v) = split_state(u, n);
    let mut f = sys.force(0.0, &q, &v)?;
    let (k, d) = sys.tangent(&q, &v)?;
    k.mul_vec_acc(&(&q - sys.rest_positions()), 1.0, &mut f);
    if let Some(d) = &d {
        d.mul_vec_acc(&v, 1.0, &mut f);
    }
    let (m, free) = (sys.mass(), sys.free_mask());
    Ok(DVector::from_fn(n, |i, _| if free[i] { f[i] / m[i] } else { 0.0 }))
}

/// Positions, velocities, time and optional previous step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub t: f64,
    pub history: Option<(DVector<f64>, DVector<f64>)>,
}

impl SimState {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Result<Self> {
        Error::check_dim(q.len(), v.len())?;
        Ok(Self { q, v, t: 0.0, history: None })
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let v = DVector::zeros(q.len());
        Self { q, v, t: 0.0, history: None }
    }

    pub fn u(&self) -> DVector<f64> {
        join_state(&self.q, &self.v)
    }

    pub fn previous_u(&self) -> Option<DVector<f64>> {
        self.history.as_ref().map(|(q, v)| join_state(q, v))
    }

    /// Advances to `u1` at `t + h`, keeping the current state as history.
    pub fn advance(&mut self, u1: &DVector<f64>, h: f64) {
        let n = self.q.len();
        let (q1, v1) = split_state(u1, n);
        let old_q = std::mem::replace(&mut self.q, q1);
        let old_v = std::mem::replace(&mut self.v, v1);
        self.history = Some((old_q, old_v));
        self.t += h;
    }
}

/// Energies of a state. Gravity potential is measured from the origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Energies {
    pub kinetic: f64,
    pub elastic: f64,
    pub gravity: f64,
    pub barrier: f64,
}

impl Energies {
    pub fn potential(&self) -> f64 {
        self.elastic + self.gravity + self.barrier
    }

    pub fn total(&self) -> f64 {
        self.kinetic + self.potential()
    }
}

/// Force contributions at one state, each unmasked.
#[derive(Debug, Clone)]
pub struct ForceBreakdown {
    pub elastic: DVector<f64>,
    pub damping: DVector<f64>,
    pub contact: DVector<f64>,
    pub friction: DVector<f64>,
    pub external: DVector<f64>,
}

impl ForceBreakdown {
    pub fn total(&self) -> DVector<f64> {
        &self.elastic + &self.damping + &self.contact + &self.friction + &self.external
    }
}

/// FEM body with Rayleigh damping, gravity and optional barrier contact.
#[derive(Debug, Clone)]
pub struct ForceModel {
    mesh: TetMesh,
    material: MaterialParams,
    rayleigh: RayleighParams,
    gravity: Vector3<f64>,
    contact: Option<ContactConfig>,
    solver: LinearSolverKind,
    mass: DVector<f64>,
    mass_op: SparseOperator,
    free: Vec<bool>,
    external: DVector<f64>,
    /// Constant stiffness of the linear material.
    linear_k: Option<SparseOperator>,
}

impl ForceModel {
    pub fn new(
        mesh: TetMesh,
        material: MaterialParams,
        rayleigh: RayleighParams,
        gravity: Vector3<f64>,
        contact: Option<ContactConfig>,
    ) -> Result<Self> {
        material.validate()?;
        rayleigh.validate()?;
        if let Some(c) = &contact {
            c.validate()?;
        }
        let mass = fem::lumped_mass(&mesh, material.density)?;
        let mass_op = SparseOperator::from_diagonal(&mass);
        let free = mesh.free_mask();
        let external = DVector::from_fn(mass.len(), |i, _| mass[i] * gravity[i % 3]);
        let linear_k = match material.model {
            MaterialModel::LinearElastic => Some(fem::stiffness_matrix(&mesh, &material, &mesh.rest_state())?),
            MaterialModel::StableNeoHookean => None,
        };
        Ok(Self {
            mesh,
            material,
            rayleigh,
            gravity,
            contact,
            solver: LinearSolverKind::Direct,
            mass,
            mass_op,
            free,
            external,
            linear_k,
        })
    }

    pub fn with_linear_solver(mut self, kind: LinearSolverKind) -> Self {
        self.solver = kind;
        self
    }

    pub fn mesh(&self) -> &TetMesh {
        &self.mesh
    }

    pub fn material(&self) -> &MaterialParams {
        &self.material
    }

    pub fn rayleigh(&self) -> &RayleighParams {
        &self.rayleigh
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn contact_config(&self) -> Option<&ContactConfig> {
        self.contact.as_ref()
    }

    pub fn mass_matrix(&self) -> &SparseOperator {
        &self.mass_op
    }

    pub fn rest_state(&self) -> DVector<f64> {
        self.mesh.rest_state()
    }

    pub fn elastic_force(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.linear_k {
            Some(k) => Ok(-k.mul_vec(&(q - self.mesh.rest_state()))),
            None => fem::elastic_force(&self.mesh, &self.material, q),
        }
    }

    pub fn stiffness(&self, q: &DVector<f64>) -> Result<SparseOperator> {
        match &self.linear_k {
            Some(k) => Ok(k.clone()),
            None => fem::stiffness_matrix(&self.mesh, &self.material, q),
        }
    }

    pub fn contact_set(&self, q: &DVector<f64>) -> Result<Option<ContactSet>> {
        self.contact
            .as_ref()
            .map(|c| contact::gap(&self.mesh, c, q))
            .transpose()
    }

    pub fn forces(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<ForceBreakdown> {
        let n = self.ndof();
        Error::check_dim(n, q.len())?;
        Error::check_dim(n, v.len())?;
        let elastic = self.elastic_force(q)?;
        let damping = if self.rayleigh.is_zero() {
            DVector::zeros(n)
        } else {
            let d = fem::rayleigh_damping(&self.stiffness(q)?, &self.mass_op, &self.rayleigh)?;
            -d.mul_vec(v)
        };
        let (contact, friction) = match (&self.contact, self.contact_set(q)?) {
            (Some(cfg), Some(cs)) => {
                let lambda = contact::contact_lambda(&cs, cfg);
                (
                    contact::contact_force(&cs, cfg, n),
                    contact::friction_force(&cs, cfg, &lambda, v),
                )
            }
            _ => (DVector::zeros(n), DVector::zeros(n)),
        };
        Ok(ForceBreakdown {
            elastic,
            damping,
            contact,
            friction,
            external: self.external.clone(),
        })
    }

    pub fn energies(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<Energies> {
        let elastic = match &self.linear_k {
            Some(k) => {
                let dx = q - self.mesh.rest_state();
                0.5 * dx.dot(&k.mul_vec(&dx))
            }
            None => fem::elastic_energy(&self.mesh, &self.material, q)?,
        };
        let barrier = match (&self.contact, self.contact_set(q)?) {
            (Some(cfg), Some(cs)) => contact::contact_energy(&cs, cfg),
            _ => 0.0,
        };
        let kinetic = 0.5 * v.iter().zip(self.mass.iter()).map(|(v, m)| m * v * v).sum::<f64>();
        Ok(Energies {
            kinetic,
            elastic,
            gravity: -self.external.dot(q),
            barrier,
        })
    }
}

impl SecondOrderSystem for ForceModel {
    fn ndof(&self) -> usize {
        self.mass.len()
    }

    fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    fn free_mask(&self) -> &[bool] {
        &self.free
    }

    fn rest_positions(&self) -> DVector<f64> {
        self.mesh.rest_state()
    }

    fn force(&self, _t: f64, q: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forces(q, v)?.total())
    }

    fn tangent(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<(SparseOperator, Option<SparseOperator>)> {
        let n = self.ndof();
        let k_el = self.stiffness(q)?;
        let mut d = if self.rayleigh.is_zero() {
            None
        } else {
            Some(fem::rayleigh_damping(&k_el, &self.mass_op, &self.rayleigh)?)
        };
        let mut k = k_el;
        if let (Some(cfg), Some(cs)) = (&self.contact, self.contact_set(q)?) {
            if !cs.is_empty() {
                let kc = SparseOperator::from_triplets(n, contact::contact_stiffness(&cs, cfg));
                k = k.linear_combination(1.0, &kc, 1.0)?;
                if cfg.mu > 0.0 {
                    let lambda = contact::contact_lambda(&cs, cfg);
                    let df = SparseOperator::from_triplets(n, contact::friction_damping(&cs, cfg, &lambda, v));
                    d = Some(match d {
                        Some(d) => d.linear_combination(1.0, &df, 1.0)?,
                        None => df,
                    });
                }
            }
        }
        Ok((k, d))
    }

    fn potential(&self, q: &DVector<f64>) -> Result<f64> {
        if !self.rayleigh.is_zero() {
            return Err(Error::NotIntegrable("Rayleigh damping is velocity dependent".into()));
        }
        if self.contact.as_ref().is_some_and(|c| c.mu > 0.0) {
            return Err(Error::NotIntegrable("friction has no potential".into()));
        }
        Ok(self.energies(q, &DVector::zeros(q.len()))?.potential())
    }

    /// Rejects configurations with a vertex on or behind a contact surface.
    fn admissible_positions(&self, q: &DVector<f64>) -> bool {
        let Some(cfg) = &self.contact else { return true };
        self.mesh.surface_vertices().iter().all(|&i| {
            let x = Vector3::new(q[3 * i], q[3 * i + 1], q[3 * i + 2]);
            cfg.surfaces.iter().all(|s| s.distance(&x) > 0.0)
        })
    }

    fn linear_solver(&self) -> LinearSolverKind {
        self.solver
    }
}

/// `M q'' + D q' + K (q - q_rest) = f_ext` with constant coefficients.
#[derive(Debug, Clone)]
pub struct LinearSecondOrder {
    pub mass: DVector<f64>,
    pub stiffness: SparseOperator,
    pub damping: Option<SparseOperator>,
    pub rest: DVector<f64>,
    pub external: DVector<f64>,
    pub free: Vec<bool>,
}

impl LinearSecondOrder {
    pub fn new(mass: DVector<f64>, stiffness: SparseOperator) -> Result<Self> {
        let n = mass.len();
        Error::check_dim(n, stiffness.dim())?;
        if mass.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidParameter("masses must be positive".into()));
        }
        Ok(Self {
            mass,
            stiffness,
            damping: None,
            rest: DVector::zeros(n),
            external: DVector::zeros(n),
            free: vec![true; n],
        })
    }

    pub fn with_damping(mut self, d: SparseOperator) -> Result<Self> {
        Error::check_dim(self.mass.len(), d.dim())?;
        self.damping = Some(d);
        Ok(self)
    }

    pub fn with_external(mut self, f: DVector<f64>) -> Result<Self> {
        Error::check_dim(self.mass.len(), f.len())?;
        self.external = f;
        Ok(self)
    }
}

impl SecondOrderSystem for LinearSecondOrder {
    fn ndof(&self) -> usize {
        self.mass.len()
    }

    fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    fn free_mask(&self) -> &[bool] {
        &self.free
    }

    fn rest_positions(&self) -> DVector<f64> {
        self.rest.clone()
    }

    fn force(&self, _t: f64, q: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mut f = &self.external - self.stiffness.mul_vec(&(q - &self.rest));
        if let Some(d) = &self.damping {
            d.mul_vec_acc(v, -1.0, &mut f);
        }
        Ok(f)
    }

    fn tangent(&self, _q: &DVector<f64>, _v: &DVector<f64>) -> Result<(SparseOperator, Option<SparseOperator>)> {
        Ok((self.stiffness.clone(), self.damping.clone()))
    }

    fn potential(&self, q: &DVector<f64>) -> Result<f64> {
        if self.damping.is_some() {
            return Err(Error::NotIntegrable("damping is velocity dependent".into()));
        }
        let dx = q - &self.rest;
        Ok(0.5 * dx.dot(&self.stiffness.mul_vec(&dx)) - self.external.dot(q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::ImplicitSurface;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn beam(model: MaterialModel, rayleigh: RayleighParams, contact: Option<ContactConfig>) -> ForceModel {
        let mesh = TetMesh::box_grid([3, 1, 1], Vector3::new(0.3, 0.1, 0.1), Vector3::new(0.0, 0.0, 0.05))
            .unwrap()
            .fix_where(|p| p.x == 0.0)
            .unwrap();
        let mat = MaterialParams::new(model, 1e5, 0.4, 1000.0).unwrap();
        ForceModel::new(mesh, mat, rayleigh, Vector3::new(0.0, 0.0, -9.81), contact).unwrap()
    }

    fn random_state(m: &ForceModel, rng: &mut ChaCha8Rng, amp: f64) -> DVector<f64> {
        let n = m.ndof();
        let mut q = m.rest_state();
        let free = m.free_mask();
        for i in 0..n {
            if free[i] {
                q[i] += rng.random_range(-amp..amp);
            }
        }
        let v = DVector::from_fn(n, |i, _| if free[i] { rng.random_range(-0.1..0.1) } else { 0.0 });
        join_state(&q, &v)
    }

    #[test]
    fn rest_state_without_gravity_is_equilibrium() {
        let mut m = beam(MaterialModel::StableNeoHookean, RayleighParams::default(), None);
        m.gravity = Vector3::zeros();
        m.external.fill(0.0);
        let u = join_state(&m.rest_state(), &DVector::zeros(m.ndof()));
        assert!(eval_f(&m, &u).unwrap().norm() < 1e-9);
    }

    #[test]
    fn linear_rhs_matches_direct_assembly() {
        let m = beam(MaterialModel::LinearElastic, RayleighParams::default(), None);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_state(&m, &mut rng, 0.01);
        let n = m.ndof();
        let (q, v) = split_state(&u, n);
        let k = fem::stiffness_matrix(m.mesh(), m.material(), &q).unwrap();
        let f = eval_f(&m, &u).unwrap();
        for i in 0..n {
            if m.free_mask()[i] {
                assert_eq!(f[i], v[i]);
                let expected = -k.mul_vec(&(&q - m.rest_state()))[i] / m.mass()[i] + m.gravity[i % 3];
                assert!((f[n + i] - expected).abs() <= 1e-9 * expected.abs().max(1.0));
            } else {
                assert_eq!(f[i], 0.0);
                assert_eq!(f[n + i], 0.0);
            }
        }
        let c = eval_remainder(&m, &u).unwrap();
        for i in 0..n {
            let g = if m.free_mask()[i] { m.gravity[i % 3] } else { 0.0 };
            assert!((c[i] - g).abs() < 1e-9);
        }
    }

    fn floor() -> ContactConfig {
        ContactConfig {
            surfaces: vec![ImplicitSurface::half_space(Vector3::zeros(), Vector3::z())],
            delta: 0.08,
            kappa: 50.0,
            mu: 0.3,
            epsilon: 0.05,
        }
    }

    fn fd_jacobian_error(m: &ForceModel, u: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let j = eval_j(m, u).unwrap();
        let h = 1e-7;
        let fd = (eval_f(m, &(u + w * h)).unwrap() - eval_f(m, &(u - w * h)).unwrap()) / (2.0 * h);
        let jw = j.apply(w);
        (&fd - &jw).norm() / jw.norm()
    }

    #[test]
    fn jacobian_recomposes_rhs() {
        let m = beam(MaterialModel::StableNeoHookean, RayleighParams { alpha: 0.01, beta: 0.5 }, Some(floor()));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = m.ndof();
        for _ in 0..5 {
            let u = random_state(&m, &mut rng, 0.01);
            let j = eval_j(&m, &u).unwrap();
            let jd = j.to_dense();
            let w = DVector::from_fn(u.len(), |_, _| rng.random_range(-1.0..1.0));
            assert!((j.apply(&w) - &jd * &w).norm() <= 1e-12 * (&jd * &w).norm());
            let c = eval_remainder(&m, &u).unwrap();
            let f = eval_f(&m, &u).unwrap();
            let u_rest = join_state(&m.rest_state(), &DVector::zeros(n));
            let mut recomposed = j.apply(&(&u - u_rest));
            for i in 0..n {
                recomposed[n + i] += c[i];
            }
            assert!((&recomposed - &f).norm() <= 1e-10 * f.norm());
        }
    }

    #[test]
    fn contact_and_friction_jacobian_blocks_match_finite_differences() {
        let mut frictionless = floor();
        frictionless.mu = 0.0;
        let m = beam(MaterialModel::StableNeoHookean, RayleighParams::default(), Some(frictionless));
        let damped = beam(MaterialModel::LinearElastic, RayleighParams { alpha: 0.01, beta: 0.5 }, Some(floor()));
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = m.ndof();
        for _ in 0..20 {
            let u = random_state(&m, &mut rng, 0.01);
            let w = DVector::from_fn(2 * n, |_, _| rng.random_range(-1.0..1.0));
            assert!(fd_jacobian_error(&m, &u, &w) <= 1e-4);
            // Friction enters J through its velocity derivative only.
            let mut wv = w.clone();
            wv.rows_mut(0, n).fill(0.0);
            assert!(fd_jacobian_error(&damped, &u, &wv) <= 1e-4);
        }
    }

    #[test]
    fn undamped_jacobian_without_damping_is_exact() {
        let m = beam(MaterialModel::StableNeoHookean, RayleighParams::default(), None);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let u = random_state(&m, &mut rng, 0.01);
            let j = eval_j(&m, &u).unwrap();
            let w = DVector::from_fn(u.len(), |_, _| rng.random_range(-1.0..1.0));
            let h = 1e-6;
            let fd = (eval_f(&m, &(&u + &w * h)).unwrap() - eval_f(&m, &(&u - &w * h)).unwrap()) / (2.0 * h);
            let jw = j.apply(&w);
            assert!((&fd - &jw).norm() <= 1e-4 * jw.norm());
        }
    }

    #[test]
    fn shifted_solve_matches_dense() {
        let m = beam(MaterialModel::StableNeoHookean, RayleighParams { alpha: 0.02, beta: 0.1 }, Some(floor()));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let u = random_state(&m, &mut rng, 0.01);
        let j = eval_j(&m, &u).unwrap();
        let r = DVector::from_fn(u.len(), |_, _| rng.random_range(-1.0..1.0));
        for c in [0.0, 0.01, 0.3] {
            let x = j.factor_shifted(c, LinearSolverKind::Direct).unwrap().solve(&r).unwrap();
            let a = DMatrix::identity(u.len(), u.len()) - j.to_dense() * c;
            assert!((&a * &x - &r).norm() <= 1e-9 * r.norm());
        }
    }

    #[test]
    fn undamped_spectrum_is_imaginary() {
        let m = beam(MaterialModel::LinearElastic, RayleighParams::default(), None);
        let u = join_state(&m.rest_state(), &DVector::zeros(m.ndof()));
        let j = eval_j(&m, &u).unwrap().to_dense();
        let free: Vec<usize> = (0..m.ndof()).filter(|&i| m.free_mask()[i]).collect();
        let k = m.stiffness(&m.rest_state()).unwrap().restrict(&free).to_dense();
        let mf = DVector::from_iterator(free.len(), free.iter().map(|&i| m.mass()[i]));
        let (lams, _) = crate::linalg::dense_generalized_symmetric_eigen(&k, &DMatrix::from_diagonal(&mf)).unwrap();
        let eig = j.complex_eigenvalues();
        let scale = lams.max().sqrt();
        let mut imag: Vec<f64> = eig.iter().filter(|z| z.im > 1e-6 * scale).map(|z| z.im).collect();
        imag.sort_by(f64::total_cmp);
        let max_re = eig.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
        assert!(max_re <= 1e-6 * scale, "real parts {max_re}");
        assert_eq!(imag.len(), lams.len());
        for (w, l) in imag.iter().zip(lams.iter()) {
            assert!((w - l.sqrt()).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn energies_and_potential() {
        let m = beam(MaterialModel::LinearElastic, RayleighParams::default(), None);
        let q = m.rest_state();
        let e = m.energies(&q, &DVector::zeros(m.ndof())).unwrap();
        assert_eq!(e.kinetic, 0.0);
        assert!(e.elastic.abs() < 1e-12);
        let damped = beam(MaterialModel::LinearElastic, RayleighParams { alpha: 0.0, beta: 1.0 }, None);
        assert!(matches!(damped.potential(&q), Err(Error::NotIntegrable(_))));
    }
}
