//! Damping curves, stability probes, energy accounting and convergence
//! orders.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{advance, integrate_ode, IntegratorConfig, Method};
use crate::linalg::{LinearSolve, SymmetricSolver};
use crate::reduction::modal_split_at;
use crate::rigs::{spring, LinearOde};
use crate::stepper::{newton_solve_filtered, step, NewtonConfig};
use crate::system::{join_state, split_state, ForceModel, OdeSystem, SecondOrderSystem};

/// Dense one-step map of `method` on `x'' + omega^2 x = 0` with unit mass.
///
/// One-step methods give a 2x2 matrix acting on `(x, v)`. Two-step methods
/// give the 4x4 companion matrix acting on `(u0, u_{-1})`.
pub fn amplification(method: Method, omega: f64, h: f64) -> Result<DMatrix<f64>> {
    amplification_with(&probe_config(method, h), omega)
}

/// As [`amplification`] with explicit solver settings. Modal methods use
/// `min(s, 1)` modes.
pub fn amplification_with(cfg: &IntegratorConfig, omega: f64) -> Result<DMatrix<f64>> {
    if !(omega >= 0.0) || !omega.is_finite() {
        return Err(Error::InvalidParameter(format!("frequency must be non-negative, got {omega}")));
    }
    cfg.validate()?;
    let sys = spring(1.0, omega * omega)?;
    let q0 = DVector::zeros(1);
    let split = if cfg.method.is_modal() {
        modal_split_at(&sys, &q0, cfg.modes.s.min(1), cfg.modes.refresh)?
    } else {
        crate::reduction::ModalSplit::empty(1)
    };
    let two = cfg.method.is_two_step();
    let dim = if two { 4 } else { 2 };
    let mut t = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let e = DVector::from_fn(dim, |i, _| if i == j { 1.0 } else { 0.0 });
        let u0 = e.rows(0, 2).into_owned();
        let prev = two.then(|| e.rows(2, 2).into_owned());
        let out = advance(&sys, cfg, &split, 0.0, &u0, prev.as_ref())?;
        t.view_mut((0, j), (2, 1)).copy_from(&out.u);
        if two {
            t.view_mut((2, j), (2, 1)).copy_from(&u0);
        }
    }
    Ok(t)
}

/// Linear-probe solver settings: Newton runs to round-off.
fn probe_config(method: Method, h: f64) -> IntegratorConfig {
    let mut cfg = IntegratorConfig::new(method, h).with_modes(1);
    cfg.newton = NewtonConfig {
        abs_tol: 1e-300,
        rel_tol: 1e-14,
        ..NewtonConfig::default()
    };
    cfg.krylov.tol = 1e-14;
    cfg
}

pub fn spectral_radius(t: &DMatrix<f64>) -> f64 {
    t.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `d = -(2/h) ln rho(T)`; `+inf` when the step annihilates every mode.
pub fn damping_coefficient(method: Method, omega: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {h}")));
    }
    let rho = spectral_radius(&amplification(method, omega, h)?);
    Ok(damping_from_radius(rho, h))
}

fn damping_from_radius(rho: f64, h: f64) -> f64 {
    if rho == 0.0 {
        f64::INFINITY
    } else if rho == 1.0 {
        0.0
    } else {
        -2.0 / h * rho.ln()
    }
}

/// `|R(z)|` for the scalar test equation `u' = z u` with `h = 1`. Two-step
/// methods report the spectral radius of their 2x2 companion matrix.
pub fn stability_radius(method: Method, z: f64) -> Result<f64> {
    if !method.is_first_order() {
        return Err(Error::InvalidParameter(format!("{method} has no scalar stability function")));
    }
    let sys = LinearOde::scalar(z);
    let cfg = probe_config(method, 1.0);
    let one = |x: f64| DVector::from_element(1, x);
    let run = |u0: f64, prev: Option<f64>| -> Result<f64> {
        let u0 = one(u0);
        let prev = prev.map(one);
        let out = match method.as_step() {
            Some(m) => step(&sys, m, 0.0, &u0, prev.as_ref(), 1.0, &cfg.newton)?,
            None => crate::expo::ere_step(&sys, 0.0, &u0, 1.0, &cfg.krylov)?,
        };
        Ok(out.u[0])
    };
    if method.is_two_step() {
        let c = DMatrix::from_row_slice(2, 2, &[run(1.0, Some(0.0))?, run(0.0, Some(1.0))?, 1.0, 0.0]);
        Ok(spectral_radius(&c))
    } else {
        Ok(run(1.0, None)?.abs())
    }
}

/// `n` points logarithmically spaced on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::InvalidParameter(format!("log grid needs 0 < lo <= hi, got {lo}:{hi}")));
    }
    Ok(match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DampingCurve {
    pub method: Method,
    /// `(omega h, d / omega)` pairs in grid order.
    pub samples: Vec<(f64, f64)>,
}

impl DampingCurve {
    /// `d / omega` at a grid point, by exact match of `omega h`.
    pub fn at(&self, omega_h: f64) -> Option<f64> {
        self.samples.iter().find(|s| s.0 == omega_h).map(|s| s.1)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "method,omega_h,d_over_omega")?;
        }
        for (x, d) in &self.samples {
            writeln!(w, "{},{:e},{:e}", self.method, x, d)?;
        }
        Ok(())
    }
}

/// `d / omega` over a grid of `omega h`, evaluated at `h = 1`.
pub fn damping_curve(method: Method, grid: &[f64]) -> Result<DampingCurve> {
    if grid.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("damping grid must be positive and ascending".into()));
    }
    let samples = grid
        .par_iter()
        .map(|&x| Ok((x, damping_coefficient(method, x, 1.0)? / x)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DampingCurve { method, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergySample {
    pub t: f64,
    pub ke: f64,
    pub pe_elastic: f64,
    /// External-load potential relative to the first frame.
    pub pe_gravity: f64,
    pub pe_barrier: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EnergyReport {
    pub samples: Vec<EnergySample>,
    #[serde(skip)]
    gravity_reference: Option<f64>,
}

impl EnergyReport {
    /// Appends the energies of `(q, v)`; the first sample fixes the gravity
    /// reference.
    pub fn record(&mut self, model: &ForceModel, t: f64, q: &DVector<f64>, v: &DVector<f64>) -> Result<()> {
        let e = model.energies(q, v)?;
        let pe_gravity = e.gravity - *self.gravity_reference.get_or_insert(e.gravity);
        self.samples.push(EnergySample {
            t,
            ke: e.kinetic,
            pe_elastic: e.elastic,
            pe_gravity,
            pe_barrier: e.barrier,
            total: e.kinetic + e.elastic + pe_gravity + e.barrier,
        });
        Ok(())
    }

    pub fn initial_total(&self) -> Option<f64> {
        self.samples.first().map(|s| s.total)
    }

    pub fn final_total(&self) -> Option<f64> {
        self.samples.last().map(|s| s.total)
    }

    /// Every consecutive total decreases or grows by at most `tol`.
    pub fn is_non_increasing(&self, tol: f64) -> bool {
        self.samples.windows(2).all(|w| w[1].total <= w[0].total + tol)
    }

    /// Largest `|E_k - E_0| / max(|E_0|, scale)`.
    pub fn max_relative_drift(&self, scale: f64) -> f64 {
        let Some(e0) = self.initial_total() else { return 0.0 };
        let denom = e0.abs().max(scale);
        self.samples.iter().map(|s| (s.total - e0).abs() / denom).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,ke,pe_elastic,pe_gravity,total")?;
        for s in &self.samples {
            writeln!(w, "{:e},{:e},{:e},{:e},{:e}", s.t, s.ke, s.pe_elastic, s.pe_gravity, s.total)?;
        }
        Ok(())
    }
}

/// Per-frame energies of a trajectory of `(t, u)` states.
pub fn energy_report(model: &ForceModel, trajectory: &[(f64, DVector<f64>)]) -> Result<EnergyReport> {
    let n = model.ndof();
    let mut report = EnergyReport::default();
    for (t, u) in trajectory {
        Error::check_dim(2 * n, u.len())?;
        let (q, v) = split_state(u, n);
        report.record(model, *t, &q, &v)?;
    }
    Ok(report)
}

/// `1/2 v^T M v + Pi(q)` of any conservative model.
pub fn mechanical_energy<S: SecondOrderSystem + ?Sized>(sys: &S, u: &DVector<f64>) -> Result<f64> {
    let (q, v) = split_state(u, sys.ndof());
    let ke = 0.5 * v.iter().zip(sys.mass().iter()).map(|(v, m)| m * v * v).sum::<f64>();
    Ok(ke + sys.potential(&q)?)
}

struct Negated(SymmetricSolver);

impl LinearSolve for Negated {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-self.0.solve(rhs)?)
    }
}

/// Positions with zero net force on the free DOFs, by Newton from `q0`.
pub fn static_equilibrium<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    q0: &DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<DVector<f64>> {
    let n = sys.ndof();
    Error::check_dim(n, q0.len())?;
    let free: Vec<usize> = (0..n).filter(|&i| sys.free_mask()[i]).collect();
    let zero = DVector::zeros(n);
    let embed = |x: &DVector<f64>| {
        let mut q = q0.clone();
        for (k, &i) in free.iter().enumerate() {
            q[i] = x[k];
        }
        q
    };
    let x0 = DVector::from_iterator(free.len(), free.iter().map(|&i| q0[i]));
    let sol = newton_solve_filtered(
        |x| {
            let f = sys.force(0.0, &embed(x), &zero)?;
            Ok(DVector::from_iterator(free.len(), free.iter().map(|&i| f[i])))
        },
        |x| {
            let (k, _) = sys.tangent(&embed(x), &zero)?;
            let solver = SymmetricSolver::new(&k.restrict(&free), sys.linear_solver())?;
            Ok(Box::new(Negated(solver)) as Box<dyn LinearSolve>)
        },
        |x| sys.admissible_positions(&embed(x)),
        x0,
        cfg,
    )?;
    Ok(embed(&sol.x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceResult {
    pub method: Method,
    pub hs: Vec<f64>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `ln error` against `ln h`.
    pub slope: f64,
    /// Some error sits at round-off level, so the slope is not meaningful.
    pub unreliable: bool,
}

/// Errors below this multiple of the reference magnitude count as round-off.
pub const ROUND_OFF_FLOOR: f64 = 1e-13;

/// Integrates to `t_end` with each `h` and fits the error slope against
/// `reference`, the solution at `t_end`.
pub fn convergence_order<S: OdeSystem>(
    sys: &S,
    cfg: &IntegratorConfig,
    u0: &DVector<f64>,
    t_end: f64,
    hs: &[f64],
    reference: &DVector<f64>,
) -> Result<ConvergenceResult> {
    if hs.len() < 2 {
        return Err(Error::InvalidParameter("convergence study needs at least two step sizes".into()));
    }
    let mut errors = Vec::with_capacity(hs.len());
    for &h in hs {
        let n = (t_end / h).round() as usize;
        if n == 0 || ((n as f64) * h - t_end).abs() > 1e-9 * t_end.abs().max(1.0) {
            return Err(Error::InvalidParameter(format!("step {h} does not divide the interval {t_end}")));
        }
        let c = IntegratorConfig { h, ..*cfg };
        let u = integrate_ode(sys, &c, 0.0, u0, n)?;
        errors.push((u - reference).norm());
    }
    let floor = ROUND_OFF_FLOOR * reference.norm().max(1.0);
    let unreliable = errors.iter().any(|&e| e <= floor);
    let slope = fit_slope(hs, &errors);
    if unreliable {
        log::warn!("{}: errors at round-off level, slope {slope:.3} is unreliable", cfg.method);
    }
    Ok(ConvergenceResult {
        method: cfg.method,
        hs: hs.to_vec(),
        errors,
        slope,
        unreliable,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Convergence study on `u' = -u + sin t`, `u(0) = 1`, up to `t = 1`.
pub fn forced_decay_order(method: Method, hs: &[f64]) -> Result<ConvergenceResult> {
    let sys = LinearOde::forced_decay();
    let u0 = DVector::from_element(1, 1.0);
    let reference = DVector::from_element(1, LinearOde::forced_decay_exact(1.0, 1.0));
    let mut cfg = IntegratorConfig::new(method, hs[0]);
    cfg.newton.abs_tol = 1e-14;
    cfg.newton.rel_tol = 1e-14;
    convergence_order(&sys, &cfg, &u0, 1.0, hs, &reference)
}

/// Energy ordering margin: `(E_hi - E_lo) / scale` per consecutive pair.
pub fn ordering_margins(retained: &[f64], scale: f64) -> Vec<f64> {
    retained.windows(2).map(|w| (w[1] - w[0]) / scale).collect()
}

/// Zero-velocity state at `q`.
pub fn rest_state(q: &DVector<f64>) -> DVector<f64> {
    join_state(q, &DVector::zeros(q.len()))
}
