//! One-step and two-step difference integrators.
//!
//! Every implicit stage has the form `u = base + c F(t, u)`. Fully implicit
//! methods solve it with Newton; the semi-implicit ('S'-prefixed) variants
//! apply exactly one Newton iteration from a prescribed guess.

mod newton;
mod optimize;

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use newton::{newton_least_squares, newton_solve, newton_solve_filtered, MeritScaling, NewtonConfig, NewtonSolution};
pub use optimize::{optimize_bdf2, optimize_be};

use crate::error::{Error, Result};
use crate::linalg::LinearSolve;
use crate::system::{Jacobian, OdeSystem};

/// SDIRK diagonal coefficient `2 - sqrt 2`.
pub const SDIRK_GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;
/// SDIRK weight `sqrt 2 / 4`.
pub const SDIRK_BETA: f64 = std::f64::consts::SQRT_2 / 4.0;

/// Semi-implicit steps whose `|F(u1)|` grows beyond this factor are flagged.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepMethod {
    #[serde(rename = "BE")]
    Be,
    #[serde(rename = "SI")]
    Si,
    #[serde(rename = "TR")]
    Tr,
    #[serde(rename = "BDF2")]
    Bdf2,
    #[serde(rename = "SBDF2")]
    Sbdf2,
    #[serde(rename = "TRBDF2")]
    TrBdf2,
    #[serde(rename = "STRBDF2")]
    STrBdf2,
    #[serde(rename = "SDIRK")]
    Sdirk,
    #[serde(rename = "SSDIRK")]
    SSdirk,
}

impl StepMethod {
    pub const ALL: [StepMethod; 9] = [
        StepMethod::Be,
        StepMethod::Si,
        StepMethod::Tr,
        StepMethod::Bdf2,
        StepMethod::Sbdf2,
        StepMethod::TrBdf2,
        StepMethod::STrBdf2,
        StepMethod::Sdirk,
        StepMethod::SSdirk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StepMethod::Be => "BE",
            StepMethod::Si => "SI",
            StepMethod::Tr => "TR",
            StepMethod::Bdf2 => "BDF2",
            StepMethod::Sbdf2 => "SBDF2",
            StepMethod::TrBdf2 => "TRBDF2",
            StepMethod::STrBdf2 => "STRBDF2",
            StepMethod::Sdirk => "SDIRK",
            StepMethod::SSdirk => "SSDIRK",
        }
    }

    pub fn is_two_step(self) -> bool {
        matches!(self, StepMethod::Bdf2 | StepMethod::Sbdf2)
    }

    pub fn is_semi_implicit(self) -> bool {
        matches!(
            self,
            StepMethod::Si | StepMethod::Sbdf2 | StepMethod::STrBdf2 | StepMethod::SSdirk
        )
    }
}

impl fmt::Display for StepMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StepMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace(['-', '_'], "");
        StepMethod::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown step method `{s}`")))
    }
}

/// How the missing `u_{-1}` of a two-step method is synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapPolicy {
    #[default]
    Sdirk,
    BackwardEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepperConfig {
    pub method: StepMethod,
    pub h: f64,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub bootstrap: BootstrapPolicy,
}

impl StepperConfig {
    pub fn new(method: StepMethod, h: f64) -> Self {
        Self {
            method,
            h,
            newton: NewtonConfig::default(),
            bootstrap: BootstrapPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {}", self.h)));
        }
        self.newton.validate()
    }
}

/// Work counters of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepStats {
    pub rhs_evals: usize,
    pub jacobian_evals: usize,
    pub factorizations: usize,
    /// Solves with the large (full-dimension) system matrix.
    pub linear_solves: usize,
    pub newton_iterations: usize,
    pub krylov_dim: usize,
}

impl std::ops::AddAssign for StepStats {
    fn add_assign(&mut self, o: Self) {
        self.rhs_evals += o.rhs_evals;
        self.jacobian_evals += o.jacobian_evals;
        self.factorizations += o.factorizations;
        self.linear_solves += o.linear_solves;
        self.newton_iterations += o.newton_iterations;
        self.krylov_dim = self.krylov_dim.max(o.krylov_dim);
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub u: DVector<f64>,
    /// Intermediate stage value of two-stage methods.
    pub stage: Option<DVector<f64>>,
    pub stats: StepStats,
    /// Set when a semi-implicit step blew up `|F|` by more than
    /// [`DIVERGENCE_FACTOR`]. The step is still returned.
    pub divergence_flag: bool,
}

impl StepOutcome {
    fn new(u: DVector<f64>, stage: Option<DVector<f64>>, stats: StepStats) -> Self {
        Self {
            u,
            stage,
            stats,
            divergence_flag: false,
        }
    }
}

/// Solves `u = base + c F(t, u)` by Newton from `guess`.
pub(crate) fn implicit_stage<S: OdeSystem>(
    sys: &S,
    t: f64,
    c: f64,
    base: &DVector<f64>,
    guess: DVector<f64>,
    cfg: &NewtonConfig,
    stats: &mut StepStats,
) -> Result<DVector<f64>> {
    let kind = sys.linear_solver();
    let mut rhs_evals = 0;
    let mut jac_evals = 0;
    let sol = newton_solve_filtered(
        |u| {
            rhs_evals += 1;
            Ok(u - base - sys.rhs(t, u)? * c)
        },
        |u| {
            jac_evals += 1;
            sys.jacobian(t, u)?.factor_shifted(c, kind)
        },
        |u| sys.admissible(u),
        guess,
        cfg,
    )?;
    stats.rhs_evals += rhs_evals;
    stats.jacobian_evals += jac_evals;
    stats.factorizations += sol.factorizations;
    stats.linear_solves += sol.iterations;
    stats.newton_iterations += sol.iterations;
    Ok(sol.x)
}

/// One Newton iteration for `u = base + c F(t, u)` from `guess`, using a
/// prepared factorization of `I - c J`.
pub(crate) fn linearized_stage<S: OdeSystem>(
    sys: &S,
    t: f64,
    c: f64,
    base: &DVector<f64>,
    guess: &DVector<f64>,
    solver: &dyn LinearSolve,
    stats: &mut StepStats,
) -> Result<DVector<f64>> {
    let g = guess - base - sys.rhs(t, guess)? * c;
    stats.rhs_evals += 1;
    stats.linear_solves += 1;
    stats.newton_iterations += 1;
    Ok(guess - solver.solve(&g)?)
}

fn factor<S: OdeSystem>(sys: &S, t: f64, u: &DVector<f64>, c: f64, stats: &mut StepStats) -> Result<Box<dyn LinearSolve>> {
    stats.jacobian_evals += 1;
    stats.factorizations += 1;
    sys.jacobian(t, u)?.factor_shifted(c, sys.linear_solver())
}

fn check_state<S: OdeSystem>(sys: &S, u: &DVector<f64>, h: f64) -> Result<()> {
    Error::check_dim(sys.dim(), u.len())?;
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {h}")));
    }
    Ok(())
}

/// Backward Euler: `u1 = u0 + h F(u1)`.
pub fn step_be<S: OdeSystem>(sys: &S, t0: f64, u0: &DVector<f64>, h: f64, cfg: &NewtonConfig) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    let mut stats = StepStats::default();
    let u = implicit_stage(sys, t0 + h, h, u0, u0.clone(), cfg, &mut stats)?;
    Ok(StepOutcome::new(u, None, stats))
}

/// Semi-implicit backward Euler: `u1 = u0 + h (I - h J(u0))^-1 F(u0)`.
pub fn step_si<S: OdeSystem>(sys: &S, t0: f64, u0: &DVector<f64>, h: f64) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    let mut stats = StepStats::default();
    let lin = factor(sys, t0 + h, u0, h, &mut stats)?;
    let u = linearized_stage(sys, t0 + h, h, u0, u0, lin.as_ref(), &mut stats)?;
    finish_semi_implicit(sys, t0, u0, t0 + h, u, None, stats)
}

/// Trapezoidal rule: `u1 = u0 + h/2 (F(u0) + F(u1))`.
pub fn step_tr<S: OdeSystem>(sys: &S, t0: f64, u0: &DVector<f64>, h: f64, cfg: &NewtonConfig) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    let mut stats = StepStats::default();
    let f0 = sys.rhs(t0, u0)?;
    stats.rhs_evals += 1;
    let base = u0 + &f0 * (0.5 * h);
    let u = implicit_stage(sys, t0 + h, 0.5 * h, &base, u0.clone(), cfg, &mut stats)?;
    Ok(StepOutcome::new(u, None, stats))
}

/// BDF2: `u1 = u0 + (u0 - u_{-1} + 2h F(u1)) / 3`.
pub fn step_bdf2<S: OdeSystem>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    u_prev: &DVector<f64>,
    h: f64,
    cfg: &NewtonConfig,
) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    Error::check_dim(u0.len(), u_prev.len())?;
    let mut stats = StepStats::default();
    let base = u0 + (u0 - u_prev) / 3.0;
    let u = implicit_stage(sys, t0 + h, 2.0 * h / 3.0, &base, u0.clone(), cfg, &mut stats)?;
    Ok(StepOutcome::new(u, None, stats))
}

/// Semi-implicit BDF2: one Newton iteration of BDF2 from `u0`.
pub fn step_sbdf2<S: OdeSystem>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    u_prev: &DVector<f64>,
    h: f64,
) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    Error::check_dim(u0.len(), u_prev.len())?;
    let mut stats = StepStats::default();
    let c = 2.0 * h / 3.0;
    let base = u0 + (u0 - u_prev) / 3.0;
    let lin = factor(sys, t0 + h, u0, c, &mut stats)?;
    let u = linearized_stage(sys, t0 + h, c, &base, u0, lin.as_ref(), &mut stats)?;
    finish_semi_implicit(sys, t0, u0, t0 + h, u, None, stats)
}

/// TR-BDF2: trapezoidal half step, then BDF2 over the two half steps.
pub fn step_trbdf2<S: OdeSystem>(sys: &S, t0: f64, u0: &DVector<f64>, h: f64, cfg: &NewtonConfig) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    let mut stats = StepStats::default();
    let f0 = sys.rhs(t0, u0)?;
    stats.rhs_evals += 1;
    let base1 = u0 + &f0 * (0.25 * h);
    let half = implicit_stage(sys, t0 + 0.5 * h, 0.25 * h, &base1, u0.clone(), cfg, &mut stats)
        .map_err(|e| e.in_stage("TR-BDF2 stage 1"))?;
    let base2 = u0 + (&half - u0) * (4.0 / 3.0);
    let u = implicit_stage(sys, t0 + h, h / 3.0, &base2, half.clone(), cfg, &mut stats)
        .map_err(|e| e.in_stage("TR-BDF2 stage 2"))?;
    Ok(StepOutcome::new(u, Some(half), stats))
}

/// Semi-implicit TR-BDF2: one Newton iteration per stage, stage 1 linearized
/// at `u0` and stage 2 at `u_{1/2}`.
pub fn step_strbdf2<S: OdeSystem>(sys: &S, t0: f64, u0: &DVector<f64>, h: f64) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    let mut stats = StepStats::default();
    let f0 = sys.rhs(t0, u0)?;
    stats.rhs_evals += 1;
    let base1 = u0 + &f0 * (0.25 * h);
    let t_half = t0 + 0.5 * h;
    let lin1 = factor(sys, t_half, u0, 0.25 * h, &mut stats).map_err(|e| e.in_stage("STR-BDF2 stage 1"))?;
    let half = linearized_stage(sys, t_half, 0.25 * h, &base1, u0, lin1.as_ref(), &mut stats)
        .map_err(|e| e.in_stage("STR-BDF2 stage 1"))?;
    let base2 = u0 + (&half - u0) * (4.0 / 3.0);
    let lin2 = factor(sys, t0 + h, &half, h / 3.0, &mut stats).map_err(|e| e.in_stage("STR-BDF2 stage 2"))?;
    let u = linearized_stage(sys, t0 + h, h / 3.0, &base2, &half, lin2.as_ref(), &mut stats)
        .map_err(|e| e.in_stage("STR-BDF2 stage 2"))?;
    finish_semi_implicit(sys, t0, u0, t0 + h, u, Some(half), stats)
}

/// Two-stage SDIRK: trapezoidal step to `t0 + gamma h`, then
/// `u1 = u0 + h (beta F(u0) + beta F(u_gamma) + gamma/2 F(u1))`.
pub fn step_sdirk<S: OdeSystem>(sys: &S, t0: f64, u0: &DVector<f64>, h: f64, cfg: &NewtonConfig) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    let (g, b) = (SDIRK_GAMMA, SDIRK_BETA);
    let c = 0.5 * g * h;
    let mut stats = StepStats::default();
    let f0 = sys.rhs(t0, u0)?;
    stats.rhs_evals += 1;
    let base1 = u0 + &f0 * c;
    let stage = implicit_stage(sys, t0 + g * h, c, &base1, u0.clone(), cfg, &mut stats)
        .map_err(|e| e.in_stage("SDIRK stage 1"))?;
    let fg = sys.rhs(t0 + g * h, &stage)?;
    stats.rhs_evals += 1;
    let base2 = u0 + (&f0 + &fg) * (b * h);
    let u = implicit_stage(sys, t0 + h, c, &base2, stage.clone(), cfg, &mut stats)
        .map_err(|e| e.in_stage("SDIRK stage 2"))?;
    Ok(StepOutcome::new(u, Some(stage), stats))
}

/// Semi-implicit SDIRK: both stages reuse the factorization of
/// `I - (gamma h / 2) J(u0)`.
pub fn step_ssdirk<S: OdeSystem>(sys: &S, t0: f64, u0: &DVector<f64>, h: f64) -> Result<StepOutcome> {
    check_state(sys, u0, h)?;
    let (g, b) = (SDIRK_GAMMA, SDIRK_BETA);
    let c = 0.5 * g * h;
    let mut stats = StepStats::default();
    let f0 = sys.rhs(t0, u0)?;
    stats.rhs_evals += 1;
    let lin = factor(sys, t0, u0, c, &mut stats).map_err(|e| e.in_stage("SSDIRK stage 1"))?;
    let base1 = u0 + &f0 * c;
    let stage = linearized_stage(sys, t0 + g * h, c, &base1, u0, lin.as_ref(), &mut stats)
        .map_err(|e| e.in_stage("SSDIRK stage 1"))?;
    let fg = sys.rhs(t0 + g * h, &stage)?;
    stats.rhs_evals += 1;
    let base2 = u0 + (&f0 + &fg) * (b * h);
    let u = linearized_stage(sys, t0 + h, c, &base2, &stage, lin.as_ref(), &mut stats)
        .map_err(|e| e.in_stage("SSDIRK stage 2"))?;
    finish_semi_implicit(sys, t0, u0, t0 + h, u, Some(stage), stats)
}

fn finish_semi_implicit<S: OdeSystem>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    t1: f64,
    u: DVector<f64>,
    stage: Option<DVector<f64>>,
    mut stats: StepStats,
) -> Result<StepOutcome> {
    let flag = divergence_check(sys, t0, u0, t1, &u, &mut stats)?;
    let mut out = StepOutcome::new(u, stage, stats);
    out.divergence_flag = flag;
    Ok(out)
}

pub(crate) fn divergence_check<S: OdeSystem>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    t1: f64,
    u1: &DVector<f64>,
    stats: &mut StepStats,
) -> Result<bool> {
    let n0 = sys.rhs(t0, u0)?.norm();
    let n1 = sys.rhs(t1, u1)?.norm();
    stats.rhs_evals += 2;
    let flag = n1 > DIVERGENCE_FACTOR * n0 && n1 > 0.0;
    if flag {
        log::warn!("semi-implicit step grew |F| from {n0:e} to {n1:e}");
    }
    Ok(flag)
}

/// Synthesizes a two-step history from one step of a one-step method.
#[derive(Debug, Clone)]
pub struct Bootstrap {
    /// Relabeled `u_{-1}` (the input state).
    pub previous: DVector<f64>,
    /// Relabeled `u_0` (the state after one step).
    pub current: DVector<f64>,
    pub t: f64,
    pub stats: StepStats,
}

pub fn bootstrap_history<S: OdeSystem>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    h: f64,
    policy: BootstrapPolicy,
    cfg: &NewtonConfig,
) -> Result<Bootstrap> {
    let out = match policy {
        BootstrapPolicy::Sdirk => step_sdirk(sys, t0, u0, h, cfg),
        BootstrapPolicy::BackwardEuler => step_be(sys, t0, u0, h, cfg),
    }
    .map_err(|e| e.in_stage("bootstrap"))?;
    Ok(Bootstrap {
        previous: u0.clone(),
        current: out.u,
        t: t0 + h,
        stats: out.stats,
    })
}

/// Dispatches one step of `method`; two-step methods require `u_prev`.
pub fn step<S: OdeSystem>(
    sys: &S,
    method: StepMethod,
    t0: f64,
    u0: &DVector<f64>,
    u_prev: Option<&DVector<f64>>,
    h: f64,
    cfg: &NewtonConfig,
) -> Result<StepOutcome> {
    match method {
        StepMethod::Be => step_be(sys, t0, u0, h, cfg),
        StepMethod::Si => step_si(sys, t0, u0, h),
        StepMethod::Tr => step_tr(sys, t0, u0, h, cfg),
        StepMethod::Bdf2 => step_bdf2(sys, t0, u0, u_prev.ok_or(Error::MissingHistory)?, h, cfg),
        StepMethod::Sbdf2 => step_sbdf2(sys, t0, u0, u_prev.ok_or(Error::MissingHistory)?, h),
        StepMethod::TrBdf2 => step_trbdf2(sys, t0, u0, h, cfg),
        StepMethod::STrBdf2 => step_strbdf2(sys, t0, u0, h),
        StepMethod::Sdirk => step_sdirk(sys, t0, u0, h, cfg),
        StepMethod::SSdirk => step_ssdirk(sys, t0, u0, h),
    }
}
