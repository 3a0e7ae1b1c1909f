//! Integrators that propagate the modal subspace with `phi1` and the rest
//! with a backward-differentiation or trapezoidal scheme.

use nalgebra::{DMatrix, DVector};

use super::eigen::ModalSplit;
use super::split::{project, ModalJacobians};
use crate::error::{Error, Result};
use crate::linalg::LinearSolve;
use crate::stepper::{divergence_check, newton_solve, NewtonConfig, StepOutcome, StepStats};
use crate::system::{eval_f_at, eval_j, FirstOrder, Jacobian, SecondOrderSystem};

/// `F`, `J` and the split at one state.
struct ModalState {
    f: DVector<f64>,
    jac: ModalJacobians,
}

impl ModalState {
    fn at<S: SecondOrderSystem + ?Sized>(sys: &S, t: f64, u: &DVector<f64>, ms: &ModalSplit, stats: &mut StepStats) -> Result<Self> {
        Error::check_dim(2 * sys.ndof(), u.len())?;
        Error::check_dim(sys.ndof(), ms.ndof())?;
        let f = eval_f_at(sys, t, u)?;
        let jac = ModalJacobians::new(eval_j(sys, u)?, ms)?;
        stats.rhs_evals += 1;
        stats.jacobian_evals += 1;
        if jac.negative_modes() > 0 {
            log::debug!("{} modal stiffnesses are negative", jac.negative_modes());
        }
        Ok(Self { f, jac })
    }

    fn h_part(&self) -> DVector<f64> {
        &self.f - self.jac.project(&self.f)
    }
}

fn outcome(u: DVector<f64>, stage: Option<DVector<f64>>, stats: StepStats, flag: bool) -> StepOutcome {
    StepOutcome {
        u,
        stage,
        stats,
        divergence_flag: flag,
    }
}

/// `u1 = u0 + (I - h J_H)^-1 (h H(u0) + h phi1(h J_G) G(u0))`.
pub fn siere_step<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    h: f64,
    ms: &ModalSplit,
) -> Result<StepOutcome> {
    let mut stats = StepStats::default();
    let st = ModalState::at(sys, t0, u0, ms, &mut stats)?;
    let rhs = st.h_part() * h + st.jac.phi1_g(&st.f, h);
    let corr = st.jac.shifted_h(h, sys.linear_solver())?;
    stats.factorizations += 1;
    let u = u0 + corr.solve(&rhs)?;
    stats.linear_solves += 1;
    stats.newton_iterations += 1;
    let flag = divergence_check(&FirstOrder(sys), t0, u0, t0 + h, &u, &mut stats)?;
    Ok(outcome(u, None, stats, flag))
}

/// Solves `u = base + c H(u)` by Newton from `guess`, with `J_G` frozen at
/// the split state.
fn implicit_h_stage<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    t: f64,
    c: f64,
    base: &DVector<f64>,
    guess: DVector<f64>,
    ms: &ModalSplit,
    kr: &DMatrix<f64>,
    cfg: &NewtonConfig,
    stats: &mut StepStats,
) -> Result<DVector<f64>> {
    let kind = sys.linear_solver();
    let mut evals = 0;
    let mut jevals = 0;
    let mx = ms.mass_vectors(sys.mass());
    let sol = newton_solve(
        |u| {
            evals += 1;
            let f = eval_f_at(sys, t, u)?;
            let h_part = &f - project(ms, &mx, &f);
            Ok(u - base - h_part * c)
        },
        |u| {
            jevals += 1;
            let mj = ModalJacobians::with_reduced_stiffness(eval_j(sys, u)?, ms, kr.clone())?;
            Ok(Box::new(mj.shifted_h(c, kind)?) as Box<dyn LinearSolve>)
        },
        guess,
        cfg,
    )?;
    stats.rhs_evals += evals;
    stats.jacobian_evals += jevals;
    stats.factorizations += sol.factorizations;
    stats.linear_solves += sol.iterations;
    stats.newton_iterations += sol.iterations;
    Ok(sol.x)
}

/// `u1 = u0 + h H(u1) + h phi1(h J_G) G(u0)`.
pub fn beere_step<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    h: f64,
    ms: &ModalSplit,
    cfg: &NewtonConfig,
) -> Result<StepOutcome> {
    let mut stats = StepStats::default();
    let st = ModalState::at(sys, t0, u0, ms, &mut stats)?;
    let base = u0 + st.jac.phi1_g(&st.f, h);
    let u = implicit_h_stage(sys, t0 + h, h, &base, u0.clone(), ms, &st.jac.kr, cfg, &mut stats)?;
    Ok(outcome(u, None, stats, false))
}

/// `u_hat = (4 u0 - u_{-1} + 2 h phi1(h J_G) G(u0)) / 3`, then
/// `u1 = u_hat + 2h/3 H(u1)`.
pub fn bdf2ere_step<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    u_prev: &DVector<f64>,
    h: f64,
    ms: &ModalSplit,
    cfg: &NewtonConfig,
) -> Result<StepOutcome> {
    Error::check_dim(u0.len(), u_prev.len())?;
    let mut stats = StepStats::default();
    let st = ModalState::at(sys, t0, u0, ms, &mut stats)?;
    let u_hat = (u0 * 4.0 - u_prev + st.jac.phi1_g(&st.f, h) * 2.0) / 3.0;
    let u = implicit_h_stage(sys, t0 + h, 2.0 * h / 3.0, &u_hat, u0.clone(), ms, &st.jac.kr, cfg, &mut stats)?;
    Ok(outcome(u, None, stats, false))
}

/// One Newton correction of BDF2ERE from `u0`:
/// `u1 = u0 + (I - 2h/3 J_H)^-1 (u0 - u_{-1} + 2h H(u0) + 2h phi1(h J_G) G(u0)) / 3`.
pub fn sbdf2ere_step<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    u_prev: &DVector<f64>,
    h: f64,
    ms: &ModalSplit,
) -> Result<StepOutcome> {
    Error::check_dim(u0.len(), u_prev.len())?;
    let mut stats = StepStats::default();
    let st = ModalState::at(sys, t0, u0, ms, &mut stats)?;
    let rhs = (u0 - u_prev + st.h_part() * (2.0 * h) + st.jac.phi1_g(&st.f, h) * 2.0) / 3.0;
    let corr = st.jac.shifted_h(2.0 * h / 3.0, sys.linear_solver())?;
    stats.factorizations += 1;
    let u = u0 + corr.solve(&rhs)?;
    stats.linear_solves += 1;
    stats.newton_iterations += 1;
    let flag = divergence_check(&FirstOrder(sys), t0, u0, t0 + h, &u, &mut stats)?;
    Ok(outcome(u, None, stats, flag))
}

/// Semi-implicit trapezoidal half step with the full Jacobian at `u0`, then
/// `u1 = u_half + (I - h/3 J_H)^-1 (u_half - u0 + h H(u_half) + h phi1(h/2 J_G) G(u_half)) / 3`
/// with the split and Jacobians taken at `u_half`.
pub fn strsbdf2ere_step<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    t0: f64,
    u0: &DVector<f64>,
    h: f64,
    ms: &ModalSplit,
) -> Result<StepOutcome> {
    Error::check_dim(2 * sys.ndof(), u0.len())?;
    let mut stats = StepStats::default();
    let kind = sys.linear_solver();

    let f0 = eval_f_at(sys, t0, u0)?;
    let j0 = eval_j(sys, u0)?;
    stats.rhs_evals += 1;
    stats.jacobian_evals += 1;
    let lin = j0.factor_shifted(0.25 * h, kind).map_err(|e| e.in_stage("STR-SBDF2ERE stage 1"))?;
    stats.factorizations += 1;
    let half = u0 + lin.solve(&(&f0 * (0.5 * h))).map_err(|e| e.in_stage("STR-SBDF2ERE stage 1"))?;
    stats.linear_solves += 1;
    stats.newton_iterations += 1;

    let st = ModalState::at(sys, t0 + 0.5 * h, &half, ms, &mut stats)?;
    let rhs = (&half - u0 + st.h_part() * h + st.jac.phi1_g(&st.f, 0.5 * h) * 2.0) / 3.0;
    let corr = st
        .jac
        .shifted_h(h / 3.0, kind)
        .map_err(|e| e.in_stage("STR-SBDF2ERE stage 2"))?;
    stats.factorizations += 1;
    let u = &half + corr.solve(&rhs).map_err(|e| e.in_stage("STR-SBDF2ERE stage 2"))?;
    stats.linear_solves += 1;
    stats.newton_iterations += 1;
    let flag = divergence_check(&FirstOrder(sys), t0, u0, t0 + h, &u, &mut stats)?;
    Ok(outcome(u, Some(half), stats, flag))
}
