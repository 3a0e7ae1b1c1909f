//! Method catalogue and a fixed-step driver over second-order models.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expo::{ere_step, KrylovConfig};
use crate::reduction::{
    bdf2ere_step, beere_step, modal_split_at, sbdf2ere_step, siere_step, strsbdf2ere_step, ModalSplit, RefreshPolicy,
    RefreshReport, SplitTracker,
};
use crate::stepper::{
    bootstrap_history, optimize_bdf2, optimize_be, step, BootstrapPolicy, NewtonConfig, StepMethod, StepOutcome,
    StepStats,
};
use crate::system::{FirstOrder, OdeSystem, SecondOrderSystem, SimState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
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
    #[serde(rename = "ERE")]
    Ere,
    #[serde(rename = "SIERE")]
    Siere,
    #[serde(rename = "BEERE")]
    Beere,
    #[serde(rename = "BDF2ERE")]
    Bdf2Ere,
    #[serde(rename = "SBDF2ERE")]
    Sbdf2Ere,
    #[serde(rename = "STR-SBDF2ERE")]
    StrSbdf2Ere,
    #[serde(rename = "OPTBE")]
    OptBe,
    #[serde(rename = "OPTBDF2")]
    OptBdf2,
}

impl Method {
    pub const ALL: [Method; 17] = [
        Method::Be,
        Method::Si,
        Method::Tr,
        Method::Bdf2,
        Method::Sbdf2,
        Method::TrBdf2,
        Method::STrBdf2,
        Method::Sdirk,
        Method::SSdirk,
        Method::Ere,
        Method::Siere,
        Method::Beere,
        Method::Bdf2Ere,
        Method::Sbdf2Ere,
        Method::StrSbdf2Ere,
        Method::OptBe,
        Method::OptBdf2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Be => "BE",
            Method::Si => "SI",
            Method::Tr => "TR",
            Method::Bdf2 => "BDF2",
            Method::Sbdf2 => "SBDF2",
            Method::TrBdf2 => "TRBDF2",
            Method::STrBdf2 => "STRBDF2",
            Method::Sdirk => "SDIRK",
            Method::SSdirk => "SSDIRK",
            Method::Ere => "ERE",
            Method::Siere => "SIERE",
            Method::Beere => "BEERE",
            Method::Bdf2Ere => "BDF2ERE",
            Method::Sbdf2Ere => "SBDF2ERE",
            Method::StrSbdf2Ere => "STR-SBDF2ERE",
            Method::OptBe => "OPTBE",
            Method::OptBdf2 => "OPTBDF2",
        }
    }

    pub fn as_step(self) -> Option<StepMethod> {
        Some(match self {
            Method::Be => StepMethod::Be,
            Method::Si => StepMethod::Si,
            Method::Tr => StepMethod::Tr,
            Method::Bdf2 => StepMethod::Bdf2,
            Method::Sbdf2 => StepMethod::Sbdf2,
            Method::TrBdf2 => StepMethod::TrBdf2,
            Method::STrBdf2 => StepMethod::STrBdf2,
            Method::Sdirk => StepMethod::Sdirk,
            Method::SSdirk => StepMethod::SSdirk,
            _ => return None,
        })
    }

    pub fn is_two_step(self) -> bool {
        matches!(
            self,
            Method::Bdf2 | Method::Sbdf2 | Method::Bdf2Ere | Method::Sbdf2Ere | Method::OptBdf2
        )
    }

    /// Whether the method needs a modal split.
    pub fn is_modal(self) -> bool {
        matches!(
            self,
            Method::Siere | Method::Beere | Method::Bdf2Ere | Method::Sbdf2Ere | Method::StrSbdf2Ere
        )
    }

    /// Whether the method applies to a general first-order system.
    pub fn is_first_order(self) -> bool {
        self.as_step().is_some() || self == Method::Ere
    }
}

impl From<StepMethod> for Method {
    fn from(m: StepMethod) -> Self {
        match m {
            StepMethod::Be => Method::Be,
            StepMethod::Si => Method::Si,
            StepMethod::Tr => Method::Tr,
            StepMethod::Bdf2 => Method::Bdf2,
            StepMethod::Sbdf2 => Method::Sbdf2,
            StepMethod::TrBdf2 => Method::TrBdf2,
            StepMethod::STrBdf2 => Method::STrBdf2,
            StepMethod::Sdirk => Method::Sdirk,
            StepMethod::SSdirk => Method::SSdirk,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn method_key(s: &str) -> String {
    s.trim().to_ascii_uppercase().replace(['-', '_'], "")
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = method_key(s);
        Method::ALL
            .into_iter()
            .find(|m| method_key(m.name()) == key)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModesConfig {
    /// Number of modes treated exponentially.
    pub s: usize,
    pub refresh: RefreshPolicy,
}

impl Default for ModesConfig {
    fn default() -> Self {
        Self {
            s: 10,
            refresh: RefreshPolicy::Once,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub h: f64,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub bootstrap: BootstrapPolicy,
    #[serde(default)]
    pub krylov: KrylovConfig,
    #[serde(default)]
    pub modes: ModesConfig,
}

impl IntegratorConfig {
    pub fn new(method: Method, h: f64) -> Self {
        Self {
            method,
            h,
            newton: NewtonConfig::default(),
            bootstrap: BootstrapPolicy::default(),
            krylov: KrylovConfig::default(),
            modes: ModesConfig::default(),
        }
    }

    pub fn with_modes(mut self, s: usize) -> Self {
        self.modes.s = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {}", self.h)));
        }
        if let RefreshPolicy::EveryNSteps(0) = self.modes.refresh {
            return Err(Error::InvalidParameter("refresh interval must be at least 1".into()));
        }
        self.newton.validate()?;
        self.krylov.validate()
    }
}

/// One step of `cfg.method` from `u0`, with `u_prev` for two-step methods.
pub fn advance<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    cfg: &IntegratorConfig,
    split: &ModalSplit,
    t0: f64,
    u0: &DVector<f64>,
    u_prev: Option<&DVector<f64>>,
) -> Result<StepOutcome> {
    let h = cfg.h;
    let history = || u_prev.ok_or(Error::MissingHistory);
    if let Some(m) = cfg.method.as_step() {
        return step(&FirstOrder(sys), m, t0, u0, u_prev, h, &cfg.newton);
    }
    match cfg.method {
        Method::Ere => ere_step(&FirstOrder(sys), t0, u0, h, &cfg.krylov),
        Method::Siere => siere_step(sys, t0, u0, h, split),
        Method::Beere => beere_step(sys, t0, u0, h, split, &cfg.newton),
        Method::Bdf2Ere => bdf2ere_step(sys, t0, u0, history()?, h, split, &cfg.newton),
        Method::Sbdf2Ere => sbdf2ere_step(sys, t0, u0, history()?, h, split),
        Method::StrSbdf2Ere => strsbdf2ere_step(sys, t0, u0, h, split),
        Method::OptBe => optimize_be(sys, u0, h, &cfg.newton),
        Method::OptBdf2 => optimize_bdf2(sys, u0, history()?, h, &cfg.newton),
        _ => unreachable!("difference methods are dispatched above"),
    }
}

/// `n` steps of a first-order method (a difference method or ERE) on a
/// general system; two-step methods are bootstrapped per `bootstrap`.
pub fn integrate_ode<S: OdeSystem>(
    sys: &S,
    cfg: &IntegratorConfig,
    t0: f64,
    u0: &DVector<f64>,
    n: usize,
) -> Result<DVector<f64>> {
    cfg.validate()?;
    if !cfg.method.is_first_order() {
        return Err(Error::InvalidParameter(format!(
            "{} needs a second-order model",
            cfg.method
        )));
    }
    let h = cfg.h;
    let mut t = t0;
    let mut u = u0.clone();
    let mut prev: Option<DVector<f64>> = None;
    for i in 0..n {
        let next = if cfg.method.is_two_step() && prev.is_none() {
            bootstrap_history(sys, t, &u, h, cfg.bootstrap, &cfg.newton)?.current
        } else if let Some(m) = cfg.method.as_step() {
            step(sys, m, t, &u, prev.as_ref(), h, &cfg.newton)?.u
        } else {
            ere_step(sys, t, &u, h, &cfg.krylov)?.u
        };
        prev = Some(std::mem::replace(&mut u, next));
        t = t0 + (i + 1) as f64 * h;
    }
    Ok(u)
}

/// Bookkeeping of one driver step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    /// Counted from 1.
    pub index: usize,
    /// Time at the end of the step.
    pub t: f64,
    pub stats: StepStats,
    pub divergence_flag: bool,
    /// The step was the one-step bootstrap of a two-step method.
    pub bootstrap: bool,
    pub modes: usize,
    pub eig_min: Option<f64>,
    pub eig_max: Option<f64>,
    pub refresh: Option<RefreshReport>,
}

/// Fixed-step driver owning the state, history and modal split.
pub struct Integrator<'a, S: SecondOrderSystem + ?Sized> {
    sys: &'a S,
    cfg: IntegratorConfig,
    state: SimState,
    tracker: SplitTracker,
    steps: usize,
    totals: StepStats,
}

impl<'a, S: SecondOrderSystem + ?Sized> Integrator<'a, S> {
    pub fn new(sys: &'a S, cfg: IntegratorConfig, state: SimState) -> Result<Self> {
        cfg.validate()?;
        Error::check_dim(sys.ndof(), state.q.len())?;
        let split = if cfg.method.is_modal() {
            modal_split_at(sys, &state.q, cfg.modes.s, cfg.modes.refresh)?
        } else {
            ModalSplit::empty(sys.ndof())
        };
        Ok(Self {
            sys,
            cfg,
            state,
            tracker: SplitTracker::new(split),
            steps: 0,
            totals: StepStats::default(),
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn split(&self) -> &ModalSplit {
        self.tracker.split()
    }

    pub fn tracker(&self) -> &SplitTracker {
        &self.tracker
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn totals(&self) -> StepStats {
        self.totals
    }

    /// Advances one step. On failure the state is left at the last good step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let index = self.steps + 1;
        let t0 = self.state.t;
        let u0 = self.state.u();
        let refresh = if self.cfg.method.is_modal() {
            self.tracker.before_step(self.sys, &u0)
        } else {
            None
        };
        let prev = self.state.previous_u();
        let bootstrap = self.cfg.method.is_two_step() && prev.is_none();
        let result = if bootstrap {
            bootstrap_history(
                &FirstOrder(self.sys),
                t0,
                &u0,
                self.cfg.h,
                self.cfg.bootstrap,
                &self.cfg.newton,
            )
            .map(|b| StepOutcome {
                u: b.current,
                stage: None,
                stats: b.stats,
                divergence_flag: false,
            })
        } else {
            advance(self.sys, &self.cfg, self.tracker.split(), t0, &u0, prev.as_ref())
        };
        let out = result.map_err(|e| Error::Step {
            index,
            t: t0,
            source: Box::new(e),
        })?;
        if out.u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Step {
                index,
                t: t0,
                source: Box::new(Error::LinearSolve("step produced non-finite values".into())),
            });
        }
        self.state.advance(&out.u, self.cfg.h);
        self.state.t = self.cfg.h * index as f64;
        self.steps = index;
        self.totals += out.stats;
        let values = &self.tracker.split().values;
        Ok(StepRecord {
            index,
            t: self.state.t,
            stats: out.stats,
            divergence_flag: out.divergence_flag,
            bootstrap,
            modes: self.tracker.split().s(),
            eig_min: values.iter().copied().reduce(f64::min),
            eig_max: values.iter().copied().reduce(f64::max),
            refresh,
        })
    }

    /// Steps needed to cover `duration`.
    pub fn steps_for(&self, duration: f64) -> usize {
        (duration / self.cfg.h).round().max(0.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigs::{spring, LinearOde};
    use crate::system::join_state;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert_eq!("str_sbdf2ere".parse::<Method>().unwrap(), Method::StrSbdf2Ere);
        assert!("RK4".parse::<Method>().is_err());
        assert_eq!(parse_methods("BE, tr-bdf2,").unwrap(), vec![Method::Be, Method::TrBdf2]);
    }

    #[test]
    fn step_methods_map_both_ways() {
        for m in StepMethod::ALL {
            assert_eq!(Method::from(m).as_step(), Some(m));
            assert_eq!(Method::from(m).is_two_step(), m.is_two_step());
        }
    }

    #[test]
    fn every_method_keeps_equilibrium() {
        let sys = spring(2.0, 50.0).unwrap();
        let q = sys.rest_positions();
        for m in Method::ALL {
            let cfg = IntegratorConfig::new(m, 0.05).with_modes(1);
            let mut drv = Integrator::new(&sys, cfg, SimState::at_rest(q.clone())).unwrap();
            for _ in 0..4 {
                drv.step().unwrap();
            }
            let u = drv.state().u();
            assert!((u - join_state(&q, &DVector::zeros(1))).norm() < 1e-12, "{m}");
        }
    }

    #[test]
    fn driver_matches_single_steps() {
        let sys = spring(1.0, 4.0).unwrap();
        let u0 = DVector::from_vec(vec![0.3, -0.1]);
        let h = 0.1;
        for m in [Method::Be, Method::Sdirk, Method::Siere, Method::Ere] {
            let cfg = IntegratorConfig::new(m, h).with_modes(1);
            let state = SimState::new(DVector::from_element(1, 0.3), DVector::from_element(1, -0.1)).unwrap();
            let mut drv = Integrator::new(&sys, cfg, state).unwrap();
            let rec = drv.step().unwrap();
            let direct = advance(&sys, &cfg, drv.split(), 0.0, &u0, None).unwrap();
            assert_eq!(rec.index, 1);
            assert!((rec.t - h).abs() < 1e-15);
            assert!((drv.state().u() - direct.u).norm() < 1e-12, "{m}");
        }
    }

    #[test]
    fn two_step_driver_bootstraps_once() {
        let sys = spring(1.0, 4.0).unwrap();
        let state = SimState::new(DVector::from_element(1, 0.3), DVector::zeros(1)).unwrap();
        let mut drv = Integrator::new(&sys, IntegratorConfig::new(Method::Bdf2, 0.1), state).unwrap();
        assert!(drv.step().unwrap().bootstrap);
        assert!(!drv.step().unwrap().bootstrap);
        assert_eq!(drv.steps_taken(), 2);
    }

    #[test]
    fn ode_driver_rejects_second_order_methods() {
        let sys = LinearOde::scalar(-1.0);
        let cfg = IntegratorConfig::new(Method::Siere, 0.1);
        assert!(integrate_ode(&sys, &cfg, 0.0, &DVector::from_element(1, 1.0), 3).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(IntegratorConfig::new(Method::Be, 0.0).validate().is_err());
        let mut cfg = IntegratorConfig::new(Method::Siere, 0.1);
        cfg.modes.refresh = RefreshPolicy::EveryNSteps(0);
        assert!(cfg.validate().is_err());
        let sys = spring(1.0, 1.0).unwrap();
        let q = sys.rest_positions();
        assert!(Integrator::new(&sys, IntegratorConfig::new(Method::Siere, 0.1).with_modes(3), SimState::at_rest(q)).is_err());
    }
}
