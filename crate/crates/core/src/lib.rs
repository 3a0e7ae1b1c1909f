//! Stiff time integration for tetrahedral elastodynamics: difference,
//! exponential and modally split integrators, barrier contact with smoothed
//! friction, and damping and convergence analysis.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod contact;
pub mod error;
pub mod expo;
pub mod fem;
pub mod integrator;
pub mod linalg;
pub mod reduction;
pub mod rigs;
pub mod scene;
pub mod stepper;
pub mod system;

pub use analysis::{DampingCurve, EnergyReport, EnergySample};
pub use contact::{ContactConfig, ImplicitSurface};
pub use error::{Error, NewtonError, Result};
pub use fem::{MaterialModel, MaterialParams, RayleighParams, TetMesh};
pub use integrator::{Integrator, IntegratorConfig, Method, ModesConfig, StepRecord};
pub use linalg::LinearSolverKind;
pub use reduction::{ModalSplit, RefreshPolicy};
pub use scene::{Scene, SceneConfig};
pub use stepper::{BootstrapPolicy, NewtonConfig, StepMethod, StepStats};
pub use system::{ForceModel, OdeSystem, SecondOrderSystem, SimState};
