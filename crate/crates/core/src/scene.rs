//! JSON scene description and model construction.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::contact::ContactConfig;
use crate::error::{Error, Result};
use crate::expo::KrylovConfig;
use crate::fem::{MaterialParams, RayleighParams, TetMesh};
use crate::integrator::{IntegratorConfig, Method, ModesConfig};
use crate::linalg::LinearSolverKind;
use crate::stepper::{BootstrapPolicy, NewtonConfig};
use crate::system::{ForceModel, SimState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepperSection {
    pub method: Method,
    pub h: f64,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub bootstrap: BootstrapPolicy,
    #[serde(default)]
    pub krylov: KrylovConfig,
}

/// Scene file contents. Relative paths resolve against the scene file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub mesh: PathBuf,
    pub material: MaterialParams,
    #[serde(default)]
    pub rayleigh: RayleighParams,
    pub gravity: [f64; 3],
    #[serde(default)]
    pub contact: Option<ContactConfig>,
    pub stepper: StepperSection,
    #[serde(default)]
    pub reduction: ModesConfig,
    /// Simulated time in seconds.
    pub duration: f64,
    pub output_dir: PathBuf,
    /// Frames written per simulated second.
    pub cadence: f64,
    /// Uniform initial velocity of the free vertices.
    #[serde(default)]
    pub initial_velocity: [f64; 3],
    #[serde(default)]
    pub linear_solver: LinearSolverKind,
}

impl SceneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialization cannot fail")
    }

    pub fn integrator(&self) -> IntegratorConfig {
        let s = &self.stepper;
        IntegratorConfig {
            method: s.method,
            h: s.h,
            newton: s.newton,
            bootstrap: s.bootstrap,
            krylov: s.krylov,
            modes: self.reduction,
        }
    }

    /// Checks everything except the mesh file.
    pub fn validate_parameters(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::InvalidParameter(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.cadence > 0.0) || !self.cadence.is_finite() {
            return Err(Error::InvalidParameter(format!("cadence must be positive, got {}", self.cadence)));
        }
        if self.gravity.iter().chain(&self.initial_velocity).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("gravity and initial velocity must be finite".into()));
        }
        self.material.validate()?;
        self.rayleigh.validate()?;
        if let Some(c) = &self.contact {
            c.validate()?;
        }
        self.integrator().validate()
    }
}

/// A parsed scene with its base directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub base: PathBuf,
}

impl Scene {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(SceneConfig::from_json(&text)?, base)
    }

    /// Validates `config`, including that the mesh file exists.
    pub fn new(config: SceneConfig, base: PathBuf) -> Result<Self> {
        config.validate_parameters()?;
        let scene = Self { config, base };
        let mesh = scene.mesh_path();
        if !mesh.is_file() {
            return Err(Error::InvalidParameter(format!("mesh file {} does not exist", mesh.display())));
        }
        Ok(scene)
    }

    pub fn mesh_path(&self) -> PathBuf {
        self.base.join(&self.config.mesh)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base.join(&self.config.output_dir)
    }

    pub fn build_model(&self) -> Result<ForceModel> {
        let c = &self.config;
        let mesh = TetMesh::load(self.mesh_path())?;
        Ok(ForceModel::new(
            mesh,
            c.material,
            c.rayleigh,
            Vector3::from(c.gravity),
            c.contact.clone(),
        )?
        .with_linear_solver(c.linear_solver))
    }

    /// Rest positions with the configured velocity on free DOFs.
    pub fn initial_state(&self, model: &ForceModel) -> SimState {
        let q = model.rest_state();
        let free = model.mesh().free_mask();
        let v = DVector::from_fn(q.len(), |i, _| if free[i] { self.config.initial_velocity[i % 3] } else { 0.0 });
        SimState { q, v, t: 0.0, history: None }
    }

    /// Steps between written frames.
    pub fn frame_stride(&self) -> usize {
        ((1.0 / (self.config.cadence * self.config.stepper.h)).round() as usize).max(1)
    }

    pub fn num_steps(&self) -> usize {
        (self.config.duration / self.config.stepper.h).round().max(1.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::MaterialModel;

    fn sample() -> SceneConfig {
        SceneConfig {
            mesh: "beam.mesh".into(),
            material: MaterialParams::new(MaterialModel::StableNeoHookean, 1e5, 0.4, 1000.0).unwrap(),
            rayleigh: RayleighParams::default(),
            gravity: [0.0, 0.0, -9.81],
            contact: None,
            stepper: StepperSection {
                method: Method::StrSbdf2Ere,
                h: 1.0 / 60.0,
                newton: NewtonConfig::default(),
                bootstrap: BootstrapPolicy::Sdirk,
                krylov: KrylovConfig::default(),
            },
            reduction: ModesConfig::default(),
            duration: 1.0,
            output_dir: "out".into(),
            cadence: 30.0,
            initial_velocity: [0.0; 3],
            linear_solver: LinearSolverKind::Direct,
        }
    }

    #[test]
    fn json_round_trip_is_identity() {
        let c = sample();
        let back = SceneConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(SceneConfig::from_json(&back.to_json()).unwrap(), back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["colour"] = serde_json::json!("red");
        assert!(matches!(SceneConfig::from_json(&v.to_string()), Err(Error::Parse { .. })));
        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["stepper"]["tolerance"] = serde_json::json!(1e-3);
        assert!(SceneConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = sample();
        c.duration = 0.0;
        assert!(c.validate_parameters().is_err());
        let mut c = sample();
        c.cadence = -1.0;
        assert!(c.validate_parameters().is_err());
        let mut c = sample();
        c.stepper.h = 0.0;
        assert!(c.validate_parameters().is_err());
        assert!(sample().validate_parameters().is_ok());
    }

    #[test]
    fn missing_mesh_is_rejected() {
        let err = Scene::new(sample(), PathBuf::from("/nonexistent-dir")).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn stride_follows_cadence() {
        let dir = std::env::temp_dir();
        let scene = Scene {
            config: sample(),
            base: dir,
        };
        assert_eq!(scene.frame_stride(), 2);
        assert_eq!(scene.num_steps(), 60);
    }
}
