//! Commands behind the `softstep` binary. Each command is a plain function so
//! it can be driven from tests without spawning a process.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softstep::analysis::{convergence_order, damping_curve, log_grid, ConvergenceResult};
use softstep::contact;
use softstep::integrator::parse_methods;
use softstep::reduction::modal_split_at;
use softstep::rigs::LinearOde;
use softstep::{
    EnergyReport, Error, ForceModel, Integrator, IntegratorConfig, Method, RefreshPolicy, Result, Scene, StepRecord,
};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "softstep", version, about = "Stiff elastodynamics scenes and integrator analyses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scene and write OBJ frames, energy.csv and diagnostics.csv.
    Simulate(SimulateArgs),
    /// Write d/omega against omega h, one CSV per method.
    DampingCurves(DampingArgs),
    /// Measure convergence slopes on a reference ODE.
    Convergence(ConvergenceArgs),
    /// Write the smallest generalized eigenvalues of a scene at rest.
    Eigs(EigsArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory; defaults to the scene's.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the scene's method. Several methods write to one
    /// subdirectory each.
    #[arg(long)]
    pub methods: Option<String>,
}

#[derive(Debug, Args)]
pub struct DampingArgs {
    #[arg(long, default_value = "BE,BDF2,TR,TRBDF2,SDIRK")]
    pub methods: String,
    /// `lo:hi:npts`, logarithmically spaced.
    #[arg(long, default_value = "0.01:100:64")]
    pub grid: String,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rig {
    /// `u' = -u + sin t`, `u(0) = 1`.
    ForcedDecay,
    /// Random stable 4x4 linear system drawn from `--seed`.
    RandomLinear,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[arg(long, value_enum, default_value = "forced-decay")]
    pub rig: Rig,
    #[arg(long, default_value = "BE,SI,BDF2,TRBDF2,SDIRK")]
    pub methods: String,
    /// Comma-separated step sizes; each must divide the unit interval.
    #[arg(long, default_value = "0.1,0.05,0.025,0.0125")]
    pub hs: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EigsArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Number of eigenvalues; defaults to the scene's mode count.
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a).map(drop),
        Command::DampingCurves(a) => damping_curves(&a).map(drop),
        Command::Convergence(a) => convergence(&a).map(drop),
        Command::Eigs(a) => eigs(&a).map(drop),
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Outcome of one simulated method.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub method: Method,
    pub dir: PathBuf,
    pub steps: usize,
    pub frames: usize,
}

pub fn simulate(args: &SimulateArgs) -> Result<Vec<RunSummary>> {
    let scene = Scene::load(&args.scene)?;
    let methods = match &args.methods {
        Some(list) => parse_methods(list)?,
        None => vec![scene.config.stepper.method],
    };
    if methods.is_empty() {
        return Err(Error::InvalidParameter("no methods given".into()));
    }
    let out = args.out.clone().unwrap_or_else(|| scene.output_dir());
    let model = scene.build_model()?;
    methods
        .iter()
        .map(|&m| {
            let dir = if methods.len() > 1 { out.join(m.name()) } else { out.clone() };
            run_scene(&scene, &model, m, &dir)
        })
        .collect()
}

/// Integrates `scene` with `method`, writing into `dir`. On a failed step the
/// CSVs hold every completed step and `last_good.obj` the last state.
pub fn run_scene(scene: &Scene, model: &ForceModel, method: Method, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    let cfg = IntegratorConfig {
        method,
        ..scene.config.integrator()
    };
    cfg.validate()?;
    let faces = model.mesh().boundary_faces();
    let mut it = Integrator::new(model, cfg, scene.initial_state(model))?;
    let stride = scene.frame_stride();
    let steps = scene.num_steps();

    let mut energy = EnergyReport::default();
    let mut diag = create_file(&dir.join("diagnostics.csv"))?;
    writeln!(diag, "{DIAGNOSTICS_HEADER}")?;
    let s = it.state();
    energy.record(model, s.t, &s.q, &s.v)?;
    write_obj(&dir.join(frame_name(0)), &s.q, &faces)?;
    let mut frames = 1;

    let mut failure = None;
    for _ in 0..steps {
        match it.step() {
            Ok(rec) => {
                let s = it.state();
                energy.record(model, s.t, &s.q, &s.v)?;
                write_diagnostics(&mut diag, model, &rec, &s.q, &s.v)?;
                if rec.index % stride == 0 {
                    write_obj(&dir.join(frame_name(frames)), &s.q, &faces)?;
                    frames += 1;
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    diag.flush()?;
    energy.write_csv(create_file(&dir.join("energy.csv"))?)?;
    if let Some(e) = failure {
        log::error!("{method}: {e}; last good state at t = {}", it.state().t);
        write_obj(&dir.join("last_good.obj"), &it.state().q, &faces)?;
        return Err(e);
    }
    log::info!("{method}: {steps} steps, {frames} frames in {}", dir.display());
    Ok(RunSummary {
        method,
        dir: dir.to_path_buf(),
        steps,
        frames,
    })
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.obj")
}

fn write_obj(path: &Path, q: &DVector<f64>, faces: &[[usize; 3]]) -> Result<()> {
    let mut w = create_file(path)?;
    for x in q.as_slice().chunks(3) {
        writeln!(w, "v {} {} {}", x[0], x[1], x[2])?;
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

const DIAGNOSTICS_HEADER: &str = "step,t,bootstrap,newton_iterations,linear_solves,factorizations,rhs_evals,jacobian_evals,krylov_dim,divergence,modes,eig_min,eig_max,refreshed,eig_drift,subspace_angle,contacts,min_gap,max_lambda,friction_power,penetrations";

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

fn write_diagnostics(
    w: &mut impl Write,
    model: &ForceModel,
    rec: &StepRecord,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<()> {
    let st = &rec.stats;
    let contact = match (model.contact_config(), model.contact_set(q)?) {
        (Some(cfg), Some(cs)) => Some(contact::diagnostics(&cs, cfg, v)),
        _ => None,
    };
    writeln!(
        w,
        "{},{:e},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        rec.index,
        rec.t,
        u8::from(rec.bootstrap),
        st.newton_iterations,
        st.linear_solves,
        st.factorizations,
        st.rhs_evals,
        st.jacobian_evals,
        st.krylov_dim,
        u8::from(rec.divergence_flag),
        rec.modes,
        opt(rec.eig_min),
        opt(rec.eig_max),
        u8::from(rec.refresh.is_some()),
        opt(rec.refresh.map(|r| r.drift)),
        opt(rec.refresh.map(|r| r.angle)),
        contact.map(|c| c.num_contacts.to_string()).unwrap_or_default(),
        opt(contact.filter(|c| c.num_contacts > 0).map(|c| c.min_gap)),
        opt(contact.map(|c| c.max_lambda)),
        opt(contact.map(|c| c.friction_power)),
        contact.map(|c| c.penetrations.to_string()).unwrap_or_default(),
    )?;
    Ok(())
}

/// Parses `lo:hi:npts` into a logarithmic grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidParameter(format!("grid must look like lo:hi:npts, got {spec:?}"));
    let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
    let [lo, hi, n] = parts[..] else { return Err(bad()) };
    let lo: f64 = lo.parse().map_err(|_| bad())?;
    let hi: f64 = hi.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    log_grid(lo, hi, n)
}

/// Writes `damping_<METHOD>.csv` per method and returns the paths.
pub fn damping_curves(args: &DampingArgs) -> Result<Vec<PathBuf>> {
    let methods = parse_methods(&args.methods)?;
    let grid = parse_grid(&args.grid)?;
    fs::create_dir_all(&args.out)?;
    let mut paths = Vec::new();
    for m in methods {
        let curve = damping_curve(m, &grid)?;
        let path = args.out.join(format!("damping_{}.csv", m.name()));
        let mut w = create_file(&path)?;
        curve.write_csv(&mut w, true)?;
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

fn parse_steps(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|h| *h > 0.0 && h.is_finite())
                .ok_or_else(|| Error::InvalidParameter(format!("invalid step size {s:?}")))
        })
        .collect()
}

/// Random stable system `A = -(B B^T + I/2) + (C - C^T)` with its initial
/// state and exact solution at `t = 1`.
fn random_linear(seed: u64) -> (LinearOde, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let a = -(&b * b.transpose() + DMatrix::identity(n, n) * 0.5) + (&c - c.transpose());
    let u0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let exact = a.clone().exp() * &u0;
    (LinearOde::new(a), u0, exact)
}

/// Runs the study and writes `convergence.csv` with one row per method and
/// step size.
pub fn convergence(args: &ConvergenceArgs) -> Result<Vec<ConvergenceResult>> {
    let methods = parse_methods(&args.methods)?;
    let hs = parse_steps(&args.hs)?;
    if let Some(m) = methods.iter().find(|m| !m.is_first_order()) {
        return Err(Error::InvalidParameter(format!("{m} needs a second-order model")));
    }
    let (sys, u0, exact) = match args.rig {
        Rig::ForcedDecay => (
            LinearOde::forced_decay(),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, LinearOde::forced_decay_exact(1.0, 1.0)),
        ),
        Rig::RandomLinear => random_linear(args.seed),
    };
    let results = methods
        .iter()
        .map(|&m| {
            let mut cfg = IntegratorConfig::new(m, hs.first().copied().unwrap_or(1.0));
            cfg.newton.abs_tol = 1e-14;
            cfg.newton.rel_tol = 1e-14;
            convergence_order(&sys, &cfg, &u0, 1.0, &hs, &exact)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out)?;
    let mut w = create_file(&args.out.join("convergence.csv"))?;
    writeln!(w, "method,h,error,slope,unreliable")?;
    for r in &results {
        for (h, e) in r.hs.iter().zip(&r.errors) {
            writeln!(w, "{},{:e},{:e},{:e},{}", r.method, h, e, r.slope, u8::from(r.unreliable))?;
        }
    }
    w.flush()?;
    Ok(results)
}

/// Writes `eigs.csv` with the ascending eigenvalues of `K x = lambda M x` at
/// rest.
pub fn eigs(args: &EigsArgs) -> Result<Vec<f64>> {
    let scene = Scene::load(&args.scene)?;
    let model = scene.build_model()?;
    let s = args.modes.unwrap_or(scene.config.reduction.s);
    let split = modal_split_at(&model, &model.rest_state(), s, RefreshPolicy::Once)?;
    let out = args.out.clone().unwrap_or_else(|| scene.output_dir());
    fs::create_dir_all(&out)?;
    let mut w = create_file(&out.join("eigs.csv"))?;
    writeln!(w, "index,eigenvalue,frequency_hz")?;
    for (i, l) in split.values.iter().enumerate() {
        let f = l.max(0.0).sqrt() / (2.0 * std::f64::consts::PI);
        writeln!(w, "{i},{l:e},{f:e}")?;
    }
    w.flush()?;
    Ok(split.values.iter().copied().collect())
}
