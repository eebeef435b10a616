//! Scenario configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dojo_core::ipsolver::SolverOptions;
use dojo_core::mech::{ConeMode, Mechanism};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    BoxDrop,
    BoxSlide,
    ChainFloat,
    GradSweep,
    Sysid,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::BoxDrop => "box_drop",
            Scenario::BoxSlide => "box_slide",
            Scenario::ChainFloat => "chain_float",
            Scenario::GradSweep => "grad_sweep",
            Scenario::Sysid => "sysid",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Replaces the built-in box; must describe one body whose contacts are
    /// its vertices.
    #[serde(default)]
    pub mechanism_file: Option<PathBuf>,
    pub h: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cone_mode: ConeMode,
    pub output_dir: PathBuf,
    /// Overrides the scenario's default solver tolerances.
    #[serde(default)]
    pub solver: Option<SolverOptions>,
    #[serde(default)]
    pub drop: DropParams,
    #[serde(default)]
    pub slide: SlideParams,
    #[serde(default)]
    pub chain: ChainParams,
    #[serde(default)]
    pub sweep: SweepParams,
    #[serde(default)]
    pub sysid: SysidConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropParams {
    /// Height of the lowest vertex above the floor, m.
    pub height: f64,
    /// Initial tilt about the (1, 1, 0) axis, rad.
    pub tilt: f64,
    pub friction: f64,
    pub timesteps: Vec<f64>,
}

impl Default for DropParams {
    fn default() -> Self {
        Self {
            height: 1.0,
            tilt: 0.0,
            friction: 0.5,
            timesteps: vec![0.1, 0.01],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideParams {
    /// Initial speed, m/s.
    pub speed: f64,
    /// Heading measured from the first tangent direction, rad.
    pub heading: f64,
    pub friction: f64,
    /// Extra heading run for comparison; skipped when `None`.
    pub extra_heading: Option<f64>,
}

impl Default for SlideParams {
    fn default() -> Self {
        Self {
            speed: 3.0,
            heading: std::f64::consts::FRAC_PI_4,
            friction: 0.2,
            extra_heading: Some(0.5),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainParams {
    pub links: usize,
    /// Link radius, m. The spin a link can carry in one step is bounded by
    /// its axial inertia over h, so slender links need small inputs at large h.
    pub radius: f64,
    pub timesteps: Vec<f64>,
    /// Duration of the random actuation, s.
    pub actuation: f64,
    /// Duration of the unforced coast, s.
    pub coast: f64,
    /// Inputs are drawn from U(0, input_max) per component and step.
    pub input_max: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            links: 3,
            radius: 0.15,
            timesteps: vec![0.01, 0.005],
            actuation: 1.0,
            coast: 10.0,
            input_max: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Z => 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub force_min: f64,
    pub force_max: f64,
    pub samples: usize,
    pub kappas: Vec<f64>,
    /// Direction of the applied force and of the measured displacement.
    pub axis: Axis,
    pub friction: f64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            force_min: 0.0,
            force_max: 30.0,
            samples: 61,
            kappas: vec![1e-2, 1e-3, 3e-4],
            axis: Axis::Z,
            friction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidConfig {
    pub n_traj: usize,
    pub noise_std: f64,
    pub friction: f64,
    pub mass: f64,
    pub size: [f64; 3],
    /// Relative perturbation of the initial guess, drawn per parameter from ±perturbation.
    pub perturbation: f64,
    pub max_gn_iters: usize,
    /// Diagonal of W over `(p, δ)`.
    pub weights: [f64; 6],
    pub kappa_grad: f64,
    /// Relative error allowed on each recovered parameter.
    pub tolerance: f64,
}

impl Default for SysidConfig {
    fn default() -> Self {
        Self {
            n_traj: 50,
            noise_std: 0.0,
            friction: 0.5,
            mass: 1.0,
            size: [0.5, 0.5, 0.5],
            perturbation: 0.2,
            max_gn_iters: 30,
            weights: [1.0; 6],
            kappa_grad: 3e-4,
            tolerance: 0.05,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            bail!("h must be positive, got {}", self.h);
        }
        if self.steps == 0 {
            bail!("T must be at least 1");
        }
        if let Some(path) = &self.mechanism_file {
            if !path.is_file() {
                bail!("mechanism file {} does not exist", path.display());
            }
        }
        let positive = |name: &str, xs: &[f64]| -> Result<()> {
            if xs.is_empty() || xs.iter().any(|&x| !(x > 0.0)) {
                bail!("{name} must be a non-empty list of positive values");
            }
            Ok(())
        };
        match self.scenario {
            Scenario::BoxDrop => positive("drop.timesteps", &self.drop.timesteps)?,
            Scenario::ChainFloat => {
                positive("chain.timesteps", &self.chain.timesteps)?;
                if self.chain.links == 0 {
                    bail!("chain.links must be at least 1");
                }
            }
            Scenario::GradSweep => {
                positive("sweep.kappas", &self.sweep.kappas)?;
                if self.sweep.samples < 2 || !(self.sweep.force_max > self.sweep.force_min) {
                    bail!("sweep needs at least two samples over a non-empty force range");
                }
            }
            Scenario::Sysid => {
                if self.sysid.n_traj == 0 {
                    bail!("sysid.n_traj must be at least 1");
                }
                if self.steps < 3 {
                    bail!("sysid trajectories need T ≥ 3 configurations");
                }
                if !(self.sysid.friction > 0.0) {
                    bail!("sysid.friction must be positive");
                }
            }
            Scenario::BoxSlide => {}
        }
        Ok(())
    }

    pub fn solver_or(&self, default: SolverOptions) -> SolverOptions {
        self.solver.clone().unwrap_or(default)
    }

    /// Mechanism from `mechanism_file` at timestep `h`, if one is configured.
    pub fn mechanism(&self, h: f64) -> Result<Option<Mechanism>> {
        let Some(path) = &self.mechanism_file else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mech = Mechanism::from_json(&text)?.with_timestep(h)?;
        if mech.num_bodies() != 1 {
            bail!("{}: expected a single body, found {}", path.display(), mech.num_bodies());
        }
        Ok(Some(mech))
    }
}
