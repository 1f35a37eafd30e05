//! Experiment configuration file (TOML) and its translation into engine
//! objects.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use memheat::integrator::{Backend, Model, Stepper, StepperConfig};
use memheat::kernel::{validate_m_delta, KernelReport, KernelSpec, MemorySpace, SGrid, DEFAULT_STRETCH};
use memheat::model::{certify_potential, NoiseFamily, NoiseSpec, PotentialEvaluator};
use memheat::spectral::SpectralField;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub discretization: DiscretizationSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub regularity: RegularitySection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kappa: f64,
    pub delta: f64,
    /// Coefficients `c_0, c_1, ...` of `phi(x) = sum c_i x^i`.
    pub potential: Vec<f64>,
    pub kernel: KernelSection,
    pub noise: NoiseSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSection {
    Exponential { mu0: f64, rate: f64 },
    /// Two-column `s mu` file, relative paths resolved against the config file.
    Tabulated { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSection {
    None,
    Diagonal {
        q: Vec<f64>,
    },
    Power {
        amplitude: f64,
        exponent: f64,
        #[serde(default)]
        cutoff: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationSection {
    pub n_modes: usize,
    pub n_nodes: usize,
    pub dt: f64,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    /// Collocation size; defaults to the de-aliased size.
    #[serde(default)]
    pub collocation_points: Option<usize>,
    #[serde(default = "default_stretch")]
    pub stretch: f64,
    #[serde(default = "default_tail_tol")]
    pub tail_tol: f64,
}

fn default_backend() -> Backend {
    Backend::RingBuffer
}

fn default_stretch() -> f64 {
    DEFAULT_STRETCH
}

fn default_tail_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub t_final: f64,
    /// Defaults to `10 / c0` in `measure` and `regularity`.
    #[serde(default)]
    pub burn_in: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub ensemble: u64,
    #[serde(default = "one_usize")]
    pub record_stride: usize,
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            t_final: 1.0,
            burn_in: None,
            seed: 0,
            ensemble: 1,
            record_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairNoiseKind {
    Shared,
    Independent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub n_hat: usize,
    #[serde(default = "shared")]
    pub noise: PairNoiseKind,
    /// Sobolev order of the recorded `||(u_hat, eta_hat)||^2`.
    #[serde(default)]
    pub hat_order: f64,
    /// `false` drops the `kappa`, `1 - kappa` weights from the nudged drift.
    #[serde(default = "yes")]
    pub weighted: bool,
}

fn yes() -> bool {
    true
}

fn shared() -> PairNoiseKind {
    PairNoiseKind::Shared
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            n_hat: 1,
            noise: PairNoiseKind::Shared,
            hat_order: 0.0,
            weighted: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Leading coefficients of `u_0`; missing modes are zero.
    #[serde(default)]
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularitySection {
    /// Exponent of the rough comparison noise `q_k = amplitude k^-e`.
    pub rough_exponent: f64,
    /// Sobolev order gated by the noise-trace and derivative checks.
    pub order: u32,
}

impl Default for RegularitySection {
    fn default() -> Self {
        Self {
            rough_exponent: 1.0,
            order: 2,
        }
    }
}

/// Parsed configuration with the raw text it came from.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub text: String,
    pub dir: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let config: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, text, dir })
}

/// Engine objects built from a validated configuration.
pub struct Built {
    pub model: Arc<Model>,
    pub cfg: StepperConfig,
    pub kernel_report: KernelReport,
    collocation_points: Option<usize>,
}

impl Built {
    pub fn stepper(&self) -> Result<Stepper> {
        let mut stepper = Stepper::new(self.model.clone(), self.cfg.clone())?;
        if let Some(points) = self.collocation_points {
            *stepper.evaluator_mut() = PotentialEvaluator::with_points(&self.model.potential, self.cfg.n_modes, points)?;
        }
        Ok(stepper)
    }
}

impl Loaded {
    pub fn kernel(&self) -> Result<KernelSpec> {
        let m = &self.config.model;
        Ok(match &m.kernel {
            KernelSection::Exponential { mu0, rate } => KernelSpec::exponential(*mu0, *rate, m.delta),
            KernelSection::Tabulated { path } => {
                let p = self.dir.join(path);
                KernelSpec::load_tabulated(&p, m.delta).with_context(|| format!("kernel table {}", p.display()))?
            }
        })
    }

    pub fn noise_family(&self) -> NoiseFamily {
        match &self.config.model.noise {
            NoiseSection::None => NoiseFamily::Diagonal(Vec::new()),
            NoiseSection::Diagonal { q } => NoiseFamily::Diagonal(q.clone()),
            NoiseSection::Power {
                amplitude,
                exponent,
                cutoff,
            } => NoiseFamily::Power {
                amplitude: *amplitude,
                exponent: *exponent,
                cutoff: *cutoff,
            },
        }
    }

    pub fn initial_u(&self) -> Result<SpectralField> {
        let n = self.config.discretization.n_modes;
        let u = &self.config.initial.u;
        if u.len() > n {
            bail!("initial.u has {} coefficients but n_modes = {n}", u.len());
        }
        let mut c = vec![0.0; n];
        c[..u.len()].copy_from_slice(u);
        Ok(SpectralField::from_coeffs(c))
    }

    /// Runs the kernel, potential, and noise validators and assembles the model.
    pub fn build(&self) -> Result<Built> {
        self.build_with_noise(self.noise_family())
    }

    pub fn build_with_noise(&self, noise: NoiseFamily) -> Result<Built> {
        let m = &self.config.model;
        let d = &self.config.discretization;
        let kernel = self.kernel()?;
        let grid = SGrid::build_with_stretch(m.delta, kernel.mu0(), d.n_nodes, d.tail_tol, d.stretch)?;
        let kernel_report = validate_m_delta(&kernel, &grid)?;
        let potential = certify_potential(&m.potential)?;
        let noise = NoiseSpec::new(noise, d.n_modes)?;
        let cfg = StepperConfig {
            dt: d.dt,
            kappa: m.kappa,
            n_modes: d.n_modes,
            backend: d.backend,
            record_stride: self.config.run.record_stride,
        };
        cfg.validate()?;
        if let Some(points) = d.collocation_points {
            PotentialEvaluator::with_points(&potential, d.n_modes, points)?;
        }
        let model = Arc::new(Model {
            space: Arc::new(MemorySpace::new(grid, kernel)),
            potential,
            noise,
        });
        Ok(Built {
            model,
            cfg,
            kernel_report,
            collocation_points: d.collocation_points,
        })
    }
}
