//! Semi-implicit Euler-Maruyama integration of the Galerkin-truncated
//! extended system `(u, eta)` and of its nudged copy.
//!
//! Diffusion is implicit; memory and reaction are explicit; noise enters as
//! exact Wiener increments `q_k sqrt(dt) xi_k`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{check_cfl, evolve_unchecked, memory_integral, HistoryField, InitialHistory, PastPath};
use crate::kernel::{m_norm_sq, tail_sup, MemorySpace, DEFAULT_TAIL_SAMPLES};
use crate::model::{NoiseSpec, PotentialEvaluator, PotentialSpec};
use crate::spectral::{mode_eigenvalue, SpectralField};

/// `||u||_{H^0}` above which a run is declared blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// `eta` reconstructed from a buffer of past `u` snapshots.
    RingBuffer,
    /// `eta` evolved by upwind transport on the memory grid.
    GridTransport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepperConfig {
    pub dt: f64,
    /// Weight of instantaneous diffusion; `1 - kappa` weights the memory.
    pub kappa: f64,
    pub n_modes: usize,
    pub backend: Backend,
    /// Steps between recorded observations.
    pub record_stride: usize,
}

impl StepperConfig {
    pub fn new(dt: f64, kappa: f64, n_modes: usize) -> Self {
        Self {
            dt,
            kappa,
            n_modes,
            backend: Backend::RingBuffer,
            record_stride: 1,
        }
    }

    /// `kappa = 1` is accepted as the memoryless limit.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::Config(format!(
                "kappa = {} must lie in (0, 1] (1 disables memory)",
                self.kappa
            )));
        }
        if self.n_modes == 0 {
            return Err(Error::Config("at least one mode is required".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record_stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Nudging on the lowest `n_hat` modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlConfig {
    pub n_hat: usize,
    /// Use the `kappa`, `1 - kappa` weights of the reference equation in the
    /// controlled drift; `false` gives unit weights on diffusion and memory.
    pub weighted: bool,
}

impl ControlConfig {
    /// Checks the spectral gap `kappa alpha_{n_hat} > a_phi`.
    pub fn new(n_hat: usize, kappa: f64, a_phi: f64) -> Result<Self> {
        if n_hat == 0 {
            return Err(Error::Config("n_hat must be at least 1".into()));
        }
        let lhs = kappa * mode_eigenvalue(n_hat);
        if !(lhs > a_phi) {
            return Err(Error::SpectralGap { lhs, a_phi });
        }
        Ok(Self {
            n_hat,
            weighted: true,
        })
    }

    /// Contraction rate `min{2 (kappa alpha_{n_hat} - a_phi), delta}`.
    pub fn contraction_rate(&self, kappa: f64, a_phi: f64, delta: f64) -> f64 {
        (2.0 * (kappa * mode_eigenvalue(self.n_hat) - a_phi)).min(delta)
    }
}

/// Kernel, reaction and noise of one experiment.
#[derive(Debug, Clone)]
pub struct Model {
    pub space: Arc<MemorySpace>,
    pub potential: PotentialSpec,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone)]
pub enum History {
    Ring(PastPath),
    Grid(HistoryField),
}

/// The pair `(u, eta)` at time `t`.
#[derive(Debug, Clone)]
pub struct ExtendedState {
    pub u: SpectralField,
    pub history: History,
    pub t: f64,
}

impl ExtendedState {
    /// State at `t = 0` with history `eta0` (zero if absent).
    pub fn new(model: &Model, cfg: &StepperConfig, u0: SpectralField, eta0: Option<HistoryField>) -> Result<Self> {
        if u0.n_modes() != cfg.n_modes {
            return Err(Error::DimensionMismatch(format!(
                "initial u has {} modes, configuration has {}",
                u0.n_modes(),
                cfg.n_modes
            )));
        }
        if let Some(e) = &eta0 {
            if e.n_modes() != cfg.n_modes {
                return Err(Error::DimensionMismatch(format!(
                    "initial history has {} modes, configuration has {}",
                    e.n_modes(),
                    cfg.n_modes
                )));
            }
        }
        let history = match cfg.backend {
            Backend::RingBuffer => History::Ring(PastPath::new(
                model.space.clone(),
                cfg.dt,
                0.0,
                &u0,
                eta0.map_or(InitialHistory::Zero, InitialHistory::Field),
            )?),
            Backend::GridTransport => History::Grid(
                eta0.unwrap_or_else(|| HistoryField::zeros(model.space.clone(), cfg.n_modes)),
            ),
        };
        Ok(Self { u: u0, history, t: 0.0 })
    }

    pub fn zero(model: &Model, cfg: &StepperConfig) -> Result<Self> {
        Self::new(model, cfg, SpectralField::zeros(cfg.n_modes), None)
    }

    /// `eta(t)` on the memory grid.
    pub fn eta(&self) -> HistoryField {
        match &self.history {
            History::Ring(p) => p.materialize(),
            History::Grid(h) => h.clone(),
        }
    }

    pub fn memory_integral_into(&self, out: &mut [f64]) {
        match &self.history {
            History::Ring(p) => p.memory_integral_into(out),
            History::Grid(h) => out.copy_from_slice(memory_integral(h).coeffs()),
        }
    }

    /// `||T_mu eta||^2_{M^0}`: exact from the buffer for the ring backend,
    /// by upwind differences for grid transport.
    pub fn transport_norm_sq(&self) -> f64 {
        match &self.history {
            History::Ring(p) => p.transport_norm_sq(),
            History::Grid(h) => crate::history::apply_tmu(h).map_or(f64::NAN, |t| m_norm_sq(&t, 0.0)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite()
            && match &self.history {
                History::Ring(_) => true,
                History::Grid(h) => h.is_finite(),
            }
    }
}

/// Precomputed factors and scratch space for stepping one trajectory.
#[derive(Debug, Clone)]
pub struct Stepper {
    model: Arc<Model>,
    cfg: StepperConfig,
    evaluator: PotentialEvaluator,
    alpha: Vec<f64>,
    /// `1 / (1 + dt kappa alpha_k)`.
    inv_denom: Vec<f64>,
    /// `1 / (1 + dt alpha_k)`, for the unweighted controlled drift.
    inv_denom_unit: Vec<f64>,
    mi: Vec<f64>,
    phi: Vec<f64>,
    dw: Vec<f64>,
    r_samples: Vec<f64>,
}

impl Stepper {
    pub fn new(model: Arc<Model>, cfg: StepperConfig) -> Result<Self> {
        cfg.validate()?;
        if model.noise.n_modes() != cfg.n_modes {
            return Err(Error::DimensionMismatch(format!(
                "noise resolves {} modes, configuration has {}",
                model.noise.n_modes(),
                cfg.n_modes
            )));
        }
        if cfg.backend == Backend::GridTransport {
            check_cfl(&model.space, cfg.dt)?;
        }
        let n = cfg.n_modes;
        let alpha: Vec<f64> = (1..=n).map(mode_eigenvalue).collect();
        let inv_denom = alpha.iter().map(|a| 1.0 / (1.0 + cfg.dt * cfg.kappa * a)).collect();
        let inv_denom_unit = alpha.iter().map(|a| 1.0 / (1.0 + cfg.dt * a)).collect();
        let evaluator = PotentialEvaluator::new(&model.potential, n);
        let r_samples = model.space.grid().log_r_samples(DEFAULT_TAIL_SAMPLES);
        Ok(Self {
            model,
            cfg,
            evaluator,
            alpha,
            inv_denom,
            inv_denom_unit,
            mi: vec![0.0; n],
            phi: vec![0.0; n],
            dw: vec![0.0; n],
            r_samples,
        })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn config(&self) -> &StepperConfig {
        &self.cfg
    }

    pub fn evaluator_mut(&mut self) -> &mut PotentialEvaluator {
        &mut self.evaluator
    }

    pub fn r_samples(&self) -> &[f64] {
        &self.r_samples
    }

    fn memory_on(&self) -> bool {
        self.cfg.kappa < 1.0
    }

    /// `-kappa A u - (1 - kappa) int mu A eta + phi(u)`.
    pub fn drift(&mut self, state: &ExtendedState) -> Result<SpectralField> {
        let k = self.cfg.kappa;
        self.evaluator
            .apply_into(&self.model.potential, state.u.coeffs(), &mut self.phi)?;
        if self.memory_on() {
            state.memory_integral_into(&mut self.mi);
        } else {
            self.mi.iter_mut().for_each(|v| *v = 0.0);
        }
        let u = state.u.coeffs();
        Ok(SpectralField::from_coeffs(
            (0..self.cfg.n_modes)
                .map(|i| -k * self.alpha[i] * u[i] - (1.0 - k) * self.mi[i] + self.phi[i])
                .collect(),
        ))
    }

    /// Draws an increment from `rng` and advances `state` by one step.
    pub fn step(&mut self, state: &mut ExtendedState, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut dw = std::mem::take(&mut self.dw);
        self.model.noise.fill_increment(self.cfg.dt, rng, &mut dw);
        let r = self.step_with_increment(state, &dw);
        self.dw = dw;
        r
    }

    /// Advances `state` by one step driven by the given increment `Q dW`.
    pub fn step_with_increment(&mut self, state: &mut ExtendedState, dw: &[f64]) -> Result<()> {
        self.advance(state, dw, None)
    }

    /// One step of the nudged system, feeding back `-kappa alpha_{n_hat}
    /// P_{n_hat}(u_hat - u_ref)`. `u_ref` is the reference field at the start
    /// of the step and `dw` must be the increment used for the reference.
    pub fn step_controlled(
        &mut self,
        hat: &mut ExtendedState,
        u_ref: &SpectralField,
        dw: &[f64],
        ctrl: &ControlConfig,
    ) -> Result<()> {
        self.advance(hat, dw, Some((u_ref, ctrl)))
    }

    fn advance(
        &mut self,
        state: &mut ExtendedState,
        dw: &[f64],
        control: Option<(&SpectralField, &ControlConfig)>,
    ) -> Result<()> {
        let n = self.cfg.n_modes;
        let dt = self.cfg.dt;
        let kappa = self.cfg.kappa;
        if dw.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "noise increment has {} modes, expected {n}",
                dw.len()
            )));
        }
        self.evaluator
            .apply_into(&self.model.potential, state.u.coeffs(), &mut self.phi)?;
        if self.memory_on() {
            state.memory_integral_into(&mut self.mi);
        }
        let (mem_weight, inv) = match control {
            Some((_, c)) if !c.weighted => (1.0, &self.inv_denom_unit),
            _ => (1.0 - kappa, &self.inv_denom),
        };
        let previous = state.u.clone();
        {
            let u = state.u.coeffs_mut();
            for i in 0..n {
                let mut f = self.phi[i];
                if self.memory_on() {
                    f -= mem_weight * self.mi[i];
                }
                if let Some((uref, c)) = control {
                    if i < c.n_hat {
                        f -= kappa * mode_eigenvalue(c.n_hat) * (u[i] - uref.coeffs()[i]);
                    }
                }
                u[i] = (u[i] + dt * f + dw[i]) * inv[i];
            }
        }
        let t_next = state.t + dt;
        let norm = state.u.sobolev_norm_sq(0.0).sqrt();
        if !state.u.is_finite() || norm > BLOWUP_THRESHOLD {
            let reason = if state.u.is_finite() {
                format!("||u||_H0 = {norm:e} exceeds {BLOWUP_THRESHOLD:e}")
            } else {
                "non-finite coefficients".to_string()
            };
            let last = previous.is_finite().then(|| previous.into_coeffs());
            return Err(Error::BlowUp {
                t: t_next,
                reason,
                last_finite: last,
            });
        }
        match &mut state.history {
            History::Ring(p) => p.push(&state.u)?,
            History::Grid(h) => evolve_unchecked(h, &state.u, dt),
        }
        state.t = t_next;
        Ok(())
    }

    /// Norms and functionals of `state`.
    pub fn observe(&self, state: &ExtendedState) -> Observables {
        Observables::compute(state, self.cfg.kappa, &self.r_samples)
    }
}

/// Quantities recorded along a trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub t: f64,
    pub psi0: f64,
    pub psi1: f64,
    pub psi2: f64,
    pub h0_norm_sq: f64,
    pub h1_norm_sq: f64,
    pub h2_norm_sq: f64,
    pub h3_norm_sq: f64,
    pub eta_m0_sq: f64,
    pub eta_m1_sq: f64,
    pub eta_m2_sq: f64,
    pub tail_sup: f64,
    pub transport_sq: f64,
}

impl Observables {
    pub fn compute(state: &ExtendedState, kappa: f64, r_samples: &[f64]) -> Self {
        let eta = state.eta();
        let u = &state.u;
        let h = [0.0, 1.0, 2.0, 3.0].map(|r| u.sobolev_norm_sq(r));
        let m = [0.0, 1.0, 2.0].map(|b| m_norm_sq(&eta, b));
        let w = 0.5 * (1.0 - kappa);
        Self {
            t: state.t,
            psi0: 0.5 * h[0] + w * m[0],
            psi1: 0.5 * h[1] + w * m[1],
            psi2: 0.5 * h[2] + w * m[2],
            h0_norm_sq: h[0],
            h1_norm_sq: h[1],
            h2_norm_sq: h[2],
            h3_norm_sq: h[3],
            eta_m0_sq: m[0],
            eta_m1_sq: m[1],
            eta_m2_sq: m[2],
            tail_sup: tail_sup(&eta, r_samples).unwrap_or(f64::NAN),
            transport_sq: state.transport_norm_sq(),
        }
    }
}

/// Callback invoked at every recorded step.
pub trait Monitor {
    fn observe(&mut self, state: &ExtendedState, obs: &Observables);
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub rows: Vec<Observables>,
    pub final_state: ExtendedState,
}

/// Independent, reproducible stream for trajectory `id` under `seed`.
pub fn trajectory_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Number of steps of size `dt` covering `[0, t_final]`.
pub fn step_count(t_final: f64, dt: f64) -> Result<u64> {
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(Error::Config(format!("horizon T = {t_final} must be non-negative")));
    }
    Ok((t_final / dt).round() as u64)
}

/// Steps `state` to `t_final`, recording every `record_stride` steps
/// (including the initial state).
pub fn run_trajectory(
    stepper: &mut Stepper,
    mut state: ExtendedState,
    t_final: f64,
    rng: &mut ChaCha8Rng,
    monitors: &mut [&mut dyn Monitor],
) -> Result<TrajectoryRecord> {
    let steps = step_count(t_final, stepper.cfg.dt)?;
    let stride = stepper.cfg.record_stride as u64;
    let mut rows = Vec::with_capacity((steps / stride + 1) as usize);
    let mut record = |st: &ExtendedState, stepper: &Stepper, monitors: &mut [&mut dyn Monitor]| {
        let obs = stepper.observe(st);
        for m in monitors.iter_mut() {
            m.observe(st, &obs);
        }
        rows.push(obs);
    };
    record(&state, stepper, monitors);
    for n in 1..=steps {
        stepper.step(&mut state, rng)?;
        if n % stride == 0 {
            record(&state, stepper, monitors);
        }
    }
    Ok(TrajectoryRecord {
        rows,
        final_state: state,
    })
}

/// One row of a coupled (reference, nudged) run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub t: f64,
    /// `||(u - u_hat, eta - eta_hat)||^2` in `H^0 x M^0`.
    pub diff_sq: f64,
    /// `||(u_hat, eta_hat)||^2` in `H^m x M^m` for the configured `m`.
    pub hat_norm_sq: f64,
    pub reference: Observables,
}

#[derive(Debug, Clone)]
pub struct PairedRecord {
    pub rows: Vec<PairRow>,
    /// `||U_0||^2` in `H^0 x M^0`.
    pub initial_norm_sq: f64,
}

/// How the nudged copy is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairNoise {
    /// Same increments as the reference (the synchronization setting).
    Shared,
    /// An independent stream (negative control).
    Independent,
}

/// `||(u, eta)||^2` in `H^m x M^m`.
pub fn extended_norm_sq(u: &SpectralField, eta: &HistoryField, m: f64) -> f64 {
    u.sobolev_norm_sq(m) + m_norm_sq(eta, m)
}

/// Advances the reference `(u, eta)` from `state` and the nudged copy from
/// zero, recording their distance every `record_stride` steps.
#[allow(clippy::too_many_arguments)]
pub fn run_coupled_pair(
    stepper: &mut Stepper,
    state: ExtendedState,
    t_final: f64,
    seed: u64,
    path_id: u64,
    ctrl: &ControlConfig,
    noise: PairNoise,
    hat_order: f64,
) -> Result<PairedRecord> {
    let model = stepper.model.clone();
    let cfg = stepper.cfg.clone();
    let steps = step_count(t_final, cfg.dt)?;
    let stride = cfg.record_stride as u64;
    let mut reference = state;
    let mut hat = ExtendedState::zero(&model, &cfg)?;
    hat.t = reference.t;
    let mut rng = trajectory_rng(seed, path_id);
    let mut rng_hat = trajectory_rng(seed ^ 0x9e37_79b9_7f4a_7c15, path_id);
    let n = cfg.n_modes;
    let mut dw = vec![0.0; n];
    let mut dw_hat = vec![0.0; n];

    let row = |reference: &ExtendedState, hat: &ExtendedState, stepper: &Stepper| {
        let eta = reference.eta();
        let eta_hat = hat.eta();
        let mut zeta = eta.clone();
        zeta.axpy(-1.0, &eta_hat).expect("same memory space");
        let z = reference.u.sub(&hat.u);
        PairRow {
            t: reference.t,
            diff_sq: extended_norm_sq(&z, &zeta, 0.0),
            hat_norm_sq: extended_norm_sq(&hat.u, &eta_hat, hat_order),
            reference: stepper.observe(reference),
        }
    };
    let initial_norm_sq = extended_norm_sq(&reference.u, &reference.eta(), 0.0);
    let mut rows = vec![row(&reference, &hat, stepper)];
    for i in 1..=steps {
        model.noise.fill_increment(cfg.dt, &mut rng, &mut dw);
        let u_ref = reference.u.clone();
        stepper.step_with_increment(&mut reference, &dw)?;
        let inc = match noise {
            PairNoise::Shared => &dw,
            PairNoise::Independent => {
                model.noise.fill_increment(cfg.dt, &mut rng_hat, &mut dw_hat);
                &dw_hat
            }
        };
        stepper.step_controlled(&mut hat, &u_ref, inc, ctrl)?;
        if i % stride == 0 {
            rows.push(row(&reference, &hat, stepper));
        }
    }
    Ok(PairedRecord {
        rows,
        initial_norm_sq,
    })
}

/// Runs `f(id)` for `id = 0..n_paths`, in parallel on `threads` workers (all
/// available if `None`), returning results in id order.
pub fn run_paths<T, F>(n_paths: u64, threads: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let run = || (0..n_paths).into_par_iter().map(&f).collect::<Result<Vec<T>>>();
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Header row of trajectory CSVs.
pub const CSV_HEADER: &str = "t,Psi0,Psi1,Psi2,H0_norm_sq,H1_norm_sq,eta_M0_sq,tail_sup";

/// Writes trajectory rows as CSV, floats in shortest round-trip form.
pub fn write_trajectory_csv<W: Write>(rows: &[Observables], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.t, r.psi0, r.psi1, r.psi2, r.h0_norm_sq, r.h1_norm_sq, r.eta_m0_sq, r.tail_sup
        )?;
    }
    Ok(())
}

/// Writes paired rows as CSV with a trailing `diff_sq` column.
pub fn write_pair_csv<W: Write>(rows: &[PairRow], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER},diff_sq")?;
    for p in rows {
        let r = &p.reference;
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.t, r.psi0, r.psi1, r.psi2, r.h0_norm_sq, r.h1_norm_sq, r.eta_m0_sq, r.tail_sup, p.diff_sq
        )?;
    }
    Ok(())
}

/// Flat little-endian snapshot: `N`, `J` (as f64), `u`, then `eta` row-major.
pub fn write_state_binary<W: Write>(state: &ExtendedState, mut w: W) -> Result<()> {
    let eta = state.eta();
    let mut put = |x: f64| w.write_all(&x.to_le_bytes());
    put(state.u.n_modes() as f64)?;
    put(eta.n_nodes() as f64)?;
    for &c in state.u.coeffs() {
        put(c)?;
    }
    for &c in eta.data() {
        put(c)?;
    }
    Ok(())
}

/// Reads a snapshot written by [`write_state_binary`] onto `space`.
pub fn read_state_binary<R: Read>(mut r: R, space: Arc<MemorySpace>) -> Result<(SpectralField, HistoryField)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % 8 != 0 || buf.len() < 16 {
        return Err(Error::Parse {
            line: 0,
            reason: format!("snapshot of {} bytes is not a sequence of f64", buf.len()),
        });
    }
    let vals: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (n, j) = (vals[0] as usize, vals[1] as usize);
    if j != space.n_nodes() || vals.len() != 2 + n + n * j {
        return Err(Error::DimensionMismatch(format!(
            "snapshot header N = {n}, J = {j} does not match {} values on a {}-node grid",
            vals.len(),
            space.n_nodes()
        )));
    }
    let u = SpectralField::from_coeffs(vals[2..2 + n].to_vec());
    let eta = HistoryField::from_data(space, n, vals[2 + n..].to_vec())?;
    Ok((u, eta))
}
