use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memheat::integrator::{
    run_coupled_pair, run_paths, run_trajectory, trajectory_rng, write_pair_csv, write_state_binary,
    write_trajectory_csv, ControlConfig, ExtendedState, Monitor, Observables, PairNoise, PairedRecord,
    TrajectoryRecord, CSV_HEADER,
};
use memheat::lyapunov::{monitor_dissipation, DecayConstants, Functional, Series, Verdict};
use memheat::measure::{default_burn_in, krylov_bogoliubov, regularity_diagnostic, RegularityReport};
use memheat::model::NoiseFamily;
use memheat::oracles::PronySystem;
use memheat::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Loaded, NoiseSection, PairNoiseKind};

/// Largest accepted `sup_t |u_k - oracle|`.
pub const ORACLE_TOLERANCE: f64 = 1e-3;

pub struct RunContext {
    pub loaded: Loaded,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub command: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    threads: Option<usize>,
    engine_version: &'a str,
    created_unix: u64,
}

impl RunContext {
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let manifest = Manifest {
            command: self.command,
            config_sha256: sha256_hex(self.loaded.text.as_bytes()),
            seed: self.seed,
            threads: self.threads,
            engine_version: env!("CARGO_PKG_VERSION"),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        write_json(&self.out.join("manifest.json"), &manifest)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).with_context(|| format!("writing {}", path.display()))?;
    writeln!(w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct BlowUpBundle<'a> {
    command: &'a str,
    seed: u64,
    path_id: Option<u64>,
    t: f64,
    reason: String,
    last_finite_u: Option<Vec<f64>>,
}

/// Writes `blowup.json` for a blow-up error and passes the error on.
fn diagnose(ctx: &RunContext, path_id: Option<u64>, err: Error) -> anyhow::Error {
    if let Error::BlowUp {
        t,
        reason,
        last_finite,
    } = &err
    {
        let bundle = BlowUpBundle {
            command: ctx.command,
            seed: ctx.seed,
            path_id,
            t: *t,
            reason: reason.clone(),
            last_finite_u: last_finite.clone(),
        };
        let p = ctx.path("blowup.json");
        if let Err(e) = write_json(&p, &bundle) {
            return e.context(err.to_string());
        }
        return anyhow::Error::new(err).context(format!("diagnostic bundle written to {}", p.display()));
    }
    err.into()
}

#[derive(Serialize)]
struct PotentialReport {
    p0: usize,
    a1: f64,
    a2: f64,
    a3: f64,
    a_phi: f64,
    growth_exponents: Vec<usize>,
}

#[derive(Serialize)]
struct ValidationReport {
    passed: bool,
    potential: PotentialReport,
    kernel_worst_margin: f64,
    kernel_worst_s: f64,
    s_max: f64,
    s_nodes: usize,
    noise_trace: f64,
    noise_trace_h1: f64,
    c0: f64,
    big_c0: f64,
    collocation_points: usize,
}

pub fn validate(ctx: &RunContext) -> Result<()> {
    let built = ctx.loaded.build()?;
    let m = &built.model;
    let consts = DecayConstants::new(built.cfg.kappa, m.space.kernel().delta, m.potential.a3, m.noise.trace());
    let p = &m.potential;
    let report = ValidationReport {
        passed: true,
        potential: PotentialReport {
            p0: p.p0,
            a1: p.a1,
            a2: p.a2,
            a3: p.a3,
            a_phi: p.a_phi,
            growth_exponents: p.growth_exponents.clone(),
        },
        kernel_worst_margin: built.kernel_report.worst_margin,
        kernel_worst_s: built.kernel_report.worst_s,
        s_max: m.space.grid().s_max,
        s_nodes: m.space.n_nodes(),
        noise_trace: m.noise.trace(),
        noise_trace_h1: m.noise.trace_qamq(1),
        c0: consts.c0,
        big_c0: consts.big_c0,
        collocation_points: ctx
            .loaded
            .config
            .discretization
            .collocation_points
            .unwrap_or_else(|| p.dealiased_points(built.cfg.n_modes)),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn simulate(ctx: &RunContext) -> Result<()> {
    let built = ctx.loaded.build()?;
    ctx.prepare()?;
    let run = &ctx.loaded.config.run;
    let n_paths = run.ensemble.max(1);
    let csv_name = |id: u64| format!("trajectory_{id:04}.csv");
    if run.t_final == 0.0 {
        for id in 0..n_paths {
            let mut w = create(&ctx.path(&csv_name(id)))?;
            writeln!(w, "{CSV_HEADER}")?;
            w.flush()?;
        }
        return Ok(());
    }
    let stepper = built.stepper()?;
    let u0 = ctx.loaded.initial_u()?;
    let initial = ExtendedState::new(&built.model, &built.cfg, u0, None)?;
    let records: Vec<std::result::Result<TrajectoryRecord, (u64, Error)>> = run_paths(n_paths, ctx.threads, |id| {
        let mut st = stepper.clone();
        Ok(run_trajectory(&mut st, initial.clone(), run.t_final, &mut trajectory_rng(ctx.seed, id), &mut [])
            .map_err(|e| (id, e)))
    })?;
    let mut paths = Vec::with_capacity(records.len());
    for (id, r) in records.into_iter().enumerate() {
        let rec = r.map_err(|(pid, e)| diagnose(ctx, Some(pid), e))?;
        let p = ctx.path(&csv_name(id as u64));
        write_trajectory_csv(&rec.rows, create(&p)?).with_context(|| format!("writing {}", p.display()))?;
        let p = ctx.path(&format!("state_{id:04}.bin"));
        write_state_binary(&rec.final_state, create(&p)?).with_context(|| format!("writing {}", p.display()))?;
        paths.push(rec.rows);
    }
    let constants = DecayConstants::from_stepper(&stepper);
    let series = Series::from_ensemble(&paths, |o| o.psi0);
    write_json(&ctx.path("monitor_psi0.json"), &monitor_dissipation(&series, Functional::Psi0, &constants))?;
    for (name, which, f) in [
        ("monitor_psi1.json", Functional::Psi1, (|o: &Observables| o.psi1) as fn(&Observables) -> f64),
        ("monitor_psi2.json", Functional::Psi2, |o: &Observables| o.psi2),
    ] {
        let series = Series::from_ensemble(&paths, f);
        write_json(&ctx.path(name), &monitor_dissipation(&series, which, &constants))?;
    }
    Ok(())
}

fn burn_in(ctx: &RunContext, stepper: &memheat::integrator::Stepper) -> f64 {
    ctx.loaded.config.run.burn_in.unwrap_or_else(|| default_burn_in(stepper))
}

pub fn measure(ctx: &RunContext) -> Result<()> {
    let built = ctx.loaded.build()?;
    ctx.prepare()?;
    let mut stepper = built.stepper()?;
    let run = &ctx.loaded.config.run;
    let b = burn_in(ctx, &stepper);
    let est = krylov_bogoliubov(&mut stepper, run.t_final, b, ctx.seed, run.record_stride)
        .map_err(|e| diagnose(ctx, None, e))?;
    write_json(&ctx.path("measure.json"), &est)?;
    est.write_spectral_csv(create(&ctx.path("spectral.csv"))?)?;
    Ok(())
}

#[derive(Serialize)]
struct PathVerdict {
    path: u64,
    initial_norm_sq: f64,
    final_ratio: f64,
    /// `max_t diff_sq / bound(t)`.
    max_bound_ratio: f64,
    violations: usize,
    contracted: bool,
    verdict: Verdict,
}

#[derive(Serialize)]
struct NudgeReport {
    anchor: &'static str,
    noise: PairNoiseKind,
    n_hat: usize,
    weighted: bool,
    rate: f64,
    prefactor: f64,
    slack: f64,
    paths: Vec<PathVerdict>,
    verdict: Verdict,
}

pub fn nudge(ctx: &RunContext) -> Result<()> {
    let built = ctx.loaded.build()?;
    let control = &ctx.loaded.config.control;
    let kappa = built.cfg.kappa;
    let a_phi = built.model.potential.a_phi;
    let mut ctrl = ControlConfig::new(control.n_hat, kappa, a_phi)?;
    ctrl.weighted = control.weighted;
    ctx.prepare()?;
    let delta = built.model.space.kernel().delta;
    let rate = ctrl.contraction_rate(kappa, a_phi, delta);
    let prefactor = if kappa < 1.0 { 1.0 / (1.0 - kappa) } else { 1.0 };
    let slack = 1e-8;
    let noise = match control.noise {
        PairNoiseKind::Shared => PairNoise::Shared,
        PairNoiseKind::Independent => PairNoise::Independent,
    };
    let stepper = built.stepper()?;
    let u0 = ctx.loaded.initial_u()?;
    let initial = ExtendedState::new(&built.model, &built.cfg, u0, None)?;
    let run = &ctx.loaded.config.run;
    let records: Vec<std::result::Result<PairedRecord, (u64, Error)>> =
        run_paths(run.ensemble.max(1), ctx.threads, |id| {
            let mut st = stepper.clone();
            Ok(
                run_coupled_pair(&mut st, initial.clone(), run.t_final, ctx.seed, id, &ctrl, noise, control.hat_order)
                    .map_err(|e| (id, e)),
            )
        })?;
    let mut verdicts = Vec::new();
    for (id, r) in records.into_iter().enumerate() {
        let rec = r.map_err(|(pid, e)| diagnose(ctx, Some(pid), e))?;
        let p = ctx.path(&format!("pair_{id:04}.csv"));
        write_pair_csv(&rec.rows, create(&p)?).with_context(|| format!("writing {}", p.display()))?;
        let init = rec.initial_norm_sq;
        let mut violations = 0;
        let mut max_ratio = 0.0f64;
        for row in &rec.rows {
            let bound = prefactor * (-rate * row.t).exp() * init;
            if row.diff_sq > bound + slack {
                violations += 1;
            }
            if bound > 0.0 {
                max_ratio = max_ratio.max(row.diff_sq / bound);
            }
        }
        let final_ratio = rec.rows.last().map_or(1.0, |r| if init > 0.0 { r.diff_sq / init } else { 0.0 });
        verdicts.push(PathVerdict {
            path: id as u64,
            initial_norm_sq: init,
            final_ratio,
            max_bound_ratio: max_ratio,
            violations,
            contracted: final_ratio <= 1e-2,
            verdict: Verdict::from_bool(violations == 0),
        });
    }
    let report = NudgeReport {
        anchor: "||(u - u_hat, eta - eta_hat)(t)||^2 <= (1/(1-kappa)) exp(-min{2(kappa alpha_1 - a_phi), delta} t) ||U_0||^2",
        noise: control.noise.clone(),
        n_hat: control.n_hat,
        weighted: control.weighted,
        rate,
        prefactor,
        slack,
        verdict: Verdict::from_bool(verdicts.iter().all(|v| v.verdict.passed())),
        paths: verdicts,
    };
    write_json(&ctx.path("nudge.json"), &report)
}

struct ModeLog {
    rows: Vec<(f64, Vec<f64>)>,
    modes: usize,
}

impl Monitor for ModeLog {
    fn observe(&mut self, state: &ExtendedState, _obs: &Observables) {
        self.rows.push((state.t, state.u.coeffs()[..self.modes].to_vec()));
    }
}

#[derive(Serialize)]
struct OracleReport {
    anchor: &'static str,
    modes: usize,
    records: usize,
    sup_error: f64,
    sup_error_t: f64,
    tolerance: f64,
    verdict: Verdict,
}

pub fn oracle_check(ctx: &RunContext) -> Result<()> {
    let built = ctx.loaded.build()?;
    let model = &built.model;
    if !(model.potential.is_linear() && model.potential.linear_coefficient() == 0.0) {
        bail!("the Prony oracle needs phi = 0");
    }
    if model.noise.trace() != 0.0 {
        bail!("the Prony oracle needs the noise switched off");
    }
    let sys = PronySystem::new(built.cfg.kappa, model.space.kernel())?;
    ctx.prepare()?;
    let u0 = ctx.loaded.initial_u()?;
    let modes = u0
        .coeffs()
        .iter()
        .rposition(|&c| c != 0.0)
        .map_or(1, |i| i + 1);
    let initial = ExtendedState::new(model, &built.cfg, u0.clone(), None)?;
    let mut stepper = built.stepper()?;
    let mut log = ModeLog { rows: Vec::new(), modes };
    let t_final = ctx.loaded.config.run.t_final;
    run_trajectory(&mut stepper, initial, t_final, &mut trajectory_rng(ctx.seed, 0), &mut [&mut log])
        .map_err(|e| diagnose(ctx, None, e))?;
    let mut w = create(&ctx.path("oracle.csv"))?;
    writeln!(w, "t,mode,engine,oracle,abs_err")?;
    let (mut sup, mut sup_t) = (0.0f64, 0.0);
    for (t, u) in &log.rows {
        for (i, &v) in u.iter().enumerate() {
            let exact = sys.solve_mode(i + 1, u0.coeffs()[i], 0.0, *t).0;
            let err = (v - exact).abs();
            if err > sup {
                sup = err;
                sup_t = *t;
            }
            writeln!(w, "{t},{},{v},{exact},{err}", i + 1)?;
        }
    }
    w.flush()?;
    write_json(
        &ctx.path("oracle.json"),
        &OracleReport {
            anchor: "linear deterministic memory equation equals its two-dimensional per-mode reduction for exponential kernels",
            modes,
            records: log.rows.len(),
            sup_error: sup,
            sup_error_t: sup_t,
            tolerance: ORACLE_TOLERANCE,
            verdict: Verdict::from_bool(sup <= ORACLE_TOLERANCE),
        },
    )
}

#[derive(Serialize)]
struct RegularityOutput {
    anchor: &'static str,
    order: u32,
    noise_trace_order: f64,
    rough_exponent: f64,
    burn_in: f64,
    report: RegularityReport,
}

pub fn regularity(ctx: &RunContext) -> Result<()> {
    let built = ctx.loaded.build()?;
    let reg = &ctx.loaded.config.regularity;
    let trace = built.model.noise.check_q2(reg.order)?;
    built.model.potential.check_p4(reg.order)?;
    let amplitude = match &ctx.loaded.config.model.noise {
        NoiseSection::Power { amplitude, .. } => *amplitude,
        _ => 1.0,
    };
    // The rough comparator is a diagnostic and is deliberately not gated.
    let rough = ctx.loaded.build_with_noise(NoiseFamily::Power {
        amplitude,
        exponent: reg.rough_exponent,
        cutoff: None,
    })?;
    ctx.prepare()?;
    let run = &ctx.loaded.config.run;
    let smooth_stepper = built.stepper()?;
    let b = burn_in(ctx, &smooth_stepper);
    let estimates = run_paths(2, ctx.threads, |id| {
        let mut st = if id == 0 {
            smooth_stepper.clone()
        } else {
            rough.stepper().map_err(|e| Error::Config(e.to_string()))?
        };
        krylov_bogoliubov(&mut st, run.t_final, b, ctx.seed, run.record_stride)
    })
    .map_err(|e| diagnose(ctx, None, e))?;
    estimates[0].write_spectral_csv(create(&ctx.path("spectral_smooth.csv"))?)?;
    estimates[1].write_spectral_csv(create(&ctx.path("spectral_rough.csv"))?)?;
    let report = regularity_diagnostic(&estimates[0], &estimates[1]);
    write_json(
        &ctx.path("regularity.json"),
        &RegularityOutput {
            anchor: "smoother noise gives a stationary law with more spatial regularity",
            order: reg.order,
            noise_trace_order: trace,
            rough_exponent: reg.rough_exponent,
            burn_in: b,
            report,
        },
    )
}
