//! Lyapunov functionals `Psi_m = 1/2 ||u||^2_{H^m} + (1 - kappa)/2 ||eta||^2_{M^m}`,
//! the generator applied to `Psi_0`, and dissipation monitors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::history::{transport_pairing, HistoryField};
use crate::integrator::{run_paths, trajectory_rng, ExtendedState, Observables, Stepper, step_count};
use crate::kernel::m_norm_sq;
use crate::spectral::{mode_eigenvalue, SpectralField};

/// `Psi_m(u, eta)`.
pub fn psi(u: &SpectralField, eta: &HistoryField, m: f64, kappa: f64) -> f64 {
    0.5 * u.sobolev_norm_sq(m) + 0.5 * (1.0 - kappa) * m_norm_sq(eta, m)
}

/// `Psi_m` of an extended state.
pub fn psi_state(state: &ExtendedState, m: f64, kappa: f64) -> f64 {
    psi(&state.u, &state.eta(), m, kappa)
}

/// `L Psi_0 = -kappa ||A^{1/2} u||^2 + (1 - kappa) <T_mu eta, eta>_{M^0}
/// + <phi(u), u> + 1/2 Tr(QQ*)`.
pub fn generator_psi0(stepper: &mut Stepper, state: &ExtendedState) -> Result<f64> {
    let kappa = stepper.config().kappa;
    let model = stepper.model().clone();
    let eta = state.eta();
    let reaction = stepper
        .evaluator_mut()
        .pairing(&model.potential, state.u.coeffs())?;
    Ok(-kappa * state.u.sobolev_norm_sq(1.0)
        + (1.0 - kappa) * transport_pairing(&eta)
        + reaction
        + 0.5 * model.noise.trace())
}

/// Explicit decay constants of `Psi_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayConstants {
    /// `min{2 kappa alpha_1, (1 - kappa) delta}`; `2 alpha_1` when `kappa = 1`.
    pub c0: f64,
    /// `(a3 |O| + Tr(QQ*)/2) / c0` with `|O| = 1`.
    pub big_c0: f64,
    pub a3: f64,
    pub trace: f64,
}

impl DecayConstants {
    pub fn new(kappa: f64, delta: f64, a3: f64, trace: f64) -> Self {
        let diffusion = 2.0 * kappa * mode_eigenvalue(1);
        let c0 = if kappa < 1.0 {
            diffusion.min((1.0 - kappa) * delta)
        } else {
            diffusion
        };
        Self {
            c0,
            big_c0: (a3 + 0.5 * trace) / c0,
            a3,
            trace,
        }
    }

    pub fn from_stepper(stepper: &Stepper) -> Self {
        let m = stepper.model();
        Self::new(
            stepper.config().kappa,
            m.space.kernel().delta,
            m.potential.a3,
            m.noise.trace(),
        )
    }

    /// `e^{-c0 t} Psi_0(U_0) + C_0`.
    pub fn bound(&self, psi0_initial: f64, t: f64) -> f64 {
        (-self.c0 * t).exp() * psi0_initial + self.big_c0
    }

    /// `0.5 kappa alpha_1 / Tr(QQ*)`, or `None` without noise.
    pub fn exp_moment_beta(&self, kappa: f64) -> Option<f64> {
        (self.trace > 0.0).then(|| 0.5 * kappa * mode_eigenvalue(1) / self.trace)
    }
}

/// A recorded scalar time series, optionally an ensemble mean with standard errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Option<Vec<f64>>,
}

impl Series {
    pub fn from_rows(rows: &[Observables], f: impl Fn(&Observables) -> f64) -> Self {
        Self {
            t: rows.iter().map(|r| r.t).collect(),
            mean: rows.iter().map(f).collect(),
            se: None,
        }
    }

    /// Pointwise ensemble mean and standard error over equally sampled paths.
    pub fn from_ensemble(paths: &[Vec<Observables>], f: impl Fn(&Observables) -> f64) -> Self {
        let n = paths.len() as f64;
        let len = paths.iter().map(Vec::len).min().unwrap_or(0);
        let mut mean = vec![0.0; len];
        let mut se = vec![0.0; len];
        for i in 0..len {
            let vals: Vec<f64> = paths.iter().map(|p| f(&p[i])).collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = if n > 1.0 {
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            mean[i] = m;
            se[i] = (var / n).sqrt();
        }
        Self {
            t: paths.first().map_or(Vec::new(), |p| p[..len].iter().map(|r| r.t).collect()),
            mean,
            se: Some(se),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    Psi0,
    Psi1,
    Psi2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok { Verdict::Pass } else { Verdict::Fail }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

/// JSON-serializable outcome of a dissipation monitor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorReport {
    pub name: String,
    /// The inequality or statement the verdict refers to.
    pub anchor: String,
    pub constants: BTreeMap<String, f64>,
    /// Largest `value - bound` (non-positive when the bound holds).
    pub worst_margin: f64,
    pub worst_t: f64,
    /// Multiplier of the standard error allowed for ensemble means.
    pub ci: Option<f64>,
    pub violations: usize,
    /// Least-squares slope of `-ln(value)` over the first half of the record.
    pub fitted_decay_rate: Option<f64>,
    pub verdict: Verdict,
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let sxy: f64 = (0..n).map(|i| (x[i] - mx) * (y[i] - my)).sum();
    let sxx: f64 = (0..n).map(|i| (x[i] - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn fitted_decay(series: &Series) -> Option<f64> {
    let half = series.len() / 2;
    let (x, y): (Vec<f64>, Vec<f64>) = (0..half.max(2).min(series.len()))
        .filter(|&i| series.mean[i] > 0.0)
        .map(|i| (series.t[i], -series.mean[i].ln()))
        .unzip();
    ls_slope(&x, &y)
}

/// Means over the four consecutive quarters of a series.
pub fn quarter_means(v: &[f64]) -> [f64; 4] {
    let n = v.len();
    let mut out = [0.0; 4];
    for (q, o) in out.iter_mut().enumerate() {
        let (a, b) = (q * n / 4, (q + 1) * n / 4);
        if b > a {
            *o = v[a..b].iter().sum::<f64>() / (b - a) as f64;
        }
    }
    out
}

/// Last-quarter mean over second-quarter mean; `<= 2` reads as no growth.
/// Identically zero series give `0`.
pub fn growth_ratio(v: &[f64]) -> f64 {
    let q = quarter_means(v);
    if q[3] == 0.0 {
        0.0
    } else {
        q[3] / q[1]
    }
}

/// For `Psi0`, checks `E Psi_0(t) <= e^{-c0 t} Psi_0(U_0) + C_0` at every
/// recorded time (ensemble means may exceed the bound by `3 se`). For `Psi1`
/// and `Psi2`, whose constants are not explicit, checks boundedness of the
/// time averages via [`growth_ratio`].
pub fn monitor_dissipation(series: &Series, which: Functional, constants: &DecayConstants) -> MonitorReport {
    let ci = series.se.as_ref().map(|_| 3.0);
    let mut consts = BTreeMap::new();
    let fitted = fitted_decay(series);
    match which {
        Functional::Psi0 => {
            consts.insert("c0".into(), constants.c0);
            consts.insert("C0".into(), constants.big_c0);
            consts.insert("a3".into(), constants.a3);
            consts.insert("trace_QQ".into(), constants.trace);
            let psi_init = series.mean.first().copied().unwrap_or(0.0);
            let mut worst = f64::NEG_INFINITY;
            let mut worst_t = 0.0;
            let mut violations = 0;
            for i in 0..series.len() {
                let slack = series.se.as_ref().map_or(0.0, |s| 3.0 * s[i]);
                let margin = series.mean[i] - constants.bound(psi_init, series.t[i]);
                if margin > worst {
                    worst = margin;
                    worst_t = series.t[i];
                }
                if margin - slack > 0.0 {
                    violations += 1;
                }
            }
            MonitorReport {
                name: "psi0".into(),
                anchor: "E Psi_0(U(t)) <= exp(-c0 t) Psi_0(U_0) + C0, c0 = min{2 kappa alpha_1, (1-kappa) delta}".into(),
                constants: consts,
                worst_margin: worst,
                worst_t,
                ci,
                violations,
                fitted_decay_rate: fitted,
                verdict: Verdict::from_bool(violations == 0),
            }
        }
        Functional::Psi1 | Functional::Psi2 => {
            let ratio = growth_ratio(&series.mean);
            consts.insert("growth_ratio_limit".into(), 2.0);
            let finite = series.mean.iter().all(|v| v.is_finite());
            let ok = finite && ratio <= 2.0;
            let name = if which == Functional::Psi1 { "psi1" } else { "psi2" };
            MonitorReport {
                name: name.into(),
                anchor: format!("{name} stays bounded: last-quarter mean / second-quarter mean <= 2"),
                constants: consts,
                worst_margin: ratio - 2.0,
                worst_t: series.t.last().copied().unwrap_or(0.0),
                ci,
                violations: usize::from(!ok),
                fitted_decay_rate: fitted,
                verdict: Verdict::from_bool(ok),
            }
        }
    }
}

/// Outcome of comparing `d/dt E Psi_0` with `E L Psi_0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConsistency {
    pub n_paths: usize,
    pub t: f64,
    pub h: f64,
    /// `(E Psi_0(t + h) - E Psi_0(t)) / h`.
    pub finite_difference: f64,
    /// `E L Psi_0(U(t))`.
    pub generator: f64,
    /// Monte Carlo standard error of the per-path difference.
    pub standard_error: f64,
    /// `|finite_difference - generator|`.
    pub difference: f64,
    /// `4 se + 0.05 |generator|`.
    pub allowance: f64,
    pub verdict: Verdict,
}

/// Runs `n_paths` trajectories from `initial` to `t + h` and compares the
/// forward difference of `E Psi_0` with the mean generator value at `t`.
pub fn generator_consistency(
    template: &Stepper,
    initial: &ExtendedState,
    n_paths: u64,
    t: f64,
    h: f64,
    seed: u64,
    threads: Option<usize>,
) -> Result<GeneratorConsistency> {
    let kappa = template.config().kappa;
    let dt = template.config().dt;
    let n_t = step_count(t, dt)?;
    let n_h = step_count(h, dt)?.max(1);
    let h_eff = n_h as f64 * dt;
    let per_path = run_paths(n_paths, threads, |id| {
        let mut stepper = template.clone();
        let mut state = initial.clone();
        let mut rng = trajectory_rng(seed, id);
        for _ in 0..n_t {
            stepper.step(&mut state, &mut rng)?;
        }
        let p0 = psi_state(&state, 0.0, kappa);
        let g = generator_psi0(&mut stepper, &state)?;
        for _ in 0..n_h {
            stepper.step(&mut state, &mut rng)?;
        }
        let p1 = psi_state(&state, 0.0, kappa);
        Ok(((p1 - p0) / h_eff, g))
    })?;
    let n = per_path.len() as f64;
    let fd = per_path.iter().map(|p| p.0).sum::<f64>() / n;
    let gen = per_path.iter().map(|p| p.1).sum::<f64>() / n;
    let diffs: Vec<f64> = per_path.iter().map(|p| p.0 - p.1).collect();
    let md = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - md).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let se = (var / n).sqrt();
    let difference = (fd - gen).abs();
    let allowance = 4.0 * se + 0.05 * gen.abs();
    Ok(GeneratorConsistency {
        n_paths: per_path.len(),
        t: n_t as f64 * dt,
        h: h_eff,
        finite_difference: fd,
        generator: gen,
        standard_error: se,
        difference,
        allowance,
        verdict: Verdict::from_bool(difference <= allowance),
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;
    use std::sync::Arc;

    use approx::assert_relative_eq;

    use super::*;
    use crate::integrator::{Model, StepperConfig};
    use crate::kernel::{KernelSpec, MemorySpace};
    use crate::model::{certify_potential, NoiseFamily, NoiseSpec};
    use crate::oracles::fine_quadrature;

    fn setup(phi: &[f64], q: Vec<f64>, kappa: f64, n: usize) -> (Arc<Model>, StepperConfig) {
        let space = Arc::new(
            MemorySpace::with_default_grid(KernelSpec::exponential(1.0, 1.0, 1.0), 256, 1e-8)
                .unwrap(),
        );
        let model = Arc::new(Model {
            space,
            potential: certify_potential(phi).unwrap(),
            noise: NoiseSpec::new(NoiseFamily::Diagonal(q), n).unwrap(),
        });
        (model, StepperConfig::new(1e-3, kappa, n))
    }

    #[test]
    fn psi_examples() {
        let (m, cfg) = setup(&[0.0], vec![], 0.5, 2);
        let zero = ExtendedState::zero(&m, &cfg).unwrap();
        assert_eq!(psi_state(&zero, 0.0, 0.5), 0.0);
        let e1 = ExtendedState::new(&m, &cfg, SpectralField::basis(2, 1), None).unwrap();
        assert_eq!(psi_state(&e1, 0.0, 0.5), 0.5);
        let eta = HistoryField::from_fn(m.space.clone(), 2, |k, _| if k == 1 { 1.0 } else { 0.0 });
        let v = psi(&SpectralField::zeros(2), &eta, 0.0, 0.5);
        assert_relative_eq!(v, 0.25 * PI * PI, max_relative = 1e-7);
    }

    #[test]
    fn generator_examples() {
        let (m, cfg) = setup(&[0.0], vec![1.0, 0.5], 0.5, 2);
        let mut st = Stepper::new(m.clone(), cfg.clone()).unwrap();
        let zero = ExtendedState::zero(&m, &cfg).unwrap();
        assert_relative_eq!(generator_psi0(&mut st, &zero).unwrap(), 0.5 * 1.25);

        let (m, cfg) = setup(&[0.0], vec![], 0.3, 2);
        let mut st = Stepper::new(m.clone(), cfg.clone()).unwrap();
        let e1 = ExtendedState::new(&m, &cfg, SpectralField::basis(2, 1), None).unwrap();
        assert_relative_eq!(generator_psi0(&mut st, &e1).unwrap(), -0.3 * PI * PI, epsilon = 1e-12);

        let (m, cfg) = setup(&[0.0, 1.0, 0.0, -1.0], vec![], 0.5, 4);
        let mut st = Stepper::new(m.clone(), cfg.clone()).unwrap();
        for c in [0.3, 1.0, 1.7] {
            let u = SpectralField::from_coeffs(vec![c, 0.0, 0.0, 0.0]);
            let s = ExtendedState::new(&m, &cfg, u, None).unwrap();
            let reaction = generator_psi0(&mut st, &s).unwrap() + 0.5 * PI * PI * c * c;
            let oracle = fine_quadrature(
                |x| {
                    let v = c * 2f64.sqrt() * (PI * x).sin();
                    v * v - v.powi(4)
                },
                0.0,
                1.0,
                4096,
            );
            assert_relative_eq!(reaction, oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn psi0_two_sided_comparison() {
        let (m, _) = setup(&[0.0], vec![], 0.4, 3);
        for seed in 0..20u64 {
            let f = |k: usize, s: f64| ((seed as f64 + 1.0) * k as f64 * s).sin() * (1.0 - (-s).exp());
            let eta = HistoryField::from_fn(m.space.clone(), 3, f);
            let u = SpectralField::from_coeffs(vec![0.1 * seed as f64, -0.3, 0.7]);
            let full = crate::integrator::extended_norm_sq(&u, &eta, 0.0);
            let p = psi(&u, &eta, 0.0, 0.4);
            assert!(p <= 0.5 * full * (1.0 + 1e-12));
            assert!(p >= 0.5 * 0.6 * full * (1.0 - 1e-12));
        }
    }

    #[test]
    fn decay_constants() {
        let c = DecayConstants::new(0.5, 1.0, 0.5, 0.0);
        assert_relative_eq!(c.c0, 0.5);
        assert_relative_eq!(c.big_c0, 1.0);
        let ou = DecayConstants::new(1.0, 1.0, 0.0, 1.0);
        assert_relative_eq!(ou.c0, 2.0 * PI * PI);
        assert_relative_eq!(ou.exp_moment_beta(1.0).unwrap(), 0.5 * PI * PI);
    }

    #[test]
    fn monitor_flags_violations() {
        let c = DecayConstants::new(0.5, 1.0, 0.5, 0.0);
        let good = Series {
            t: vec![0.0, 1.0, 2.0],
            mean: vec![2.0, 1.5, 1.2],
            se: None,
        };
        let r = monitor_dissipation(&good, Functional::Psi0, &c);
        assert!(r.verdict.passed());
        assert!(r.worst_margin <= 0.0);
        let bad = Series {
            t: vec![0.0, 1.0, 2.0],
            mean: vec![2.0, 3.0, 1.2],
            se: None,
        };
        let r = monitor_dissipation(&bad, Functional::Psi0, &c);
        assert_eq!(r.violations, 1);
        assert!(!r.verdict.passed());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"worst_margin\""));
    }
}
