//! Krylov-Bogoliubov time averages with batch-means error bars, tightness
//! and stationarity diagnostics, and support-regularity comparisons.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{step_count, trajectory_rng, ExtendedState, Observables, Stepper};
use crate::lyapunov::{ls_slope, quarter_means, DecayConstants, Series, Verdict};
use crate::spectral::mode_eigenvalue;

/// Number of batches used for standard errors.
pub const BATCHES: usize = 32;

/// Running mean with batch-means standard error, for a known sample count.
#[derive(Debug, Clone)]
pub struct BatchMeans {
    batch_len: usize,
    current: f64,
    filled: usize,
    means: Vec<f64>,
}

impl BatchMeans {
    /// Splits `expected_samples` into [`BATCHES`] batches; samples past the
    /// last complete batch are ignored.
    pub fn new(expected_samples: usize) -> Self {
        Self {
            batch_len: (expected_samples / BATCHES).max(1),
            current: 0.0,
            filled: 0,
            means: Vec::with_capacity(BATCHES),
        }
    }

    pub fn push(&mut self, x: f64) {
        if self.means.len() == BATCHES {
            return;
        }
        self.current += x;
        self.filled += 1;
        if self.filled == self.batch_len {
            self.means.push(self.current / self.batch_len as f64);
            self.current = 0.0;
            self.filled = 0;
        }
    }

    pub fn batch_means(&self) -> &[f64] {
        &self.means
    }

    pub fn moment(&self) -> Moment {
        let b = self.means.len();
        if b == 0 {
            return Moment {
                estimate: f64::NAN,
                se: f64::NAN,
                batches: 0,
            };
        }
        let m = self.means.iter().sum::<f64>() / b as f64;
        let var = if b > 1 {
            self.means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64
        } else {
            0.0
        };
        Moment {
            estimate: m,
            se: (var / b as f64).sqrt(),
            batches: b,
        }
    }
}

/// A time average with its batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub estimate: f64,
    pub se: f64,
    pub batches: usize,
}

/// Time-averaged functionals of one trajectory over `[window_start, window_end]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub window_start: f64,
    pub window_end: f64,
    pub n_samples: usize,
    /// Named time averages (`psi0`, `psi1`, `psi2`, `h1`, `h2`, `h1_h2`,
    /// `h2_h3`, `tail_sup`, `transport_sq`, `exp_beta_psi0` when noisy).
    pub moments: BTreeMap<String, Moment>,
    /// `beta` of the exponential moment.
    pub beta: Option<f64>,
    /// Per-mode `E u_k^2`, `k = 1..N`.
    pub spectral_profile: Vec<Moment>,
    /// Means over the four quarters of the window, per functional.
    pub quarters: BTreeMap<String, [f64; 4]>,
}

impl MeasureEstimate {
    pub fn moment(&self, name: &str) -> Option<Moment> {
        self.moments.get(name).copied()
    }

    pub fn tail_sup_avg(&self) -> f64 {
        self.moments.get("tail_sup").map_or(f64::NAN, |m| m.estimate)
    }

    /// Writes `k,alpha_k,mean_uk_sq` rows.
    pub fn write_spectral_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,alpha_k,mean_uk_sq")?;
        for (i, m) in self.spectral_profile.iter().enumerate() {
            writeln!(w, "{},{:?},{:?}", i + 1, mode_eigenvalue(i + 1), m.estimate)?;
        }
        Ok(())
    }

    /// Decay exponent `p` of `E u_k^2 ~ k^{-p}` fitted by least squares on
    /// modes with positive energy.
    pub fn spectral_decay_exponent(&self) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .spectral_profile
            .iter()
            .enumerate()
            .filter(|(_, m)| m.estimate > 0.0)
            .map(|(i, m)| (((i + 1) as f64).ln(), m.estimate.ln()))
            .unzip();
        ls_slope(&x, &y).map(|s| -s)
    }
}

const NAMES: [&str; 9] = [
    "psi0",
    "psi1",
    "psi2",
    "h1",
    "h2",
    "h1_h2",
    "h2_h3",
    "tail_sup",
    "transport_sq",
];

struct WindowAccumulator {
    start_step: u64,
    end_step: u64,
    samples: usize,
    scalars: Vec<BatchMeans>,
    series: Vec<Vec<f64>>,
    exp_moment: Option<BatchMeans>,
    modes: Vec<BatchMeans>,
}

impl WindowAccumulator {
    fn new(start_step: u64, end_step: u64, stride: u64, n_modes: usize, noisy: bool) -> Self {
        let expected = ((end_step - start_step) / stride + 1) as usize;
        Self {
            start_step,
            end_step,
            samples: 0,
            scalars: (0..NAMES.len()).map(|_| BatchMeans::new(expected)).collect(),
            series: vec![Vec::with_capacity(expected); NAMES.len()],
            exp_moment: noisy.then(|| BatchMeans::new(expected)),
            modes: (0..n_modes).map(|_| BatchMeans::new(expected)).collect(),
        }
    }

    fn push(&mut self, state: &ExtendedState, obs: &Observables, beta: Option<f64>) {
        let vals = [
            obs.psi0,
            obs.psi1,
            obs.psi2,
            obs.h1_norm_sq,
            obs.h2_norm_sq,
            obs.h1_norm_sq * obs.h2_norm_sq,
            obs.h2_norm_sq * obs.h3_norm_sq,
            obs.tail_sup,
            obs.transport_sq,
        ];
        for ((acc, s), v) in self.scalars.iter_mut().zip(self.series.iter_mut()).zip(vals) {
            acc.push(v);
            s.push(v);
        }
        if let (Some(acc), Some(b)) = (self.exp_moment.as_mut(), beta) {
            acc.push((b * obs.psi0).exp());
        }
        for (acc, u) in self.modes.iter_mut().zip(state.u.coeffs()) {
            acc.push(u * u);
        }
        self.samples += 1;
    }

    fn finish(self, dt: f64, beta: Option<f64>) -> MeasureEstimate {
        let mut moments = BTreeMap::new();
        let mut quarters = BTreeMap::new();
        for ((name, acc), s) in NAMES.iter().zip(&self.scalars).zip(&self.series) {
            moments.insert(name.to_string(), acc.moment());
            quarters.insert(name.to_string(), quarter_means(s));
        }
        if let Some(acc) = &self.exp_moment {
            moments.insert("exp_beta_psi0".into(), acc.moment());
        }
        MeasureEstimate {
            window_start: self.start_step as f64 * dt,
            window_end: self.end_step as f64 * dt,
            n_samples: self.samples,
            moments,
            beta,
            spectral_profile: self.modes.iter().map(BatchMeans::moment).collect(),
            quarters,
        }
    }
}

/// Runs one trajectory from `U_0 = 0` and returns time averages over each
/// `[a, b]` window, sampling every `sample_stride` steps.
pub fn krylov_bogoliubov_windows(
    stepper: &mut Stepper,
    windows: &[(f64, f64)],
    seed: u64,
    sample_stride: usize,
) -> Result<Vec<MeasureEstimate>> {
    let model = stepper.model().clone();
    let cfg = stepper.config().clone();
    let dt = cfg.dt;
    let stride = sample_stride.max(1) as u64;
    let noisy = model.noise.trace() > 0.0;
    let beta = DecayConstants::from_stepper(stepper).exp_moment_beta(cfg.kappa);
    let mut accs = Vec::with_capacity(windows.len());
    for &(a, b) in windows {
        if !(b > a) || a < 0.0 {
            return Err(Error::Config(format!(
                "averaging window [{a}, {b}] must satisfy 0 <= start < end"
            )));
        }
        accs.push(WindowAccumulator::new(
            step_count(a, dt)?,
            step_count(b, dt)?,
            stride,
            cfg.n_modes,
            noisy,
        ));
    }
    let last = accs.iter().map(|w| w.end_step).max().unwrap_or(0);
    let mut state = ExtendedState::zero(&model, &cfg)?;
    let mut rng = trajectory_rng(seed, 0);
    for n in 1..=last {
        stepper.step(&mut state, &mut rng)?;
        let active = accs
            .iter()
            .any(|w| n >= w.start_step && n <= w.end_step && (n - w.start_step) % stride == 0);
        if active {
            let obs = stepper.observe(&state);
            for w in accs.iter_mut() {
                if n >= w.start_step && n <= w.end_step && (n - w.start_step) % stride == 0 {
                    w.push(&state, &obs, beta);
                }
            }
        }
    }
    Ok(accs.into_iter().map(|w| w.finish(dt, beta)).collect())
}

/// Time averages over `[burn_in, t_final]` of a trajectory started at zero.
pub fn krylov_bogoliubov(
    stepper: &mut Stepper,
    t_final: f64,
    burn_in: f64,
    seed: u64,
    sample_stride: usize,
) -> Result<MeasureEstimate> {
    if !(t_final > burn_in) {
        return Err(Error::Config(format!(
            "horizon T = {t_final} must exceed the burn-in {burn_in}"
        )));
    }
    Ok(krylov_bogoliubov_windows(stepper, &[(burn_in, t_final)], seed, sample_stride)?.remove(0))
}

/// Default burn-in `10 / c0`.
pub fn default_burn_in(stepper: &Stepper) -> f64 {
    10.0 / DecayConstants::from_stepper(stepper).c0
}

/// Two-sample comparison of two estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityReport {
    pub z_scores: BTreeMap<String, f64>,
    pub max_abs_z: f64,
    pub verdict: Verdict,
}

/// `z = (a - b) / sqrt(se_a^2 + se_b^2)` per shared functional; passes if all
/// `|z| <= 4`. Functionals with zero spread in both windows score `0` when
/// equal and infinity otherwise.
pub fn stationarity_test(a: &MeasureEstimate, b: &MeasureEstimate) -> StationarityReport {
    let mut z_scores = BTreeMap::new();
    for (name, ma) in &a.moments {
        if let Some(mb) = b.moments.get(name) {
            let d = ma.estimate - mb.estimate;
            let s = (ma.se * ma.se + mb.se * mb.se).sqrt();
            let z = if d == 0.0 {
                0.0
            } else if s > 0.0 {
                d / s
            } else {
                f64::INFINITY
            };
            z_scores.insert(name.clone(), z);
        }
    }
    let max_abs_z = z_scores.values().fold(0.0f64, |m, z| m.max(z.abs()));
    StationarityReport {
        z_scores,
        max_abs_z,
        verdict: Verdict::from_bool(max_abs_z <= 4.0),
    }
}

/// Plateau statistics of one time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub first_half_mean: f64,
    pub last_half_mean: f64,
    pub second_quarter_mean: f64,
    pub last_half_max: f64,
    /// `last_half_mean / first_half_mean`.
    pub halves_ratio: f64,
    /// `last_half_max / second_quarter_mean`.
    pub max_over_second_quarter: f64,
    pub bounded: bool,
}

impl Plateau {
    /// Bounded if identically zero or `max(last half) <= 2 mean(second quarter)`.
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        let mean = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
        let first = mean(&v[..n / 2]);
        let last = mean(&v[n / 2..]);
        let q2 = mean(&v[n / 4..n / 2]);
        let max_last = v[n / 2..].iter().copied().fold(0.0, f64::max);
        let ratio = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a / b };
        let max_over_q2 = ratio(max_last, q2);
        Self {
            first_half_mean: first,
            last_half_mean: last,
            second_quarter_mean: q2,
            last_half_max: max_last,
            halves_ratio: ratio(last, first),
            max_over_second_quarter: max_over_q2,
            bounded: v.iter().all(|x| x.is_finite()) && max_over_q2 <= 2.0,
        }
    }
}

/// The three tightness ingredients along a zero-started record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TightnessReport {
    /// Least-squares slope of `int_0^t ||A^{1/2} u||^2` against `t`.
    pub dirichlet_slope: f64,
    /// Plateau of `(1/t) int_0^t ||A^{1/2} u||^2`.
    pub dirichlet_average: Plateau,
    pub transport: Plateau,
    pub tail_sup: Plateau,
    pub verdict: Verdict,
}

/// Checks that the running Dirichlet average, `||T_mu eta||^2_{M^0}` and
/// `sup_r r T(r)` stay bounded in time.
pub fn tightness_diagnostic(t: &[f64], h1: &Series, transport: &Series, tail: &Series) -> TightnessReport {
    let n = t.len();
    let mut cum = vec![0.0; n];
    for i in 1..n {
        cum[i] = cum[i - 1] + 0.5 * (t[i] - t[i - 1]) * (h1.mean[i] + h1.mean[i - 1]);
    }
    let avg: Vec<f64> = (0..n)
        .map(|i| if t[i] > 0.0 { cum[i] / t[i] } else { 0.0 })
        .collect();
    let dirichlet_average = Plateau::of(&avg);
    let transport = Plateau::of(&transport.mean);
    let tail_sup = Plateau::of(&tail.mean);
    let ok = dirichlet_average.bounded && transport.bounded && tail_sup.bounded;
    TightnessReport {
        dirichlet_slope: ls_slope(t, &cum).unwrap_or(0.0),
        dirichlet_average,
        transport,
        tail_sup,
        verdict: Verdict::from_bool(ok),
    }
}

/// Regularity summary of one noise configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityEntry {
    pub label: String,
    pub h1: Moment,
    pub h2: Moment,
    pub h1_h2: Moment,
    /// Last-quarter over second-quarter means of `||u||^2_{H^1}`, `||u||^2_{H^2}`.
    pub h1_growth: f64,
    pub h2_growth: f64,
    pub h1_stable: bool,
    pub h2_stable: bool,
    pub decay_exponent: Option<f64>,
}

impl RegularityEntry {
    pub fn from_estimate(label: &str, est: &MeasureEstimate) -> Self {
        let get = |n: &str| est.moment(n).unwrap_or(Moment {
            estimate: f64::NAN,
            se: f64::NAN,
            batches: 0,
        });
        let g = |n: &str| est.quarters.get(n).map_or(f64::NAN, |q| if q[3] == 0.0 { 0.0 } else { q[3] / q[1] });
        let h1_growth = g("h1");
        let h2_growth = g("h2");
        let (h1, h2) = (get("h1"), get("h2"));
        Self {
            label: label.into(),
            h1,
            h2,
            h1_h2: get("h1_h2"),
            h1_growth,
            h2_growth,
            h1_stable: h1.estimate.is_finite() && h1_growth <= 2.0,
            h2_stable: h2.estimate.is_finite() && h2_growth <= 2.0,
            decay_exponent: est.spectral_decay_exponent(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityReport {
    pub smooth: RegularityEntry,
    pub rough: RegularityEntry,
    /// Smooth-noise decay exponent strictly above the rough one.
    pub steeper_for_smooth: bool,
    pub verdict: Verdict,
}

/// Compares stationary regularity under smooth and rough noise.
pub fn regularity_diagnostic(smooth: &MeasureEstimate, rough: &MeasureEstimate) -> RegularityReport {
    let s = RegularityEntry::from_estimate("smooth", smooth);
    let r = RegularityEntry::from_estimate("rough", rough);
    let steeper = matches!((s.decay_exponent, r.decay_exponent), (Some(a), Some(b)) if a > b);
    let ok = s.h1_stable && r.h1_stable && s.h2_stable && steeper;
    RegularityReport {
        smooth: s,
        rough: r,
        steeper_for_smooth: steeper,
        verdict: Verdict::from_bool(ok),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_relative_eq;

    use super::*;
    use crate::integrator::{Model, StepperConfig};
    use crate::kernel::{KernelSpec, MemorySpace};
    use crate::model::{certify_potential, NoiseFamily, NoiseSpec};

    fn stepper(phi: &[f64], q: Vec<f64>, kappa: f64, n: usize, dt: f64) -> Stepper {
        let space = Arc::new(
            MemorySpace::with_default_grid(KernelSpec::exponential(1.0, 1.0, 1.0), 128, 1e-8)
                .unwrap(),
        );
        let model = Arc::new(Model {
            space,
            potential: certify_potential(phi).unwrap(),
            noise: NoiseSpec::new(NoiseFamily::Diagonal(q), n).unwrap(),
        });
        Stepper::new(model, StepperConfig::new(dt, kappa, n)).unwrap()
    }

    #[test]
    fn batch_means_of_constant() {
        let mut b = BatchMeans::new(100);
        for _ in 0..100 {
            b.push(2.5);
        }
        let m = b.moment();
        assert_eq!(m.estimate, 2.5);
        assert_eq!(m.se, 0.0);
        assert_eq!(m.batches, BATCHES);
    }

    #[test]
    fn noiseless_measure_is_zero() {
        let mut st = stepper(&[0.0, 1.0, 0.0, -1.0], vec![], 0.5, 4, 1e-3);
        let est = krylov_bogoliubov(&mut st, 2.0, 1.0, 0, 5).unwrap();
        assert!(est.moments.values().all(|m| m.estimate == 0.0));
        assert!(est.moment("exp_beta_psi0").is_none());
        assert!(est.spectral_profile.iter().all(|m| m.estimate == 0.0));
        let mut out = Vec::new();
        est.write_spectral_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("k,alpha_k,mean_uk_sq\n1,"));
    }

    #[test]
    fn identical_windows_have_zero_z() {
        let mut st = stepper(&[0.0], vec![1.0], 1.0, 2, 1e-3);
        let est = krylov_bogoliubov(&mut st, 3.0, 1.0, 4, 2).unwrap();
        let r = stationarity_test(&est, &est);
        assert_eq!(r.max_abs_z, 0.0);
        assert!(r.verdict.passed());
    }

    #[test]
    fn short_ou_run_is_in_the_right_ballpark() {
        let mut st = stepper(&[0.0], vec![1.0], 1.0, 2, 1e-3);
        let est = krylov_bogoliubov(&mut st, 60.0, 1.0, 9, 10).unwrap();
        let v = est.spectral_profile[0];
        let exact = crate::oracles::ou_stationary_variance(1, 1.0, 1.0);
        assert!((v.estimate - exact).abs() <= 5.0 * v.se + 0.02 * exact, "{v:?}");
        assert_eq!(est.spectral_profile[1].estimate, 0.0);
        assert!(est.moment("exp_beta_psi0").unwrap().estimate.is_finite());
    }

    #[test]
    fn plateau_and_decay_fit() {
        let flat: Vec<f64> = (0..100).map(|i| 1.0 + 0.1 * ((i as f64) * 0.7).sin()).collect();
        assert!(Plateau::of(&flat).bounded);
        let growing: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(!Plateau::of(&growing).bounded);
        assert!(Plateau::of(&[0.0; 10]).bounded);

        let est = MeasureEstimate {
            window_start: 0.0,
            window_end: 1.0,
            n_samples: 1,
            moments: BTreeMap::new(),
            beta: None,
            spectral_profile: (1..=16)
                .map(|k| Moment {
                    estimate: (k as f64).powf(-4.0),
                    se: 0.0,
                    batches: 1,
                })
                .collect(),
            quarters: BTreeMap::new(),
        };
        assert_relative_eq!(est.spectral_decay_exponent().unwrap(), 4.0, epsilon = 1e-12);
    }
}
