//! Polynomial reaction terms `phi` with certified structural constants, and
//! diagonal additive noise `Q e_k = q_k e_k`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{mode_eigenvalue, CollocationGrid, SpectralField};

/// Half-width of the lattice used for growth constants and lattice re-checks.
pub const LATTICE_RADIUS: f64 = 100.0;
const LATTICE_POINTS: usize = 200_001;
const ROOT_SCAN_POINTS: usize = 20_000;

/// Horner evaluation of `sum_i c_i x^i`.
pub fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

pub fn poly_derivative(c: &[f64]) -> Vec<f64> {
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(i, &ci)| i as f64 * ci)
        .collect()
}

fn trim(c: &[f64]) -> Vec<f64> {
    let mut v = c.to_vec();
    while v.len() > 1 && *v.last().unwrap() == 0.0 {
        v.pop();
    }
    v
}

/// Real roots of a polynomial, located by a sign-change scan inside the
/// Cauchy bound and refined by bisection. Roots of even multiplicity can be
/// missed; callers combine the roots with a lattice scan.
fn real_roots(c: &[f64]) -> Vec<f64> {
    let c = trim(c);
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let bound = 1.0 + c[..deg].iter().map(|x| (x / lead).abs()).fold(0.0, f64::max);
    let n = ROOT_SCAN_POINTS;
    let h = 2.0 * bound / n as f64;
    let mut roots = Vec::new();
    let mut x0 = -bound;
    let mut f0 = poly_eval(&c, x0);
    for i in 1..=n {
        let x1 = -bound + i as f64 * h;
        let f1 = poly_eval(&c, x1);
        if f0 == 0.0 {
            roots.push(x0);
        } else if f0 * f1 < 0.0 {
            let (mut a, mut b, mut fa) = (x0, x1, f0);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                let fm = poly_eval(&c, m);
                if fm == 0.0 || (b - a) < 1e-15 * (1.0 + m.abs()) {
                    a = m;
                    b = m;
                    break;
                }
                if fa * fm < 0.0 {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
            }
            roots.push(0.5 * (a + b));
        }
        x0 = x1;
        f0 = f1;
    }
    if f0 == 0.0 {
        roots.push(x0);
    }
    roots
}

/// Maximum over the real line of a polynomial with even degree and negative
/// leading coefficient (or a constant).
fn poly_max(c: &[f64]) -> f64 {
    let c = trim(c);
    if c.len() == 1 {
        return c[0];
    }
    let d = poly_derivative(&c);
    let mut best = f64::NEG_INFINITY;
    for x in real_roots(&d) {
        best = best.max(poly_eval(&c, x));
    }
    // Lattice guard against tangential critical points.
    let n = ROOT_SCAN_POINTS;
    let r = 1.0 + c.iter().map(|x| x.abs()).fold(0.0, f64::max) / c.last().unwrap().abs();
    for i in 0..=n {
        let x = -r + 2.0 * r * i as f64 / n as f64;
        best = best.max(poly_eval(&c, x));
    }
    best
}

/// Outcome of the higher-regularity assumption on `phi` for a given order `m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct P4Report {
    pub m: u32,
    /// Indices `i` in `2..=2 floor(m/2) - 2` with `phi^(i)(0) != 0`.
    pub nonvanishing_derivatives: Vec<usize>,
    /// Growth exponent of `phi'`.
    pub p1: usize,
    pub passed: bool,
}

/// A certified polynomial potential `phi(x) = sum_i c_i x^i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub coeffs: Vec<f64>,
    /// Degree.
    pub p0: usize,
    /// `|phi(x)| <= a1 (1 + |x|^p0)`.
    pub a1: f64,
    /// `x phi(x) <= -a2 |x|^(p0+1) + a3`.
    pub a2: f64,
    pub a3: f64,
    /// `sup phi'`.
    pub a_phi: f64,
    /// `p_i`: `|phi^(i)(x)| <= c (1 + |x|^(p_i))` for `i = 1..p0`.
    pub growth_exponents: Vec<usize>,
}

/// Certifies `phi` and computes its structural constants.
///
/// Accepted classes: odd degree `>= 3` with negative leading coefficient, and
/// linear `phi(x) = c1 x` with `c1 <= 0` (including `phi = 0`), for which
/// `a2 = |c1|/2` and `a3 = 0`.
pub fn certify_potential(coeffs: &[f64]) -> Result<PotentialSpec> {
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Potential {
            assumption: "P1",
            reason: "non-finite coefficient".into(),
        });
    }
    let c = trim(if coeffs.is_empty() { &[0.0] } else { coeffs });
    if c[0] != 0.0 {
        return Err(Error::Potential {
            assumption: "P0",
            reason: format!("phi(0) = c_0 = {} must vanish", c[0]),
        });
    }
    let p0 = c.len() - 1;
    let lead = c[p0];
    if p0 <= 1 {
        let c1 = if p0 == 1 { lead } else { 0.0 };
        if c1 > 0.0 {
            return Err(Error::Potential {
                assumption: "P2",
                reason: format!("linear phi = {c1} x is not dissipative"),
            });
        }
        return Ok(PotentialSpec {
            coeffs: c,
            p0: 1,
            a1: c1.abs(),
            a2: 0.5 * c1.abs(),
            a3: 0.0,
            a_phi: c1,
            growth_exponents: vec![0],
        });
    }
    if p0.is_multiple_of(2) {
        return Err(Error::Potential {
            assumption: "P2",
            reason: format!("degree {p0} is even; x phi(x) is unbounded above in one direction"),
        });
    }
    if lead >= 0.0 {
        return Err(Error::Potential {
            assumption: "P2",
            reason: format!("leading coefficient {lead} must be negative"),
        });
    }
    let a1 = c.iter().map(|x| x.abs()).sum();
    let a2 = 0.5 * lead.abs();
    // g(x) = x phi(x) + a2 x^(p0+1)
    let mut g = vec![0.0; p0 + 2];
    for (i, ci) in c.iter().enumerate() {
        g[i + 1] += ci;
    }
    g[p0 + 1] += a2;
    let a3 = poly_max(&g).max(0.0);
    let a_phi = poly_max(&poly_derivative(&c));
    Ok(PotentialSpec {
        coeffs: c,
        p0,
        a1,
        a2,
        a3,
        a_phi,
        growth_exponents: (1..=p0).map(|i| p0 - i).collect(),
    })
}

impl PotentialSpec {
    pub fn eval(&self, x: f64) -> f64 {
        poly_eval(&self.coeffs, x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        poly_eval(&poly_derivative(&self.coeffs), x)
    }

    /// `phi(x) = c1 x`, evaluated without a physical-space round trip.
    pub fn is_linear(&self) -> bool {
        self.coeffs.len() <= 2
    }

    pub fn linear_coefficient(&self) -> f64 {
        self.coeffs.get(1).copied().unwrap_or(0.0)
    }

    /// Higher-regularity check for order `m`: `phi^(i)(0) = 0` for
    /// `i = 2..=2 floor(m/2) - 2`, and `p_1 < 4` (a hard gate for `m >= 2`).
    pub fn check_p4(&self, m: u32) -> Result<P4Report> {
        let upper = 2 * (m as usize / 2);
        let nonvanishing: Vec<usize> = (2..upper.saturating_sub(1))
            .filter(|&i| self.coeffs.get(i).is_some_and(|&c| c != 0.0))
            .collect();
        let p1 = self.p0 - 1;
        let passed = nonvanishing.is_empty() && p1 < 4;
        let report = P4Report {
            m,
            nonvanishing_derivatives: nonvanishing,
            p1,
            passed,
        };
        if m >= 2 && !passed {
            return Err(Error::Potential {
                assumption: "P4",
                reason: if p1 >= 4 {
                    format!("p_1 = {p1} is not below 4")
                } else {
                    format!(
                        "phi^(i)(0) != 0 for i in {:?}",
                        report.nonvanishing_derivatives
                    )
                },
            });
        }
        Ok(report)
    }

    /// Collocation size that makes `phi(u)` alias-free for `n_modes` modes.
    pub fn dealiased_points(&self, n_modes: usize) -> usize {
        CollocationGrid::dealiased_size(n_modes, self.p0)
    }
}

/// Smallest `C` with `|phi(x)| <= C (|x| + |x|^p0)` over a lattice on
/// `[-100, 100]`, together with the limits at `0` and infinity.
pub fn check_growth_bound(spec: &PotentialSpec) -> f64 {
    let p = spec.p0 as i32;
    let mut c = spec.linear_coefficient().abs().max(spec.coeffs[spec.p0].abs());
    let n = LATTICE_POINTS;
    for i in 0..n {
        let x = -LATTICE_RADIUS + 2.0 * LATTICE_RADIUS * i as f64 / (n - 1) as f64;
        if x == 0.0 {
            continue;
        }
        let ax = x.abs();
        c = c.max(spec.eval(x).abs() / (ax + ax.powi(p)));
    }
    c
}

/// Lattice re-check of the certified bounds on `n` points of `[-r, r]`;
/// returns the number of violated inequalities.
pub fn lattice_violations(spec: &PotentialSpec, r: f64, n: usize) -> usize {
    let p = spec.p0 as i32;
    let dphi = poly_derivative(&spec.coeffs);
    let mut bad = 0;
    for i in 0..n {
        let x = -r + 2.0 * r * i as f64 / (n - 1) as f64;
        let f = spec.eval(x);
        let ax = x.abs();
        let tol = 1e-9 * (1.0 + ax.powi(p + 1));
        if f.abs() > spec.a1 * (1.0 + ax.powi(p)) + tol {
            bad += 1;
        }
        if x * f > -spec.a2 * ax.powi(p + 1) + spec.a3 + tol {
            bad += 1;
        }
        if poly_eval(&dphi, x) > spec.a_phi + tol {
            bad += 1;
        }
    }
    bad
}

/// Workspace for pseudo-spectral evaluation of `phi(u)`.
#[derive(Debug, Clone)]
pub struct PotentialEvaluator {
    grid: CollocationGrid,
    phys: Vec<f64>,
}

impl PotentialEvaluator {
    pub fn new(spec: &PotentialSpec, n_modes: usize) -> Self {
        let grid = CollocationGrid::new(spec.dealiased_points(n_modes));
        let m = grid.n_points();
        Self {
            grid,
            phys: vec![0.0; m],
        }
    }

    /// Evaluator on an explicit collocation size `points`, which must
    /// de-alias `spec` on `n_modes` modes.
    pub fn with_points(spec: &PotentialSpec, n_modes: usize, points: usize) -> Result<Self> {
        let required = spec.dealiased_points(n_modes);
        if points < required {
            return Err(Error::Aliasing { points, required });
        }
        let grid = CollocationGrid::new(points);
        Ok(Self {
            grid,
            phys: vec![0.0; points],
        })
    }

    pub fn grid(&self) -> &CollocationGrid {
        &self.grid
    }

    /// Writes the first `out.len()` coefficients of `phi(u)` into `out`.
    pub fn apply_into(&mut self, spec: &PotentialSpec, u: &[f64], out: &mut [f64]) -> Result<()> {
        if spec.is_linear() {
            let c1 = spec.linear_coefficient();
            for (o, v) in out.iter_mut().zip(u) {
                *o = c1 * v;
            }
            return Ok(());
        }
        let required = spec.dealiased_points(u.len());
        if self.grid.n_points() < required {
            return Err(Error::Aliasing {
                points: self.grid.n_points(),
                required,
            });
        }
        self.grid.to_physical_into(u, &mut self.phys)?;
        for v in self.phys.iter_mut() {
            *v = poly_eval(&spec.coeffs, *v);
        }
        self.grid.to_spectral_into(&self.phys, out)
    }

    /// `<phi(u), u>_{L^2}` by physical-grid quadrature.
    pub fn pairing(&mut self, spec: &PotentialSpec, u: &[f64]) -> Result<f64> {
        if spec.is_linear() {
            return Ok(spec.linear_coefficient() * u.iter().map(|v| v * v).sum::<f64>());
        }
        self.grid.to_physical_into(u, &mut self.phys)?;
        let m = self.phys.len();
        let s: f64 = self.phys.iter().map(|&v| v * poly_eval(&spec.coeffs, v)).sum();
        Ok(s / (m + 1) as f64)
    }
}

/// `phi(u)` truncated to `u`'s modes, evaluated on `grid`.
pub fn apply_potential(u: &SpectralField, spec: &PotentialSpec, grid: &CollocationGrid) -> Result<SpectralField> {
    let n = u.n_modes();
    if spec.is_linear() {
        let mut out = u.clone();
        out.scale(spec.linear_coefficient());
        return Ok(out);
    }
    let required = spec.dealiased_points(n);
    if grid.n_points() < required {
        return Err(Error::Aliasing {
            points: grid.n_points(),
            required,
        });
    }
    let mut phys = grid.to_physical(u)?;
    for v in phys.iter_mut() {
        *v = spec.eval(*v);
    }
    grid.to_spectral(&phys, n)
}

/// How the per-mode amplitudes `q_k` were specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    /// Explicit `q_1, q_2, ...`; later modes are noiseless.
    Diagonal(Vec<f64>),
    /// `q_k = amplitude k^(-exponent)` for `k <= cutoff` (all `k` if absent).
    Power {
        amplitude: f64,
        exponent: f64,
        cutoff: Option<usize>,
    },
}

/// Diagonal noise `Q e_k = q_k e_k` resolved on `n_modes` modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    /// `q_k` for `k = 1..=N`.
    pub q: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, n_modes: usize) -> Result<Self> {
        let q: Vec<f64> = match &family {
            NoiseFamily::Diagonal(list) => (0..n_modes)
                .map(|i| list.get(i).copied().unwrap_or(0.0))
                .collect(),
            NoiseFamily::Power {
                amplitude,
                exponent,
                cutoff,
            } => (1..=n_modes)
                .map(|k| {
                    if cutoff.is_some_and(|c| k > c) {
                        0.0
                    } else {
                        amplitude * (k as f64).powf(-exponent)
                    }
                })
                .collect(),
        };
        if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Noise {
                assumption: "Q1",
                reason: format!("q_{} = {v} must be finite and non-negative", i + 1),
            });
        }
        let spec = Self { family, q };
        if !spec.tail_trace_finite(0.0) {
            return Err(Error::Noise {
                assumption: "Q1",
                reason: "sum of q_k^2 diverges".into(),
            });
        }
        Ok(spec)
    }

    pub fn zero(n_modes: usize) -> Self {
        Self {
            family: NoiseFamily::Diagonal(Vec::new()),
            q: vec![0.0; n_modes],
        }
    }

    pub fn n_modes(&self) -> usize {
        self.q.len()
    }

    /// Whether `sum_k q_k^2 alpha_k^m` over all `k` (not only the resolved
    /// modes) converges.
    fn tail_trace_finite(&self, m: f64) -> bool {
        match &self.family {
            NoiseFamily::Diagonal(_) => true,
            NoiseFamily::Power {
                amplitude,
                exponent,
                cutoff,
            } => cutoff.is_some() || *amplitude == 0.0 || 2.0 * exponent - 2.0 * m > 1.0,
        }
    }

    /// `Tr(Q A^m Q) = sum_k q_k^2 alpha_k^m` over the resolved modes; `+inf`
    /// when the family's untruncated tail diverges.
    pub fn trace_qamq(&self, m: u32) -> f64 {
        if !self.tail_trace_finite(m as f64) {
            return f64::INFINITY;
        }
        self.q
            .iter()
            .enumerate()
            .map(|(i, q)| q * q * mode_eigenvalue(i + 1).powi(m as i32))
            .sum()
    }

    /// `Tr(QQ*)`.
    pub fn trace(&self) -> f64 {
        self.trace_qamq(0)
    }

    /// Rejects noise whose order-`m` trace diverges.
    pub fn check_q2(&self, m: u32) -> Result<f64> {
        let t = self.trace_qamq(m);
        if !t.is_finite() {
            return Err(Error::Noise {
                assumption: "Q2",
                reason: format!("Tr(Q A^{m} Q) diverges for {:?}", self.family),
            });
        }
        Ok(t)
    }

    /// Writes `q_k sqrt(dt) xi_k` into `out`, drawing one standard normal per
    /// mode (also for `q_k = 0`, so the stream layout is independent of `q`).
    pub fn fill_increment<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R, out: &mut [f64]) {
        let sd = dt.sqrt();
        for (o, q) in out.iter_mut().zip(&self.q) {
            let xi: f64 = rng.sample(StandardNormal);
            *o = q * sd * xi;
        }
    }
}

/// One Wiener increment `Q dW` over a step `dt`.
pub fn sample_noise_increment<R: Rng + ?Sized>(noise: &NoiseSpec, dt: f64, rng: &mut R) -> SpectralField {
    let mut out = vec![0.0; noise.n_modes()];
    noise.fill_increment(dt, rng, &mut out);
    SpectralField::from_coeffs(out)
}
