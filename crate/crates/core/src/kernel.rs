//! Memory kernels `mu` of exponential type, the truncated memory-age grid,
//! and the kernel-weighted quadrature shared by history norms and evolution.
//!
//! The memory-age axis `[0, inf)` is truncated at `s_max`, chosen so that the
//! discarded kernel mass `mu(0) exp(-delta s_max) / delta` is below a declared
//! tolerance. Nodes are geometrically stretched so that they cluster near
//! `s = 0`, where the history boundary condition `eta(0) = 0` lives.
//!
//! Kernel-weighted integrals `int mu(s) f(s) ds` use product integration: `f`
//! is interpolated linearly between nodes and each segment is integrated
//! against the kernel exactly (closed form for exponential kernels, Simpson
//! on linear pieces for tabulated ones). The resulting weights `W_j` play the
//! role of `w_j mu(s_j)` in a plain trapezoid rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::HistoryField;
use crate::spectral::mode_eigenvalue;

/// Relative accuracy demanded of `sum_j w_j mu(s_j)` against `int_0^s_max mu`.
pub const GRID_QUADRATURE_TOL: f64 = 1e-3;
/// Default ratio between the last and first spacing of the geometric grid.
pub const DEFAULT_STRETCH: f64 = 40.0;
/// Number of logarithmic samples of `r` used for the tail supremum.
pub const DEFAULT_TAIL_SAMPLES: usize = 64;

const CLOSED_FORM_TOL: f64 = 1e-10;
const TABULATED_SLACK: f64 = 1e-6;

/// Shape of the memory kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    /// `mu(s) = mu0 exp(-rate s)`.
    Exponential { mu0: f64, rate: f64 },
    /// Piecewise-linear interpolation of `(s, mu)` samples, log-linear
    /// extrapolation outside the table.
    Tabulated { s: Vec<f64>, mu: Vec<f64> },
}

/// A memory kernel together with the decay rate `delta` it is claimed to
/// satisfy (`mu' + delta mu <= 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub delta: f64,
    pub family: KernelFamily,
}

impl KernelSpec {
    pub fn exponential(mu0: f64, rate: f64, delta: f64) -> Self {
        Self {
            delta,
            family: KernelFamily::Exponential { mu0, rate },
        }
    }

    /// Tabulated kernel; `s` must be strictly increasing and non-negative.
    pub fn tabulated(s: Vec<f64>, mu: Vec<f64>, delta: f64) -> Result<Self> {
        if s.len() != mu.len() || s.len() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "tabulated kernel needs >= 2 matching samples, got {} s and {} mu",
                s.len(),
                mu.len()
            )));
        }
        if s[0] < 0.0 {
            return Err(Error::Domain("tabulated kernel has negative s".into()));
        }
        if let Some(i) = s.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Parse {
                line: i + 2,
                reason: "s must be strictly increasing".into(),
            });
        }
        Ok(Self {
            delta,
            family: KernelFamily::Tabulated { s, mu },
        })
    }

    /// Reads a whitespace-delimited two-column `(s, mu(s))` table. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn load_tabulated(path: impl AsRef<Path>, delta: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (s, mu) = parse_two_columns(&text)?;
        Self::tabulated(s, mu, delta)
    }

    pub fn mu(&self, s: f64) -> f64 {
        match &self.family {
            KernelFamily::Exponential { mu0, rate } => mu0 * (-rate * s).exp(),
            KernelFamily::Tabulated { s: xs, mu } => tabulated_eval(xs, mu, s),
        }
    }

    /// `mu'(s)`: exact for exponential kernels, the slope of the containing
    /// table segment (a one-sided difference) for tabulated ones.
    pub fn mu_prime(&self, s: f64) -> f64 {
        match &self.family {
            KernelFamily::Exponential { mu0, rate } => -rate * mu0 * (-rate * s).exp(),
            KernelFamily::Tabulated { s: xs, mu } => tabulated_slope(xs, mu, s),
        }
    }

    pub fn mu0(&self) -> f64 {
        self.mu(0.0)
    }

    pub fn is_exponential(&self) -> bool {
        matches!(self.family, KernelFamily::Exponential { .. })
    }

    /// Upper bound on `int_{s}^inf mu`: exact for exponential kernels, the M1
    /// comparison bound `mu(0) exp(-delta s) / delta` otherwise.
    pub fn tail_mass(&self, s: f64) -> f64 {
        match &self.family {
            KernelFamily::Exponential { mu0, rate } => mu0 * (-rate * s).exp() / rate,
            KernelFamily::Tabulated { .. } => self.mu0() * (-self.delta * s).exp() / self.delta,
        }
    }

    /// `(int_a^b mu(s) (b - s)/(b - a) ds, int_a^b mu(s) (s - a)/(b - a) ds)`.
    pub fn segment_moments(&self, a: f64, b: f64) -> (f64, f64) {
        let h = b - a;
        if h <= 0.0 {
            return (0.0, 0.0);
        }
        match &self.family {
            KernelFamily::Exponential { mu0, rate } => {
                exponential_segment_moments(*mu0, *rate, a, h)
            }
            KernelFamily::Tabulated { s: xs, .. } => {
                // Split at table breakpoints so that mu is linear on each piece;
                // the integrand is then quadratic and Simpson is exact.
                let mut cuts = vec![a];
                cuts.extend(xs.iter().copied().filter(|&x| x > a && x < b));
                cuts.push(b);
                let (mut left, mut right) = (0.0, 0.0);
                for w in cuts.windows(2) {
                    let (p, q) = (w[0], w[1]);
                    let m = 0.5 * (p + q);
                    let f = |x: f64| self.mu(x);
                    let wl = |x: f64| (b - x) / h;
                    let wr = |x: f64| (x - a) / h;
                    let len = (q - p) / 6.0;
                    left += len * (f(p) * wl(p) + 4.0 * f(m) * wl(m) + f(q) * wl(q));
                    right += len * (f(p) * wr(p) + 4.0 * f(m) * wr(m) + f(q) * wr(q));
                }
                (left, right)
            }
        }
    }
}

fn exponential_segment_moments(mu0: f64, rate: f64, a: f64, h: f64) -> (f64, f64) {
    if rate == 0.0 {
        return (0.5 * mu0 * h, 0.5 * mu0 * h);
    }
    let scale = mu0 * (-rate * a).exp();
    let x = rate * h;
    // int_0^h e^{-rate t} (h - t)/h dt = (x - 1 + e^{-x}) / (rate x)
    // int_0^h e^{-rate t} t/h dt       = (1 - e^{-x}(1 + x)) / (rate x)
    let (p, q) = if x < 1e-3 {
        let x2 = x * x;
        (
            x2 * (0.5 - x / 6.0 + x2 / 24.0 - x2 * x / 120.0),
            x2 * (0.5 - x / 3.0 + x2 / 8.0 - x2 * x / 30.0),
        )
    } else {
        let e = (-x).exp();
        (x - 1.0 + e, 1.0 - e * (1.0 + x))
    };
    (scale * p / (rate * x), scale * q / (rate * x))
}

fn tabulated_eval(xs: &[f64], mu: &[f64], s: f64) -> f64 {
    let n = xs.len();
    if s <= xs[0] {
        return log_linear(xs[0], mu[0], xs[1], mu[1], s);
    }
    if s >= xs[n - 1] {
        return log_linear(xs[n - 2], mu[n - 2], xs[n - 1], mu[n - 1], s);
    }
    let i = xs.partition_point(|&x| x <= s) - 1;
    let t = (s - xs[i]) / (xs[i + 1] - xs[i]);
    mu[i] + t * (mu[i + 1] - mu[i])
}

fn log_linear(x0: f64, y0: f64, x1: f64, y1: f64, s: f64) -> f64 {
    if y0 > 0.0 && y1 > 0.0 {
        let rate = (y1 / y0).ln() / (x1 - x0);
        y0 * (rate * (s - x0)).exp()
    } else {
        y0 + (y1 - y0) * (s - x0) / (x1 - x0)
    }
}

fn tabulated_slope(xs: &[f64], mu: &[f64], s: f64) -> f64 {
    let n = xs.len();
    if s < xs[0] || s >= xs[n - 1] {
        let (i, j) = if s < xs[0] { (0, 1) } else { (n - 2, n - 1) };
        if mu[i] > 0.0 && mu[j] > 0.0 {
            let rate = (mu[j] / mu[i]).ln() / (xs[j] - xs[i]);
            return rate * tabulated_eval(xs, mu, s);
        }
        return (mu[j] - mu[i]) / (xs[j] - xs[i]);
    }
    let i = xs.partition_point(|&x| x <= s) - 1;
    (mu[i + 1] - mu[i]) / (xs[i + 1] - xs[i])
}

pub(crate) fn parse_two_columns(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: ln + 1,
                reason: format!("expected 2 columns, found {}", cols.len()),
            });
        }
        let parse = |c: &str| {
            c.parse::<f64>().map_err(|e| Error::Parse {
                line: ln + 1,
                reason: format!("{c:?}: {e}"),
            })
        };
        a.push(parse(cols[0])?);
        b.push(parse(cols[1])?);
    }
    Ok((a, b))
}

/// A differentiable memory kernel `K` of the original formulation, with
/// `mu = -K'`.
#[derive(Debug, Clone, PartialEq)]
pub enum KFunction {
    /// `K(s) = amplitude exp(-rate s)`.
    Exponential { amplitude: f64, rate: f64 },
    /// `K` sampled at strictly increasing `s`.
    Tabulated { s: Vec<f64>, k: Vec<f64> },
}

impl KFunction {
    pub fn value(&self, s: f64) -> f64 {
        match self {
            KFunction::Exponential { amplitude, rate } => amplitude * (-rate * s).exp(),
            KFunction::Tabulated { s: xs, k } => tabulated_eval(xs, k, s),
        }
    }

    /// `K` viewed as a positive weight for product integration.
    pub fn as_weight(&self) -> KernelSpec {
        match self {
            KFunction::Exponential { amplitude, rate } => {
                KernelSpec::exponential(*amplitude, *rate, *rate)
            }
            KFunction::Tabulated { s, k } => KernelSpec {
                delta: 0.0,
                family: KernelFamily::Tabulated {
                    s: s.clone(),
                    mu: k.clone(),
                },
            },
        }
    }
}

/// `mu = -K'`. Exponential `K` maps to an exponential `mu` with `delta` equal
/// to the decay rate; tabulated `K` is differentiated by finite differences
/// and `delta` is the smallest observed `-mu'/mu`.
pub fn mu_from_k(k: &KFunction, grid: &SGrid) -> Result<KernelSpec> {
    match k {
        KFunction::Exponential { amplitude, rate } => {
            let mu0 = amplitude * rate;
            if mu0 <= 0.0 || *rate <= 0.0 {
                return Err(Error::DegenerateKernel(format!(
                    "K = {amplitude} exp(-{rate} s) gives mu = -K' = {mu0} exp(-{rate} s), not positive"
                )));
            }
            let spec = KernelSpec::exponential(mu0, *rate, *rate);
            validate_m_delta(&spec, grid)?;
            Ok(spec)
        }
        KFunction::Tabulated { s, k } => {
            let n = s.len();
            if n < 3 || k.len() != n {
                return Err(Error::DimensionMismatch(
                    "tabulated K needs >= 3 matching samples".into(),
                ));
            }
            let mut mu = vec![0.0; n];
            for (i, m) in mu.iter_mut().enumerate() {
                let (l, r) = if i == 0 {
                    (0, 1)
                } else if i == n - 1 {
                    (n - 2, n - 1)
                } else {
                    (i - 1, i + 1)
                };
                *m = -(k[r] - k[l]) / (s[r] - s[l]);
            }
            if let Some(i) = mu.iter().position(|&m| m <= 0.0) {
                return Err(Error::DegenerateKernel(format!(
                    "K is not strictly decreasing near s = {}: mu = -K' = {}",
                    s[i], mu[i]
                )));
            }
            let delta = (0..n - 1)
                .map(|i| -(mu[i + 1] - mu[i]) / (s[i + 1] - s[i]) / mu[i])
                .fold(f64::INFINITY, f64::min);
            if !(delta > 0.0) {
                return Err(Error::DegenerateKernel(format!(
                    "mu = -K' is not of exponential type (estimated delta = {delta})"
                )));
            }
            KernelSpec::tabulated(s.clone(), mu, delta)
        }
    }
}

/// Outcome of an M1 / class `M_delta` check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelReport {
    pub accepted: bool,
    /// `max_j (mu'(s_j) + delta mu(s_j))`; non-positive for admissible kernels.
    pub worst_margin: f64,
    pub worst_s: f64,
    pub min_mu: f64,
    pub tolerance: f64,
}

/// Checks `mu > 0` and `mu' + delta mu <= 0` at every grid node.
pub fn validate_m_delta(kernel: &KernelSpec, grid: &SGrid) -> Result<KernelReport> {
    if grid.nodes.is_empty() {
        return Err(Error::GridInfeasible("empty s-grid".into()));
    }
    if !(kernel.delta > 0.0) {
        return Err(Error::KernelViolation {
            s: 0.0,
            reason: format!("delta = {} is not positive", kernel.delta),
        });
    }
    let tol = if kernel.is_exponential() {
        CLOSED_FORM_TOL
    } else {
        TABULATED_SLACK
    };
    let mut report = KernelReport {
        accepted: true,
        worst_margin: f64::NEG_INFINITY,
        worst_s: 0.0,
        min_mu: f64::INFINITY,
        tolerance: tol,
    };
    for &s in &grid.nodes {
        let mu = kernel.mu(s);
        if !(mu > 0.0) {
            return Err(Error::KernelViolation {
                s,
                reason: format!("mu(s) = {mu} is not positive"),
            });
        }
        report.min_mu = report.min_mu.min(mu);
        let margin = match &kernel.family {
            KernelFamily::Exponential { rate, .. } => (kernel.delta - rate) * mu,
            KernelFamily::Tabulated { .. } => kernel.mu_prime(s) + kernel.delta * mu,
        };
        if margin > report.worst_margin {
            report.worst_margin = margin;
            report.worst_s = s;
        }
        if margin > tol {
            return Err(Error::KernelViolation {
                s,
                reason: format!("mu' + delta mu = {margin:e} > 0"),
            });
        }
    }
    Ok(report)
}

/// Memory-age nodes `0 = s_0 < s_1 < ... < s_{J-1} = s_max` with plain
/// trapezoid weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub s_max: f64,
    /// Geometric growth factor between consecutive spacings.
    pub ratio: f64,
}

impl SGrid {
    /// Geometric grid over `[0, s_max]` with `s_max = ln(mu0 / (delta tail_tol)) / delta`.
    pub fn build(delta: f64, mu0: f64, n_nodes: usize, tail_tol: f64) -> Result<Self> {
        Self::build_with_stretch(delta, mu0, n_nodes, tail_tol, DEFAULT_STRETCH)
    }

    /// As [`build`](Self::build), with the ratio of last to first spacing set
    /// to `stretch` (`1` gives a uniform grid).
    pub fn build_with_stretch(
        delta: f64,
        mu0: f64,
        n_nodes: usize,
        tail_tol: f64,
        stretch: f64,
    ) -> Result<Self> {
        if !(delta > 0.0) || !(mu0 > 0.0) {
            return Err(Error::Domain(format!(
                "s-grid needs delta > 0 and mu0 > 0 (delta = {delta}, mu0 = {mu0})"
            )));
        }
        if !(tail_tol > 0.0) || !(stretch >= 1.0) {
            return Err(Error::Domain(format!(
                "s-grid needs tail_tol > 0 and stretch >= 1 (tail_tol = {tail_tol}, stretch = {stretch})"
            )));
        }
        let s_max = (mu0 / (delta * tail_tol)).ln() / delta;
        if !(s_max > 0.0) {
            return Err(Error::GridInfeasible(format!(
                "tail tolerance {tail_tol} is met without truncation (s_max = {s_max})"
            )));
        }
        if n_nodes < 8 {
            return Err(Error::GridInfeasible(format!(
                "{n_nodes} nodes cannot resolve the kernel up to s_max = {s_max:.3}; use at least 8 (256 recommended)"
            )));
        }
        let intervals = n_nodes - 1;
        let ratio = if intervals > 1 {
            stretch.powf(1.0 / (intervals - 1) as f64)
        } else {
            1.0
        };
        let mut nodes = Vec::with_capacity(n_nodes);
        if (ratio - 1.0).abs() < 1e-14 {
            let h = s_max / intervals as f64;
            nodes.extend((0..n_nodes).map(|j| j as f64 * h));
        } else {
            let h0 = s_max * (ratio - 1.0) / (ratio.powi(intervals as i32) - 1.0);
            let mut s = 0.0;
            let mut h = h0;
            nodes.push(0.0);
            for _ in 0..intervals {
                s += h;
                nodes.push(s);
                h *= ratio;
            }
        }
        *nodes.last_mut().unwrap() = s_max;
        let weights = trapezoid_weights(&nodes);

        let grid = Self {
            nodes,
            weights,
            s_max,
            ratio,
        };
        // Both SGrid invariants are checked against the exponential envelope.
        let approx: f64 = grid
            .nodes
            .iter()
            .zip(&grid.weights)
            .map(|(s, w)| w * mu0 * (-delta * s).exp())
            .sum();
        let exact = mu0 * (1.0 - (-delta * s_max).exp()) / delta;
        let rel = (approx - exact).abs() / exact;
        if rel > GRID_QUADRATURE_TOL {
            return Err(Error::GridInfeasible(format!(
                "{n_nodes} nodes give kernel-mass quadrature error {rel:.2e} > {GRID_QUADRATURE_TOL:e}; increase the node count"
            )));
        }
        let tail = mu0 * (-delta * s_max).exp() / delta;
        if tail > tail_tol * (1.0 + 1e-9) {
            return Err(Error::GridInfeasible(format!(
                "tail bound {tail:e} exceeds tolerance {tail_tol:e}"
            )));
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest spacing and the index `j` of its left node.
    pub fn min_spacing(&self) -> (f64, usize) {
        self.nodes
            .windows(2)
            .enumerate()
            .map(|(j, w)| (w[1] - w[0], j))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    }

    pub fn max_spacing(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// `n` logarithmically spaced values of `r` in `[1, s_max]`.
    pub fn log_r_samples(&self, n: usize) -> Vec<f64> {
        let hi = self.s_max.max(1.0);
        if n <= 1 {
            return vec![1.0];
        }
        (0..n)
            .map(|i| hi.powf(i as f64 / (n - 1) as f64))
            .collect()
    }
}

pub(crate) fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    for j in 0..n.saturating_sub(1) {
        let h = nodes[j + 1] - nodes[j];
        w[j] += 0.5 * h;
        w[j + 1] += 0.5 * h;
    }
    w
}

/// A kernel on its grid, with precomputed product-integration weights.
#[derive(Debug, Clone)]
pub struct MemorySpace {
    grid: SGrid,
    kernel: KernelSpec,
    /// `W_j`, so that `int mu f ~ sum_j W_j f(s_j)`.
    weights: Vec<f64>,
    /// Segment moments `(L_j, R_j)` on `[s_j, s_{j+1}]`.
    segments: Vec<(f64, f64)>,
    /// Weights approximating `int mu' f`.
    deriv_weights: Vec<f64>,
}

impl MemorySpace {
    pub fn new(grid: SGrid, kernel: KernelSpec) -> Self {
        let n = grid.len();
        let segments: Vec<(f64, f64)> = grid
            .nodes
            .windows(2)
            .map(|w| kernel.segment_moments(w[0], w[1]))
            .collect();
        let mut weights = vec![0.0; n];
        for (j, (l, r)) in segments.iter().enumerate() {
            weights[j] += l;
            weights[j + 1] += r;
        }
        let deriv_weights = match &kernel.family {
            KernelFamily::Exponential { rate, .. } => weights.iter().map(|w| -rate * w).collect(),
            KernelFamily::Tabulated { .. } => grid
                .nodes
                .iter()
                .zip(&grid.weights)
                .map(|(&s, w)| w * kernel.mu_prime(s))
                .collect(),
        };
        Self {
            grid,
            kernel,
            weights,
            segments,
            deriv_weights,
        }
    }

    /// Builds the default geometric grid for `kernel` and validates M1 on it.
    pub fn with_default_grid(kernel: KernelSpec, n_nodes: usize, tail_tol: f64) -> Result<Self> {
        let grid = SGrid::build(kernel.delta, kernel.mu0(), n_nodes, tail_tol)?;
        validate_m_delta(&kernel, &grid)?;
        Ok(Self::new(grid, kernel))
    }

    pub fn grid(&self) -> &SGrid {
        &self.grid
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn nodes(&self) -> &[f64] {
        &self.grid.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn deriv_weights(&self) -> &[f64] {
        &self.deriv_weights
    }

    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    /// `int_0^s_max mu` as seen by the quadrature.
    pub fn kernel_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Kernel-weighted integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// `F(x) = int_0^x mu E` for `E` linear between nodes, given the
    /// cumulative values `cum[j] = F(s_j)`.
    fn cumulative_at(&self, energy: &[f64], cum: &[f64], x: f64) -> f64 {
        let nodes = &self.grid.nodes;
        if x <= 0.0 {
            return 0.0;
        }
        if x >= self.grid.s_max {
            return *cum.last().unwrap();
        }
        let j = nodes.partition_point(|&s| s <= x) - 1;
        let (a, b) = (nodes[j], nodes[j + 1]);
        let (l, r) = self.kernel.segment_moments(a, x);
        let slope = (energy[j + 1] - energy[j]) / (b - a);
        cum[j] + energy[j] * (l + r) + slope * r * (x - a)
    }

    fn cumulative(&self, energy: &[f64]) -> Vec<f64> {
        let mut cum = Vec::with_capacity(energy.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for (j, (l, r)) in self.segments.iter().enumerate() {
            acc += l * energy[j] + r * energy[j + 1];
            cum.push(acc);
        }
        cum
    }

    /// `T(r) = int_{(0,1/r) U (r,inf)} mu E ds` for nodal energies `E_j`.
    pub fn tail_of_energy(&self, energy: &[f64], r: f64) -> Result<f64> {
        let cum = self.cumulative(energy);
        self.tail_from_cumulative(energy, &cum, r)
    }

    fn tail_from_cumulative(&self, energy: &[f64], cum: &[f64], r: f64) -> Result<f64> {
        if !(r >= 1.0) {
            return Err(Error::Domain(format!("tail function needs r >= 1, got {r}")));
        }
        let total = *cum.last().unwrap();
        let inner = self.cumulative_at(energy, cum, 1.0 / r);
        let outer = total - self.cumulative_at(energy, cum, r);
        Ok(inner + outer.max(0.0))
    }

    /// `max_{r in samples} r T(r)`.
    pub fn tail_sup_of_energy(&self, energy: &[f64], r_samples: &[f64]) -> Result<f64> {
        let cum = self.cumulative(energy);
        let mut best = 0.0f64;
        for &r in r_samples {
            best = best.max(r * self.tail_from_cumulative(energy, &cum, r)?);
        }
        Ok(best)
    }
}

fn check_same_space(a: &HistoryField, b: &HistoryField) -> Result<()> {
    if a.n_modes() != b.n_modes() || !a.same_space(b) {
        return Err(Error::DimensionMismatch(format!(
            "histories differ in grid or mode count ({}x{} vs {}x{})",
            a.n_modes(),
            a.n_nodes(),
            b.n_modes(),
            b.n_nodes()
        )));
    }
    Ok(())
}

/// `<eta1, eta2>_{M^beta} = int mu(s) sum_k alpha_k^{1+beta} eta1_k(s) eta2_k(s) ds`.
pub fn weighted_inner(eta1: &HistoryField, eta2: &HistoryField, beta: f64) -> Result<f64> {
    check_same_space(eta1, eta2)?;
    let space = eta1.space();
    let j_len = space.n_nodes();
    let mut total = 0.0;
    for k in 1..=eta1.n_modes() {
        let a = mode_eigenvalue(k).powf(1.0 + beta);
        let r1 = eta1.mode_row(k);
        let r2 = eta2.mode_row(k);
        let mut s = 0.0;
        for j in 0..j_len {
            s += space.weights[j] * r1[j] * r2[j];
        }
        total += a * s;
    }
    Ok(total)
}

/// `||eta||^2_{M^beta}`.
pub fn m_norm_sq(eta: &HistoryField, beta: f64) -> f64 {
    let space = eta.space();
    space.integrate(&eta.energy(1.0 + beta))
}

/// Tail function `T_eta(r)`, `r >= 1`.
pub fn tail_function(eta: &HistoryField, r: f64) -> Result<f64> {
    eta.space().tail_of_energy(&eta.energy(1.0), r)
}

/// `max_{r in samples} r T_eta(r)`, the sampled stand-in for `sup_{r >= 1}`.
pub fn tail_sup(eta: &HistoryField, r_samples: &[f64]) -> Result<f64> {
    eta.space().tail_sup_of_energy(&eta.energy(1.0), r_samples)
}

/// `||eta||^2_{E^beta} = ||eta||^2_{M^beta} + ||T_mu eta||^2_{M^0} + sup_r r T_eta(r)`,
/// with the supremum replaced by a maximum over `r_samples`.
pub fn e_beta_norm_sq(eta: &HistoryField, beta: f64, r_samples: &[f64]) -> Result<f64> {
    let transport = crate::history::apply_tmu(eta)?;
    Ok(m_norm_sq(eta, beta) + m_norm_sq(&transport, 0.0) + tail_sup(eta, r_samples)?)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;
    use std::sync::Arc;

    use approx::assert_relative_eq;

    use super::*;
    use crate::history::HistoryField;

    fn unit_space(n_nodes: usize) -> Arc<MemorySpace> {
        Arc::new(
            MemorySpace::with_default_grid(KernelSpec::exponential(1.0, 1.0, 1.0), n_nodes, 1e-8)
                .unwrap(),
        )
    }

    #[test]
    fn m_delta_examples() {
        let grid = SGrid::build(1.0, 1.0, 256, 1e-8).unwrap();
        let r = validate_m_delta(&KernelSpec::exponential(1.0, 1.0, 1.0), &grid).unwrap();
        assert!(r.accepted);
        assert_eq!(r.worst_margin, 0.0);
        let err = validate_m_delta(&KernelSpec::exponential(1.0, 1.0, 2.0), &grid).unwrap_err();
        assert!(matches!(err, Error::KernelViolation { .. }));
        let grid3 = SGrid::build(3.0, 2.0, 256, 1e-8).unwrap();
        assert!(validate_m_delta(&KernelSpec::exponential(2.0, 3.0, 3.0), &grid3).is_ok());
    }

    #[test]
    fn tabulated_kernel_validation() {
        let s: Vec<f64> = (0..200).map(|i| i as f64 * 0.1).collect();
        let mu: Vec<f64> = s.iter().map(|x| (-1.5 * x).exp()).collect();
        let grid = SGrid::build(1.0, 1.0, 128, 1e-6).unwrap();
        let ok = KernelSpec::tabulated(s.clone(), mu.clone(), 1.0).unwrap();
        assert!(validate_m_delta(&ok, &grid).is_ok());
        let bad = KernelSpec::tabulated(s, mu, 2.0).unwrap();
        assert!(validate_m_delta(&bad, &grid).is_err());
    }

    #[test]
    fn tabulated_file_round_trip() {
        let dir = std::env::temp_dir().join("memheat_kernel_table_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mu.txt");
        std::fs::write(&path, "# s mu\n0 1\n0.5\t0.5\n1.0   0.25\n").unwrap();
        let k = KernelSpec::load_tabulated(&path, 1.0).unwrap();
        assert_relative_eq!(k.mu(0.25), 0.75, epsilon = 1e-14);
        std::fs::write(&path, "0 1\n0 0.5\n").unwrap();
        assert!(matches!(
            KernelSpec::load_tabulated(&path, 1.0),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(&path, "0 1 3\n").unwrap();
        assert!(KernelSpec::load_tabulated(&path, 1.0).is_err());
    }

    #[test]
    fn mu_from_k_examples() {
        let grid = SGrid::build(1.0, 1.0, 256, 1e-8).unwrap();
        let k1 = mu_from_k(&KFunction::Exponential { amplitude: 1.0, rate: 1.0 }, &grid).unwrap();
        assert_relative_eq!(k1.mu(0.7), (-0.7f64).exp(), epsilon = 1e-15);
        let grid2 = SGrid::build(2.0, 2.0, 256, 1e-8).unwrap();
        let k2 = mu_from_k(&KFunction::Exponential { amplitude: 1.0, rate: 2.0 }, &grid2).unwrap();
        assert_relative_eq!(k2.mu(0.3), 2.0 * (-0.6f64).exp(), epsilon = 1e-15);
        assert!(matches!(
            mu_from_k(&KFunction::Exponential { amplitude: 1.0, rate: 0.0 }, &grid),
            Err(Error::DegenerateKernel(_))
        ));
        let s: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let constant = KFunction::Tabulated { s: s.clone(), k: vec![1.0; 50] };
        assert!(mu_from_k(&constant, &grid).is_err());
        let increasing = KFunction::Tabulated { s: s.clone(), k: s.clone() };
        assert!(mu_from_k(&increasing, &grid).is_err());
        let decaying = KFunction::Tabulated {
            s: s.clone(),
            k: s.iter().map(|x| (-x).exp()).collect(),
        };
        let spec = mu_from_k(&decaying, &grid).unwrap();
        assert_relative_eq!(spec.mu(1.0), (-1.0f64).exp(), max_relative = 1e-2);
    }

    #[test]
    fn sgrid_examples() {
        let g1 = SGrid::build(1.0, 1.0, 256, 1e-8).unwrap();
        assert_relative_eq!(g1.s_max, 1e8f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(g1.s_max, 18.420_680_743_952_367, epsilon = 1e-9);
        // Same tolerance and mu0/delta ratio: s_max scales as 1/delta.
        let g2 = SGrid::build(2.0, 2.0, 256, 1e-8).unwrap();
        assert_relative_eq!(g2.s_max, 0.5 * g1.s_max, epsilon = 1e-12);
        assert!(matches!(
            SGrid::build(1.0, 1.0, 4, 1e-12),
            Err(Error::GridInfeasible(_))
        ));
        assert_eq!(g1.nodes[0], 0.0);
        assert!(g1.nodes.windows(2).all(|w| w[1] > w[0]));
        assert!(g1.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn exponential_segment_moments_match_quadrature() {
        let k = KernelSpec::exponential(1.3, 0.7, 0.7);
        for &(a, b) in &[(0.0, 1e-6), (0.0, 1e-3), (0.2, 0.9), (3.0, 7.5)] {
            let (l, r) = k.segment_moments(a, b);
            let n = 200_000;
            let h = (b - a) / n as f64;
            let (mut el, mut er) = (0.0, 0.0);
            for i in 0..n {
                let s = a + (i as f64 + 0.5) * h;
                el += h * k.mu(s) * (b - s) / (b - a);
                er += h * k.mu(s) * (s - a) / (b - a);
            }
            assert_relative_eq!(l, el, max_relative = 1e-8);
            assert_relative_eq!(r, er, max_relative = 1e-8);
        }
    }

    #[test]
    fn weighted_inner_examples() {
        let space = unit_space(256);
        let eta = HistoryField::from_fn(space.clone(), 4, |k, _s| if k == 1 { 1.0 } else { 0.0 });
        let n0 = weighted_inner(&eta, &eta, 0.0).unwrap();
        assert_relative_eq!(n0, PI * PI, max_relative = 1e-7);
        let nm1 = weighted_inner(&eta, &eta, -1.0).unwrap();
        assert_relative_eq!(nm1, 1.0, max_relative = 1e-7);
        let zero = HistoryField::zeros(space.clone(), 4);
        assert_eq!(weighted_inner(&eta, &zero, 0.0).unwrap(), 0.0);
        let other = HistoryField::zeros(unit_space(128), 4);
        assert!(weighted_inner(&eta, &other, 0.0).is_err());
        let fewer = HistoryField::zeros(space, 3);
        assert!(weighted_inner(&eta, &fewer, 0.0).is_err());
    }

    #[test]
    fn tail_function_examples() {
        let space = unit_space(256);
        let eta = HistoryField::from_fn(space.clone(), 2, |k, _s| if k == 1 { 1.0 } else { 0.0 });
        let a1 = PI * PI;
        assert_relative_eq!(tail_function(&eta, 1.0).unwrap(), a1, max_relative = 1e-7);
        let expect = a1 * (1.0 - (-0.5f64).exp() + (-2.0f64).exp());
        assert_relative_eq!(tail_function(&eta, 2.0).unwrap(), expect, max_relative = 1e-7);
        assert_relative_eq!(expect / a1, 0.5288, epsilon = 1e-4);
        let zero = HistoryField::zeros(space, 2);
        assert_eq!(tail_function(&zero, 3.0).unwrap(), 0.0);
        assert!(matches!(tail_function(&eta, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn e_beta_norm_examples() {
        let space = unit_space(256);
        let r = space.grid().log_r_samples(DEFAULT_TAIL_SAMPLES);
        let zero = HistoryField::zeros(space.clone(), 2);
        assert_eq!(e_beta_norm_sq(&zero, 0.0, &r).unwrap(), 0.0);

        let eta = HistoryField::from_fn(space.clone(), 2, |k, s| {
            if k == 1 { 1.0 - (-s).exp() } else { 0.0 }
        });
        let a1 = PI * PI;
        assert_relative_eq!(m_norm_sq(&eta, 0.0), a1 / 3.0, max_relative = 1e-4);
        let transport = crate::history::apply_tmu(&eta).unwrap();
        // First-order upwind derivative.
        assert_relative_eq!(m_norm_sq(&transport, 0.0), a1 / 3.0, max_relative = 2e-2);

        // Brute-force sweep of r T(r) with the closed-form energy.
        let energy = |s: f64| a1 * (1.0 - (-s).exp()).powi(2);
        let integrate = |lo: f64, hi: f64| {
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            (0..n)
                .map(|i| {
                    let s = lo + (i as f64 + 0.5) * h;
                    h * (-s).exp() * energy(s)
                })
                .sum::<f64>()
        };
        let sup = r
            .iter()
            .map(|&rr| rr * (integrate(0.0, 1.0 / rr) + integrate(rr, space.grid().s_max)))
            .fold(0.0, f64::max);
        assert_relative_eq!(tail_sup(&eta, &r).unwrap(), sup, max_relative = 1e-4);

        let total = e_beta_norm_sq(&eta, 0.0, &r).unwrap();
        let mut eta2 = eta.clone();
        eta2.scale(2.0);
        assert_relative_eq!(e_beta_norm_sq(&eta2, 0.0, &r).unwrap(), 4.0 * total, max_relative = 1e-12);
    }

    #[test]
    fn kernel_mass_converges_at_second_order() {
        // Plain trapezoid on the node set, halving the spacing each time.
        let mut errs = Vec::new();
        for &n in &[129usize, 257, 513, 1025] {
            let g = SGrid::build_with_stretch(1.0, 1.0, n, 1e-8, 8.0).unwrap();
            let approx: f64 = g.nodes.iter().zip(&g.weights).map(|(s, w)| w * (-s).exp()).sum();
            errs.push((approx - (1.0 - (-g.s_max).exp())).abs());
        }
        for w in errs.windows(2) {
            assert!(w[0] / w[1] >= 3.5, "ratio {}", w[0] / w[1]);
        }
    }

    #[test]
    fn tail_bounded_by_m0_norm() {
        let space = unit_space(128);
        let eta = HistoryField::from_fn(space, 3, |k, s| (k as f64 * s).sin() * (1.0 - (-s).exp()));
        let full = m_norm_sq(&eta, 0.0);
        for r in [1.0, 1.5, 3.0, 10.0, 40.0] {
            assert!(tail_function(&eta, r).unwrap() <= full * (1.0 + 1e-12));
        }
    }
}
