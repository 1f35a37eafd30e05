//! The history variable `eta(t, s) = int_0^s u(t - r) dr`.
//!
//! Two backends share one memory-age grid: [`HistoryField`] evolved by
//! upwind transport, and [`PastPath`], a ring buffer of `u` snapshots from
//! which `eta` is reconstructed exactly (for piecewise-linear `u` in time).

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel::{KFunction, MemorySpace};
use crate::spectral::{mode_eigenvalue, SpectralField};

/// Discrete `d/ds` norms above this are flagged as outside the transport domain.
pub const DERIVATIVE_FLAG: f64 = 1e6;
const BOUNDARY_TOL: f64 = 1e-10;

/// `eta_k(s_j)` for `k = 1..=N` on a memory-age grid, stored mode-major.
#[derive(Debug, Clone)]
pub struct HistoryField {
    space: Arc<MemorySpace>,
    n_modes: usize,
    data: Vec<f64>,
}

impl HistoryField {
    pub fn zeros(space: Arc<MemorySpace>, n_modes: usize) -> Self {
        let j = space.n_nodes();
        Self {
            space,
            n_modes,
            data: vec![0.0; n_modes * j],
        }
    }

    /// Samples `f(k, s)` at every mode `k >= 1` and node `s`.
    pub fn from_fn(space: Arc<MemorySpace>, n_modes: usize, f: impl Fn(usize, f64) -> f64) -> Self {
        let mut out = Self::zeros(space, n_modes);
        let j_len = out.n_nodes();
        for k in 1..=n_modes {
            for j in 0..j_len {
                let s = out.space.nodes()[j];
                out.data[(k - 1) * j_len + j] = f(k, s);
            }
        }
        out
    }

    /// Wraps a mode-major `N x J` matrix.
    pub fn from_data(space: Arc<MemorySpace>, n_modes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_modes * space.n_nodes() {
            return Err(Error::DimensionMismatch(format!(
                "history data has {} entries, expected {} x {}",
                data.len(),
                n_modes,
                space.n_nodes()
            )));
        }
        Ok(Self {
            space,
            n_modes,
            data,
        })
    }

    pub fn space(&self) -> &MemorySpace {
        &self.space
    }

    pub fn space_arc(&self) -> &Arc<MemorySpace> {
        &self.space
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_nodes(&self) -> usize {
        self.space.n_nodes()
    }

    pub fn same_space(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.space, &other.space) || self.space.grid() == other.space.grid()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Values `eta_k(s_j)` over `j` for mode `k >= 1`.
    pub fn mode_row(&self, k: usize) -> &[f64] {
        let j = self.n_nodes();
        &self.data[(k - 1) * j..k * j]
    }

    pub fn mode_row_mut(&mut self, k: usize) -> &mut [f64] {
        let j = self.n_nodes();
        &mut self.data[(k - 1) * j..k * j]
    }

    /// The spectral field `eta(s_j)`.
    pub fn at_node(&self, j: usize) -> SpectralField {
        SpectralField::from_coeffs((1..=self.n_modes).map(|k| self.mode_row(k)[j]).collect())
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) -> Result<()> {
        if self.data.len() != other.data.len() || !self.same_space(other) {
            return Err(Error::DimensionMismatch("histories on different grids".into()));
        }
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Nodal energies `E_j = sum_k alpha_k^power eta_k(s_j)^2`.
    pub fn energy(&self, power: f64) -> Vec<f64> {
        let j_len = self.n_nodes();
        let mut e = vec![0.0; j_len];
        for k in 1..=self.n_modes {
            let a = mode_eigenvalue(k).powf(power);
            for (ej, v) in e.iter_mut().zip(self.mode_row(k)) {
                *ej += a * v * v;
            }
        }
        e
    }

    /// `eta(0) = 0` to within `1e-10` of the largest entry.
    pub fn satisfies_boundary(&self) -> bool {
        let scale = self.max_abs().max(1.0);
        (1..=self.n_modes).all(|k| self.mode_row(k)[0].abs() <= BOUNDARY_TOL * scale)
    }
}

/// `T_mu eta = -d eta/ds` by one-sided differences taken from the smaller-`s`
/// side (a forward difference at `s = 0`).
pub fn apply_tmu(eta: &HistoryField) -> Result<HistoryField> {
    let nodes = eta.space.nodes();
    let j_len = nodes.len();
    if j_len < 2 {
        return Err(Error::GridInfeasible(
            "transport generator needs at least two nodes".into(),
        ));
    }
    let mut out = HistoryField::zeros(eta.space.clone(), eta.n_modes);
    for k in 1..=eta.n_modes {
        let row = eta.mode_row(k);
        let dst = out.mode_row_mut(k);
        dst[0] = -(row[1] - row[0]) / (nodes[1] - nodes[0]);
        for j in 1..j_len {
            dst[j] = -(row[j] - row[j - 1]) / (nodes[j] - nodes[j - 1]);
        }
    }
    Ok(out)
}

/// Result of the transport dissipativity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dissipativity {
    /// `<T_mu eta, eta>_{M^0}`.
    pub pairing: f64,
    /// `||eta||^2_{M^0}`.
    pub norm_sq: f64,
    /// `pairing + (delta/2) norm_sq`, non-positive in exact arithmetic.
    pub margin: f64,
    /// `||T_mu eta||_{M^0}` exceeded [`DERIVATIVE_FLAG`].
    pub flagged: bool,
}

/// `<T_mu eta, eta>_{M^0}` through the integrated-by-parts form
/// `1/2 int mu' E - 1/2 mu(s_max) E(s_max)`, `E = ||A^{1/2} eta(s)||^2`,
/// which is exact for histories that are linear between nodes.
pub fn transport_pairing(eta: &HistoryField) -> f64 {
    let space = eta.space();
    let e = eta.energy(1.0);
    let s_max = space.grid().s_max;
    let interior: f64 = space
        .deriv_weights()
        .iter()
        .zip(&e)
        .map(|(w, v)| w * v)
        .sum();
    0.5 * interior - 0.5 * space.kernel().mu(s_max) * e[e.len() - 1] + 0.5 * space.kernel().mu0() * e[0]
}

/// `<T_mu eta, eta>_{M^0}` pairing the upwind derivative with `eta` directly.
/// First-order accurate; kept as a cross-check of [`transport_pairing`].
pub fn transport_pairing_upwind(eta: &HistoryField) -> Result<f64> {
    let t = apply_tmu(eta)?;
    crate::kernel::weighted_inner(&t, eta, 0.0)
}

/// `<T_mu eta, eta>_{M^0} + (delta/2) ||eta||^2_{M^0}`.
pub fn dissipativity_margin(eta: &HistoryField) -> Result<Dissipativity> {
    let pairing = transport_pairing(eta);
    let norm_sq = crate::kernel::m_norm_sq(eta, 0.0);
    let transport = apply_tmu(eta)?;
    let flagged = crate::kernel::m_norm_sq(&transport, 0.0).sqrt() > DERIVATIVE_FLAG;
    Ok(Dissipativity {
        pairing,
        norm_sq,
        margin: pairing + 0.5 * eta.space().kernel().delta * norm_sq,
        flagged,
    })
}

/// Checks the upwind stability limit `dt <= min_j (s_{j+1} - s_j)`.
pub fn check_cfl(space: &MemorySpace, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let (h, j) = space.grid().min_spacing();
    if dt > h * (1.0 + 1e-12) {
        return Err(Error::Cfl {
            dt,
            spacing: h,
            node: j,
            next: j + 1,
        });
    }
    Ok(())
}

/// One explicit upwind step of `d_t eta = -d_s eta + u`, then `eta(0) = 0`.
pub fn evolve_history(eta: &mut HistoryField, u: &SpectralField, dt: f64) -> Result<()> {
    check_cfl(eta.space(), dt)?;
    evolve_unchecked(eta, u, dt);
    Ok(())
}

pub(crate) fn evolve_unchecked(eta: &mut HistoryField, u: &SpectralField, dt: f64) {
    let space = eta.space.clone();
    let nodes = space.nodes();
    let n = eta.n_modes;
    for k in 1..=n {
        let uk = if k <= u.n_modes() { u.mode(k) } else { 0.0 };
        let row = eta.mode_row_mut(k);
        // Descending order keeps row[j - 1] at the old time level.
        for j in (1..row.len()).rev() {
            let nu = dt / (nodes[j] - nodes[j - 1]);
            row[j] += -nu * (row[j] - row[j - 1]) + dt * uk;
        }
        row[0] = 0.0;
    }
}

/// `int mu(s) A eta(s) ds`: coefficient `k` is `sum_j W_j alpha_k eta_k(s_j)`.
pub fn memory_integral(eta: &HistoryField) -> SpectralField {
    let w = eta.space.weights();
    SpectralField::from_coeffs(
        (1..=eta.n_modes)
            .map(|k| {
                let row = eta.mode_row(k);
                mode_eigenvalue(k) * w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect(),
    )
}

/// Initial history `eta_0` for a past path.
#[derive(Debug, Clone)]
pub enum InitialHistory {
    Zero,
    /// Nodal values on the path's memory grid; linearly interpolated in `s`
    /// and held constant beyond `s_max`.
    Field(HistoryField),
}

impl InitialHistory {
    fn add_at(&self, s: f64, scale: f64, out: &mut [f64]) {
        if let InitialHistory::Field(f) = self {
            let nodes = f.space.nodes();
            let (j, t) = locate(nodes, s);
            for (k, o) in out.iter_mut().enumerate().take(f.n_modes) {
                let row = f.mode_row(k + 1);
                let v = if t == 0.0 { row[j] } else { row[j] + t * (row[j + 1] - row[j]) };
                *o += scale * v;
            }
        }
    }

    fn add_derivative_at(&self, s: f64, out: &mut [f64]) {
        if let InitialHistory::Field(f) = self {
            let nodes = f.space.nodes();
            if s >= *nodes.last().unwrap() {
                return;
            }
            let (j, _) = locate(nodes, s);
            let h = nodes[j + 1] - nodes[j];
            for (k, o) in out.iter_mut().enumerate().take(f.n_modes) {
                let row = f.mode_row(k + 1);
                *o += (row[j + 1] - row[j]) / h;
            }
        }
    }
}

/// Segment index `j` and fraction `t` with `s = s_j + t (s_{j+1} - s_j)`;
/// clamped to the last node.
fn locate(nodes: &[f64], s: f64) -> (usize, f64) {
    let last = nodes.len() - 1;
    if s >= nodes[last] {
        return (last, 0.0);
    }
    if s <= nodes[0] {
        return (0, 0.0);
    }
    let j = nodes.partition_point(|&x| x <= s) - 1;
    (j, (s - nodes[j]) / (nodes[j + 1] - nodes[j]))
}

/// Ring buffer of `u` snapshots at uniform spacing `dt` together with the
/// running trapezoid integral `C_n = int_{t0}^{t_n} u`.
///
/// `eta(t, s) = C(t) - C(t - s)` while `t - s >= t0`, and
/// `eta0(s - (t - t0)) + C(t)` otherwise; `C` between snapshots is the exact
/// integral of the linear interpolant of `u`.
#[derive(Debug, Clone)]
pub struct PastPath {
    n_modes: usize,
    dt: f64,
    t0: f64,
    /// Index of the newest snapshot (steps since `t0`).
    newest: u64,
    capacity: usize,
    u: VecDeque<Vec<f64>>,
    cum: VecDeque<Vec<f64>>,
    eta0: InitialHistory,
    /// Per grid node `j`: snapshot offset `i` and fraction `theta` with `s_j = (i + theta) dt`.
    offsets: Vec<(u64, f64)>,
    space: Arc<MemorySpace>,
}

impl PastPath {
    /// Starts a path at time `t0` with `u(t0) = u0` and `eta(t0) = eta0`.
    pub fn new(
        space: Arc<MemorySpace>,
        dt: f64,
        t0: f64,
        u0: &SpectralField,
        eta0: InitialHistory,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("snapshot spacing must be positive, got {dt}")));
        }
        if let InitialHistory::Field(f) = &eta0 {
            if f.n_modes() != u0.n_modes() {
                return Err(Error::DimensionMismatch(format!(
                    "initial history has {} modes, u has {}",
                    f.n_modes(),
                    u0.n_modes()
                )));
            }
        }
        let capacity = (space.grid().s_max / dt).ceil() as usize + 3;
        let offsets = space
            .nodes()
            .iter()
            .map(|&s| {
                let x = s / dt;
                let mut i = x.floor();
                let mut theta = x - i;
                if theta > 1.0 - 1e-12 {
                    i += 1.0;
                    theta = 0.0;
                }
                (i as u64, theta)
            })
            .collect();
        let n = u0.n_modes();
        let mut u = VecDeque::with_capacity(capacity);
        let mut cum = VecDeque::with_capacity(capacity);
        u.push_back(u0.coeffs().to_vec());
        cum.push_back(vec![0.0; n]);
        Ok(Self {
            n_modes: n,
            dt,
            t0,
            newest: 0,
            capacity,
            u,
            cum,
            eta0,
            offsets,
            space,
        })
    }

    /// Builds a path on `[t0, t_end]` by sampling `f` every `dt`, with
    /// `eta(t0) = 0`.
    pub fn from_fn(
        space: Arc<MemorySpace>,
        dt: f64,
        t0: f64,
        t_end: f64,
        f: impl Fn(f64) -> SpectralField,
    ) -> Result<Self> {
        let mut path = Self::new(space, dt, t0, &f(t0), InitialHistory::Zero)?;
        let steps = ((t_end - t0) / dt).round() as u64;
        for i in 1..=steps {
            path.push(&f(t0 + i as f64 * dt))?;
        }
        Ok(path)
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn space(&self) -> &Arc<MemorySpace> {
        &self.space
    }

    /// Time of the newest snapshot.
    pub fn time(&self) -> f64 {
        self.t0 + self.newest as f64 * self.dt
    }

    pub fn earliest_time(&self) -> f64 {
        self.t0 + (self.newest + 1 - self.u.len() as u64) as f64 * self.dt
    }

    pub fn current_u(&self) -> &[f64] {
        self.u.back().unwrap()
    }

    /// Appends `u(t + dt)`.
    pub fn push(&mut self, u_next: &SpectralField) -> Result<()> {
        if u_next.n_modes() != self.n_modes {
            return Err(Error::DimensionMismatch(format!(
                "snapshot has {} modes, path has {}",
                u_next.n_modes(),
                self.n_modes
            )));
        }
        let h = 0.5 * self.dt;
        let prev_u = self.u.back().unwrap();
        let prev_c = self.cum.back().unwrap();
        let next_c: Vec<f64> = (0..self.n_modes)
            .map(|k| prev_c[k] + h * (prev_u[k] + u_next.coeffs()[k]))
            .collect();
        if self.u.len() == self.capacity {
            let mut recycled_u = self.u.pop_front().unwrap();
            recycled_u.copy_from_slice(u_next.coeffs());
            self.u.push_back(recycled_u);
            self.cum.pop_front();
        } else {
            self.u.push_back(u_next.coeffs().to_vec());
        }
        self.cum.push_back(next_c);
        self.newest += 1;
        Ok(())
    }

    /// Buffer position of snapshot with absolute index `idx`.
    fn slot(&self, idx: u64) -> usize {
        (idx + self.u.len() as u64 - 1 - self.newest) as usize
    }

    /// Adds `scale * C(t_idx + phi dt)` into `out`; `phi in [0, 1)`.
    fn add_cum(&self, idx: u64, phi: f64, scale: f64, out: &mut [f64]) {
        let a = self.slot(idx);
        let c = &self.cum[a];
        if phi == 0.0 {
            for (o, ck) in out.iter_mut().zip(c) {
                *o += scale * ck;
            }
            return;
        }
        let ua = &self.u[a];
        let ub = &self.u[a + 1];
        let p1 = self.dt * phi;
        let p2 = self.dt * 0.5 * phi * phi;
        for k in 0..out.len() {
            out[k] += scale * (c[k] + p1 * ua[k] + p2 * (ub[k] - ua[k]));
        }
    }

    /// Adds `scale * u(t_idx + phi dt)` (linear interpolation) into `out`.
    fn add_u(&self, idx: u64, phi: f64, scale: f64, out: &mut [f64]) {
        let a = self.slot(idx);
        let ua = &self.u[a];
        if phi == 0.0 {
            for (o, v) in out.iter_mut().zip(ua) {
                *o += scale * v;
            }
            return;
        }
        let ub = &self.u[a + 1];
        for k in 0..out.len() {
            out[k] += scale * (ua[k] + phi * (ub[k] - ua[k]));
        }
    }

    /// Splits an absolute time into snapshot index and fraction, checking coverage.
    fn split_time(&self, t: f64) -> Result<(u64, f64)> {
        let earliest = self.earliest_time();
        let rel = (t - self.t0) / self.dt;
        let tol = 1e-9;
        if t < earliest - tol * self.dt || rel > self.newest as f64 + tol {
            return Err(Error::InsufficientHistory {
                requested: t,
                available: earliest,
            });
        }
        let mut i = rel.floor();
        let mut phi = rel - i;
        if phi > 1.0 - tol {
            i += 1.0;
            phi = 0.0;
        }
        if phi < tol {
            phi = 0.0;
        }
        let i = (i.max(0.0) as u64).min(self.newest);
        let earliest_idx = self.newest + 1 - self.u.len() as u64;
        Ok((i.max(earliest_idx), phi))
    }

    /// `eta(t, s)` for a `t` within the buffered window and `s >= 0`.
    pub fn eta_at(&self, t: f64, s: f64) -> Result<SpectralField> {
        let mut out = vec![0.0; self.n_modes];
        let elapsed = t - self.t0;
        let (it, pt) = self.split_time(t)?;
        self.add_cum(it, pt, 1.0, &mut out);
        if s <= elapsed {
            let (ip, pp) = self.split_time(t - s)?;
            self.add_cum(ip, pp, -1.0, &mut out);
        } else {
            self.eta0.add_at(s - elapsed, 1.0, &mut out);
        }
        Ok(SpectralField::from_coeffs(out))
    }

    /// `eta` at the current time on every grid node, written mode-major.
    pub fn materialize_into(&self, out: &mut HistoryField) {
        let j_len = self.offsets.len();
        let mut col = vec![0.0; self.n_modes];
        for j in 0..j_len {
            col.iter_mut().for_each(|v| *v = 0.0);
            self.eta_node(j, &mut col);
            for (k, v) in col.iter().enumerate() {
                out.data[k * j_len + j] = *v;
            }
        }
    }

    pub fn materialize(&self) -> HistoryField {
        let mut out = HistoryField::zeros(self.space.clone(), self.n_modes);
        self.materialize_into(&mut out);
        out
    }

    /// Adds `eta(t, s_j)` at the current time into `out`.
    fn eta_node(&self, j: usize, out: &mut [f64]) {
        let (i, theta) = self.offsets[j];
        let cur = self.newest;
        self.add_cum(cur, 0.0, 1.0, out);
        if i < cur || (i == cur && theta == 0.0) {
            // t - s_j = t_{cur - i} - theta dt.
            if theta == 0.0 {
                self.add_cum(cur - i, 0.0, -1.0, out);
            } else {
                self.add_cum(cur - i - 1, 1.0 - theta, -1.0, out);
            }
        } else {
            let s = self.space.nodes()[j];
            self.eta0.add_at(s - cur as f64 * self.dt, 1.0, out);
        }
    }

    /// `int mu A eta(t)` at the current time, written into `out`.
    pub fn memory_integral_into(&self, out: &mut [f64]) {
        let w = self.space.weights();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut col = vec![0.0; self.n_modes];
        for (j, &wj) in w.iter().enumerate() {
            col.iter_mut().for_each(|v| *v = 0.0);
            self.eta_node(j, &mut col);
            for (o, c) in out.iter_mut().zip(&col) {
                *o += wj * c;
            }
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o *= mode_eigenvalue(k + 1);
        }
    }

    pub fn memory_integral(&self) -> SpectralField {
        let mut out = vec![0.0; self.n_modes];
        self.memory_integral_into(&mut out);
        SpectralField::from_coeffs(out)
    }

    /// `||T_mu eta(t)||^2_{M^0}` with `d_s eta(t, s) = u(t - s)` read from the
    /// buffer (and from `eta0'` for ages older than the path).
    pub fn transport_norm_sq(&self) -> f64 {
        let w = self.space.weights();
        let cur = self.newest;
        let mut col = vec![0.0; self.n_modes];
        let mut total = 0.0;
        for (j, &(i, theta)) in self.offsets.iter().enumerate() {
            col.iter_mut().for_each(|v| *v = 0.0);
            if i < cur || (i == cur && theta == 0.0) {
                if theta == 0.0 {
                    self.add_u(cur - i, 0.0, 1.0, &mut col);
                } else {
                    self.add_u(cur - i - 1, 1.0 - theta, 1.0, &mut col);
                }
            } else {
                let s = self.space.nodes()[j];
                self.eta0.add_derivative_at(s - cur as f64 * self.dt, &mut col);
            }
            let e: f64 = col
                .iter()
                .enumerate()
                .map(|(k, v)| mode_eigenvalue(k + 1) * v * v)
                .sum();
            total += w[j] * e;
        }
        total
    }
}

/// `eta(t, s)` from the representation formula.
pub fn representation_eta(path: &PastPath, t: f64, s: f64) -> Result<SpectralField> {
    path.eta_at(t, s)
}

/// Relative discrepancy between the two forms of the memory term,
/// `int K(s) Delta u(t - s) ds` and `int mu(s) Delta eta(t, s) ds`, both over
/// `[0, s_max]` of the path's grid and with `mu = -K'` taken from the path's
/// memory space. The boundary term `K(s_max) Delta eta(t, s_max)` produced by
/// truncation is kept on the `mu` side.
pub fn check_integration_by_parts(path: &PastPath, k: &KFunction, t: f64) -> Result<f64> {
    let space = path.space();
    let nodes = space.nodes();
    let weight = crate::kernel::MemorySpace::new(space.grid().clone(), k.as_weight());
    let wk = weight.weights();
    let n = path.n_modes();

    let mut lhs = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for (j, &s) in nodes.iter().enumerate() {
        let past = t - s;
        let (i, phi) = path.split_time(past)?;
        let mut u = vec![0.0; n];
        path.add_u(i, phi, 1.0, &mut u);
        let eta = path.eta_at(t, s)?;
        for kk in 0..n {
            lhs[kk] += wk[j] * u[kk];
            rhs[kk] += space.weights()[j] * eta.coeffs()[kk];
        }
    }
    let s_max = space.grid().s_max;
    let eta_end = path.eta_at(t, s_max)?;
    let k_end = k.value(s_max);
    for (r, e) in rhs.iter_mut().zip(eta_end.coeffs()) {
        *r += k_end * e;
    }
    // Delta = -A on each mode.
    let (mut diff, mut scale) = (0.0, 0.0);
    for kk in 0..n {
        let a = mode_eigenvalue(kk + 1);
        let l = -a * lhs[kk];
        let r = -a * rhs[kk];
        diff += (l - r) * (l - r);
        scale += l * l;
    }
    if scale == 0.0 {
        return Ok(diff.sqrt());
    }
    Ok((diff / scale).sqrt())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use approx::assert_relative_eq;

    use super::*;
    use crate::kernel::{KernelSpec, SGrid};

    fn space(n_nodes: usize) -> Arc<MemorySpace> {
        Arc::new(
            MemorySpace::with_default_grid(KernelSpec::exponential(1.0, 1.0, 1.0), n_nodes, 1e-8)
                .unwrap(),
        )
    }

    #[test]
    fn tmu_examples() {
        let sp = space(256);
        let lin = HistoryField::from_fn(sp.clone(), 2, |k, s| if k == 1 { s } else { 0.0 });
        let t = apply_tmu(&lin).unwrap();
        for &v in t.mode_row(1) {
            assert_relative_eq!(v, -1.0, epsilon = 1e-9);
        }
        let zero = HistoryField::zeros(sp.clone(), 2);
        assert!(apply_tmu(&zero).unwrap().data().iter().all(|&v| v == 0.0));

        let eta = HistoryField::from_fn(sp.clone(), 1, |_, s| 1.0 - (-s).exp());
        let t = apply_tmu(&eta).unwrap();
        let h = sp.grid().max_spacing();
        for (j, &s) in sp.nodes().iter().enumerate() {
            assert!((t.mode_row(1)[j] + (-s).exp()).abs() <= h);
        }
    }

    #[test]
    fn dissipativity_equality_case() {
        let sp = space(256);
        let eta = HistoryField::from_fn(sp, 1, |_, s| 1.0 - (-s).exp());
        let d = dissipativity_margin(&eta).unwrap();
        let a1 = PI * PI;
        assert_relative_eq!(d.pairing, -a1 / 6.0, max_relative = 1e-4);
        assert_relative_eq!(d.norm_sq, a1 / 3.0, max_relative = 1e-4);
        assert!(d.margin.abs() <= 1e-6 * a1 / 3.0);
        assert!(!d.flagged);
        let up = transport_pairing_upwind(&eta).unwrap();
        assert_relative_eq!(up, -a1 / 6.0, max_relative = 2e-2);
    }

    #[test]
    fn upwind_pairing_converges_first_order() {
        let mut errs = Vec::new();
        for &n in &[128usize, 256, 512] {
            let sp = space(n);
            let eta = HistoryField::from_fn(sp, 1, |_, s| 1.0 - (-s).exp());
            let up = transport_pairing_upwind(&eta).unwrap();
            errs.push((up + PI * PI / 6.0).abs());
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order > 0.8, "observed order {order}");
        }
    }

    #[test]
    fn memory_integral_examples() {
        let sp = space(256);
        let eta = HistoryField::from_fn(sp.clone(), 2, |k, s| if k == 1 { s } else { 0.0 });
        let mi = memory_integral(&eta);
        // int_0^s_max s e^{-s} = 1 - (1 + s_max) e^{-s_max}
        let s_max = sp.grid().s_max;
        let exact = 1.0 - (1.0 + s_max) * (-s_max).exp();
        assert_relative_eq!(mi.mode(1), PI * PI * exact, max_relative = 1e-12);
        assert_eq!(mi.mode(2), 0.0);
        assert!(memory_integral(&HistoryField::zeros(sp, 2))
            .coeffs()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn cfl_is_enforced() {
        let sp = space(256);
        let (h, j) = sp.grid().min_spacing();
        let mut eta = HistoryField::zeros(sp, 1);
        let u = SpectralField::basis(1, 1);
        let err = evolve_history(&mut eta, &u, 2.0 * h).unwrap_err();
        match err {
            Error::Cfl { node, next, .. } => assert_eq!((node, next), (j, j + 1)),
            e => panic!("unexpected {e}"),
        }
        evolve_history(&mut eta, &u, h).unwrap();
    }

    #[test]
    fn transport_of_constant_input() {
        let grid = SGrid::build_with_stretch(1.0, 1.0, 1024, 1e-8, 4.0).unwrap();
        let sp = Arc::new(MemorySpace::new(grid, KernelSpec::exponential(1.0, 1.0, 1.0)));
        let dt = 0.5 * sp.grid().min_spacing().0;
        let mut eta = HistoryField::zeros(sp.clone(), 1);
        let u = SpectralField::basis(1, 1);
        let steps = (3.0 / dt).round() as usize;
        for _ in 0..steps {
            evolve_history(&mut eta, &u, dt).unwrap();
        }
        let t = steps as f64 * dt;
        assert_eq!(eta.mode_row(1)[0], 0.0);
        // Numerical diffusion smears the kink at s = t; compare in M^{-1}.
        let mut err = 0.0;
        let mut norm = 0.0;
        for (j, &s) in sp.nodes().iter().enumerate() {
            let exact = s.min(t);
            err += sp.weights()[j] * (eta.mode_row(1)[j] - exact).powi(2);
            norm += sp.weights()[j] * exact * exact;
        }
        assert!((err / norm).sqrt() < 2e-2, "relative error {}", (err / norm).sqrt());
    }

    #[test]
    fn representation_examples() {
        let sp = space(256);
        let dt = 1e-3;
        let path = PastPath::from_fn(sp.clone(), dt, 0.0, 30.0, |_| {
            SpectralField::basis(1, 1)
        })
        .unwrap();
        for s in [0.0, 0.37, 5.0, 18.0] {
            assert_relative_eq!(path.eta_at(30.0, s).unwrap().mode(1), s, epsilon = 1e-10);
        }
        assert_relative_eq!(path.eta_at(25.0, 2.5).unwrap().mode(1), 2.5, epsilon = 1e-10);

        // u(r) = r e_1: eta(t, s) = t s - s^2 / 2; trapezoid in time is exact for linear u.
        let path = PastPath::from_fn(sp.clone(), dt, 0.0, 25.0, |r| {
            SpectralField::from_coeffs(vec![r])
        })
        .unwrap();
        for s in [0.0, 1.2345, 7.0, 18.0] {
            assert_relative_eq!(
                path.eta_at(25.0, s).unwrap().mode(1),
                25.0 * s - 0.5 * s * s,
                max_relative = 1e-10
            );
        }

        // t = t0: eta = eta0.
        let eta0 = HistoryField::from_fn(sp.clone(), 1, |_, s| s * (-s).exp());
        let fresh = PastPath::new(
            sp.clone(),
            dt,
            0.0,
            &SpectralField::zeros(1),
            InitialHistory::Field(eta0.clone()),
        )
        .unwrap();
        let m = fresh.materialize();
        for (a, b) in m.data().iter().zip(eta0.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }

        assert!(matches!(
            path.eta_at(25.0 + 1.0, 1.0),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn ring_buffer_keeps_only_needed_span() {
        let sp = space(64);
        let dt = 0.01;
        let path = PastPath::from_fn(sp.clone(), dt, 0.0, 100.0, |r| {
            SpectralField::from_coeffs(vec![r.sin()])
        })
        .unwrap();
        assert!(path.time() - path.earliest_time() >= sp.grid().s_max);
        assert!(path.eta_at(100.0, sp.grid().s_max).is_ok());
        assert!(path.eta_at(100.0, sp.grid().s_max + 1.0).is_err());
    }

    #[test]
    fn path_memory_integral_matches_materialized() {
        let sp = space(256);
        let path = PastPath::from_fn(sp.clone(), 1e-3, 0.0, 5.0, |r| {
            SpectralField::from_coeffs(vec![r.cos(), (2.0 * r).sin()])
        })
        .unwrap();
        let a = path.memory_integral();
        let b = memory_integral(&path.materialize());
        for k in 1..=2 {
            assert_relative_eq!(a.mode(k), b.mode(k), max_relative = 1e-12);
        }
    }

    #[test]
    fn integration_by_parts_constant_past() {
        let sp = space(256);
        let path = PastPath::from_fn(sp.clone(), 1e-3, 0.0, 30.0, |_| {
            SpectralField::from_coeffs(vec![1.0, -0.5])
        })
        .unwrap();
        let k = KFunction::Exponential {
            amplitude: 1.0,
            rate: 1.0,
        };
        assert!(check_integration_by_parts(&path, &k, 30.0).unwrap() <= 1e-6);
        let zero = PastPath::from_fn(sp, 1e-3, 0.0, 30.0, |_| SpectralField::zeros(2)).unwrap();
        assert_eq!(check_integration_by_parts(&zero, &k, 30.0).unwrap(), 0.0);
    }
}
