//! Dirichlet sine basis on the unit interval.
//!
//! Fields are stored as coefficient vectors in the orthonormal basis
//! `e_k(x) = sqrt(2) sin(k pi x)`, `k = 1..N`, which diagonalizes the negative
//! Dirichlet Laplacian `A` with eigenvalues `alpha_k = (k pi)^2`. Coefficient
//! index `i` holds mode `k = i + 1`.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue `alpha_k = (k pi)^2` of the negative Dirichlet Laplacian on (0, 1).
pub fn eigenvalue(k: i64) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidMode(k));
    }
    Ok(mode_eigenvalue(k as usize))
}

/// Infallible eigenvalue for a 1-based mode index already known to be valid.
#[inline]
pub fn mode_eigenvalue(k: usize) -> f64 {
    let kp = k as f64 * PI;
    kp * kp
}

/// Eigenvalues for modes `1..=n`.
pub fn eigenvalues(n: usize) -> Vec<f64> {
    (1..=n).map(mode_eigenvalue).collect()
}

/// Modal coefficient vector of a field in the Dirichlet sine basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(n_modes: usize) -> Self {
        Self {
            coeffs: vec![0.0; n_modes],
        }
    }

    /// The basis element `e_k` embedded in an `n_modes`-dimensional space.
    pub fn basis(n_modes: usize, k: usize) -> Self {
        assert!(k >= 1 && k <= n_modes, "mode {k} outside 1..={n_modes}");
        let mut f = Self::zeros(n_modes);
        f.coeffs[k - 1] = 1.0;
        f
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Coefficient of mode `k` (1-based); zero beyond the truncation.
    pub fn mode(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.coeffs.get(k - 1).copied().unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// `||u||^2_{H^r} = sum_k alpha_k^r u_k^2`.
    pub fn sobolev_norm_sq(&self, r: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let a = mode_eigenvalue(i + 1);
                let w = if r == 0.0 { 1.0 } else { a.powf(r) };
                w * c * c
            })
            .sum()
    }

    /// `<u, v>_{H^r}`.
    pub fn sobolev_inner(&self, other: &Self, r: f64) -> f64 {
        debug_assert_eq!(self.n_modes(), other.n_modes());
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .enumerate()
            .map(|(i, (a, b))| {
                let w = if r == 0.0 {
                    1.0
                } else {
                    mode_eigenvalue(i + 1).powf(r)
                };
                w * a * b
            })
            .sum()
    }

    /// Orthogonal projection `P_n` onto the first `n` modes. The mode count
    /// of the result equals that of `self`.
    pub fn project(&self, n: usize) -> Self {
        let mut out = self.clone();
        for c in out.coeffs.iter_mut().skip(n) {
            *c = 0.0;
        }
        out
    }

    /// `(A u)_k = alpha_k u_k`.
    pub fn apply_a(&self) -> Self {
        Self {
            coeffs: self
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| mode_eigenvalue(i + 1) * c)
                .collect(),
        }
    }

    pub fn scale(&mut self, a: f64) {
        for c in &mut self.coeffs {
            *c *= a;
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        debug_assert_eq!(self.n_modes(), other.n_modes());
        for (c, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *c += a * o;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

/// Interior collocation nodes `x_j = j / (M + 1)`, `j = 1..M`, and the
/// matching discrete sine transform pair.
#[derive(Debug, Clone)]
pub struct CollocationGrid {
    n_points: usize,
    nodes: Vec<f64>,
    /// Row `k - 1` holds `sin(k pi x_j)` for all `j`.
    sines: Vec<f64>,
}

impl CollocationGrid {
    pub fn new(n_points: usize) -> Self {
        assert!(n_points > 0, "collocation grid needs at least one point");
        let m1 = n_points + 1;
        let period = 2 * m1;
        let base: Vec<f64> = (0..period)
            .map(|i| (PI * i as f64 / m1 as f64).sin())
            .collect();
        let mut sines = vec![0.0; n_points * n_points];
        for k in 1..=n_points {
            let row = &mut sines[(k - 1) * n_points..k * n_points];
            for (j, v) in row.iter_mut().enumerate() {
                *v = base[(k * (j + 1)) % period];
            }
        }
        let nodes = (1..=n_points).map(|j| j as f64 / m1 as f64).collect();
        Self {
            n_points,
            nodes,
            sines,
        }
    }

    /// Grid size that de-aliases a degree-`degree` polynomial nonlinearity
    /// acting on `n_modes` modes: `ceil((degree + 1) / 2) * N`.
    pub fn dealiased_size(n_modes: usize, degree: usize) -> usize {
        (degree + 1).div_ceil(2) * n_modes
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    fn check(&self, n_modes: usize) -> Result<()> {
        if n_modes > self.n_points {
            return Err(Error::Aliasing {
                points: self.n_points,
                required: n_modes,
            });
        }
        Ok(())
    }

    /// Point values `u(x_j) = sum_k u_k sqrt(2) sin(k pi x_j)`.
    pub fn to_physical(&self, u: &SpectralField) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_points];
        self.to_physical_into(u.coeffs(), &mut out)?;
        Ok(out)
    }

    /// Allocation-free variant of [`to_physical`](Self::to_physical).
    pub fn to_physical_into(&self, coeffs: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(coeffs.len())?;
        let m = self.n_points;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let a = SQRT_2 * c;
            let row = &self.sines[i * m..(i + 1) * m];
            for (o, s) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
        Ok(())
    }

    /// Inverse transform keeping the first `n_modes` coefficients:
    /// `u_k = sqrt(2) / (M + 1) sum_j v_j sin(k pi x_j)`.
    pub fn to_spectral(&self, values: &[f64], n_modes: usize) -> Result<SpectralField> {
        let mut out = vec![0.0; n_modes];
        self.to_spectral_into(values, &mut out)?;
        Ok(SpectralField::from_coeffs(out))
    }

    pub fn to_spectral_into(&self, values: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(out.len())?;
        if values.len() != self.n_points {
            return Err(Error::DimensionMismatch(format!(
                "expected {} point values, got {}",
                self.n_points,
                values.len()
            )));
        }
        let m = self.n_points;
        let scale = SQRT_2 / (m + 1) as f64;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.sines[i * m..(i + 1) * m];
            let s: f64 = row.iter().zip(values).map(|(a, b)| a * b).sum();
            *o = scale * s;
        }
        Ok(())
    }

    /// Discrete `L^2(0,1)` inner product `(1 / (M + 1)) sum_j f(x_j) g(x_j)`.
    pub fn l2_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (self.n_points + 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn eigenvalues_closed_form() {
        assert_relative_eq!(eigenvalue(1).unwrap(), 9.869_604_401_089_358, epsilon = 1e-12);
        assert_relative_eq!(eigenvalue(2).unwrap(), 4.0 * PI * PI, epsilon = 1e-12);
        assert_relative_eq!(eigenvalue(3).unwrap(), 9.0 * PI * PI, epsilon = 1e-12);
        assert!(matches!(eigenvalue(0), Err(Error::InvalidMode(0))));
        assert!(eigenvalue(-2).is_err());
        let ev = eigenvalues(20);
        assert!(ev.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sobolev_norm_examples() {
        let e1 = SpectralField::basis(4, 1);
        assert_relative_eq!(e1.sobolev_norm_sq(0.0), 1.0);
        assert_relative_eq!(e1.sobolev_norm_sq(1.0), PI * PI, epsilon = 1e-12);
        let mut u = e1.clone();
        u.axpy(1.0, &SpectralField::basis(4, 2));
        assert_relative_eq!(u.sobolev_norm_sq(2.0), 17.0 * PI.powi(4), epsilon = 1e-9);
    }

    #[test]
    fn projection_examples() {
        let mut u = SpectralField::basis(8, 1);
        u.axpy(1.0, &SpectralField::basis(8, 5));
        assert_eq!(u.project(3), SpectralField::basis(8, 1));
        assert_eq!(u.project(8), u);
        assert_eq!(u.project(100), u);
    }

    #[test]
    fn apply_a_examples() {
        let e1 = SpectralField::basis(3, 1);
        let ae1 = e1.apply_a();
        assert_relative_eq!(ae1.mode(1), PI * PI, epsilon = 1e-12);
        assert_eq!(ae1.mode(2), 0.0);
        assert_eq!(SpectralField::zeros(5).apply_a(), SpectralField::zeros(5));
    }

    #[test]
    fn to_physical_single_mode() {
        let g = CollocationGrid::new(3);
        let v = g.to_physical(&SpectralField::basis(1, 1)).unwrap();
        let expect = [
            SQRT_2 * (PI / 4.0).sin(),
            SQRT_2 * (PI / 2.0).sin(),
            SQRT_2 * (3.0 * PI / 4.0).sin(),
        ];
        for (a, b) in v.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
        let z = g.to_spectral(&[0.0; 3], 3).unwrap();
        assert_eq!(z, SpectralField::zeros(3));
    }

    #[test]
    fn undersized_grid_is_aliasing_error() {
        let g = CollocationGrid::new(4);
        let err = g.to_physical(&SpectralField::zeros(5)).unwrap_err();
        assert!(matches!(err, Error::Aliasing { points: 4, required: 5 }));
    }

    #[test]
    fn dealiased_sizes() {
        assert_eq!(CollocationGrid::dealiased_size(16, 3), 32);
        assert_eq!(CollocationGrid::dealiased_size(16, 5), 48);
        assert_eq!(CollocationGrid::dealiased_size(10, 1), 10);
    }

    fn field(max_len: usize) -> impl Strategy<Value = SpectralField> {
        prop::collection::vec(-1.0f64..1.0, 1..=max_len).prop_map(SpectralField::from_coeffs)
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(u in field(16), extra in 0usize..20) {
            let m = u.n_modes() + extra;
            let g = CollocationGrid::new(m.max(1));
            let v = g.to_physical(&u).unwrap();
            let back = g.to_spectral(&v, u.n_modes()).unwrap();
            for (a, b) in back.coeffs().iter().zip(u.coeffs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn parseval(u in field(16)) {
            let g = CollocationGrid::new(2 * u.n_modes());
            let v = g.to_physical(&u).unwrap();
            let discrete = g.l2_inner(&v, &v);
            prop_assert!((discrete - u.sobolev_norm_sq(0.0)).abs() < 1e-12);
        }

        #[test]
        fn poincare_and_spectral_identity(u in field(12)) {
            let au = u.apply_a();
            let pairing = au.sobolev_inner(&u, 0.0);
            prop_assert!((pairing - u.sobolev_norm_sq(1.0)).abs() <= 1e-9 * pairing.abs().max(1.0));
            prop_assert!(pairing >= mode_eigenvalue(1) * u.sobolev_norm_sq(0.0) * (1.0 - 1e-12));
        }

        #[test]
        fn projection_algebra(u in field(16), n1 in 1usize..20, n2 in 1usize..20, r in 0.0f64..3.0) {
            let p = u.project(n1);
            prop_assert_eq!(p.project(n1), p.clone());
            prop_assert_eq!(u.project(n1).project(n2), u.project(n1.min(n2)));
            prop_assert!(p.sobolev_norm_sq(r) <= u.sobolev_norm_sq(r) + 1e-15);
        }
    }
}
