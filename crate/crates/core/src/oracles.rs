//! Reference solutions computed without the engine's quadratures or
//! transforms, used to certify it.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};

type Mat2 = [[f64; 2]; 2];

/// `exp(t M)` for a real 2x2 matrix, in closed form.
pub fn expm2(m: Mat2, t: f64) -> Mat2 {
    let tau = 0.5 * (m[0][0] + m[1][1]);
    let half = 0.5 * (m[0][0] - m[1][1]);
    let disc = half * half + m[0][1] * m[1][0];
    let n = [[m[0][0] - tau, m[0][1]], [m[1][0], m[1][1] - tau]];
    // exp(tM) = e^{tau t} [c I + s N] with N = M - tau I, N^2 = disc I.
    let (c, s) = if disc > 0.0 {
        let r = disc.sqrt();
        ((r * t).cosh(), (r * t).sinh() / r)
    } else if disc < 0.0 {
        let r = (-disc).sqrt();
        ((r * t).cos(), (r * t).sin() / r)
    } else {
        (1.0, t)
    };
    let e = (tau * t).exp();
    [
        [e * (c + s * n[0][0]), e * s * n[0][1]],
        [e * s * n[1][0], e * (c + s * n[1][1])],
    ]
}

/// Eigenvalues `(re, im)` of a real 2x2 matrix; `im >= 0` for the first.
pub fn eigenvalues2(m: Mat2) -> [(f64, f64); 2] {
    let tau = 0.5 * (m[0][0] + m[1][1]);
    let half = 0.5 * (m[0][0] - m[1][1]);
    let disc = half * half + m[0][1] * m[1][0];
    if disc >= 0.0 {
        let r = disc.sqrt();
        [(tau + r, 0.0), (tau - r, 0.0)]
    } else {
        let r = (-disc).sqrt();
        [(tau, r), (tau, -r)]
    }
}

/// Per-mode reduction of the linear, noiseless system with kernel
/// `mu0 exp(-rate s)`: with `m_k = int mu eta_k`,
/// `u_k' = -kappa a_k u_k - (1 - kappa) a_k m_k` and `m_k' = -rate m_k + (mu0/rate) u_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PronySystem {
    pub kappa: f64,
    pub mu0: f64,
    pub rate: f64,
}

impl PronySystem {
    /// Refuses kernels that are not exactly exponential.
    pub fn new(kappa: f64, kernel: &KernelSpec) -> Result<Self> {
        match kernel.family {
            KernelFamily::Exponential { mu0, rate } if rate > 0.0 => Ok(Self { kappa, mu0, rate }),
            _ => Err(Error::OracleRefused(
                "the reduction needs an exactly exponential kernel".into(),
            )),
        }
    }

    /// The 2x2 matrix of mode `k >= 1`.
    pub fn matrix(&self, k: usize) -> Mat2 {
        let a = (k as f64 * PI).powi(2);
        [
            [-self.kappa * a, -(1.0 - self.kappa) * a],
            [self.mu0 / self.rate, -self.rate],
        ]
    }

    /// `(u_k(t), m_k(t))` from `(u_k(0), m_k(0))`.
    pub fn solve_mode(&self, k: usize, u0: f64, m0: f64, t: f64) -> (f64, f64) {
        let e = expm2(self.matrix(k), t);
        (e[0][0] * u0 + e[0][1] * m0, e[1][0] * u0 + e[1][1] * m0)
    }
}

/// `u_k(t)` for every mode in `u0` (with `m_k(0) = 0`) at each time.
pub fn prony_solve(kappa: f64, kernel: &KernelSpec, u0: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>> {
    let sys = PronySystem::new(kappa, kernel)?;
    Ok(times
        .iter()
        .map(|&t| {
            u0.iter()
                .enumerate()
                .map(|(i, &u)| sys.solve_mode(i + 1, u, 0.0, t).0)
                .collect()
        })
        .collect())
}

/// Stationary variance `q^2 / (2 kappa alpha_k)` of mode `k` without memory.
pub fn ou_stationary_variance(k: usize, q: f64, kappa: f64) -> f64 {
    let a = (k as f64 * PI).powi(2);
    q * q / (2.0 * kappa * a)
}

/// Stationary variance of the semi-implicit Euler-Maruyama recursion
/// `u' = (u + q sqrt(dt) xi) / (1 + dt kappa alpha_k)`.
pub fn ou_discrete_stationary_variance(k: usize, q: f64, kappa: f64, dt: f64) -> f64 {
    let a = kappa * (k as f64 * PI).powi(2);
    q * q / (a * (2.0 + dt * a))
}

/// `E u_k(t)^2` of the memoryless linear mode started at `u0`.
pub fn ou_second_moment(k: usize, q: f64, kappa: f64, u0: f64, t: f64) -> f64 {
    let a = kappa * (k as f64 * PI).powi(2);
    let e = (-2.0 * a * t).exp();
    u0 * u0 * e + q * q / (2.0 * a) * (1.0 - e)
}

/// Composite trapezoid rule with `n` uniform intervals.
pub fn fine_quadrature(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..n {
        s += f(a + i as f64 * h);
    }
    s * h
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    #[test]
    fn expm_matches_series() {
        let m = [[-1.3, 0.4], [2.0, -0.7]];
        let t = 0.8;
        // Taylor series with many terms.
        let mut term = [[1.0, 0.0], [0.0, 1.0]];
        let mut sum = term;
        for n in 1..60 {
            let mut next = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    next[i][j] = (0..2).map(|l| term[i][l] * m[l][j]).sum::<f64>() * t / n as f64;
                }
            }
            term = next;
            for i in 0..2 {
                for j in 0..2 {
                    sum[i][j] += term[i][j];
                }
            }
        }
        let e = expm2(m, t);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(e[i][j], sum[i][j], epsilon = 1e-13);
            }
        }
        let osc = [[-4.0, -4.0], [1.0, -1.0]];
        let e = expm2(osc, 0.3);
        assert!(e.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn prony_examples() {
        let k = KernelSpec::exponential(1.0, 1.0, 1.0);
        let heat = prony_solve(1.0, &k, &[1.0, 1.0], &[0.1]).unwrap();
        assert_relative_eq!(heat[0][0], (-PI * PI * 0.1).exp(), max_relative = 1e-13);
        assert_relative_eq!(heat[0][1], (-4.0 * PI * PI * 0.1).exp(), max_relative = 1e-12);
        let zero = prony_solve(0.5, &k, &[0.0], &[3.0]).unwrap();
        assert_eq!(zero[0][0], 0.0);
        let sys = PronySystem::new(0.5, &k).unwrap();
        let ev = eigenvalues2(sys.matrix(1));
        let a = PI * PI;
        // trace and determinant of [[-a/2, -a/2], [1, -1]]
        assert_relative_eq!(2.0 * ev[0].0, -0.5 * a - 1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[0].0 * ev[0].0 + ev[0].1 * ev[0].1, a, epsilon = 1e-12);
        assert_relative_eq!(ev[0].1, 1.0315, epsilon = 1e-4);
        let table = KernelSpec::tabulated(vec![0.0, 1.0], vec![1.0, 0.5], 0.5).unwrap();
        assert!(matches!(PronySystem::new(0.5, &table), Err(Error::OracleRefused(_))));
    }

    #[test]
    fn ou_examples() {
        assert_relative_eq!(ou_stationary_variance(1, 1.0, 1.0), 0.050_660_591_821_168_89, epsilon = 1e-15);
        assert_eq!(ou_stationary_variance(1, 0.0, 1.0), 0.0);
        assert_relative_eq!(ou_stationary_variance(2, 1.0, 1.0), 1.0 / (8.0 * PI * PI), epsilon = 1e-15);
        let d = ou_discrete_stationary_variance(1, 1.0, 1.0, 1e-3);
        assert_relative_eq!(d, ou_stationary_variance(1, 1.0, 1.0), max_relative = 6e-3);
        assert_relative_eq!(ou_second_moment(1, 1.0, 1.0, 0.0, 100.0), ou_stationary_variance(1, 1.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn quadrature_examples() {
        let s_max = (1e10f64).ln();
        let n = 1 << 20;
        assert!((fine_quadrature(|s| (-s).exp(), 0.0, s_max, n) - 1.0).abs() < 1e-9);
        assert!((fine_quadrature(|s| s * (-s).exp(), 0.0, s_max, n) - 1.0).abs() < 1e-8);
        let v = fine_quadrature(|x| 2.0 * (PI * x).sin().powi(2), 0.0, 1.0, 1000);
        assert!((v - 1.0).abs() < 1e-10);
    }
}
