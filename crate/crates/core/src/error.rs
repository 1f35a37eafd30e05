use thiserror::Error;

/// Errors raised by the simulation engine and its validators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mode index {0}: modes are numbered from 1")]
    InvalidMode(i64),

    #[error("collocation grid of {points} points cannot resolve {required} (aliasing)")]
    Aliasing { points: usize, required: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel violates M1 (mu' + delta*mu <= 0, mu > 0) at s = {s}: {reason}")]
    KernelViolation { s: f64, reason: String },

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("s-grid infeasible: {0}")]
    GridInfeasible(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("CFL violation: dt = {dt} exceeds the smallest s-grid spacing {spacing} (between nodes {node} and {next})")]
    Cfl {
        dt: f64,
        spacing: f64,
        node: usize,
        next: usize,
    },

    #[error("past path does not cover the requested time {requested} (earliest available {available})")]
    InsufficientHistory { requested: f64, available: f64 },

    #[error("potential violates {assumption}: {reason}")]
    Potential {
        assumption: &'static str,
        reason: String,
    },

    #[error("noise violates {assumption}: {reason}")]
    Noise {
        assumption: &'static str,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("spectral-gap condition kappa*alpha_n_hat > a_phi fails: kappa*alpha = {lhs}, a_phi = {a_phi}")]
    SpectralGap { lhs: f64, a_phi: f64 },

    #[error("blow-up at t = {t}: {reason}")]
    BlowUp {
        t: f64,
        reason: String,
        /// Last finite coefficients of u, when available.
        last_finite: Option<Vec<f64>>,
    },

    #[error("oracle refused: {0}")]
    OracleRefused(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
