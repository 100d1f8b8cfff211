//! Pareto-optimal contracts: first-best piece rates and transfers,
//! capacity-equivalent scaling, second-best KKT solutions, and the
//! piece-rate/transfer/distortion decomposition.

mod capacity;
mod distortion;
mod first_best;
mod oracle;
mod second_best;

pub use capacity::alpha_star;
pub use distortion::{
    debt_equity_split, decompose, decompose_with_tolerance, gamma_from_duals, gamma_risk_averse,
    gamma_risk_averse_bregman, Gamma, Securities, DECOMPOSE_TOL,
};
pub use first_best::{alpha_prime, first_best_frontier, FirstBest};
pub use oracle::{brute_force_pareto, OracleResult, DEFAULT_ORACLE_GRID};
pub use second_best::{
    pareto_solve, second_best_solve, solve_for_reservation, Binding, ParetoSolution, ReservationSolution, SecondBest,
    PRINCIPAL_KKT_TOL,
};

use serde::Serialize;

use crate::model::{Matrix, StateTransfer};

/// `b = αy − β − γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub alpha: f64,
    pub beta: StateTransfer,
    pub gamma: Matrix,
    /// Decision penalty `γ̂(d)` for Shannon costs.
    pub gamma_hat: Option<Vec<f64>>,
}

/// Multipliers certifying a Pareto-optimal profile.
#[derive(Clone, Debug, PartialEq)]
pub struct DualCertificate {
    /// Liability-limit multipliers; zero at free cells.
    pub lambda: Matrix,
    /// Participation multiplier in `[0,1]`.
    pub xi: f64,
    /// Simplex multipliers `τ(θ) = π(θ)β(θ) − ξρ(θ)`.
    pub tau: Vec<f64>,
    /// Agent state duals `ρ(θ)`.
    pub rho: Vec<f64>,
    /// `φ(d,θ) = p(d|θ)(1−ξ) − λ(d,θ)/π(θ)`.
    pub phi: Matrix,
    /// Capacity multiplier.
    pub mu: f64,
    /// Cells where both liability limits bind (`y = 0`); `λ` is unrestricted there.
    pub both_bound: Vec<(usize, usize)>,
}

impl DualCertificate {
    pub fn phi_from(p: &Matrix, prior: &[f64], lambda: &Matrix, xi: f64) -> Matrix {
        Matrix::from_fn(p.nrows(), p.ncols(), |d, t| {
            p[(d, t)] * (1.0 - xi) - lambda[(d, t)] / prior[t]
        })
    }
}

/// Serializable view of a matrix as rows.
#[derive(Serialize)]
pub struct Rows(pub Vec<Vec<f64>>);

impl From<&Matrix> for Rows {
    fn from(m: &Matrix) -> Self {
        Rows((0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect())
    }
}
