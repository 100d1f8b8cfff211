//! Domain types for the contracting problem and the exact payoff and
//! probability algebra shared by every solver.
//!
//! Matrices are dense `f64` with decisions on rows and states on columns.
//! Labels live only on [`ProblemInstance`]; all math runs on indices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Column sums of an experiment must equal one within this tolerance.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Full-support prior over states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Prior(Vec<f64>);

impl Prior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("prior must have at least one state".into()));
        }
        if let Some(bad) = probs.iter().find(|&&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "prior entries must be strictly positive, found {bad}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("prior sums to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    /// Two-state prior from the probability of the second state.
    pub fn binary(second: f64) -> Result<Self> {
        Self::new(vec![1.0 - second, second])
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.0.iter().enumerate().map(|(t, &w)| w * f(t)).sum()
    }
}

impl std::ops::Index<usize> for Prior {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Prior {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Prior::new(v)
    }
}

impl From<Prior> for Vec<f64> {
    fn from(p: Prior) -> Vec<f64> {
        p.0
    }
}

/// Payment schedule `b(d, θ)`. Infeasible schedules are representable;
/// use [`Contract::is_feasible`] to test the liability limits.
#[derive(Clone, Debug, PartialEq)]
pub struct Contract {
    payments: Matrix,
}

impl Contract {
    pub fn new(payments: Matrix) -> Result<Self> {
        if payments.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("contract payments must be finite".into()));
        }
        Ok(Self { payments })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?)
    }

    pub fn zeros(decisions: usize, states: usize) -> Self {
        Self {
            payments: Matrix::zeros(decisions, states),
        }
    }

    pub fn payments(&self) -> &Matrix {
        &self.payments
    }

    pub fn into_inner(self) -> Matrix {
        self.payments
    }

    pub fn get(&self, d: usize, t: usize) -> f64 {
        self.payments[(d, t)]
    }

    pub fn decisions(&self) -> usize {
        self.payments.nrows()
    }

    pub fn states(&self) -> usize {
        self.payments.ncols()
    }

    /// `b(d,θ) − β(θ)`.
    pub fn apply_transfer(&self, transfer: &StateTransfer) -> Result<Contract> {
        if transfer.0.len() != self.states() {
            return Err(Error::DimensionMismatch(format!(
                "transfer has {} states, contract has {}",
                transfer.0.len(),
                self.states()
            )));
        }
        let mut m = self.payments.clone();
        for ((_, t), v) in indexed_mut(&mut m) {
            *v -= transfer.0[t];
        }
        Ok(Contract { payments: m })
    }

    pub fn scale(&self, alpha: f64) -> Contract {
        Contract {
            payments: &self.payments * alpha,
        }
    }

    /// Entrywise truncation into the liability limits `[0, y]`.
    pub fn truncate(&self, output: &Matrix) -> Contract {
        Contract {
            payments: self.payments.zip_map(output, |b, y| b.max(0.0).min(y.max(0.0))),
        }
    }

    pub fn is_feasible(&self, output: &Matrix, tol: f64) -> bool {
        self.payments.shape() == output.shape()
            && self
                .payments
                .iter()
                .zip(output.iter())
                .all(|(&b, &y)| b >= -tol && b <= y + tol)
    }
}

/// Conditional decision probabilities `p(d|θ)`; each column is a
/// distribution over decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    conditionals: Matrix,
}

impl Experiment {
    pub fn new(conditionals: Matrix) -> Result<Self> {
        for t in 0..conditionals.ncols() {
            let col = conditionals.column(t);
            if let Some(bad) = col.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::InvalidInput(format!(
                    "experiment entry {bad} outside [0,1] in state {t}"
                )));
            }
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidInput(format!("experiment column {t} sums to {s}")));
            }
        }
        Ok(Self { conditionals })
    }

    /// Clamps negatives to zero and renormalizes each column.
    pub fn normalized(mut conditionals: Matrix) -> Result<Self> {
        for t in 0..conditionals.ncols() {
            let mut col = conditionals.column_mut(t);
            col.iter_mut().for_each(|x| *x = x.max(0.0));
            let s: f64 = col.iter().sum();
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidInput(format!("column {t} cannot be normalized")));
            }
            col /= s;
        }
        Self::new(conditionals)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?)
    }

    /// Every state maps to the same distribution over decisions.
    pub fn uninformative(decision_probs: &[f64], states: usize) -> Result<Self> {
        let m = Matrix::from_fn(decision_probs.len(), states, |d, _| decision_probs[d]);
        Self::new(m)
    }

    pub fn conditionals(&self) -> &Matrix {
        &self.conditionals
    }

    pub fn get(&self, d: usize, t: usize) -> f64 {
        self.conditionals[(d, t)]
    }

    pub fn decisions(&self) -> usize {
        self.conditionals.nrows()
    }

    pub fn states(&self) -> usize {
        self.conditionals.ncols()
    }

    /// Smallest conditional probability, used for interior checks.
    pub fn min_entry(&self) -> f64 {
        self.conditionals.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Experiment) -> f64 {
        (&self.conditionals - &other.conditionals).amax()
    }
}

/// Per-state transfer `β(θ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateTransfer(pub Vec<f64>);

impl StateTransfer {
    pub fn zeros(states: usize) -> Self {
        Self(vec![0.0; states])
    }

    /// `β(θ) = min_d α·y(d,θ)`: brings the smallest payment of each state to zero.
    pub fn min_payment(output: &Matrix, alpha: f64) -> Self {
        Self(
            (0..output.ncols())
                .map(|t| {
                    output
                        .column(t)
                        .iter()
                        .map(|&y| alpha * y)
                        .fold(f64::INFINITY, f64::min)
                })
                .collect(),
        )
    }
}

/// Stochastic post-processing `g(d′|d)` of decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct Garbling {
    kernel: Matrix,
}

impl Garbling {
    pub fn new(kernel: Matrix) -> Result<Self> {
        for r in 0..kernel.nrows() {
            let row = kernel.row(r);
            if row.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                return Err(Error::NonStochastic(format!("row {r} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::NonStochastic(format!("row {r} sums to {s}")));
            }
        }
        Ok(Self { kernel })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            kernel: Matrix::identity(n, n),
        }
    }

    /// Every input decision maps to the same output distribution.
    pub fn total(inputs: usize, row: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_fn(inputs, row.len(), |_, j| row[j]))
    }

    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }

    /// Apply `self` first, then `next`.
    pub fn then(&self, next: &Garbling) -> Result<Garbling> {
        if self.kernel.ncols() != next.kernel.nrows() {
            return Err(Error::DimensionMismatch("garbling composition".into()));
        }
        Ok(Garbling {
            kernel: &self.kernel * &next.kernel,
        })
    }
}

/// Expected payoffs of a contract/experiment profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffReport {
    pub expected_output: f64,
    pub expected_payment: f64,
    pub cost: f64,
    pub agent_utility: f64,
    pub principal_utility: f64,
    pub welfare: f64,
}

/// A contracting problem: output, prior, information cost and capacity.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub decisions: Vec<String>,
    pub states: Vec<String>,
    pub output: Matrix,
    pub prior: Prior,
    /// Upper bound on experiment cost; `f64::INFINITY` when unconstrained.
    pub capacity: f64,
    pub cost: CostModel,
}

impl ProblemInstance {
    pub fn new(
        decisions: Vec<String>,
        states: Vec<String>,
        output: Matrix,
        prior: Prior,
        capacity: f64,
        cost: CostModel,
    ) -> Result<Self> {
        if decisions.is_empty() || states.is_empty() {
            return Err(Error::InvalidInput("need at least one decision and one state".into()));
        }
        if output.shape() != (decisions.len(), states.len()) {
            return Err(Error::DimensionMismatch(format!(
                "output is {}x{}, labels give {}x{}",
                output.nrows(),
                output.ncols(),
                decisions.len(),
                states.len()
            )));
        }
        if prior.len() != states.len() {
            return Err(Error::DimensionMismatch("prior length differs from state count".into()));
        }
        if output.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidInput("output must be finite".into()));
        }
        if capacity.is_nan() || capacity < 0.0 {
            return Err(Error::InvalidInput("capacity must be nonnegative".into()));
        }
        Ok(Self {
            decisions,
            states,
            output,
            prior,
            capacity,
            cost,
        })
    }

    /// Instance with generated labels `d1..`, `θ1..`.
    pub fn unlabeled(output: Matrix, prior: Prior, capacity: f64, cost: CostModel) -> Result<Self> {
        let decisions = (1..=output.nrows()).map(|i| format!("d{i}")).collect();
        let states = (1..=output.ncols()).map(|i| format!("theta{i}")).collect();
        Self::new(decisions, states, output, prior, capacity, cost)
    }

    pub fn n_decisions(&self) -> usize {
        self.output.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.output.ncols()
    }

    /// Output itself as a contract (`b = y`).
    pub fn output_contract(&self) -> Contract {
        Contract {
            payments: self.output.clone(),
        }
    }

    pub fn with_capacity(&self, capacity: f64) -> Self {
        Self {
            capacity,
            ..self.clone()
        }
    }

    pub fn with_prior(&self, prior: Prior) -> Self {
        Self { prior, ..self.clone() }
    }

    /// Sub-instance restricted to the listed decisions.
    pub fn restrict(&self, keep: &[usize]) -> Self {
        let output = Matrix::from_fn(keep.len(), self.n_states(), |i, t| self.output[(keep[i], t)]);
        Self {
            decisions: keep.iter().map(|&d| self.decisions[d].clone()).collect(),
            output,
            ..self.clone()
        }
    }
}

pub fn matrix_from_rows(rows: &[&[f64]]) -> Result<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn indexed_mut(m: &mut Matrix) -> impl Iterator<Item = ((usize, usize), &mut f64)> {
    let rows = m.nrows();
    m.iter_mut().enumerate().map(move |(k, v)| ((k % rows, k / rows), v))
}

fn check_dims(p: &Experiment, prior: &Prior) -> Result<()> {
    if p.states() != prior.len() {
        return Err(Error::DimensionMismatch(format!(
            "experiment has {} states, prior has {}",
            p.states(),
            prior.len()
        )));
    }
    Ok(())
}

/// `p(d) = Σ_θ π(θ) p(d|θ)`.
pub fn marginal(p: &Experiment, prior: &Prior) -> Result<Vec<f64>> {
    check_dims(p, prior)?;
    Ok(marginal_unchecked(p.conditionals(), prior.as_slice()))
}

pub(crate) fn marginal_unchecked(p: &Matrix, prior: &[f64]) -> Vec<f64> {
    (0..p.nrows())
        .map(|d| (0..p.ncols()).map(|t| prior[t] * p[(d, t)]).sum())
        .collect()
}

/// Bayes posterior `p(·|d)` over states.
pub fn posterior(p: &Experiment, prior: &Prior, decision: usize) -> Result<Vec<f64>> {
    check_dims(p, prior)?;
    if decision >= p.decisions() {
        return Err(Error::DimensionMismatch(format!("no decision {decision}")));
    }
    let joint: Vec<f64> = (0..p.states()).map(|t| prior[t] * p.get(decision, t)).collect();
    let total: f64 = joint.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMarginal { decision });
    }
    Ok(joint.into_iter().map(|j| j / total).collect())
}

/// Posteriors for every decision that is sent with positive probability.
pub fn posteriors(p: &Experiment, prior: &Prior) -> Result<Vec<Option<Vec<f64>>>> {
    (0..p.decisions())
        .map(|d| match posterior(p, prior, d) {
            Ok(q) => Ok(Some(q)),
            Err(Error::ZeroMarginal { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// `E_p[f] = Σ_θ π(θ) Σ_d p(d|θ) f(d,θ)`.
pub fn expectation(p: &Experiment, prior: &Prior, f: &Matrix) -> Result<f64> {
    check_dims(p, prior)?;
    if f.shape() != p.conditionals().shape() {
        return Err(Error::DimensionMismatch(format!(
            "payoff matrix is {:?}, experiment is {:?}",
            f.shape(),
            p.conditionals().shape()
        )));
    }
    Ok(expectation_unchecked(p.conditionals(), prior.as_slice(), f))
}

pub(crate) fn expectation_unchecked(p: &Matrix, prior: &[f64], f: &Matrix) -> f64 {
    let mut acc = 0.0;
    for t in 0..p.ncols() {
        let mut col = 0.0;
        for d in 0..p.nrows() {
            col += p[(d, t)] * f[(d, t)];
        }
        acc += prior[t] * col;
    }
    acc
}

pub fn evaluate_profile(b: &Contract, p: &Experiment, inst: &ProblemInstance) -> Result<PayoffReport> {
    if b.payments().shape() != inst.output.shape() {
        return Err(Error::DimensionMismatch("contract shape differs from output".into()));
    }
    let expected_output = expectation(p, &inst.prior, &inst.output)?;
    let expected_payment = expectation(p, &inst.prior, b.payments())?;
    let cost = inst.cost.value(p, &inst.prior)?;
    Ok(PayoffReport {
        expected_output,
        expected_payment,
        cost,
        agent_utility: expected_payment - cost,
        principal_utility: expected_output - expected_payment,
        welfare: expected_output - cost,
    })
}

/// `p′(d′|θ) = Σ_d p(d|θ) g(d′|d)`.
pub fn garble(p: &Experiment, g: &Garbling) -> Result<Experiment> {
    if g.kernel().nrows() != p.decisions() {
        return Err(Error::DimensionMismatch(format!(
            "garbling expects {} inputs, experiment has {} decisions",
            g.kernel().nrows(),
            p.decisions()
        )));
    }
    let out = g.kernel().transpose() * p.conditionals();
    Experiment::normalized(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;

    fn example() -> ProblemInstance {
        ProblemInstance::unlabeled(
            matrix_from_rows(&[&[0.0, 10.0], &[5.0, 5.0]]).unwrap(),
            Prior::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap(),
            0.5,
            CostModel::shannon(),
        )
        .unwrap()
    }

    #[test]
    fn marginal_of_second_best_experiment() {
        let p = Experiment::from_rows(&[&[0.160, 0.514], &[0.840, 0.486]]).unwrap();
        let m = marginal(&p, &example().prior).unwrap();
        assert!((m[0] - 0.278).abs() < 0.002, "{m:?}");
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_experiment_has_uniform_marginal() {
        let p = Experiment::uninformative(&[1.0 / 3.0; 3], 4).unwrap();
        let prior = Prior::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for m in marginal(&p, &prior).unwrap() {
            assert!((m - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn marginal_rejects_dimension_mismatch() {
        let p = Experiment::uninformative(&[0.5, 0.5], 3).unwrap();
        assert!(matches!(
            marginal(&p, &Prior::uniform(2).unwrap()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn uninformative_posterior_is_prior() {
        let prior = Prior::new(vec![0.2, 0.3, 0.5]).unwrap();
        let p = Experiment::uninformative(&[0.25, 0.75], 3).unwrap();
        for d in 0..2 {
            let q = posterior(&p, &prior, d).unwrap();
            for t in 0..3 {
                assert!((q[t] - prior[t]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn posterior_of_unsent_signal_is_an_error() {
        let p = Experiment::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(
            posterior(&p, &Prior::uniform(2).unwrap(), 1),
            Err(Error::ZeroMarginal { decision: 1 })
        );
    }

    #[test]
    fn zero_contract_leaves_all_output_to_principal() {
        let inst = example();
        let p = Experiment::from_rows(&[&[0.3, 0.6], &[0.7, 0.4]]).unwrap();
        let r = evaluate_profile(&Contract::zeros(2, 2), &p, &inst).unwrap();
        assert_eq!(r.expected_payment, 0.0);
        assert_eq!(r.principal_utility, r.expected_output);
    }

    #[test]
    fn comparison_rows_from_rounded_profiles() {
        let inst = example();
        let y_minus_beta = Contract::from_rows(&[&[-3.836, 3.404], &[1.164, -1.596]]).unwrap();
        let table_1a = Experiment::from_rows(&[&[0.007, 0.993], &[0.993, 0.007]]).unwrap();
        let r = evaluate_profile(&y_minus_beta, &table_1a, &inst).unwrap();
        assert!((r.expected_output - 6.633).abs() < 0.01, "{r:?}");
        assert!((r.expected_payment - 1.877).abs() < 0.01, "{r:?}");
        assert!((r.cost - 0.596).abs() < 0.005, "{r:?}");

        let optimal = Contract::from_rows(&[&[0.0, 1.00], &[0.702, 0.0]]).unwrap();
        let table_2b = Experiment::from_rows(&[&[0.160, 0.514], &[0.840, 0.486]]).unwrap();
        let r = evaluate_profile(&optimal, &table_2b, &inst).unwrap();
        assert!((r.expected_output - 5.321).abs() < 0.01, "{r:?}");
        assert!((r.expected_payment - 0.566).abs() < 0.01, "{r:?}");
        assert!((r.cost - 0.067).abs() < 0.01, "{r:?}");
        assert!((r.welfare - r.agent_utility - r.principal_utility).abs() < 1e-12);
    }

    #[test]
    fn shifting_two_line_contract() {
        let b = Contract::from_rows(&[&[0.0, 2.0], &[1.0, 1.0]]).unwrap();
        let shifted = b.apply_transfer(&StateTransfer(vec![0.0, 1.0])).unwrap();
        assert_eq!(shifted, Contract::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap());
        assert_eq!(b.apply_transfer(&StateTransfer::zeros(2)).unwrap(), b);
    }

    #[test]
    fn least_favourable_first_best_contract() {
        let inst = example();
        let alpha = 0.692;
        let beta = StateTransfer(vec![0.0, 5.0]);
        let b = inst.output_contract().apply_transfer(&beta).unwrap().scale(alpha);
        assert!(b.is_feasible(&inst.output, 0.0));
        assert!((b.get(0, 1) - alpha * 5.0).abs() < 1e-12);
        assert!((b.get(1, 0) - alpha * 5.0).abs() < 1e-12);
        for t in 0..2 {
            let m = (0..2).map(|d| b.get(d, t)).fold(f64::INFINITY, f64::min);
            assert_eq!(m, 0.0);
        }
        let same = inst
            .output_contract()
            .scale(alpha)
            .apply_transfer(&StateTransfer::min_payment(&inst.output, alpha))
            .unwrap();
        assert!((same.payments() - b.payments()).amax() < 1e-12);
    }

    #[test]
    fn garbling_identity_and_total() {
        let p = Experiment::from_rows(&[&[0.2, 0.9], &[0.8, 0.1]]).unwrap();
        assert_eq!(garble(&p, &Garbling::identity(2)).unwrap(), p);
        let g = Garbling::total(2, &[0.3, 0.7]).unwrap();
        let out = garble(&p, &g).unwrap();
        for t in 0..2 {
            assert!((out.get(0, t) - 0.3).abs() < 1e-15);
            assert!((out.get(1, t) - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn garbling_rejects_non_stochastic_kernel() {
        let bad = matrix_from_rows(&[&[0.5, 0.6], &[0.0, 1.0]]).unwrap();
        assert!(matches!(Garbling::new(bad), Err(Error::NonStochastic(_))));
        let neg = matrix_from_rows(&[&[1.5, -0.5], &[0.0, 1.0]]).unwrap();
        assert!(matches!(Garbling::new(neg), Err(Error::NonStochastic(_))));
    }

    #[test]
    fn prior_validation() {
        assert!(Prior::new(vec![0.5, 0.6]).is_err());
        assert!(Prior::new(vec![1.0, 0.0]).is_err());
        assert!(Prior::new(vec![]).is_err());
        assert!(Prior::binary(0.45).is_ok());
    }
}
