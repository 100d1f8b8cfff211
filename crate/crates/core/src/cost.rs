//! Information costs: Shannon mutual information, generic posterior-separable
//! costs and Bregman costs built from a convex potential `H`.
//!
//! Every model here is posterior separable, `c(p) = Υ(π) − Σ_d p(d)Υ(q_d)`,
//! so [`CostModel::uncertainty`] is defined for all of them. Entropic
//! quantities are in nats.

use crate::error::{Error, Result};
use crate::model::{garble, marginal_unchecked, Experiment, Garbling, Matrix, Prior};

/// Interior threshold below which derivatives are refused.
pub const INTERIOR_EPS: f64 = 1e-12;

/// First-derivative finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Second-derivative finite-difference step.
const FD_STEP2: f64 = 1e-4;

/// Concave uncertainty function `Υ` on the state simplex.
#[derive(Clone, Debug, PartialEq)]
pub enum Uncertainty {
    /// Shannon entropy `−Σ q ln q`.
    Entropy,
    /// Gini impurity `1 − Σ q²`.
    Quadratic,
    /// Values on an equally spaced grid over `q(θ2) ∈ [0,1]`, two states
    /// only, linearly interpolated.
    Grid(Vec<f64>),
}

impl Uncertainty {
    pub fn eval(&self, q: &[f64]) -> f64 {
        match self {
            Uncertainty::Entropy => entropy(q),
            Uncertainty::Quadratic => 1.0 - q.iter().map(|x| x * x).sum::<f64>(),
            Uncertainty::Grid(values) => {
                let x = q.get(1).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                let n = values.len() - 1;
                let pos = x * n as f64;
                let i = (pos.floor() as usize).min(n - 1);
                let frac = pos - i as f64;
                values[i] * (1.0 - frac) + values[i + 1] * frac
            }
        }
    }

    fn validate(&self, states: usize) -> Result<()> {
        if let Uncertainty::Grid(v) = self {
            if states != 2 {
                return Err(Error::InvalidInput(
                    "gridded uncertainty functions need exactly two states".into(),
                ));
            }
            if v.len() < 2 || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(
                    "uncertainty grid needs at least two finite values".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Convex potential `H` whose Bregman divergence defines the cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BregmanKernel {
    /// `H = Σ q ln q`; the information cost matrix is the inverse Fisher
    /// information `diag(q) − qqᵀ` and the cost is mutual information.
    InverseFisher,
    /// `H = ½Σ q²`.
    Quadratic,
    /// `H = −Σ ln q`.
    Burg,
}

impl BregmanKernel {
    fn potential(self, q: &[f64]) -> f64 {
        match self {
            BregmanKernel::InverseFisher => -entropy(q),
            BregmanKernel::Quadratic => 0.5 * q.iter().map(|x| x * x).sum::<f64>(),
            BregmanKernel::Burg => -q.iter().map(|x| x.ln()).sum::<f64>(),
        }
    }

    fn potential_grad(self, q: &[f64]) -> Vec<f64> {
        match self {
            BregmanKernel::InverseFisher => q.iter().map(|x| x.ln() + 1.0).collect(),
            BregmanKernel::Quadratic => q.to_vec(),
            BregmanKernel::Burg => q.iter().map(|x| -1.0 / x).collect(),
        }
    }

    fn potential_hess_diag(self, q: &[f64]) -> Vec<f64> {
        match self {
            BregmanKernel::InverseFisher => q.iter().map(|x| 1.0 / x).collect(),
            BregmanKernel::Quadratic => vec![1.0; q.len()],
            BregmanKernel::Burg => q.iter().map(|x| 1.0 / (x * x)).collect(),
        }
    }

    /// `D_H(q‖r)`; infinite when `q` leaves the domain of `H`.
    pub fn divergence(self, q: &[f64], r: &[f64]) -> f64 {
        match self {
            BregmanKernel::InverseFisher => q
                .iter()
                .zip(r)
                .filter(|(&a, _)| a > 0.0)
                .map(|(&a, &b)| a * (a / b).ln())
                .sum(),
            BregmanKernel::Quadratic => 0.5 * q.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            BregmanKernel::Burg => {
                if q.iter().any(|&a| a <= 0.0) {
                    return f64::INFINITY;
                }
                q.iter().zip(r).map(|(&a, &b)| a / b - (a / b).ln() - 1.0).sum()
            }
        }
    }

    /// Information cost matrix `k(q) = diag(q)(I − 1qᵀ)∇²H(q)(I − q1ᵀ)diag(q)`.
    pub fn cost_matrix(self, q: &[f64]) -> Matrix {
        let n = q.len();
        let h = self.potential_hess_diag(q);
        // (I − q1ᵀ)diag(q) has column θ′ equal to q(θ′)(e_θ′ − q).
        let a = Matrix::from_fn(n, n, |i, j| q[j] * (f64::from(u8::from(i == j)) - q[i]));
        let hd = Matrix::from_fn(n, n, |i, j| if i == j { h[i] } else { 0.0 });
        a.transpose() * hd * a
    }
}

/// Experiment cost model.
#[derive(Clone, Debug, PartialEq)]
pub enum CostModel {
    /// Mutual information times `scale`.
    Shannon { scale: f64 },
    /// `Υ(π) − Σ_d p(d)Υ(q_d)` for a supplied concave `Υ`.
    PosteriorSeparable(Uncertainty),
    /// `Σ_d p(d) D_H(q_d‖π)`.
    Bregman(BregmanKernel),
}

/// Cost value with gradient and Hessian with respect to `p(d|θ)`.
///
/// Flat indices are `d·|Θ| + θ`.
#[derive(Clone, Debug)]
pub struct CostEvaluation {
    pub value: f64,
    pub gradient: Matrix,
    pub hessian: Matrix,
}

/// Outcome of a Blackwell monotonicity check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlackwellWitness {
    pub monotone: bool,
    pub original: f64,
    pub garbled: f64,
}

impl CostModel {
    pub fn shannon() -> Self {
        CostModel::Shannon { scale: 1.0 }
    }

    pub fn is_shannon(&self) -> bool {
        matches!(self, CostModel::Shannon { .. })
    }

    /// The scale of a Shannon-equivalent model, if any.
    pub fn shannon_scale(&self) -> Option<f64> {
        match self {
            CostModel::Shannon { scale } => Some(*scale),
            CostModel::Bregman(BregmanKernel::InverseFisher) => Some(1.0),
            CostModel::PosteriorSeparable(Uncertainty::Entropy) => Some(1.0),
            _ => None,
        }
    }

    pub fn validate(&self, states: usize) -> Result<()> {
        match self {
            CostModel::Shannon { scale } if !(scale.is_finite() && *scale > 0.0) => Err(Error::InvalidInput(format!(
                "Shannon scale must be positive, got {scale}"
            ))),
            CostModel::PosteriorSeparable(u) => u.validate(states),
            _ => Ok(()),
        }
    }

    /// Uncertainty function `Υ(q)`, normalized so the cost is
    /// `Υ(π) − Σ p(d)Υ(q_d)`.
    pub fn uncertainty(&self, q: &[f64]) -> f64 {
        match self {
            CostModel::Shannon { scale } => scale * entropy(q),
            CostModel::PosteriorSeparable(u) => u.eval(q),
            CostModel::Bregman(k) => -k.potential(q),
        }
    }

    /// `d/dx Υ(1−x, x)` for two states.
    pub fn uncertainty_slope(&self, x: f64) -> f64 {
        let logit = ((1.0 - x) / x).ln();
        match self {
            CostModel::Shannon { scale } => scale * logit,
            CostModel::PosteriorSeparable(Uncertainty::Entropy) | CostModel::Bregman(BregmanKernel::InverseFisher) => {
                logit
            }
            CostModel::PosteriorSeparable(Uncertainty::Quadratic) => 2.0 - 4.0 * x,
            CostModel::Bregman(BregmanKernel::Quadratic) => 1.0 - 2.0 * x,
            CostModel::Bregman(BregmanKernel::Burg) => 1.0 / x - 1.0 / (1.0 - x),
            CostModel::PosteriorSeparable(u @ Uncertainty::Grid(values)) => {
                let h = 0.25 / (values.len() - 1) as f64;
                let x = x.clamp(h, 1.0 - h);
                (u.eval(&[1.0 - x - h, x + h]) - u.eval(&[1.0 - x + h, x - h])) / (2.0 * h)
            }
        }
    }

    pub fn value(&self, p: &Experiment, prior: &Prior) -> Result<f64> {
        if p.states() != prior.len() {
            return Err(Error::DimensionMismatch(format!(
                "experiment has {} states, prior has {}",
                p.states(),
                prior.len()
            )));
        }
        self.validate(prior.len())?;
        Ok(self.value_unchecked(p.conditionals(), prior.as_slice()))
    }

    pub(crate) fn value_unchecked(&self, p: &Matrix, prior: &[f64]) -> f64 {
        match self {
            CostModel::Shannon { scale } => scale * mutual_information(p, prior),
            CostModel::PosteriorSeparable(u) => {
                let m = marginal_unchecked(p, prior);
                let mut acc = u.eval(prior);
                for (d, &md) in m.iter().enumerate() {
                    if md > 0.0 {
                        acc -= md * u.eval(&posterior_row(p, prior, d, md));
                    }
                }
                acc
            }
            CostModel::Bregman(k) => {
                let m = marginal_unchecked(p, prior);
                m.iter()
                    .enumerate()
                    .filter(|(_, &md)| md > 0.0)
                    .map(|(d, &md)| md * k.divergence(&posterior_row(p, prior, d, md), prior))
                    .sum()
            }
        }
    }

    /// Value, gradient and Hessian at an interior experiment.
    pub fn grad_hess(&self, p: &Experiment, prior: &Prior) -> Result<CostEvaluation> {
        self.grad_hess_eps(p, prior, INTERIOR_EPS)
    }

    pub fn grad_hess_eps(&self, p: &Experiment, prior: &Prior, eps: f64) -> Result<CostEvaluation> {
        let value = self.value(p, prior)?;
        let pm = p.conditionals();
        check_interior(pm, eps)?;
        let pi = prior.as_slice();
        let (gradient, hessian) = match self {
            CostModel::Shannon { scale } => shannon_derivatives(pm, pi, *scale),
            CostModel::Bregman(k) => bregman_derivatives(pm, pi, *k),
            CostModel::PosteriorSeparable(u) => fd_derivatives(pm, pi, u),
        };
        Ok(CostEvaluation {
            value,
            gradient,
            hessian,
        })
    }

    /// Gradient only; cheaper than [`CostModel::grad_hess`].
    pub fn gradient(&self, p: &Experiment, prior: &Prior) -> Result<Matrix> {
        check_interior(p.conditionals(), INTERIOR_EPS)?;
        if p.states() != prior.len() {
            return Err(Error::DimensionMismatch("experiment/prior state count".into()));
        }
        Ok(self.gradient_unchecked(p.conditionals(), prior.as_slice()))
    }

    pub(crate) fn gradient_unchecked(&self, p: &Matrix, pi: &[f64]) -> Matrix {
        match self {
            CostModel::Shannon { scale } => shannon_gradient(p, pi, *scale),
            CostModel::Bregman(k) => bregman_derivatives(p, pi, *k).0,
            CostModel::PosteriorSeparable(u) => fd_gradient(p, pi, u),
        }
    }
}

/// Shannon mutual information `I(θ; d)` (nats) with `0·ln 0 = 0`.
pub fn cost_shannon(p: &Experiment, prior: &Prior) -> Result<f64> {
    CostModel::shannon().value(p, prior)
}

pub fn cost_value(model: &CostModel, p: &Experiment, prior: &Prior) -> Result<f64> {
    model.value(p, prior)
}

pub fn cost_grad_hess(model: &CostModel, p: &Experiment, prior: &Prior) -> Result<CostEvaluation> {
    model.grad_hess(p, prior)
}

pub fn check_blackwell_monotone(
    model: &CostModel,
    p: &Experiment,
    g: &Garbling,
    prior: &Prior,
) -> Result<BlackwellWitness> {
    let original = model.value(p, prior)?;
    let garbled = model.value(&garble(p, g)?, prior)?;
    Ok(BlackwellWitness {
        monotone: garbled <= original + 1e-10,
        original,
        garbled,
    })
}

/// Shannon entropy in nats.
pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub(crate) fn mutual_information(p: &Matrix, prior: &[f64]) -> f64 {
    let m = marginal_unchecked(p, prior);
    let mut acc = 0.0;
    for d in 0..p.nrows() {
        for t in 0..p.ncols() {
            let x = p[(d, t)];
            if x > 0.0 {
                acc += prior[t] * x * (x / m[d]).ln();
            }
        }
    }
    acc.max(0.0)
}

fn posterior_row(p: &Matrix, prior: &[f64], d: usize, md: f64) -> Vec<f64> {
    (0..p.ncols()).map(|t| prior[t] * p[(d, t)] / md).collect()
}

fn check_interior(p: &Matrix, eps: f64) -> Result<()> {
    for d in 0..p.nrows() {
        for t in 0..p.ncols() {
            if p[(d, t)] <= eps {
                return Err(Error::BoundaryPoint {
                    decision: d,
                    state: t,
                    value: p[(d, t)],
                });
            }
        }
    }
    Ok(())
}

fn shannon_gradient(p: &Matrix, pi: &[f64], scale: f64) -> Matrix {
    let m = marginal_unchecked(p, pi);
    Matrix::from_fn(p.nrows(), p.ncols(), |d, t| scale * pi[t] * (p[(d, t)] / m[d]).ln())
}

fn shannon_derivatives(p: &Matrix, pi: &[f64], scale: f64) -> (Matrix, Matrix) {
    let (nd, nt) = p.shape();
    let m = marginal_unchecked(p, pi);
    let mut h = Matrix::zeros(nd * nt, nd * nt);
    for d in 0..nd {
        for t in 0..nt {
            for t2 in 0..nt {
                let diag = if t == t2 { pi[t] / p[(d, t)] } else { 0.0 };
                h[(d * nt + t, d * nt + t2)] = scale * (diag - pi[t] * pi[t2] / m[d]);
            }
        }
    }
    (shannon_gradient(p, pi, scale), h)
}

fn bregman_derivatives(p: &Matrix, pi: &[f64], k: BregmanKernel) -> (Matrix, Matrix) {
    let (nd, nt) = p.shape();
    let m = marginal_unchecked(p, pi);
    let h_pi = k.potential(pi);
    let g_pi = k.potential_grad(pi);
    let pi_dot = pi.iter().zip(&g_pi).map(|(a, b)| a * b).sum::<f64>();
    let mut grad = Matrix::zeros(nd, nt);
    let mut hess = Matrix::zeros(nd * nt, nd * nt);
    for d in 0..nd {
        let q = posterior_row(p, pi, d, m[d]);
        let h_q = k.potential(&q);
        let g_q = k.potential_grad(&q);
        let q_dot = q.iter().zip(&g_q).map(|(a, b)| a * b).sum::<f64>();
        for t in 0..nt {
            // Derivative of the homogeneous perspective Σ_d P_d D_H(P_d/|P_d| ‖ π)
            // with respect to the joint P(d,θ) = π(θ)p(d|θ).
            let dj = (h_q + g_q[t] - q_dot) - (h_pi + g_pi[t] - pi_dot);
            grad[(d, t)] = pi[t] * dj;
        }
        let km = k.cost_matrix(&q);
        for t in 0..nt {
            for t2 in 0..nt {
                hess[(d * nt + t, d * nt + t2)] = m[d] * km[(t, t2)] / (p[(d, t)] * p[(d, t2)]);
            }
        }
    }
    (grad, hess)
}

/// Directional derivatives of `Υ` along `e_θ − q` for every θ.
fn tangent_slopes(u: &Uncertainty, q: &[f64]) -> Vec<f64> {
    let n = q.len();
    let qmin = q.iter().cloned().fold(f64::INFINITY, f64::min);
    let h = FD_STEP.min(qmin / 4.0);
    (0..n)
        .map(|t| {
            let plus: Vec<f64> = (0..n).map(|i| q[i] + h * (delta(i, t) - q[i])).collect();
            let minus: Vec<f64> = (0..n).map(|i| q[i] - h * (delta(i, t) - q[i])).collect();
            (u.eval(&plus) - u.eval(&minus)) / (2.0 * h)
        })
        .collect()
}

fn fd_gradient(p: &Matrix, pi: &[f64], u: &Uncertainty) -> Matrix {
    let (nd, nt) = p.shape();
    let m = marginal_unchecked(p, pi);
    let mut grad = Matrix::zeros(nd, nt);
    for d in 0..nd {
        let q = posterior_row(p, pi, d, m[d]);
        let uq = u.eval(&q);
        let s = tangent_slopes(u, &q);
        for t in 0..nt {
            grad[(d, t)] = -pi[t] * (uq + s[t]);
        }
    }
    grad
}

fn fd_derivatives(p: &Matrix, pi: &[f64], u: &Uncertainty) -> (Matrix, Matrix) {
    let (nd, nt) = p.shape();
    let m = marginal_unchecked(p, pi);
    let mut hess = Matrix::zeros(nd * nt, nd * nt);
    for d in 0..nd {
        let q = posterior_row(p, pi, d, m[d]);
        let qmin = q.iter().cloned().fold(f64::INFINITY, f64::min);
        let h = FD_STEP2.min(qmin / 8.0);
        let dir = |t: usize| -> Vec<f64> { (0..nt).map(|i| delta(i, t) - q[i]).collect() };
        for t in 0..nt {
            let v = dir(t);
            for t2 in t..nt {
                let w = dir(t2);
                let at = |a: f64, b: f64| -> f64 {
                    let x: Vec<f64> = (0..nt).map(|i| q[i] + a * h * v[i] + b * h * w[i]).collect();
                    u.eval(&x)
                };
                let form = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
                let val = -pi[t] * pi[t2] / m[d] * form;
                hess[(d * nt + t, d * nt + t2)] = val;
                hess[(d * nt + t2, d * nt + t)] = val;
            }
        }
    }
    (fd_gradient(p, pi, u), hess)
}

fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::matrix_from_rows;
    use proptest::prelude::*;

    fn example_prior() -> Prior {
        Prior::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap()
    }

    fn exp(rows: &[&[f64]]) -> Experiment {
        Experiment::from_rows(rows).unwrap()
    }

    fn random_experiment(raw: &[f64], nd: usize, nt: usize) -> Experiment {
        Experiment::normalized(Matrix::from_fn(nd, nt, |d, t| raw[d * nt + t] + 0.05)).unwrap()
    }

    fn random_prior(raw: &[f64]) -> Prior {
        let s: f64 = raw.iter().map(|x| x + 0.1).sum();
        Prior::new(raw.iter().map(|x| (x + 0.1) / s).collect()).unwrap()
    }

    fn all_models() -> Vec<CostModel> {
        vec![
            CostModel::shannon(),
            CostModel::Shannon { scale: 2.5 },
            CostModel::PosteriorSeparable(Uncertainty::Entropy),
            CostModel::PosteriorSeparable(Uncertainty::Quadratic),
            CostModel::Bregman(BregmanKernel::InverseFisher),
            CostModel::Bregman(BregmanKernel::Quadratic),
            CostModel::Bregman(BregmanKernel::Burg),
        ]
    }

    #[test]
    fn shannon_cost_of_tabulated_experiments() {
        let pi = example_prior();
        let c = cost_shannon(&exp(&[&[0.007, 0.993], &[0.993, 0.007]]), &pi).unwrap();
        assert!((c - 0.596).abs() < 0.005, "{c}");
        let c = cost_shannon(&exp(&[&[0.211, 0.963], &[0.789, 0.037]]), &pi).unwrap();
        assert!((c - 0.293).abs() < 0.005, "{c}");
        let c = cost_shannon(&exp(&[&[0.160, 0.514], &[0.840, 0.486]]), &pi).unwrap();
        assert!((c - 0.067).abs() < 0.005, "{c}");
    }

    #[test]
    fn uninformative_experiments_are_free() {
        let pi = Prior::new(vec![0.2, 0.5, 0.3]).unwrap();
        let p = Experiment::uninformative(&[0.1, 0.6, 0.3], 3).unwrap();
        for model in all_models() {
            assert!(model.value(&p, &pi).unwrap().abs() < 1e-14, "{model:?}");
        }
    }

    #[test]
    fn shannon_bounded_by_prior_entropy() {
        let pi = example_prior();
        let c = cost_shannon(&exp(&[&[1.0, 0.0], &[0.0, 1.0]]), &pi).unwrap();
        assert!((c - entropy(pi.as_slice())).abs() < 1e-15);
    }

    #[test]
    fn gridded_uncertainty_interpolates() {
        let u = Uncertainty::Grid(vec![0.0, 1.0, 0.0]);
        assert!((u.eval(&[0.75, 0.25]) - 0.5).abs() < 1e-15);
        assert_eq!(u.eval(&[0.0, 1.0]), 0.0);
        let model = CostModel::PosteriorSeparable(u);
        assert!(model.validate(3).is_err());
    }

    #[test]
    fn derivatives_refuse_boundary_points() {
        let p = exp(&[&[1.0, 0.5], &[0.0, 0.5]]);
        let err = CostModel::shannon().grad_hess(&p, &example_prior()).unwrap_err();
        assert_eq!(
            err,
            Error::BoundaryPoint {
                decision: 1,
                state: 0,
                value: 0.0
            }
        );
    }

    #[test]
    fn inverse_fisher_matrix_shape() {
        let q = [0.2, 0.3, 0.5];
        let k = BregmanKernel::InverseFisher.cost_matrix(&q);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { q[i] * (1.0 - q[i]) } else { -q[i] * q[j] };
                assert!((k[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blackwell_trivial_garblings() {
        let pi = example_prior();
        let p = exp(&[&[0.2, 0.9], &[0.8, 0.1]]);
        for model in all_models() {
            let w = check_blackwell_monotone(&model, &p, &Garbling::identity(2), &pi).unwrap();
            assert!(w.monotone && (w.original - w.garbled).abs() < 1e-15);
            let total = Garbling::total(2, &[0.4, 0.6]).unwrap();
            let w = check_blackwell_monotone(&model, &p, &total, &pi).unwrap();
            assert!(w.monotone && w.garbled.abs() < 1e-14, "{model:?} {w:?}");
        }
    }

    /// Central differences of the analytic gradient along every coordinate.
    fn fd_of_gradient(model: &CostModel, p: &Experiment, pi: &Prior) -> Matrix {
        let (nd, nt) = (p.decisions(), p.states());
        let n = nd * nt;
        let h = 1e-6;
        let mut out = Matrix::zeros(n, n);
        for j in 0..n {
            let (dj, tj) = (j / nt, j % nt);
            let mut plus = p.conditionals().clone();
            let mut minus = plus.clone();
            plus[(dj, tj)] += h;
            minus[(dj, tj)] -= h;
            // Off-simplex evaluation: the formulas are homogeneous extensions.
            let gp = model.gradient_unchecked(&plus, pi.as_slice());
            let gm = model.gradient_unchecked(&minus, pi.as_slice());
            for i in 0..n {
                out[(i, j)] = (gp[(i / nt, i % nt)] - gm[(i / nt, i % nt)]) / (2.0 * h);
            }
        }
        out
    }

    /// Numerical gradient of the cost along single coordinates, extending
    /// the value homogeneously through unnormalized columns.
    fn fd_of_value(model: &CostModel, p: &Experiment, pi: &Prior) -> Matrix {
        let (nd, nt) = (p.decisions(), p.states());
        let h = 1e-6;
        Matrix::from_fn(nd, nt, |d, t| {
            let mut plus = p.conditionals().clone();
            let mut minus = plus.clone();
            plus[(d, t)] += h;
            minus[(d, t)] -= h;
            (model.value_unchecked(&plus, pi.as_slice()) - model.value_unchecked(&minus, pi.as_slice())) / (2.0 * h)
        })
    }

    #[test]
    fn posterior_separable_entropy_matches_shannon_derivatives() {
        let pi = Prior::new(vec![0.3, 0.3, 0.4]).unwrap();
        let p = exp(&[&[0.2, 0.5, 0.1], &[0.3, 0.1, 0.6], &[0.5, 0.4, 0.3]]);
        let a = CostModel::shannon().grad_hess(&p, &pi).unwrap();
        let b = CostModel::PosteriorSeparable(Uncertainty::Entropy)
            .grad_hess(&p, &pi)
            .unwrap();
        // The two extensions off the simplex differ by a per-state constant.
        let centre = |g: &Matrix| {
            let mut g = g.clone();
            for mut col in g.column_iter_mut() {
                let mean = col.mean();
                col.add_scalar_mut(-mean);
            }
            g
        };
        assert!((centre(&a.gradient) - centre(&b.gradient)).amax() < 1e-8);
        let diff = (&a.hessian - &b.hessian).amax();
        assert!(diff < 1e-5, "{diff}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn inverse_fisher_bregman_equals_shannon(
            raw in prop::collection::vec(0.0f64..1.0, 12),
            praw in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let p = random_experiment(&raw, 3, 4);
            let pi = random_prior(&praw);
            let a = cost_shannon(&p, &pi).unwrap();
            let b = CostModel::Bregman(BregmanKernel::InverseFisher).value(&p, &pi).unwrap();
            prop_assert!((a - b).abs() < 1e-8);
            let ga = CostModel::shannon().grad_hess(&p, &pi).unwrap();
            let gb = CostModel::Bregman(BregmanKernel::InverseFisher).grad_hess(&p, &pi).unwrap();
            prop_assert!((ga.hessian - gb.hessian).amax() < 1e-8);
        }

        #[test]
        fn hessians_match_finite_differences(
            raw in prop::collection::vec(0.0f64..1.0, 6),
            praw in prop::collection::vec(0.0f64..1.0, 2),
        ) {
            let p = random_experiment(&raw, 3, 2);
            let pi = random_prior(&praw);
            for model in [
                CostModel::shannon(),
                CostModel::Bregman(BregmanKernel::InverseFisher),
                CostModel::Bregman(BregmanKernel::Quadratic),
                CostModel::Bregman(BregmanKernel::Burg),
            ] {
                let ev = model.grad_hess(&p, &pi).unwrap();
                let fd = fd_of_gradient(&model, &p, &pi);
                prop_assert!((&ev.hessian - &fd).amax() < 1e-5, "{:?} {}", model, (&ev.hessian - fd).amax());
                prop_assert!((&ev.hessian - ev.hessian.transpose()).amax() < 1e-12);
            }
        }

        #[test]
        fn gradients_match_finite_differences(
            raw in prop::collection::vec(0.0f64..1.0, 6),
            praw in prop::collection::vec(0.0f64..1.0, 3),
        ) {
            let p = random_experiment(&raw, 2, 3);
            let pi = random_prior(&praw);
            for model in all_models() {
                let g = model.gradient(&p, &pi).unwrap();
                let fd = fd_of_value(&model, &p, &pi);
                prop_assert!((&g - &fd).amax() < 1e-6, "{:?} {}", model, (&g - fd).amax());
            }
        }

        #[test]
        fn bregman_hessian_is_block_diagonal_and_psd(
            raw in prop::collection::vec(0.0f64..1.0, 9),
            praw in prop::collection::vec(0.0f64..1.0, 3),
        ) {
            let p = random_experiment(&raw, 3, 3);
            let pi = random_prior(&praw);
            for kernel in [BregmanKernel::InverseFisher, BregmanKernel::Quadratic, BregmanKernel::Burg] {
                let ev = CostModel::Bregman(kernel).grad_hess(&p, &pi).unwrap();
                for i in 0..9 {
                    for j in 0..9 {
                        if i / 3 != j / 3 {
                            prop_assert_eq!(ev.hessian[(i, j)], 0.0);
                        }
                    }
                }
                let eig = ev.hessian.clone().symmetric_eigenvalues();
                prop_assert!(eig.iter().all(|&l| l > -1e-9), "{:?}", eig);
                let q: Vec<f64> = (0..3).map(|t| raw[t] / raw.iter().take(3).sum::<f64>().max(1e-9)).collect();
                if q.iter().all(|&x| x > 1e-3) {
                    let k = kernel.cost_matrix(&q);
                    for r in 0..3 {
                        prop_assert!(k.row(r).sum().abs() < 1e-9);
                    }
                    prop_assert!((&k - k.transpose()).amax() < 1e-12);
                }
            }
        }

        #[test]
        fn costs_are_nonnegative_and_convex(
            a in prop::collection::vec(0.0f64..1.0, 6),
            b in prop::collection::vec(0.0f64..1.0, 6),
            praw in prop::collection::vec(0.0f64..1.0, 2),
            t in 0.0f64..=1.0,
        ) {
            let p = random_experiment(&a, 3, 2);
            let p2 = random_experiment(&b, 3, 2);
            let pi = random_prior(&praw);
            let mix = Experiment::normalized(p.conditionals() * t + p2.conditionals() * (1.0 - t)).unwrap();
            for model in all_models() {
                let c1 = model.value(&p, &pi).unwrap();
                let c2 = model.value(&p2, &pi).unwrap();
                let cm = model.value(&mix, &pi).unwrap();
                prop_assert!(c1 >= -1e-12);
                prop_assert!(cm <= t * c1 + (1.0 - t) * c2 + 1e-10, "{:?}", model);
            }
        }

        #[test]
        fn shannon_hessian_annihilates_experiment(
            raw in prop::collection::vec(0.0f64..1.0, 6),
            praw in prop::collection::vec(0.0f64..1.0, 2),
        ) {
            let p = random_experiment(&raw, 3, 2);
            let pi = random_prior(&praw);
            let ev = CostModel::shannon().grad_hess(&p, &pi).unwrap();
            let flat = nalgebra::DVector::from_fn(6, |i, _| p.get(i / 2, i % 2));
            prop_assert!((&ev.hessian * flat).amax() < 1e-12);
        }
    }

    #[test]
    fn uncertainty_slopes_match_differences() {
        let models = [
            CostModel::Shannon { scale: 1.5 },
            CostModel::PosteriorSeparable(Uncertainty::Entropy),
            CostModel::PosteriorSeparable(Uncertainty::Quadratic),
            CostModel::Bregman(BregmanKernel::InverseFisher),
            CostModel::Bregman(BregmanKernel::Quadratic),
            CostModel::Bregman(BregmanKernel::Burg),
        ];
        for model in models {
            for x in [0.1, 0.37, 0.8] {
                let h = 1e-6;
                let fd =
                    (model.uncertainty(&[1.0 - x - h, x + h]) - model.uncertainty(&[1.0 - x + h, x - h])) / (2.0 * h);
                assert!((fd - model.uncertainty_slope(x)).abs() < 1e-6, "{model:?} {x}");
            }
        }
    }

    #[test]
    fn named_quadratic_is_gini() {
        let pi = Prior::new(vec![0.5, 0.5]).unwrap();
        let p = Experiment::new(matrix_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()).unwrap();
        let c = CostModel::PosteriorSeparable(Uncertainty::Quadratic)
            .value(&p, &pi)
            .unwrap();
        assert!((c - 0.5).abs() < 1e-15);
    }
}
