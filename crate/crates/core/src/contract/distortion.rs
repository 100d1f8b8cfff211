use nalgebra::DVector;

use super::{Decomposition, DualCertificate};
use crate::cost::{BregmanKernel, CostModel, INTERIOR_EPS};
use crate::error::{Error, Result};
use crate::model::{marginal_unchecked, Contract, Experiment, Matrix, Prior, ProblemInstance, StateTransfer};

/// Default reconstruction tolerance of [`decompose`].
pub const DECOMPOSE_TOL: f64 = 1e-4;
/// Agreement required between the Hessian formula and the Shannon closed form.
const CROSS_CHECK_TOL: f64 = 1e-6;
/// Ridge weight on the liability multipliers in the dual recovery.
const RIDGE: f64 = 1e-10;

/// Distortion with the Shannon decision penalty when available.
#[derive(Clone, Debug, PartialEq)]
pub struct Gamma {
    pub gamma: Matrix,
    pub gamma_hat: Option<Vec<f64>>,
}

/// Claims on output issued per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Securities {
    pub debt: Matrix,
    pub outside_equity: Matrix,
    pub inside_equity: Matrix,
}

fn check_shapes(p: &Experiment, prior: &Prior, m: &Matrix, what: &str) -> Result<()> {
    if p.states() != prior.len() || m.shape() != p.conditionals().shape() {
        return Err(Error::DimensionMismatch(format!(
            "{what} is {}x{}, experiment is {}x{}",
            m.nrows(),
            m.ncols(),
            p.decisions(),
            p.states()
        )));
    }
    Ok(())
}

/// `(1/π(θ)) Σ_{d′θ′} ∂²c/∂p(d|θ)∂p(d′|θ′) · w(d′,θ′)`.
fn hessian_apply(hess: &Matrix, pi: &[f64], w: &Matrix) -> Matrix {
    let (nd, nt) = w.shape();
    let flat = DVector::from_fn(nd * nt, |k, _| w[(k / nt, k % nt)]);
    let out = hess * flat;
    Matrix::from_fn(nd, nt, |d, t| out[d * nt + t] / pi[t])
}

/// Shannon closed form: `γ̂(d) = sΣ_θ λ(d,θ)/p(d)`, `γ = γ̂(d) − sλ(d,θ)/(p(d|θ)π(θ))`.
pub(crate) fn shannon_gamma(p: &Matrix, pi: &[f64], scale: f64, lambda: &Matrix) -> (Matrix, Vec<f64>) {
    let m = marginal_unchecked(p, pi);
    let hat: Vec<f64> = (0..p.nrows())
        .map(|d| scale * lambda.row(d).iter().sum::<f64>() / m[d])
        .collect();
    let gamma = Matrix::from_fn(p.nrows(), p.ncols(), |d, t| {
        hat[d] - scale * lambda[(d, t)] / (p[(d, t)] * pi[t])
    });
    (gamma, hat)
}

/// Optimal distortion from the liability and participation multipliers.
/// For Shannon costs the closed form is cross-checked against the
/// Hessian formula.
pub fn gamma_from_duals(p: &Experiment, prior: &Prior, model: &CostModel, lambda: &Matrix, xi: f64) -> Result<Gamma> {
    check_shapes(p, prior, lambda, "lambda")?;
    let pi = prior.as_slice();
    let eval = model.grad_hess(p, prior)?;
    let phi = DualCertificate::phi_from(p.conditionals(), pi, lambda, xi);
    let gamma = hessian_apply(&eval.hessian, pi, &phi);
    let gamma_hat = match model.shannon_scale() {
        Some(scale) => {
            let (closed, hat) = shannon_gamma(p.conditionals(), pi, scale, lambda);
            let analytic = matches!(
                model,
                CostModel::Shannon { .. } | CostModel::Bregman(BregmanKernel::InverseFisher)
            );
            if analytic {
                let gap = (&closed - &gamma).amax();
                let tol = CROSS_CHECK_TOL * (1.0 + gamma.amax());
                if gap > tol {
                    return Err(Error::InconsistentProfile {
                        residual: gap,
                        tolerance: tol,
                    });
                }
            }
            Some(hat)
        }
        None => None,
    };
    Ok(Gamma { gamma, gamma_hat })
}

fn check_uprime(b: &Contract, uprime: &impl Fn(f64) -> f64) -> Result<Matrix> {
    let u = b.payments().map(uprime);
    if let Some(bad) = u.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "marginal utility must be positive, got {bad}"
        )));
    }
    Ok(u)
}

/// Distortion for an agent with concave Bernoulli utility; `uprime` is
/// the marginal utility of payments.
pub fn gamma_risk_averse(
    p: &Experiment,
    prior: &Prior,
    model: &CostModel,
    lambda: &Matrix,
    xi: f64,
    b: &Contract,
    uprime: impl Fn(f64) -> f64,
) -> Result<Matrix> {
    check_shapes(p, prior, lambda, "lambda")?;
    check_shapes(p, prior, b.payments(), "contract")?;
    let u = check_uprime(b, &uprime)?;
    let pi = prior.as_slice();
    let pm = p.conditionals();
    let hess = model.grad_hess(p, prior)?.hessian;
    let (nd, nt) = pm.shape();
    Ok(Matrix::from_fn(nd, nt, |d, t| {
        let mut acc = 0.0;
        for d2 in 0..nd {
            for t2 in 0..nt {
                let up = u[(d, t2)];
                let w = (pm[(d2, t2)] * (1.0 - up * xi) - lambda[(d2, t2)] / pi[t2]) / up;
                acc += hess[(d * nt + t, d2 * nt + t2)] * w;
            }
        }
        acc / pi[t]
    }))
}

/// Risk-averse distortion written in posteriors for Bregman costs:
/// `γ(d,θ) = Σ_θ′ k(θ,θ′,q_d)/(q_d(θ)q_d(θ′)) · (p(d,θ′)(1−u′ξ) − λ(d,θ′))/(u′·p(d))`
/// with `u′ = u′(b(d,θ′))` and joint `p(d,θ′)`.
pub fn gamma_risk_averse_bregman(
    p: &Experiment,
    prior: &Prior,
    kernel: BregmanKernel,
    lambda: &Matrix,
    xi: f64,
    b: &Contract,
    uprime: impl Fn(f64) -> f64,
) -> Result<Matrix> {
    check_shapes(p, prior, lambda, "lambda")?;
    check_shapes(p, prior, b.payments(), "contract")?;
    let pm = p.conditionals();
    if let Some(v) = pm.iter().find(|v| **v < INTERIOR_EPS) {
        let k = pm.iter().position(|x| x == v).unwrap_or(0);
        return Err(Error::BoundaryPoint {
            decision: k % pm.nrows(),
            state: k / pm.nrows(),
            value: *v,
        });
    }
    let u = check_uprime(b, &uprime)?;
    let pi = prior.as_slice();
    let m = marginal_unchecked(pm, pi);
    let (nd, nt) = pm.shape();
    let mut out = Matrix::zeros(nd, nt);
    for d in 0..nd {
        let q: Vec<f64> = (0..nt).map(|t| pi[t] * pm[(d, t)] / m[d]).collect();
        let km = kernel.cost_matrix(&q);
        for t in 0..nt {
            out[(d, t)] = (0..nt)
                .map(|t2| {
                    let up = u[(d, t2)];
                    let joint = pi[t2] * pm[(d, t2)];
                    km[(t, t2)] / (q[t] * q[t2]) * (joint * (1.0 - up * xi) - lambda[(d, t2)]) / (up * m[d])
                })
                .sum();
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Side {
    Zero,
    Cap,
    Both,
}

/// Recovers `(ξ, λ, β, γ)` from a solved profile with piece rate `α`, at
/// the default tolerance.
pub fn decompose(
    b: &Contract,
    inst: &ProblemInstance,
    p: &Experiment,
    alpha: f64,
) -> Result<(Decomposition, DualCertificate)> {
    decompose_with_tolerance(b, inst, p, alpha, DECOMPOSE_TOL)
}

/// As [`decompose`]; `tol` bounds both the binding detection and the
/// principal KKT residual. Profiles read from rounded tables need a
/// looser tolerance than freshly solved ones.
pub fn decompose_with_tolerance(
    b: &Contract,
    inst: &ProblemInstance,
    p: &Experiment,
    alpha: f64,
    tol: f64,
) -> Result<(Decomposition, DualCertificate)> {
    let pi = inst.prior.as_slice();
    let (nd, nt) = inst.output.shape();
    check_shapes(p, &inst.prior, b.payments(), "contract")?;
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let y = &inst.output;
    let bm = b.payments();
    let hess = inst.cost.grad_hess(p, &inst.prior)?.hessian;
    let pm = p.conditionals();

    let mut bound: Vec<(usize, usize, Side)> = Vec::new();
    for d in 0..nd {
        for t in 0..nt {
            let at_zero = bm[(d, t)] <= tol;
            let at_cap = bm[(d, t)] >= y[(d, t)] - tol;
            match (at_zero, at_cap) {
                (true, true) => bound.push((d, t, Side::Both)),
                (true, false) => bound.push((d, t, Side::Zero)),
                (false, true) => bound.push((d, t, Side::Cap)),
                _ => {}
            }
        }
    }
    // Unknowns: λ on bound cells, ξ, then β.
    let nl = bound.len();
    let nx = nl + 1 + nt;
    let rows = nd * nt + nt + nl;
    let mut a = Matrix::zeros(rows, nx);
    let mut rhs = DVector::zeros(rows);
    // γ(λ,ξ) = (1/π) H (p(1−ξ) − λ/π), linear in the unknowns.
    let h_p = hessian_apply(&hess, pi, pm);
    for d in 0..nd {
        for t in 0..nt {
            let r = d * nt + t;
            // b − αy + β + (1/π)Hp − ξ(1/π)Hp − (1/π)H λ/π = 0
            for (j, &(d2, t2, _)) in bound.iter().enumerate() {
                a[(r, j)] = -hess[(d * nt + t, d2 * nt + t2)] / (pi[t] * pi[t2]);
            }
            a[(r, nl)] = -h_p[(d, t)];
            a[(r, nl + 1 + t)] = 1.0;
            rhs[r] = alpha * y[(d, t)] - bm[(d, t)] - h_p[(d, t)];
        }
    }
    for t in 0..nt {
        let r = nd * nt + t;
        for (j, &(_, t2, _)) in bound.iter().enumerate() {
            if t2 == t {
                a[(r, j)] = 1.0;
            }
        }
        a[(r, nl)] = pi[t];
        rhs[r] = pi[t];
    }
    for j in 0..nl {
        a[(nd * nt + nt + j, j)] = RIDGE.sqrt();
    }
    let sol = a
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::InvalidInput(format!("dual recovery failed: {e}")))?;

    let mut lambda = Matrix::zeros(nd, nt);
    for (j, &(d, t, side)) in bound.iter().enumerate() {
        lambda[(d, t)] = match side {
            Side::Zero => sol[j].max(0.0),
            Side::Cap => sol[j].min(0.0),
            Side::Both => sol[j],
        };
    }
    let xi = sol[nl].clamp(0.0, 1.0);
    let g = gamma_from_duals(p, &inst.prior, &inst.cost, &lambda, xi)?;
    // Least-squares transfer given the projected multipliers; it equals
    // min_d(αy − γ) whenever the minimum payment in each state is zero.
    let beta: Vec<f64> = (0..nt)
        .map(|t| {
            (0..nd)
                .map(|d| alpha * y[(d, t)] - g.gamma[(d, t)] - bm[(d, t)])
                .sum::<f64>()
                / nd as f64
        })
        .collect();
    let mut residual: f64 = 0.0;
    for d in 0..nd {
        for t in 0..nt {
            residual = residual.max((bm[(d, t)] - (alpha * y[(d, t)] - beta[t] - g.gamma[(d, t)])).abs());
        }
    }
    for t in 0..nt {
        let s: f64 = lambda.column(t).sum();
        residual = residual.max((s - (1.0 - xi) * pi[t]).abs());
    }
    if residual > tol {
        return Err(Error::InconsistentProfile {
            residual,
            tolerance: tol,
        });
    }
    let rho = agent_rho(bm, pm, pi, &inst.cost);
    let tau: Vec<f64> = (0..nt).map(|t| pi[t] * beta[t] - xi * rho[t]).collect();
    let phi = DualCertificate::phi_from(pm, pi, &lambda, xi);
    let both_bound = bound.iter().filter(|c| c.2 == Side::Both).map(|c| (c.0, c.1)).collect();
    Ok((
        Decomposition {
            alpha,
            beta: StateTransfer(beta),
            gamma: g.gamma,
            gamma_hat: g.gamma_hat,
        },
        DualCertificate {
            lambda,
            xi,
            tau,
            rho,
            phi,
            mu: 0.0,
            both_bound,
        },
    ))
}

/// Mean over decisions of `π(θ)b(d,θ) − ∂c/∂p(d|θ)`.
pub(crate) fn agent_rho(b: &Matrix, p: &Matrix, pi: &[f64], model: &CostModel) -> Vec<f64> {
    let grad = model.gradient_unchecked(p, pi);
    (0..p.ncols())
        .map(|t| (0..p.nrows()).map(|d| pi[t] * b[(d, t)] - grad[(d, t)]).sum::<f64>() / p.nrows() as f64)
        .collect()
}

/// Splits output into debt with face value `(β(θ)+γ̂(d))/α*`, outside
/// equity and the agent's inside equity.
pub fn debt_equity_split(
    output: &Matrix,
    alpha_star: f64,
    beta: &StateTransfer,
    gamma_hat: &[f64],
) -> Result<Securities> {
    let (nd, nt) = output.shape();
    if !(alpha_star > 0.0 && alpha_star <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "piece rate must lie in (0,1], got {alpha_star}"
        )));
    }
    if beta.0.len() != nt || gamma_hat.len() != nd {
        return Err(Error::DimensionMismatch(
            "transfer or penalty length differs from output".into(),
        ));
    }
    let face = Matrix::from_fn(nd, nt, |d, t| (beta.0[t] + gamma_hat[d]) / alpha_star);
    let debt = Matrix::from_fn(nd, nt, |d, t| output[(d, t)].min(face[(d, t)]));
    let excess = Matrix::from_fn(nd, nt, |d, t| (output[(d, t)] - face[(d, t)]).max(0.0));
    Ok(Securities {
        debt,
        outside_equity: excess.map(|e| (1.0 - alpha_star) * e),
        inside_equity: excess.map(|e| alpha_star * e),
    })
}
