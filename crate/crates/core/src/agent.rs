//! The agent's optimal experiment for a given contract.
//!
//! The Shannon path is the marginal fixed point of the logit rule
//! `p(d|θ) = p(d)e^{b/τ} / Σ p(d̄)e^{b̄/τ}` with `τ = s(1+μ)`, iterated from
//! the uniform marginal and finished with a Newton step on the support.
//! Other posterior-separable costs go through concavification (two states)
//! or entropic mirror descent.

use log::{debug, warn};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::geometry::{concavify, default_grid, EnvelopeCurve, DEFAULT_GRID_POINTS, GRID_MARGIN};
use crate::model::{expectation_unchecked, marginal_unchecked, Contract, Experiment, Matrix, Prior};

pub const MARGINAL_TOL: f64 = 1e-12;
pub const DROP_THRESHOLD: f64 = 1e-14;
pub const DEFAULT_MAX_ITER: usize = 100_000;
pub const CAPACITY_TOL: f64 = 1e-8;
pub const MIRROR_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AgentSolution {
    pub experiment: Experiment,
    /// Capacity multiplier; zero when the constraint is slack.
    pub mu: f64,
    /// State duals `ρ(θ)`, per-state mean of `π b − (1+μ)∂c` over the support.
    pub rho: Vec<f64>,
    /// `E_p[b] − c(p)`.
    pub value: f64,
    pub cost: f64,
    pub iterations: usize,
    /// KKT spread on the support, or the largest off-support violation.
    pub residual: f64,
}

/// Spread of `π(θ)b(d,θ) − ∂c/∂p(d|θ)` over decisions, maximized over states.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentKkt {
    pub residual: f64,
    pub rho: Vec<f64>,
}

fn check_contract(b: &Contract, prior: &Prior) -> Result<()> {
    if b.states() != prior.len() {
        return Err(Error::DimensionMismatch(format!(
            "contract has {} states, prior has {}",
            b.states(),
            prior.len()
        )));
    }
    Ok(())
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "capacity multiplier must be a finite nonnegative number, got {mu}"
        )));
    }
    Ok(())
}

/// Logit best response under unit-scale mutual information.
pub fn best_response_shannon(b: &Contract, prior: &Prior, mu: f64) -> Result<AgentSolution> {
    best_response_shannon_scaled(b, prior, 1.0, mu)
}

pub fn best_response_shannon_scaled(b: &Contract, prior: &Prior, scale: f64, mu: f64) -> Result<AgentSolution> {
    check_contract(b, prior)?;
    check_mu(mu)?;
    let tau = scale * (1.0 + mu);
    let pi = prior.as_slice();
    let (m, iterations) = logit_marginal(b.payments(), pi, tau, DEFAULT_MAX_ITER)?;
    let p = Experiment::normalized(logit_experiment(b.payments(), tau, &m))?;
    let model = CostModel::Shannon { scale };
    finish(b, prior, &model, p, mu, iterations)
}

/// Column-stabilized `e^{(b(d,θ) − max_d b(·,θ))/τ}`.
fn logit_weights(b: &Matrix, tau: f64) -> Matrix {
    let mut e = b.clone();
    for mut col in e.column_iter_mut() {
        let top = col.max();
        col.apply(|x| *x = ((*x - top) / tau).exp());
    }
    e
}

/// `g(d) = Σ_θ π(θ)e(d,θ)/Z(θ)`, the marginal update factor.
fn update_factors(e: &Matrix, pi: &[f64], m: &[f64]) -> Vec<f64> {
    let (nd, nt) = e.shape();
    let mut g = vec![0.0; nd];
    for t in 0..nt {
        let z: f64 = (0..nd).map(|d| m[d] * e[(d, t)]).sum();
        for (d, gd) in g.iter_mut().enumerate() {
            *gd += pi[t] * e[(d, t)] / z;
        }
    }
    g
}

pub(crate) fn logit_experiment(b: &Matrix, tau: f64, m: &[f64]) -> Matrix {
    let e = logit_weights(b, tau);
    let mut p = Matrix::from_fn(e.nrows(), e.ncols(), |d, t| m[d] * e[(d, t)]);
    for mut col in p.column_iter_mut() {
        let z = col.sum();
        col /= z;
    }
    p
}

/// Optimal marginal over decisions for temperature `tau`.
pub(crate) fn logit_marginal(b: &Matrix, pi: &[f64], tau: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
    let nd = b.nrows();
    let e = logit_weights(b, tau);
    let mut active: Vec<bool> = vec![true; nd];
    let uniform = |active: &[bool]| -> Vec<f64> {
        let k = active.iter().filter(|&&a| a).count() as f64;
        active.iter().map(|&a| if a { 1.0 / k } else { 0.0 }).collect()
    };
    let mut m = uniform(&active);
    let mut restarted = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let g = update_factors(&e, pi, &m);
        let mut change: f64 = 0.0;
        let mut next: Vec<f64> = m.iter().zip(&g).map(|(a, b)| a * b).collect();
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let mut dropped = false;
        for d in 0..nd {
            if active[d] && next[d] < DROP_THRESHOLD {
                active[d] = false;
                next[d] = 0.0;
                dropped = true;
            }
            change = change.max((next[d] - m[d]).abs());
        }
        if dropped {
            debug!("logit fixed point dropped decisions, active set {active:?}");
            if !restarted {
                restarted = true;
                m = uniform(&active);
                continue;
            }
            let total: f64 = next.iter().sum();
            next.iter_mut().for_each(|x| *x /= total);
        }
        m = next;
        if change < MARGINAL_TOL {
            converged = true;
            break;
        }
    }
    let polished = newton_polish(&e, pi, &m);
    let (m, res) = {
        let r0 = marginal_residual(&e, pi, &m);
        let r1 = marginal_residual(&e, pi, &polished);
        if r1 <= r0 {
            (polished, r1)
        } else {
            (m, r0)
        }
    };
    if converged || res < 1e-10 {
        if !converged {
            warn!("logit iteration hit {max_iter} iterations; accepted after Newton polish (residual {res:e})");
        }
        Ok((m, iterations))
    } else {
        Err(Error::NoConvergence {
            solver: "logit fixed point",
            iterations,
            residual: res,
        })
    }
}

/// `max |g(d) − 1|` on the support and `max (g(d) − 1)⁺` off it.
fn marginal_residual(e: &Matrix, pi: &[f64], m: &[f64]) -> f64 {
    let g = update_factors(e, pi, m);
    g.iter()
        .zip(m)
        .map(|(&gd, &md)| {
            if md > 0.0 {
                (gd - 1.0).abs()
            } else {
                (gd - 1.0).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn log_partition(e: &Matrix, pi: &[f64], m: &[f64]) -> f64 {
    (0..e.ncols())
        .map(|t| pi[t] * (0..e.nrows()).map(|d| m[d] * e[(d, t)]).sum::<f64>().ln())
        .sum()
}

/// Active-set Newton ascent on `f(m) = Σ_θ π log Σ_d m(d)e(d,θ)` over the
/// simplex, warm-started at `m`. At the optimum `g(d) = 1` on the support
/// and `g(d) ≤ 1` off it.
fn newton_polish(e: &Matrix, pi: &[f64], m: &[f64]) -> Vec<f64> {
    let nd = m.len();
    let nt = e.ncols();
    let mut cur = m.to_vec();
    let mut support: Vec<usize> = (0..nd).filter(|&d| m[d] > 0.0).collect();
    for _ in 0..100 {
        let g = update_factors(e, pi, &cur);
        let k = support.len();
        let mut step = vec![0.0; nd];
        if k >= 2 {
            let z: Vec<f64> = (0..nt).map(|t| (0..nd).map(|d| cur[d] * e[(d, t)]).sum()).collect();
            let mut kkt = Matrix::zeros(k + 1, k + 1);
            let mut rhs = nalgebra::DVector::zeros(k + 1);
            for (i, &di) in support.iter().enumerate() {
                for (j, &dj) in support.iter().enumerate() {
                    kkt[(i, j)] = -(0..nt)
                        .map(|t| pi[t] * e[(di, t)] * e[(dj, t)] / (z[t] * z[t]))
                        .sum::<f64>();
                }
                kkt[(i, k)] = -1.0;
                kkt[(k, i)] = 1.0;
                rhs[i] = -g[di];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { break };
            for (i, &d) in support.iter().enumerate() {
                step[d] = sol[i];
            }
        }
        let size = step.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        if size < 1e-16 {
            // Converged on the support; add the worst off-support violator.
            let worst = (0..nd)
                .filter(|d| !support.contains(d))
                .max_by(|&a, &b| g[a].total_cmp(&g[b]));
            match worst {
                Some(d) if g[d] > 1.0 + 1e-13 => {
                    support.push(d);
                    support.sort_unstable();
                    continue;
                }
                _ => break,
            }
        }
        let mut blocking = None;
        let mut tmax = f64::INFINITY;
        for &d in &support {
            if step[d] < 0.0 {
                let t = cur[d] / -step[d];
                if t < tmax {
                    tmax = t;
                    blocking = Some(d);
                }
            }
        }
        if tmax <= 1.0 {
            let d = blocking.expect("blocking decision");
            for &j in &support {
                cur[j] += tmax * step[j];
            }
            cur[d] = 0.0;
            support.retain(|&j| j != d);
        } else {
            let f0 = log_partition(e, pi, &cur);
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let trial: Vec<f64> = (0..nd).map(|d| cur[d] + t * step[d]).collect();
                if log_partition(e, pi, &trial) >= f0 - 1e-15 * f0.abs().max(1.0) {
                    cur = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let s: f64 = cur.iter().sum();
        cur.iter_mut().for_each(|x| *x = x.max(0.0) / s);
    }
    cur
}

/// Cost, value and support KKT data for a computed experiment.
fn finish(
    b: &Contract,
    prior: &Prior,
    model: &CostModel,
    p: Experiment,
    mu: f64,
    iterations: usize,
) -> Result<AgentSolution> {
    let cost = model.value(&p, prior)?;
    let value = expectation_unchecked(p.conditionals(), prior.as_slice(), b.payments()) - cost;
    let kkt = agent_kkt_residual_on_support(b, prior, model, &p, mu)?;
    Ok(AgentSolution {
        experiment: p,
        mu,
        rho: kkt.rho,
        value,
        cost,
        iterations,
        residual: kkt.residual,
    })
}

/// Agent KKT residual at an interior experiment, unconstrained problem.
pub fn agent_kkt_residual(b: &Contract, prior: &Prior, model: &CostModel, p: &Experiment) -> Result<AgentKkt> {
    check_contract(b, prior)?;
    let grad = model.gradient(p, prior)?;
    let pi = prior.as_slice();
    let lhs = Matrix::from_fn(p.decisions(), p.states(), |d, t| pi[t] * b.get(d, t) - grad[(d, t)]);
    Ok(spread(&lhs, &(0..p.decisions()).collect::<Vec<_>>()))
}

fn spread(lhs: &Matrix, rows: &[usize]) -> AgentKkt {
    let mut residual: f64 = 0.0;
    let mut rho = Vec::with_capacity(lhs.ncols());
    for t in 0..lhs.ncols() {
        let vals: Vec<f64> = rows.iter().map(|&d| lhs[(d, t)]).filter(|v| !v.is_nan()).collect();
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        residual = residual.max(hi - lo);
        rho.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    AgentKkt { residual, rho }
}

/// KKT residual of `max E_p[b] − (1+μ)c(p)` restricted to decisions with
/// positive marginal. For Shannon costs also includes the off-support
/// condition `Σ_θ π e^{b/τ}/Z ≤ 1`.
pub fn agent_kkt_residual_on_support(
    b: &Contract,
    prior: &Prior,
    model: &CostModel,
    p: &Experiment,
    mu: f64,
) -> Result<AgentKkt> {
    check_contract(b, prior)?;
    let pi = prior.as_slice();
    let pm = p.conditionals();
    let m = marginal_unchecked(pm, pi);
    let support: Vec<usize> = (0..m.len()).filter(|&d| m[d] > 0.0).collect();
    let sub = Matrix::from_fn(support.len(), p.states(), |i, t| pm[(support[i], t)]);
    let sub = Experiment::normalized(sub)?;
    let sub_b = Matrix::from_fn(support.len(), p.states(), |i, t| b.get(support[i], t));
    let grad = model.gradient_unchecked(sub.conditionals(), pi);
    // Cells that underflowed to zero inside a supported row carry no
    // equality condition.
    let lhs = Matrix::from_fn(support.len(), p.states(), |i, t| {
        if sub.get(i, t) > 0.0 {
            pi[t] * sub_b[(i, t)] - (1.0 + mu) * grad[(i, t)]
        } else {
            f64::NAN
        }
    });
    let mut kkt = spread(&lhs, &(0..support.len()).collect::<Vec<_>>());
    if let Some(scale) = model.shannon_scale() {
        if support.len() < m.len() {
            let tau = scale * (1.0 + mu);
            let e = logit_weights(b.payments(), tau);
            let g = update_factors(&e, pi, &m);
            for d in (0..m.len()).filter(|&d| m[d] <= 0.0) {
                kkt.residual = kkt.residual.max(g[d] - 1.0);
            }
        }
    }
    Ok(kkt)
}

/// Unconstrained best response for any supported model; Shannon-equivalent
/// models take the logit path.
pub fn best_response(b: &Contract, prior: &Prior, model: &CostModel, mu: f64) -> Result<AgentSolution> {
    check_mu(mu)?;
    match model.shannon_scale() {
        Some(scale) => best_response_shannon_scaled(b, prior, scale, mu),
        None => best_response_penalized(b, prior, model, mu),
    }
}

/// Solves `max E_p[b] − (1+μ)c(p)` through the generic solver on `b/(1+μ)`.
fn best_response_penalized(b: &Contract, prior: &Prior, model: &CostModel, mu: f64) -> Result<AgentSolution> {
    let scaled = b.scale(1.0 / (1.0 + mu));
    let sol = best_response_general(&scaled, prior, model)?;
    finish(b, prior, model, sol.experiment, mu, sol.iterations)
}

/// Best response subject to `c(p) ≤ κ`.
pub fn best_response_capacity(b: &Contract, prior: &Prior, kappa: f64, model: &CostModel) -> Result<AgentSolution> {
    check_contract(b, prior)?;
    if kappa.is_nan() || kappa < 0.0 {
        return Err(Error::InvalidInput(format!(
            "capacity must be nonnegative, got {kappa}"
        )));
    }
    if model.shannon_scale().is_none() {
        debug!("capacity solve for {model:?} uses the penalized generic solver");
    }
    let free = best_response(b, prior, model, 0.0)?;
    if free.cost <= kappa {
        return Ok(free);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut hi_sol = best_response(b, prior, model, hi)?;
    while hi_sol.cost > kappa {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return Err(Error::NoConvergence {
                solver: "capacity multiplier bracket",
                iterations: 50,
                residual: hi_sol.cost - kappa,
            });
        }
        hi_sol = best_response(b, prior, model, hi)?;
    }
    let mut iterations = 0;
    while (hi_sol.cost - kappa).abs() >= CAPACITY_TOL && iterations < 200 {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let sol = best_response(b, prior, model, mid)?;
        if sol.cost > kappa {
            lo = mid;
        } else {
            hi = mid;
            hi_sol = sol;
        }
    }
    let gap = (hi_sol.cost - kappa).abs();
    if gap >= CAPACITY_TOL {
        if model.shannon_scale().is_some() {
            return Err(Error::NoConvergence {
                solver: "capacity multiplier bisection",
                iterations,
                residual: gap,
            });
        }
        debug!("generic capacity solve stopped {gap:e} from the bound on the feasible side");
    }
    Ok(hi_sol)
}

/// Generic posterior-separable best response: concavification of `B + Υ`
/// for two states, entropic mirror descent otherwise.
pub fn best_response_general(b: &Contract, prior: &Prior, model: &CostModel) -> Result<AgentSolution> {
    check_contract(b, prior)?;
    model.validate(prior.len())?;
    match prior.len() {
        1 => {
            let best = (0..b.decisions()).fold(0, |acc, d| if b.get(d, 0) > b.get(acc, 0) { d } else { acc });
            let p = Matrix::from_fn(b.decisions(), 1, |d, _| f64::from(u8::from(d == best)));
            finish(b, prior, model, Experiment::new(p)?, 0.0, 0)
        }
        2 => geometric_response(b, prior, model),
        _ => mirror_descent(b, prior, model),
    }
}

fn net(model: &CostModel, b: &Contract, d: usize, x: f64) -> f64 {
    (1.0 - x) * b.get(d, 0) + x * b.get(d, 1) + model.uncertainty(&[1.0 - x, x])
}

fn net_slope(model: &CostModel, b: &Contract, d: usize, x: f64) -> f64 {
    b.get(d, 1) - b.get(d, 0) + model.uncertainty_slope(x)
}

fn geometric_response(b: &Contract, prior: &Prior, model: &CostModel) -> Result<AgentSolution> {
    let grid = default_grid(DEFAULT_GRID_POINTS);
    let curve = EnvelopeCurve::net_utility(b, model, &grid)?;
    let pi2 = prior[1];
    let cc = concavify(&curve, pi2)?;
    let mut contacts: Vec<(f64, f64, usize)> = cc
        .contacts
        .iter()
        .map(|c| (c.q, c.weight, c.label.unwrap_or(0)))
        .collect();
    let mut iterations = 0;
    if contacts.len() == 2 && contacts[0].2 != contacts[1].2 {
        if let Some((x1, x2, its)) = polish_tangent(b, model, &curve, pi2, contacts[0], contacts[1]) {
            let w2 = (pi2 - x1) / (x2 - x1);
            contacts[0] = (x1, 1.0 - w2, contacts[0].2);
            contacts[1] = (x2, w2, contacts[1].2);
            iterations = its;
        }
    }
    if contacts.len() == 2 {
        snap_to_boundary(b, model, pi2, &mut contacts);
    }
    let pi = prior.as_slice();
    let mut p = Matrix::zeros(b.decisions(), 2);
    for (x, w, d) in contacts {
        let q = [1.0 - x, x];
        for t in 0..2 {
            p[(d, t)] += w * q[t] / pi[t];
        }
    }
    finish(b, prior, model, Experiment::normalized(p)?, 0.0, iterations)
}

/// The grid stops short of certainty; move an end contact onto the
/// boundary posterior when that raises the value, then refine the other
/// contacts by golden-section search within one grid step.
fn snap_to_boundary(b: &Contract, model: &CostModel, pi2: f64, contacts: &mut [(f64, f64, usize)]) {
    let value = |c: &[(f64, f64, usize)]| -> f64 {
        let w2 = (pi2 - c[0].0) / (c[1].0 - c[0].0);
        (1.0 - w2) * net(model, b, c[0].2, c[0].0) + w2 * net(model, b, c[1].2, c[1].0)
    };
    let mut best = value(contacts);
    let mut snapped = [false; 2];
    for (k, end) in [(0, 0.0), (1, 1.0)] {
        if (contacts[k].0 - end).abs() > 2.0 * GRID_MARGIN {
            continue;
        }
        let mut trial = contacts.to_vec();
        trial[k].0 = end;
        let v = value(&trial);
        if v.is_finite() && v > best {
            best = v;
            snapped[k] = true;
            contacts.copy_from_slice(&trial);
        }
    }
    if snapped.iter().any(|&s| s) {
        let step = 1.0 / (DEFAULT_GRID_POINTS - 1) as f64;
        for k in (0..2).filter(|&k| !snapped[k]) {
            let (lo, hi) = if k == 0 {
                ((contacts[0].0 - step).max(0.0), (contacts[0].0 + step).min(pi2))
            } else {
                ((contacts[1].0 - step).max(pi2), (contacts[1].0 + step).min(1.0))
            };
            let at = |x: f64| {
                let mut c = contacts.to_vec();
                c[k].0 = x;
                value(&c)
            };
            let x = golden_max(at, lo, hi);
            if at(x) > best {
                best = at(x);
                contacts[k].0 = x;
            }
        }
    }
    let w2 = (pi2 - contacts[0].0) / (contacts[1].0 - contacts[0].0);
    contacts[0].1 = 1.0 - w2;
    contacts[1].1 = w2;
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-13 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Newton on the common-tangent conditions between two decisions' net
/// utility curves. Returns `None` if the refined tangent fails to dominate
/// the sampled curve.
fn polish_tangent(
    b: &Contract,
    model: &CostModel,
    curve: &EnvelopeCurve,
    pi2: f64,
    c1: (f64, f64, usize),
    c2: (f64, f64, usize),
) -> Option<(f64, f64, usize)> {
    let (d1, d2) = (c1.2, c2.2);
    let resid = |x1: f64, x2: f64| -> [f64; 2] {
        let s1 = net_slope(model, b, d1, x1);
        let s2 = net_slope(model, b, d2, x2);
        let chord = (net(model, b, d2, x2) - net(model, b, d1, x1)) / (x2 - x1);
        [s1 - s2, s1 - chord]
    };
    let (mut x1, mut x2) = (c1.0, c2.0);
    let mut r = resid(x1, x2);
    let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());
    let mut its = 0;
    while norm(r) > 1e-14 && its < 50 {
        its += 1;
        let h = 1e-6 * x1.min(1.0 - x2).min(x2 - x1).min(1.0);
        let r1p = resid(x1 + h, x2);
        let r1m = resid(x1 - h, x2);
        let r2p = resid(x1, x2 + h);
        let r2m = resid(x1, x2 - h);
        let j = nalgebra::Matrix2::new(
            (r1p[0] - r1m[0]) / (2.0 * h),
            (r2p[0] - r2m[0]) / (2.0 * h),
            (r1p[1] - r1m[1]) / (2.0 * h),
            (r2p[1] - r2m[1]) / (2.0 * h),
        );
        let step = j.lu().solve(&nalgebra::Vector2::new(-r[0], -r[1]))?;
        let mut t = 1.0;
        loop {
            let (n1, n2) = (x1 + t * step[0], x2 + t * step[1]);
            if n1 > 0.0 && n1 < pi2 && n2 > pi2 && n2 < 1.0 {
                let rn = resid(n1, n2);
                if norm(rn) < norm(r) {
                    x1 = n1;
                    x2 = n2;
                    r = rn;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-8 {
                return None;
            }
        }
    }
    if norm(r) > 1e-10 {
        return None;
    }
    let slope = net_slope(model, b, d1, x1);
    let intercept = net(model, b, d1, x1) - slope * x1;
    let dominated = curve
        .grid
        .iter()
        .zip(&curve.values)
        .all(|(&q, &v)| v <= intercept + slope * q + 1e-9);
    dominated.then_some((x1, x2, its))
}

/// Mirror ascent on each column of `p` for `E_p[b] − c(p)`.
fn mirror_descent(b: &Contract, prior: &Prior, model: &CostModel) -> Result<AgentSolution> {
    let pi = prior.as_slice();
    let (nd, nt) = (b.decisions(), b.states());
    let objective = |p: &Matrix| expectation_unchecked(p, pi, b.payments()) - model.value_unchecked(p, pi);
    let mut p = Matrix::from_element(nd, nt, 1.0 / nd as f64);
    let mut f = objective(&p);
    let mut eta = 1.0;
    let mut residual = f64::INFINITY;
    for it in 0..DEFAULT_MAX_ITER {
        let grad = model.gradient_unchecked(&p, pi);
        let r = Matrix::from_fn(nd, nt, |d, t| b.get(d, t) - grad[(d, t)] / pi[t]);
        residual = simplex_kkt(&p, &r);
        if residual < MIRROR_TOL {
            return finish(b, prior, model, Experiment::normalized(p)?, 0.0, it);
        }
        loop {
            let mut trial = Matrix::from_fn(nd, nt, |d, t| p[(d, t)] * (eta * r[(d, t)]).exp());
            for mut col in trial.column_iter_mut() {
                let s = col.sum();
                col /= s;
                col.apply(|x| *x = x.max(1e-300));
            }
            let ft = objective(&trial);
            if ft >= f - 1e-15 * f.abs().max(1.0) {
                p = trial;
                f = ft;
                eta *= 1.25;
                break;
            }
            eta *= 0.5;
            if eta < 1e-14 {
                return Err(Error::NoConvergence {
                    solver: "mirror descent",
                    iterations: it,
                    residual,
                });
            }
        }
    }
    Err(Error::NoConvergence {
        solver: "mirror descent",
        iterations: DEFAULT_MAX_ITER,
        residual,
    })
}

/// Complementarity residual for maximizing a linear form `r` over each
/// column simplex at `p`.
fn simplex_kkt(p: &Matrix, r: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..p.ncols() {
        let mean: f64 = (0..p.nrows()).map(|d| p[(d, t)] * r[(d, t)]).sum();
        for d in 0..p.nrows() {
            let gap = r[(d, t)] - mean;
            worst = worst.max(gap.max(0.0)).max(p[(d, t)] * gap.abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{BregmanKernel, Uncertainty};
    use crate::model::{evaluate_profile, ProblemInstance};
    use proptest::prelude::*;

    fn prior() -> Prior {
        Prior::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap()
    }

    fn y() -> Contract {
        Contract::from_rows(&[&[0.0, 10.0], &[5.0, 5.0]]).unwrap()
    }

    #[test]
    fn unconstrained_response_to_output() {
        let s = best_response_shannon(&y(), &prior(), 0.0).unwrap();
        let p = &s.experiment;
        assert!((p.get(0, 0) - 0.00332).abs() < 1e-4, "{p:?}");
        assert!((p.get(0, 1) - 0.98657).abs() < 1e-4, "{p:?}");
        assert!((s.cost - 0.596).abs() < 0.005);
        assert!(s.residual < 1e-9, "{}", s.residual);
    }

    #[test]
    fn logit_rule_and_marginal_consistency() {
        let b = y();
        let pi = prior();
        let s = best_response_shannon(&b, &pi, 0.3).unwrap();
        let p = s.experiment.conditionals();
        let m = marginal_unchecked(p, pi.as_slice());
        let tau = 1.3;
        for t in 0..2 {
            let z: f64 = (0..2).map(|d| m[d] * (b.get(d, t) / tau).exp()).sum();
            for d in 0..2 {
                let want = m[d] * (b.get(d, t) / tau).exp() / z;
                assert!((p[(d, t)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn capacity_multiplier_for_half_nat() {
        let s = best_response_capacity(&y(), &prior(), 0.5, &CostModel::shannon()).unwrap();
        assert!((s.mu - 0.445638).abs() < 1e-5, "{}", s.mu);
        assert!((s.cost - 0.5).abs() < CAPACITY_TOL);
        assert!(s.mu * (0.5 - s.cost) < 1e-6);
    }

    #[test]
    fn slack_capacity_has_zero_multiplier() {
        let s = best_response_capacity(&y(), &prior(), 0.6, &CostModel::shannon()).unwrap();
        assert_eq!(s.mu, 0.0);
    }

    #[test]
    fn tiny_capacity_is_nearly_uninformative() {
        let s = best_response_capacity(&y(), &prior(), 1e-7, &CostModel::shannon()).unwrap();
        assert!(s.cost < 1e-6);
    }

    #[test]
    fn dominated_decision_is_dropped() {
        let b = Contract::from_rows(&[&[10.0, 10.0], &[0.0, 0.0]]).unwrap();
        let s = best_response_shannon(&b, &prior(), 0.0).unwrap();
        assert_eq!(s.experiment.get(1, 0), 0.0);
        assert!((s.value - 10.0).abs() < 1e-12);
        assert!(s.residual < 1e-9);
    }

    #[test]
    fn constant_contract_gives_uninformative_response() {
        let b = Contract::from_rows(&[&[2.0, 2.0], &[2.0, 2.0]]).unwrap();
        for model in [
            CostModel::shannon(),
            CostModel::PosteriorSeparable(Uncertainty::Quadratic),
        ] {
            let s = best_response_general(&b, &prior(), &model).unwrap();
            assert!(s.cost.abs() < 1e-12);
            assert!((s.value - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_line_contract_posteriors() {
        let b = Contract::from_rows(&[&[0.0, 2.0], &[1.0, 1.0]]).unwrap();
        let pi = Prior::binary(0.45).unwrap();
        let s = best_response_general(&b, &pi, &CostModel::PosteriorSeparable(Uncertainty::Entropy)).unwrap();
        let q1 = crate::model::posterior(&s.experiment, &pi, 0).unwrap()[1];
        let q2 = crate::model::posterior(&s.experiment, &pi, 1).unwrap()[1];
        assert!((q1 - 0.731059).abs() < 1e-4, "{q1}");
        assert!((q2 - 0.268941).abs() < 1e-4, "{q2}");
        let logit = best_response_shannon(&b, &pi, 0.0).unwrap();
        assert!(s.experiment.max_abs_diff(&logit.experiment) < 1e-6);
    }

    #[test]
    fn kkt_residual_flags_suboptimal_point() {
        let p = Experiment::uninformative(&[0.5, 0.5], 2).unwrap();
        let b = Contract::from_rows(&[&[3.0, 3.0], &[0.0, 0.0]]).unwrap();
        let k = agent_kkt_residual(&b, &prior(), &CostModel::shannon(), &p).unwrap();
        assert!(k.residual > 1.0);
    }

    #[test]
    fn tabulated_second_best_profile_is_agent_optimal() {
        let p = Experiment::from_rows(&[&[0.160, 0.514], &[0.840, 0.486]]).unwrap();
        let b = Contract::from_rows(&[&[0.0, 1.00], &[0.702, 0.0]]).unwrap();
        let k = agent_kkt_residual(&b, &prior(), &CostModel::shannon(), &p).unwrap();
        assert!(k.residual < 1e-2, "{}", k.residual);
    }

    #[test]
    fn mirror_descent_matches_logit_for_three_states() {
        let pi = Prior::new(vec![0.2, 0.5, 0.3]).unwrap();
        let b = Contract::from_rows(&[&[1.0, 0.0, 2.0], &[0.0, 1.5, 0.5], &[0.7, 0.7, 0.7]]).unwrap();
        let md = best_response_general(&b, &pi, &CostModel::Bregman(BregmanKernel::InverseFisher)).unwrap();
        let ba = best_response_shannon(&b, &pi, 0.0).unwrap();
        assert!((md.value - ba.value).abs() < 1e-7, "{} {}", md.value, ba.value);
    }

    #[test]
    fn capacity_fallback_for_quadratic_cost() {
        let model = CostModel::Bregman(BregmanKernel::Quadratic);
        let free = best_response_general(&y(), &prior(), &model).unwrap();
        let kappa = 0.5 * free.cost;
        let s = best_response_capacity(&y(), &prior(), kappa, &model).unwrap();
        assert!(s.mu > 0.0);
        assert!(s.cost <= kappa + 1e-9);
        assert!(kappa - s.cost < 1e-3, "{} {}", s.cost, kappa);
    }

    fn contract_from(raw: &[f64], nd: usize, nt: usize) -> Contract {
        Contract::new(Matrix::from_fn(nd, nt, |d, t| raw[d * nt + t])).unwrap()
    }

    fn prior_from(raw: &[f64]) -> Prior {
        let s: f64 = raw.iter().map(|x| x + 0.1).sum();
        Prior::new(raw.iter().map(|x| (x + 0.1) / s).collect()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn transfer_invariance(
            raw in prop::collection::vec(0.0f64..4.0, 6),
            beta in prop::collection::vec(-3.0f64..3.0, 2),
            praw in prop::collection::vec(0.0f64..1.0, 2),
        ) {
            let b = contract_from(&raw, 3, 2);
            let pi = prior_from(&praw);
            let shifted = b.apply_transfer(&crate::model::StateTransfer(beta.clone())).unwrap();
            let s1 = best_response_shannon(&b, &pi, 0.0).unwrap();
            let s2 = best_response_shannon(&shifted, &pi, 0.0).unwrap();
            prop_assert!(s1.experiment.max_abs_diff(&s2.experiment) < 1e-6);
            let eb = pi[0] * beta[0] + pi[1] * beta[1];
            prop_assert!((s1.value - s2.value - eb).abs() < 1e-8);
        }

        #[test]
        fn solver_agrees_with_profile_evaluation(
            raw in prop::collection::vec(0.0f64..4.0, 6),
            praw in prop::collection::vec(0.0f64..1.0, 3),
            mu in 0.0f64..2.0,
        ) {
            let b = contract_from(&raw, 2, 3);
            let pi = prior_from(&praw);
            let s = best_response_shannon(&b, &pi, mu).unwrap();
            prop_assert!(s.residual < 1e-6, "{}", s.residual);
            let inst = ProblemInstance::unlabeled(b.payments().clone(), pi.clone(), f64::INFINITY, CostModel::shannon()).unwrap();
            let r = evaluate_profile(&b, &s.experiment, &inst).unwrap();
            prop_assert!((r.agent_utility - s.value).abs() < 1e-10);
        }

        #[test]
        fn cost_nonincreasing_in_multiplier(
            raw in prop::collection::vec(0.0f64..4.0, 4),
            praw in prop::collection::vec(0.0f64..1.0, 2),
        ) {
            let b = contract_from(&raw, 2, 2);
            let pi = prior_from(&praw);
            let mut last = f64::INFINITY;
            for k in 0..10 {
                let c = best_response_shannon(&b, &pi, 0.3 * k as f64).unwrap().cost;
                prop_assert!(c <= last + 1e-10);
                last = c;
            }
        }

    }

    #[test]
    fn full_revelation_reaches_the_boundary() {
        let b = contract_from(&[2.929085786865573, 0.0, 0.0, 2.1098227417175814], 2, 2);
        let pi = Prior::binary(0.1).unwrap();
        let model = CostModel::PosteriorSeparable(Uncertainty::Quadratic);
        let s = best_response_general(&b, &pi, &model).unwrap();
        let full = 0.9 * 2.929085786865573 + 0.1 * 2.1098227417175814 - model.uncertainty(pi.as_slice());
        assert!(s.value >= full - 1e-12, "{} < {full}", s.value);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn geometric_solver_matches_grid_search(
            raw in prop::collection::vec(0.0f64..3.0, 4),
            praw in 0.1f64..0.9,
        ) {
            let b = contract_from(&raw, 2, 2);
            let pi = Prior::binary(praw).unwrap();
            let model = CostModel::PosteriorSeparable(Uncertainty::Quadratic);
            let s = best_response_general(&b, &pi, &model).unwrap();
            // Best two-posterior split on a grid around the prior.
            let n = 400;
            let f = |x: f64| (0..2).map(|d| net(&model, &b, d, x)).fold(f64::NEG_INFINITY, f64::max);
            let left: Vec<(f64, f64)> = (0..=n).map(|i| praw * i as f64 / n as f64).map(|x| (x, f(x))).collect();
            let right: Vec<(f64, f64)> = (0..=n).map(|j| praw + (1.0 - praw) * j as f64 / n as f64).map(|x| (x, f(x))).collect();
            let mut best = f(praw);
            for &(x1, f1) in &left[..n] {
                for &(x2, f2) in &right[1..] {
                    let w2 = (praw - x1) / (x2 - x1);
                    best = best.max((1.0 - w2) * f1 + w2 * f2);
                }
            }
            let grid_value = best - model.uncertainty(pi.as_slice());
            prop_assert!(s.value >= grid_value - 1e-9, "{} {}", s.value, grid_value);
            prop_assert!(s.value <= grid_value + 1e-4, "{} {}", s.value, grid_value);
        }
    }
}
