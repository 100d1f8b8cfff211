use log::debug;
use nalgebra::DVector;
use serde::Serialize;

use super::distortion::{agent_rho, gamma_from_duals, shannon_gamma};
use super::{Decomposition, DualCertificate};
use crate::agent::{agent_kkt_residual_on_support, best_response};
use crate::error::{Error, Result};
use crate::model::{
    evaluate_profile, marginal_unchecked, Contract, Experiment, Matrix, PayoffReport, ProblemInstance, StateTransfer,
};

const NEWTON_TOL: f64 = 1e-11;
const NEWTON_MAX_ITER: usize = 100;
const FD_JACOBIAN_STEP: f64 = 1e-7;
const FEASIBILITY_TOL: f64 = 1e-10;
const SIGN_TOL: f64 = 1e-10;
const MIN_PROB: f64 = 1e-12;
/// Principal-side KKT residual required of an accepted solution.
pub const PRINCIPAL_KKT_TOL: f64 = 1e-6;
/// Largest `|D|·|Θ|` for which every binding pattern is tried.
const FULL_ENUMERATION_CELLS: usize = 6;
const START_SCALES: [f64; 6] = [0.05, 0.15, 0.25, 0.35, 0.5, 0.75];
const RESERVATION_TOL: f64 = 1e-4;

/// Which liability limit a payment sits at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Free,
    /// `b = 0`; also used for cells with `y = 0`, where both limits bind.
    Zero,
    /// `b = y`.
    Cap,
}

/// A KKT solution of the perturbed Pareto problem for fixed `(ξ, α)`.
#[derive(Clone, Debug)]
pub struct SecondBest {
    pub contract: Contract,
    pub experiment: Experiment,
    pub duals: DualCertificate,
    pub decomposition: Decomposition,
    /// Binding pattern, flat index `d·|Θ| + θ`.
    pub pattern: Vec<Binding>,
    pub report: PayoffReport,
    /// `E_p[αy − b] + ξ(E_p[b] − c(p))`.
    pub objective: f64,
    /// Principal-side KKT residual.
    pub residual: f64,
}

/// Best candidate over consideration sets, including corner contracts
/// where the agent takes one decision for free.
#[derive(Clone, Debug)]
pub struct ParetoSolution {
    pub contract: Contract,
    pub experiment: Experiment,
    pub report: PayoffReport,
    pub objective: f64,
    /// Decisions taken with positive probability.
    pub support: Vec<usize>,
    /// Interior KKT solution on the support, absent for corners.
    pub interior: Option<SecondBest>,
}

/// Contract meeting a reservation utility.
#[derive(Clone, Debug)]
pub struct ReservationSolution {
    pub contract: Contract,
    pub experiment: Experiment,
    pub report: PayoffReport,
    pub xi: f64,
    pub alpha: f64,
    /// True when the participation constraint is met by a first-best
    /// contract `αy − β`.
    pub first_best: bool,
    pub second_best: Option<SecondBest>,
}

struct System<'a> {
    y: &'a Matrix,
    pi: &'a [f64],
    scale: f64,
    xi: f64,
    alpha: f64,
    pattern: &'a [Binding],
    nd: usize,
    nt: usize,
}

struct Unpacked {
    p: Matrix,
    b: Matrix,
    lambda: Matrix,
    beta: Vec<f64>,
    rho: Vec<f64>,
}

impl System<'_> {
    fn cells(&self) -> usize {
        self.nd * self.nt
    }

    fn len(&self) -> usize {
        2 * self.cells() + 2 * self.nt
    }

    fn unpack(&self, z: &DVector<f64>) -> Unpacked {
        let (nd, nt, n) = (self.nd, self.nt, self.cells());
        let p = Matrix::from_fn(nd, nt, |d, t| z[d * nt + t].exp());
        let mut b = Matrix::zeros(nd, nt);
        let mut lambda = Matrix::zeros(nd, nt);
        for k in 0..n {
            let (d, t) = (k / nt, k % nt);
            match self.pattern[k] {
                Binding::Free => b[(d, t)] = z[n + k],
                Binding::Zero => lambda[(d, t)] = z[n + k],
                Binding::Cap => {
                    b[(d, t)] = self.y[(d, t)];
                    lambda[(d, t)] = z[n + k];
                }
            }
        }
        Unpacked {
            p,
            b,
            lambda,
            beta: (0..nt).map(|t| z[2 * n + t]).collect(),
            rho: (0..nt).map(|t| z[2 * n + nt + t]).collect(),
        }
    }

    fn residual(&self, z: &DVector<f64>) -> DVector<f64> {
        let (nd, nt, n) = (self.nd, self.nt, self.cells());
        let u = self.unpack(z);
        let m = marginal_unchecked(&u.p, self.pi);
        let (gamma, _) = shannon_gamma(&u.p, self.pi, self.scale, &u.lambda);
        let mut f = DVector::zeros(self.len());
        for d in 0..nd {
            for t in 0..nt {
                let k = d * nt + t;
                f[k] = u.b[(d, t)] - self.scale * (u.p[(d, t)] / m[d]).ln() - u.rho[t];
                f[n + nt + k] = u.b[(d, t)] - self.alpha * self.y[(d, t)] + u.beta[t] + gamma[(d, t)];
            }
        }
        for t in 0..nt {
            f[n + t] = u.p.column(t).sum() - 1.0;
            f[2 * n + nt + t] = u.lambda.column(t).sum() - (1.0 - self.xi) * self.pi[t];
        }
        f
    }

    fn jacobian(&self, z: &DVector<f64>) -> Matrix {
        let len = self.len();
        let mut j = Matrix::zeros(len, len);
        let mut zp = z.clone();
        for c in 0..len {
            let h = FD_JACOBIAN_STEP * (1.0 + z[c].abs());
            zp[c] = z[c] + h;
            let fp = self.residual(&zp);
            zp[c] = z[c] - h;
            let fm = self.residual(&zp);
            zp[c] = z[c];
            j.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        j
    }

    fn newton(&self, mut z: DVector<f64>) -> Option<(DVector<f64>, usize)> {
        let tol = NEWTON_TOL * (1.0 + self.y.amax());
        let mut f = self.residual(&z);
        for it in 0..NEWTON_MAX_ITER {
            if !f.iter().all(|v| v.is_finite()) {
                return None;
            }
            if f.amax() < tol {
                return Some((z, it));
            }
            let jac = self.jacobian(&z);
            let step = match jac.clone().lu().solve(&(-&f)) {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => jac.svd(true, true).solve(&(-&f), 1e-14).ok()?,
            };
            let norm = f.norm();
            let mut t = 1.0;
            loop {
                let trial = &z + &step * t;
                let ft = self.residual(&trial);
                if ft.iter().all(|v| v.is_finite()) && ft.norm() < (1.0 - 1e-4 * t) * norm {
                    z = trial;
                    f = ft;
                    break;
                }
                t *= 0.5;
                if t < 1e-10 {
                    return None;
                }
            }
        }
        (f.amax() < tol).then_some((z, NEWTON_MAX_ITER))
    }

    fn start(&self, sc: f64, inst: &ProblemInstance) -> Option<DVector<f64>> {
        let (nd, nt, n) = (self.nd, self.nt, self.cells());
        let b0 = Matrix::from_fn(nd, nt, |d, t| match self.pattern[d * nt + t] {
            Binding::Free => sc * self.alpha * self.y[(d, t)],
            Binding::Zero => 0.0,
            Binding::Cap => self.y[(d, t)],
        });
        let br = best_response(&Contract::new(b0.clone()).ok()?, &inst.prior, &inst.cost, 0.0).ok()?;
        let mut p = br.experiment.conditionals().map(|v| v.max(1e-10));
        for t in 0..nt {
            let s: f64 = p.column(t).sum();
            p.column_mut(t).iter_mut().for_each(|v| *v /= s);
        }
        let m = marginal_unchecked(&p, self.pi);
        let mut lambda = Matrix::zeros(nd, nt);
        for t in 0..nt {
            let zeros: Vec<usize> = (0..nd).filter(|&d| self.pattern[d * nt + t] == Binding::Zero).collect();
            for &d in &zeros {
                lambda[(d, t)] = (1.0 - self.xi) * self.pi[t] / zeros.len() as f64;
            }
        }
        let (gamma, _) = shannon_gamma(&p, self.pi, self.scale, &lambda);
        let mut z = DVector::zeros(self.len());
        for d in 0..nd {
            for t in 0..nt {
                let k = d * nt + t;
                z[k] = p[(d, t)].ln();
                z[n + k] = match self.pattern[k] {
                    Binding::Free => b0[(d, t)],
                    _ => lambda[(d, t)],
                };
            }
        }
        for t in 0..nt {
            let rows: Vec<usize> = (0..nd).filter(|&d| self.pattern[d * nt + t] != Binding::Free).collect();
            let rows = if rows.is_empty() { (0..nd).collect() } else { rows };
            z[2 * n + t] = rows
                .iter()
                .map(|&d| self.alpha * self.y[(d, t)] - gamma[(d, t)] - b0[(d, t)])
                .sum::<f64>()
                / rows.len() as f64;
            z[2 * n + nt + t] = (0..nd)
                .map(|d| b0[(d, t)] - self.scale * (p[(d, t)] / m[d]).ln())
                .sum::<f64>()
                / nd as f64;
        }
        Some(z)
    }
}

fn objective(report: &PayoffReport, alpha: f64, xi: f64) -> f64 {
    alpha * report.expected_output - report.expected_payment + xi * report.agent_utility
}

/// Checks signs, feasibility and the principal KKT conditions at a root.
fn accept(sys: &System, u: &Unpacked, inst: &ProblemInstance) -> Result<Option<SecondBest>> {
    let (nd, nt) = (sys.nd, sys.nt);
    if u.p.iter().any(|&v| !(v > MIN_PROB)) {
        return Ok(None);
    }
    let y = sys.y;
    let slack = FEASIBILITY_TOL * (1.0 + y.amax());
    let mut both_bound = Vec::new();
    for d in 0..nd {
        for t in 0..nt {
            let k = d * nt + t;
            let (b, l) = (u.b[(d, t)], u.lambda[(d, t)]);
            let ok = match sys.pattern[k] {
                Binding::Free => b >= -slack && b <= y[(d, t)] + slack,
                Binding::Zero if y[(d, t)] == 0.0 => {
                    both_bound.push((d, t));
                    true
                }
                Binding::Zero => l >= -SIGN_TOL,
                Binding::Cap => l <= SIGN_TOL,
            };
            if !ok {
                return Ok(None);
            }
        }
    }
    let b = Contract::new(u.b.map(|v| v.clamp(0.0, f64::INFINITY)).zip_map(y, |v, cap| v.min(cap)))?;
    let p = Experiment::normalized(u.p.clone())?;
    let g = gamma_from_duals(&p, &inst.prior, &inst.cost, &u.lambda, sys.xi)?;
    let mut residual: f64 = 0.0;
    for d in 0..nd {
        for t in 0..nt {
            residual = residual.max((b.get(d, t) - sys.alpha * y[(d, t)] + u.beta[t] + g.gamma[(d, t)]).abs());
        }
    }
    for t in 0..nt {
        residual = residual.max((u.lambda.column(t).sum() - (1.0 - sys.xi) * sys.pi[t]).abs());
    }
    let agent = agent_kkt_residual_on_support(&b, &inst.prior, &inst.cost, &p, 0.0)?;
    residual = residual.max(agent.residual);
    if residual >= PRINCIPAL_KKT_TOL {
        debug!("root rejected: principal KKT residual {residual:e}");
        return Ok(None);
    }
    let report = evaluate_profile(&b, &p, inst)?;
    let rho = agent_rho(b.payments(), p.conditionals(), sys.pi, &inst.cost);
    let tau = (0..nt).map(|t| sys.pi[t] * u.beta[t] - sys.xi * rho[t]).collect();
    let phi = DualCertificate::phi_from(p.conditionals(), sys.pi, &u.lambda, sys.xi);
    Ok(Some(SecondBest {
        objective: objective(&report, sys.alpha, sys.xi),
        decomposition: Decomposition {
            alpha: sys.alpha,
            beta: StateTransfer(u.beta.clone()),
            gamma: g.gamma,
            gamma_hat: g.gamma_hat,
        },
        duals: DualCertificate {
            lambda: u.lambda.clone(),
            xi: sys.xi,
            tau,
            rho,
            phi,
            mu: 0.0,
            both_bound,
        },
        contract: b,
        experiment: p,
        pattern: sys.pattern.to_vec(),
        report,
        residual,
    }))
}

/// Patterns with exactly one zero payment per state (or the forced zeros
/// where output vanishes), all other payments free.
fn primary_patterns(y: &Matrix) -> Vec<Vec<Binding>> {
    let (nd, nt) = y.shape();
    let mut out = vec![vec![Binding::Free; nd * nt]];
    for t in 0..nt {
        let forced: Vec<usize> = (0..nd).filter(|&d| y[(d, t)] == 0.0).collect();
        let choices: Vec<Vec<usize>> = if forced.is_empty() {
            (0..nd).map(|d| vec![d]).collect()
        } else {
            vec![forced]
        };
        out = out
            .into_iter()
            .flat_map(|pat| {
                choices.iter().map(move |zs| {
                    let mut p = pat.clone();
                    for &d in zs {
                        p[d * nt + t] = Binding::Zero;
                    }
                    p
                })
            })
            .collect();
    }
    out
}

/// Every pattern with at least one zero payment per state.
fn all_patterns(y: &Matrix) -> Vec<Vec<Binding>> {
    let (nd, nt) = y.shape();
    let n = nd * nt;
    let mut out = Vec::new();
    let total = 3usize.pow(n as u32);
    'outer: for code in 0..total {
        let mut c = code;
        let mut pat = Vec::with_capacity(n);
        for k in 0..n {
            let b = [Binding::Free, Binding::Zero, Binding::Cap][c % 3];
            c /= 3;
            let cell = y[(k / nt, k % nt)];
            if cell == 0.0 && b != Binding::Zero {
                continue 'outer;
            }
            pat.push(b);
        }
        if (0..nt).all(|t| (0..nd).any(|d| pat[d * nt + t] == Binding::Zero)) {
            out.push(pat);
        }
    }
    out
}

fn check_inputs(inst: &ProblemInstance, xi: f64, alpha: f64) -> Result<f64> {
    let scale = inst
        .cost
        .shannon_scale()
        .ok_or_else(|| Error::NonShannonUnsupported(format!("{:?}", inst.cost)))?;
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::InvalidInput(format!(
            "participation multiplier must lie in [0,1], got {xi}"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "piece rate must lie in [0,1], got {alpha}"
        )));
    }
    if inst.output.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput(
            "second-best solver needs nonnegative output".into(),
        ));
    }
    Ok(scale)
}

fn solve_patterns(
    inst: &ProblemInstance,
    xi: f64,
    alpha: f64,
    scale: f64,
    patterns: &[Vec<Binding>],
) -> Result<Option<SecondBest>> {
    let mut best: Option<SecondBest> = None;
    for pattern in patterns {
        let sys = System {
            y: &inst.output,
            pi: inst.prior.as_slice(),
            scale,
            xi,
            alpha,
            pattern,
            nd: inst.n_decisions(),
            nt: inst.n_states(),
        };
        for sc in START_SCALES {
            let Some(z0) = sys.start(sc, inst) else { continue };
            let Some((z, iters)) = sys.newton(z0) else { continue };
            let u = sys.unpack(&z);
            if let Some(sol) = accept(&sys, &u, inst)? {
                debug!(
                    "pattern {pattern:?} start {sc}: root in {iters} steps, objective {}",
                    sol.objective
                );
                if best.as_ref().is_none_or(|b| sol.objective > b.objective + 1e-12) {
                    best = Some(sol);
                }
            }
        }
    }
    Ok(best)
}

/// Solves the principal's KKT system with every decision in the agent's
/// support, for participation multiplier `ξ` and piece rate `α`.
///
/// Patterns with one zero payment per state are tried first; the
/// remaining patterns only when none of those yields a valid root. Among
/// valid roots the one with the largest objective is returned.
pub fn second_best_solve(inst: &ProblemInstance, xi: f64, alpha: f64) -> Result<SecondBest> {
    let scale = check_inputs(inst, xi, alpha)?;
    let primary = primary_patterns(&inst.output);
    if let Some(sol) = solve_patterns(inst, xi, alpha, scale, &primary)? {
        return Ok(sol);
    }
    let cells = inst.n_decisions() * inst.n_states();
    let mut tried = primary.len();
    if cells <= FULL_ENUMERATION_CELLS {
        let rest: Vec<_> = all_patterns(&inst.output)
            .into_iter()
            .filter(|p| !primary.contains(p))
            .collect();
        tried += rest.len();
        if let Some(sol) = solve_patterns(inst, xi, alpha, scale, &rest)? {
            return Ok(sol);
        }
    }
    Err(Error::NoPatternFound { tried })
}

fn subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (1usize..(1 << n)).map(move |mask| (0..n).filter(|d| mask & (1 << d) != 0).collect())
}

/// Global search over the agent's consideration set: interior KKT roots
/// on every subset of decisions with zero payments elsewhere, plus the
/// corner contracts `b = 0` under which the agent takes a single decision.
/// Corners are the limit of vanishing payments on that decision.
pub fn pareto_solve(inst: &ProblemInstance, xi: f64, alpha: f64) -> Result<ParetoSolution> {
    check_inputs(inst, xi, alpha)?;
    let (nd, nt) = inst.output.shape();
    if nd > 12 {
        return Err(Error::TooLarge(format!(
            "{nd} decisions exceed the consideration-set search limit"
        )));
    }
    let mut best: Option<ParetoSolution> = None;
    let mut consider = |cand: ParetoSolution| {
        if best.as_ref().is_none_or(|b| cand.objective > b.objective + 1e-12) {
            best = Some(cand);
        }
    };
    for keep in subsets(nd) {
        if keep.len() == 1 {
            let d = keep[0];
            let b = Contract::zeros(nd, nt);
            let p = Experiment::new(Matrix::from_fn(nd, nt, |r, _| f64::from(u8::from(r == d))))?;
            let report = evaluate_profile(&b, &p, inst)?;
            consider(ParetoSolution {
                objective: objective(&report, alpha, xi),
                contract: b,
                experiment: p,
                report,
                support: keep,
                interior: None,
            });
            continue;
        }
        let sub = inst.restrict(&keep);
        let sol = match second_best_solve(&sub, xi, alpha) {
            Ok(s) => s,
            Err(Error::NoPatternFound { .. }) | Err(Error::NoConvergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        let mut b = Matrix::zeros(nd, nt);
        let mut p = Matrix::zeros(nd, nt);
        for (i, &d) in keep.iter().enumerate() {
            for t in 0..nt {
                b[(d, t)] = sol.contract.get(i, t);
                p[(d, t)] = sol.experiment.get(i, t);
            }
        }
        let b = Contract::new(b)?;
        let p = Experiment::new(p)?;
        if keep.len() < nd {
            let kkt = agent_kkt_residual_on_support(&b, &inst.prior, &inst.cost, &p, 0.0)?;
            if kkt.residual > PRINCIPAL_KKT_TOL {
                continue;
            }
        }
        let report = evaluate_profile(&b, &p, inst)?;
        consider(ParetoSolution {
            objective: objective(&report, alpha, xi),
            contract: b,
            experiment: p,
            report,
            support: keep,
            interior: Some(sol),
        });
    }
    best.ok_or(Error::NoPatternFound { tried: (1 << nd) - 1 })
}

/// Pareto-optimal contract giving the agent utility `r` at piece rate `α`.
///
/// Above the first-best threshold the boundary contract `αy − β_min` is
/// topped up by a constant transfer; below it `ξ` is bisected until the
/// second-best solution meets `r`. A target below the `ξ = 0` utility
/// leaves participation slack.
pub fn solve_for_reservation(inst: &ProblemInstance, r: f64, alpha: f64) -> Result<ReservationSolution> {
    check_inputs(inst, 0.0, alpha)?;
    if !r.is_finite() && r != f64::NEG_INFINITY {
        return Err(Error::InvalidInput(format!(
            "reservation utility must be finite or -inf, got {r}"
        )));
    }
    let y = &inst.output;
    let beta_min = StateTransfer::min_payment(y, alpha);
    let boundary = Contract::new(y * alpha)?.apply_transfer(&beta_min)?;
    let br = best_response(&boundary, &inst.prior, &inst.cost, 0.0)?;
    if r >= br.value {
        // Return a common share of the minimum output in every state.
        let ymin = StateTransfer::min_payment(y, 1.0);
        let room = inst.prior.expect(|t| ymin.0[t]);
        let share = if room > 0.0 { (r - br.value) / room } else { 0.0 };
        if share > 1.0 + FEASIBILITY_TOL || (room == 0.0 && r > br.value + FEASIBILITY_TOL) {
            return Err(Error::OutOfRange {
                target: r,
                low: f64::NEG_INFINITY,
                high: br.value + room,
            });
        }
        let share = share.min(1.0);
        let topped = boundary.apply_transfer(&StateTransfer(ymin.0.iter().map(|v| -share * v).collect()))?;
        let p = br.experiment;
        let report = evaluate_profile(&topped, &p, inst)?;
        return Ok(ReservationSolution {
            contract: topped,
            experiment: p,
            report,
            xi: 1.0,
            alpha,
            first_best: true,
            second_best: None,
        });
    }
    let finish = |sol: SecondBest| ReservationSolution {
        contract: sol.contract.clone(),
        experiment: sol.experiment.clone(),
        report: sol.report.clone(),
        xi: sol.duals.xi,
        alpha,
        first_best: false,
        second_best: Some(sol),
    };
    // Without an interior root at ξ = 0 the slack-participation optimum is
    // found by the consideration-set search.
    match second_best_solve(inst, 0.0, alpha) {
        Ok(low) if r <= low.report.agent_utility => return Ok(finish(low)),
        Ok(_) => {}
        Err(Error::NoPatternFound { .. }) => {
            let global = pareto_solve(inst, 0.0, alpha)?;
            if r <= global.report.agent_utility {
                return Ok(ReservationSolution {
                    contract: global.contract,
                    experiment: global.experiment,
                    report: global.report,
                    xi: 0.0,
                    alpha,
                    first_best: false,
                    second_best: global.interior,
                });
            }
        }
        Err(e) => return Err(e),
    }
    // Interior roots disappear at small ξ, where the agent's utility is
    // below target anyway.
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut last = f64::NAN;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let sol = match second_best_solve(inst, mid, alpha) {
            Ok(s) => s,
            Err(Error::NoPatternFound { .. }) => {
                lo = mid;
                continue;
            }
            Err(e) => return Err(e),
        };
        let v = sol.report.agent_utility;
        last = v;
        if (v - r).abs() < RESERVATION_TOL {
            return Ok(finish(sol));
        }
        if v < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence {
        solver: "participation multiplier bisection",
        iterations: 60,
        residual: (last - r).abs(),
    })
}
