use crate::agent::{best_response, best_response_capacity, AgentSolution};
use crate::error::{Error, Result};
use crate::model::{Contract, ProblemInstance, StateTransfer};

const ALPHA_TOL: f64 = 1e-6;
const FRONTIER_TOL: f64 = 1e-6;

/// First-best contract `αy − β` on the Pareto frontier.
#[derive(Clone, Debug)]
pub struct FirstBest {
    pub contract: Contract,
    pub solution: AgentSolution,
    pub alpha: f64,
    pub beta: StateTransfer,
}

/// Smallest piece rate at which the unconstrained best response to `αy`
/// exhausts the capacity; 1 when the capacity never binds.
pub fn alpha_prime(inst: &ProblemInstance) -> Result<f64> {
    if !(inst.capacity > 0.0) {
        return Err(Error::InvalidInput(format!(
            "capacity must be positive, got {}",
            inst.capacity
        )));
    }
    if inst.capacity.is_infinite() {
        return Ok(1.0);
    }
    let y = inst.output_contract();
    let cost_at =
        |alpha: f64| -> Result<f64> { Ok(best_response(&y.scale(alpha), &inst.prior, &inst.cost, 0.0)?.cost) };
    if cost_at(1.0)? < inst.capacity {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > ALPHA_TOL {
        let mid = 0.5 * (lo + hi);
        if cost_at(mid)? >= inst.capacity {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn agent(b: &Contract, inst: &ProblemInstance) -> Result<AgentSolution> {
    best_response_capacity(b, &inst.prior, inst.capacity, &inst.cost)
}

/// Point `s ∈ [0, 2]` on the first-best path: `α(y − y_min)` for
/// `α = α′ + s(1 − α′)` up to `s = 1`, then `y − (2 − s)y_min`.
fn path(inst: &ProblemInstance, alpha_lo: f64, s: f64) -> Result<(Contract, f64, StateTransfer)> {
    let y = inst.output_contract();
    let ymin = StateTransfer::min_payment(&inst.output, 1.0);
    let (alpha, w) = if s <= 1.0 {
        (alpha_lo + s * (1.0 - alpha_lo), None)
    } else {
        (1.0, Some(2.0 - s))
    };
    let beta = StateTransfer(ymin.0.iter().map(|v| v * w.unwrap_or(alpha)).collect());
    Ok((y.scale(alpha).apply_transfer(&beta)?, alpha, beta))
}

/// First-best contract giving the agent utility `r`.
pub fn first_best_frontier(inst: &ProblemInstance, r: f64) -> Result<FirstBest> {
    let alpha_lo = if inst.capacity.is_finite() {
        alpha_prime(inst)?
    } else {
        1.0
    };
    let eval = |s: f64| -> Result<FirstBest> {
        let (contract, alpha, beta) = path(inst, alpha_lo, s)?;
        let solution = agent(&contract, inst)?;
        Ok(FirstBest {
            contract,
            solution,
            alpha,
            beta,
        })
    };
    let s_lo = if alpha_lo < 1.0 { 0.0 } else { 1.0 };
    let low = eval(s_lo)?;
    let high = eval(2.0)?;
    let (vlo, vhi) = (low.solution.value, high.solution.value);
    if r < vlo - FRONTIER_TOL || r > vhi + FRONTIER_TOL {
        return Err(Error::OutOfRange {
            target: r,
            low: vlo,
            high: vhi,
        });
    }
    if (r - vlo).abs() <= FRONTIER_TOL {
        return Ok(low);
    }
    if (r - vhi).abs() <= FRONTIER_TOL {
        return Ok(high);
    }
    let (mut a, mut b) = (s_lo, 2.0);
    let mut best = low;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let sol = eval(mid)?;
        let v = sol.solution.value;
        if v < r {
            a = mid;
        } else {
            b = mid;
        }
        best = sol;
        if (v - r).abs() < FRONTIER_TOL * 1e-2 || b - a < 1e-15 {
            break;
        }
    }
    let gap = (best.solution.value - r).abs();
    if gap > FRONTIER_TOL {
        return Err(Error::NoConvergence {
            solver: "first-best frontier bisection",
            iterations: 200,
            residual: gap,
        });
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use crate::model::{evaluate_profile, matrix_from_rows, Prior};

    fn example(kappa: f64) -> ProblemInstance {
        let y = matrix_from_rows(&[&[0.0, 10.0], &[5.0, 5.0]]).unwrap();
        ProblemInstance::unlabeled(
            y,
            Prior::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap(),
            kappa,
            CostModel::shannon(),
        )
        .unwrap()
    }

    #[test]
    fn alpha_prime_example() {
        let a = alpha_prime(&example(0.5)).unwrap();
        assert!((a - 0.691736).abs() < 1e-5, "{a}");
        assert_eq!(alpha_prime(&example(0.6)).unwrap(), 1.0);
        assert!(alpha_prime(&example(0.0)).is_err());
    }

    #[test]
    fn frontier_endpoints() {
        let inst = example(0.5);
        let lo = first_best_frontier(&inst, 2.853152).unwrap();
        assert!((lo.alpha - 0.691736).abs() < 1e-4);
        assert!((lo.contract.get(0, 1) - 5.0 * lo.alpha).abs() < 1e-3);
        assert!(lo.contract.get(0, 0).abs() < 1e-12 && lo.contract.get(1, 1).abs() < 1e-12);
        let hi = first_best_frontier(&inst, 6.014111).unwrap();
        assert!((hi.contract.payments() - &inst.output).amax() < 1e-4);
        assert!(matches!(first_best_frontier(&inst, 7.0), Err(Error::OutOfRange { .. })));
        assert!(matches!(first_best_frontier(&inst, 2.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn frontier_preserves_welfare() {
        let inst = example(0.5);
        let base = agent(&inst.output_contract(), &inst).unwrap();
        let w0 = evaluate_profile(&inst.output_contract(), &base.experiment, &inst)
            .unwrap()
            .welfare;
        for r in [3.0, 4.0, 5.5] {
            let fb = first_best_frontier(&inst, r).unwrap();
            assert!((fb.solution.value - r).abs() < 1e-6);
            let w = evaluate_profile(&fb.contract, &fb.solution.experiment, &inst)
                .unwrap()
                .welfare;
            assert!((w - w0).abs() < 1e-6, "{w} vs {w0}");
        }
    }

    #[test]
    fn alpha_prime_nondecreasing_in_capacity() {
        let mut last = 0.0;
        for kappa in [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0] {
            let a = alpha_prime(&example(kappa)).unwrap();
            assert!(a >= last, "kappa {kappa}: {a} < {last}");
            last = a;
        }
        assert_eq!(last, 1.0);
    }
}
