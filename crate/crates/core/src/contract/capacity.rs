use super::second_best::solve_for_reservation;
use crate::error::{Error, Result};
use crate::model::ProblemInstance;

const ALPHA_STAR_TOL: f64 = 1e-4;

/// Largest piece rate at which the capacity-free Pareto solution for
/// reservation utility `r` stays strictly inside the capacity.
pub fn alpha_star(inst: &ProblemInstance, r: f64) -> Result<f64> {
    if !(inst.capacity > 0.0) {
        return Err(Error::InvalidInput(format!(
            "capacity must be positive, got {}",
            inst.capacity
        )));
    }
    if inst.capacity.is_infinite() {
        return Ok(1.0);
    }
    let free = inst.with_capacity(f64::INFINITY);
    // A target out of reach of `αy − β` contracts only happens at small
    // piece rates, where the capacity is slack.
    let cost_at = |alpha: f64| -> Result<f64> {
        match solve_for_reservation(&free, r, alpha) {
            Ok(sol) => inst.cost.value(&sol.experiment, &inst.prior),
            Err(Error::OutOfRange { .. }) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    };
    if cost_at(1.0)? < inst.capacity {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > ALPHA_STAR_TOL {
        let mid = 0.5 * (lo + hi);
        if cost_at(mid)? < inst.capacity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use crate::model::{matrix_from_rows, Prior};

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
    fn continuity_with_alpha_prime() {
        let a = alpha_star(&example(0.5), 2.853152).unwrap();
        assert!((a - 0.692).abs() < 0.005, "{a}");
    }

    #[test]
    fn slack_capacity() {
        assert_eq!(alpha_star(&example(5.0), 2.853152).unwrap(), 1.0);
        assert_eq!(alpha_star(&example(f64::INFINITY), 0.0).unwrap(), 1.0);
    }

    #[test]
    fn nondecreasing_in_capacity() {
        let mut last = 0.0;
        for kappa in [0.3, 0.4, 0.5, 0.55, 0.6] {
            let a = alpha_star(&example(kappa), 2.853152).unwrap();
            assert!(a >= last - 1e-4, "kappa {kappa}: {a} < {last}");
            last = a;
        }
    }
}
