use rayon::prelude::*;

use crate::agent::best_response_capacity;
use crate::error::{Error, Result};
use crate::model::{evaluate_profile, Contract, Experiment, Matrix, PayoffReport, ProblemInstance};

pub const DEFAULT_ORACLE_GRID: usize = 21;
const MAX_CELLS: usize = 4;
const MAX_GRID: usize = 41;

/// Best grid contract found by exhaustive search.
#[derive(Clone, Debug)]
pub struct OracleResult {
    pub contract: Contract,
    pub experiment: Experiment,
    pub report: PayoffReport,
    /// Largest payment grid step.
    pub grid_error: f64,
    pub evaluated: usize,
}

fn grid_contract(y: &Matrix, grid_n: usize, mut code: usize) -> Matrix {
    let (nd, nt) = y.shape();
    let mut b = Matrix::zeros(nd, nt);
    for k in 0..nd * nt {
        let (d, t) = (k / nt, k % nt);
        b[(d, t)] = y[(d, t)] * (code % grid_n) as f64 / (grid_n - 1) as f64;
        code /= grid_n;
    }
    b
}

/// Maximizes the principal's payoff over contracts with every payment on a
/// `grid_n`-point grid in `[0, y]`, subject to agent utility at least `r`.
pub fn brute_force_pareto(inst: &ProblemInstance, r: f64, grid_n: usize) -> Result<OracleResult> {
    let (nd, nt) = inst.output.shape();
    if nd * nt > MAX_CELLS || grid_n > MAX_GRID {
        return Err(Error::TooLarge(format!(
            "{nd}x{nt} instance with {grid_n} grid points (limits {MAX_CELLS} cells, {MAX_GRID} points)"
        )));
    }
    if grid_n < 2 {
        return Err(Error::InvalidInput("grid needs at least two points".into()));
    }
    if inst.output.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("oracle needs nonnegative output".into()));
    }
    let total = grid_n.pow((nd * nt) as u32);
    let y = &inst.output;
    let best = (0..total)
        .into_par_iter()
        .map(|code| -> Result<Option<(f64, usize)>> {
            let b = Contract::new(grid_contract(y, grid_n, code))?;
            let sol = best_response_capacity(&b, &inst.prior, inst.capacity, &inst.cost)?;
            if sol.value < r {
                return Ok(None);
            }
            let report = evaluate_profile(&b, &sol.experiment, inst)?;
            Ok(Some((report.principal_utility, code)))
        })
        .try_reduce(
            || None,
            |a, b| {
                Ok(match (a, b) {
                    (None, x) | (x, None) => x,
                    (Some(x), Some(z)) => {
                        if z.0 > x.0 || (z.0 == x.0 && z.1 < x.1) {
                            Some(z)
                        } else {
                            Some(x)
                        }
                    }
                })
            },
        )?;
    let (_, code) = best.ok_or(Error::OutOfRange {
        target: r,
        low: f64::NEG_INFINITY,
        high: f64::NAN,
    })?;
    let b = Contract::new(grid_contract(y, grid_n, code))?;
    let sol = best_response_capacity(&b, &inst.prior, inst.capacity, &inst.cost)?;
    let report = evaluate_profile(&b, &sol.experiment, inst)?;
    Ok(OracleResult {
        contract: b,
        experiment: sol.experiment,
        report,
        grid_error: y.amax() / (grid_n - 1) as f64,
        evaluated: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use crate::model::{matrix_from_rows, Prior};

    #[test]
    fn limits() {
        let y = Matrix::from_element(3, 2, 1.0);
        let inst =
            ProblemInstance::unlabeled(y, Prior::uniform(2).unwrap(), f64::INFINITY, CostModel::shannon()).unwrap();
        assert!(matches!(brute_force_pareto(&inst, 0.0, 5), Err(Error::TooLarge(_))));
        let small = inst.restrict(&[0, 1]);
        assert!(matches!(brute_force_pareto(&small, 0.0, 42), Err(Error::TooLarge(_))));
    }

    #[test]
    fn coarse_example() {
        let y = matrix_from_rows(&[&[0.0, 10.0], &[5.0, 5.0]]).unwrap();
        let inst = ProblemInstance::unlabeled(
            y,
            Prior::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap(),
            f64::INFINITY,
            CostModel::shannon(),
        )
        .unwrap();
        let res = brute_force_pareto(&inst, f64::NEG_INFINITY, 6).unwrap();
        assert!(res.report.principal_utility > 4.755 - res.grid_error);
        assert_eq!(res.evaluated, 6usize.pow(4));
    }
}
