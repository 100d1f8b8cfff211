//! The built-in two-state example: tables, scalars, payoff comparison and
//! figure data, checked against a golden table.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::agent::{best_response, best_response_capacity, AgentSolution};
use crate::contract::{alpha_prime, second_best_solve, SecondBest};
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::geometry::{default_grid, figure_data, fmt, write_figure, FigureData, FigureExtras, DEFAULT_GRID_POINTS};
use crate::io::to_canonical_string;
use crate::model::{
    evaluate_profile, matrix_from_rows, posterior, Contract, Experiment, Matrix, PayoffReport, Prior, ProblemInstance,
    StateTransfer,
};

/// `y = (0, 10; 5, 5)`, `π = (2/3, 1/3)`, `κ = 1/2`, Shannon cost in nats.
pub fn example_instance() -> ProblemInstance {
    let y = matrix_from_rows(&[&[0.0, 10.0], &[5.0, 5.0]]).expect("static matrix");
    ProblemInstance::new(
        vec!["d1".into(), "d2".into()],
        vec!["theta1".into(), "theta2".into()],
        y,
        Prior::new(vec![2.0 / 3.0, 1.0 / 3.0]).expect("static prior"),
        0.5,
        CostModel::shannon(),
    )
    .expect("static instance")
}

/// One compared value.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldenCheck {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub tol: f64,
}

impl GoldenCheck {
    pub fn passed(&self) -> bool {
        (self.actual - self.expected).abs() <= self.tol
    }
}

/// Everything computed for the example, plus the golden comparison.
#[derive(Clone, Debug)]
pub struct Reproduction {
    pub unconstrained: AgentSolution,
    pub constrained: AgentSolution,
    pub alpha_prime: f64,
    pub agent_value_low: f64,
    pub agent_value_high: f64,
    pub second_best: SecondBest,
    pub truncated: Contract,
    pub truncated_response: AgentSolution,
    /// `(label, report)` rows of the payoff comparison.
    pub comparison: Vec<(String, PayoffReport)>,
    pub figures: Vec<(String, FigureData)>,
    /// Chord slopes through the optimal contract's posteriors: output less
    /// transfer, and payment.
    pub chord_slopes: (f64, f64),
    pub checks: Vec<GoldenCheck>,
}

impl Reproduction {
    pub fn failures(&self) -> Vec<&GoldenCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

fn check(checks: &mut Vec<GoldenCheck>, name: impl Into<String>, expected: f64, actual: f64, tol: f64) {
    checks.push(GoldenCheck {
        name: name.into(),
        expected,
        actual,
        tol,
    });
}

/// Posterior matrix: row `d` is `p(·|d)`.
pub fn posterior_table(p: &Experiment, prior: &Prior) -> Result<Matrix> {
    let (nd, nt) = (p.decisions(), p.states());
    let mut m = Matrix::zeros(nd, nt);
    for d in 0..nd {
        let q = posterior(p, prior, d)?;
        for t in 0..nt {
            m[(d, t)] = q[t];
        }
    }
    Ok(m)
}

/// Posterior of the second state after each decision.
fn second_state_posteriors(p: &Experiment, prior: &Prior) -> Result<Vec<f64>> {
    (0..p.decisions()).map(|d| Ok(posterior(p, prior, d)?[1])).collect()
}

fn line_of(b: &Contract, d: usize) -> (f64, f64) {
    (b.get(d, 1) - b.get(d, 0), b.get(d, 0))
}

fn chord(q: &[f64], v: &[f64]) -> (f64, f64) {
    let slope = (v[1] - v[0]) / (q[1] - q[0]);
    (slope, v[0] - slope * q[0])
}

/// Points A (expected output less transfer) and B (expected payment) at the
/// agent's posteriors, with the chords through them.
fn chord_extras(b: &Contract, y: &Matrix, beta: &StateTransfer, q: &[f64]) -> (FigureExtras, f64, f64) {
    let at = |m: &dyn Fn(usize, usize) -> f64, d: usize, x: f64| (1.0 - x) * m(d, 0) + x * m(d, 1);
    let a: Vec<f64> = q
        .iter()
        .enumerate()
        .map(|(d, &x)| at(&|d, t| y[(d, t)] - beta.0[t], d, x))
        .collect();
    let bv: Vec<f64> = q
        .iter()
        .enumerate()
        .map(|(d, &x)| at(&|d, t| b.get(d, t), d, x))
        .collect();
    let mut extras = FigureExtras::default();
    for d in 0..q.len() {
        extras.points.push((format!("A_d{}", d + 1), q[d], a[d]));
        extras.points.push((format!("B_d{}", d + 1), q[d], bv[d]));
    }
    let (sa, ia) = chord(q, &a);
    let (sb, ib) = chord(q, &bv);
    extras.lines.push(("chord_A".into(), sa, ia));
    extras.lines.push(("chord_B".into(), sb, ib));
    (extras, sa, sb)
}

fn contact_qs(fig: &FigureData) -> Vec<f64> {
    fig.concavified.contacts.iter().map(|c| c.q).collect()
}

/// Runs the full example pipeline without touching the filesystem.
pub fn compute() -> Result<Reproduction> {
    let inst = example_instance();
    let free = inst.with_capacity(f64::INFINITY);
    let prior = &inst.prior;
    let y = inst.output_contract();
    let grid = default_grid(DEFAULT_GRID_POINTS);
    let mut checks = Vec::new();

    let unconstrained = best_response(&y, prior, &inst.cost, 0.0)?;
    let constrained = best_response_capacity(&y, prior, inst.capacity, &inst.cost)?;
    let post_a = posterior_table(&unconstrained.experiment, prior)?;
    let post_b = posterior_table(&constrained.experiment, prior)?;
    for (tag, m, lo) in [("table1a", &post_a, 0.007), ("table1b", &post_b, 0.031)] {
        for d in 0..2 {
            for t in 0..2 {
                let expected = if d == t { lo } else { 1.0 - lo };
                check(
                    &mut checks,
                    format!("{tag}.posterior[d{},theta{}]", d + 1, t + 1),
                    expected,
                    m[(d, t)],
                    1e-3,
                );
            }
        }
    }
    check(&mut checks, "table1a.cost", 0.596, unconstrained.cost, 5e-3);
    check(&mut checks, "table1b.mu", 0.446, constrained.mu, 2e-3);

    let ap = alpha_prime(&inst)?;
    let ymin = StateTransfer::min_payment(&inst.output, 1.0);
    let low = y.apply_transfer(&ymin)?.scale(ap);
    let agent_value_low = best_response_capacity(&low, prior, inst.capacity, &inst.cost)?.value;
    let agent_value_high = constrained.value;
    check(&mut checks, "scalars.alpha_prime", 0.692, ap, 2e-3);
    check(&mut checks, "scalars.agent_value_low", 2.853, agent_value_low, 5e-3);
    check(&mut checks, "scalars.agent_value_high", 6.014, agent_value_high, 5e-3);

    let sb = second_best_solve(&free, 0.0, 1.0)?;
    let golden_b = [[0.0, 1.0], [0.702, 0.0]];
    let golden_p = [[0.160, 0.514], [0.840, 0.486]];
    let golden_g = [[-3.836, 2.404], [0.462, -1.596]];
    for d in 0..2 {
        for t in 0..2 {
            let cell = format!("[d{},theta{}]", d + 1, t + 1);
            check(
                &mut checks,
                format!("table2.contract{cell}"),
                golden_b[d][t],
                sb.contract.get(d, t),
                2e-2,
            );
            check(
                &mut checks,
                format!("table2.experiment{cell}"),
                golden_p[d][t],
                sb.experiment.get(d, t),
                5e-3,
            );
            check(
                &mut checks,
                format!("table2.gamma{cell}"),
                golden_g[d][t],
                sb.decomposition.gamma[(d, t)],
                2e-2,
            );
        }
    }
    let beta = sb.decomposition.beta.clone();
    check(&mut checks, "table2.beta[theta1]", 3.836, beta.0[0], 2e-2);
    check(&mut checks, "table2.beta[theta2]", 6.596, beta.0[1], 2e-2);
    let m1 = prior.expect(|t| sb.experiment.get(0, t));
    check(&mut checks, "table2.marginal[d1]", 0.278, m1, 2e-3);

    let shifted = y.apply_transfer(&beta)?;
    let truncated = shifted.truncate(&inst.output);
    let truncated_response = best_response(&truncated, prior, &inst.cost, 0.0)?;
    let golden_t = [[0.211, 0.963], [0.789, 0.037]];
    for d in 0..2 {
        for t in 0..2 {
            let v = truncated_response.experiment.get(d, t);
            check(
                &mut checks,
                format!("truncated.experiment[d{},theta{}]", d + 1, t + 1),
                golden_t[d][t],
                v,
                2e-3,
            );
        }
    }

    let comparison = vec![
        (
            "y-beta".to_string(),
            evaluate_profile(&shifted, &unconstrained.experiment, &free)?,
        ),
        (
            "max(0,y-beta)".to_string(),
            evaluate_profile(&truncated, &truncated_response.experiment, &free)?,
        ),
        ("optimal".to_string(), sb.report.clone()),
    ];
    let golden_c = [(6.633, 1.877, 0.596), (5.900, 1.704, 0.293), (5.321, 0.566, 0.067)];
    for ((label, r), g) in comparison.iter().zip(golden_c) {
        check(
            &mut checks,
            format!("comparison.{label}.expected_output"),
            g.0,
            r.expected_output,
            1e-2,
        );
        check(
            &mut checks,
            format!("comparison.{label}.expected_payment"),
            g.1,
            r.expected_payment,
            1e-2,
        );
        check(&mut checks, format!("comparison.{label}.cost"), g.2, r.cost, 1e-2);
    }

    let mut figures = Vec::new();
    let fig1_b = Contract::from_rows(&[&[0.0, 2.0], &[1.0, 1.0]])?;
    let fig_prior = 0.45;
    let cost = &inst.cost;
    let fig1 = figure_data(&fig1_b, cost, fig_prior, &grid, FigureExtras::default())?;
    let q1 = contact_qs(&fig1);
    check(&mut checks, "fig1.contact_low", 0.268941, q1[0], 2e-4);
    check(&mut checks, "fig1.contact_high", 0.731059, *q1.last().unwrap(), 2e-4);

    let fig2_b = fig1_b.apply_transfer(&StateTransfer(vec![0.0, 1.0]))?;
    let fig2 = figure_data(&fig2_b, cost, fig_prior, &grid, FigureExtras::default())?;

    // Capacity chosen so the multiplier at b is exactly one.
    let fig_pi = Prior::binary(fig_prior)?;
    let half = fig1_b.scale(0.5);
    let kappa = best_response(&half, &fig_pi, cost, 0.0)?.cost;
    let bound = best_response_capacity(&fig1_b, &fig_pi, kappa, cost)?;
    let fig3a = figure_data(
        &fig1_b.scale(1.0 / (1.0 + bound.mu)),
        cost,
        fig_prior,
        &grid,
        FigureExtras::default(),
    )?;
    let q3 = contact_qs(&fig3a);
    let shrink = q1
        .iter()
        .zip(&q3)
        .map(|(a, b)| ((b - fig_prior).abs() - (a - fig_prior).abs()).max(0.0))
        .fold(0.0, f64::max);
    check(&mut checks, "fig3a.contacts_toward_prior", 0.0, shrink, 0.0);
    let fig3b = figure_data(&half, cost, fig_prior, &grid, FigureExtras::default())?;

    let ex_prior = prior[1];
    let fig4 = figure_data(&shifted, cost, ex_prior, &grid, FigureExtras::default())?;
    let q4 = contact_qs(&fig4);
    check(&mut checks, "fig4.contact_low", 0.007, q4[0], 1e-3);
    check(&mut checks, "fig4.contact_high", 0.993, *q4.last().unwrap(), 1e-3);

    let mut extras5 = FigureExtras::default();
    for d in 0..2 {
        let (s, i) = line_of(&shifted, d);
        extras5.lines.push((format!("shifted_d{}", d + 1), s, i));
    }
    let fig5 = figure_data(&truncated, cost, ex_prior, &grid, extras5)?;

    let qt = second_state_posteriors(&truncated_response.experiment, prior)?;
    let (extras6, _, _) = chord_extras(&truncated, &inst.output, &beta, &qt);
    let fig6 = figure_data(&truncated, cost, ex_prior, &grid, extras6)?;

    let qs = second_state_posteriors(&sb.experiment, prior)?;
    let (extras7, sa, sbl) = chord_extras(&sb.contract, &inst.output, &beta, &qs);
    let fig7 = figure_data(&sb.contract, cost, ex_prior, &grid, extras7)?;
    check(&mut checks, "fig7.chord_slope_gap", 0.0, sa - sbl, 2e-2);

    let mut perturbed = sb.contract.payments().clone();
    perturbed[(0, 1)] = 0.85;
    let fig8 = figure_data(
        &Contract::new(perturbed)?,
        cost,
        ex_prior,
        &grid,
        FigureExtras::default(),
    )?;

    for (tag, fig) in [
        ("fig1", fig1),
        ("fig2", fig2),
        ("fig3a", fig3a),
        ("fig3b", fig3b),
        ("fig4", fig4),
        ("fig5", fig5),
        ("fig6", fig6),
        ("fig7", fig7),
        ("fig8", fig8),
    ] {
        figures.push((tag.to_string(), fig));
    }

    Ok(Reproduction {
        unconstrained,
        constrained,
        alpha_prime: ap,
        agent_value_low,
        agent_value_high,
        second_best: sb,
        truncated,
        truncated_response,
        comparison,
        figures,
        chord_slopes: (sa, sbl),
        checks,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn write_cells(w: &mut csv::Writer<fs::File>, quantity: &str, m: &Matrix, inst: &ProblemInstance) -> Result<()> {
    for d in 0..m.nrows() {
        for t in 0..m.ncols() {
            w.write_record([quantity, &inst.decisions[d], &inst.states[t], &fmt(m[(d, t)])])
                .map_err(csv_err)?;
        }
    }
    Ok(())
}

fn write_table(path: &Path, rows: &[(&str, &Matrix)], inst: &ProblemInstance) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["quantity", "decision", "state", "value"])
        .map_err(csv_err)?;
    for (q, m) in rows {
        write_cells(&mut w, q, m, inst)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every artifact into `out_dir` and returns the file list.
pub fn write_outputs(rep: &Reproduction, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let inst = example_instance();
    let prior = &inst.prior;
    let mut files = Vec::new();

    let post_a = posterior_table(&rep.unconstrained.experiment, prior)?;
    let post_b = posterior_table(&rep.constrained.experiment, prior)?;
    for (name, sol, post) in [
        ("table1a.csv", &rep.unconstrained, &post_a),
        ("table1b.csv", &rep.constrained, &post_b),
    ] {
        let path = out_dir.join(name);
        write_table(
            &path,
            &[("posterior", post), ("experiment", sol.experiment.conditionals())],
            &inst,
        )?;
        files.push(path);
    }

    let sb = &rep.second_best;
    let path = out_dir.join("table2.csv");
    {
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["quantity", "decision", "state", "value"])
            .map_err(csv_err)?;
        write_cells(&mut w, "contract", sb.contract.payments(), &inst)?;
        write_cells(&mut w, "experiment", sb.experiment.conditionals(), &inst)?;
        for (t, v) in sb.decomposition.beta.0.iter().enumerate() {
            w.write_record(["beta", "", &inst.states[t], &fmt(*v)])
                .map_err(csv_err)?;
        }
        write_cells(&mut w, "gamma", &sb.decomposition.gamma, &inst)?;
        write_cells(&mut w, "lambda", &sb.duals.lambda, &inst)?;
        if let Some(h) = &sb.decomposition.gamma_hat {
            for (d, v) in h.iter().enumerate() {
                w.write_record(["gamma_hat", &inst.decisions[d], "", &fmt(*v)])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    files.push(path);

    let path = out_dir.join("truncated.csv");
    write_table(
        &path,
        &[
            ("contract", rep.truncated.payments()),
            ("experiment", rep.truncated_response.experiment.conditionals()),
        ],
        &inst,
    )?;
    files.push(path);

    let path = out_dir.join("comparison.csv");
    {
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record([
            "contract",
            "expected_output",
            "expected_payment",
            "cost",
            "agent_utility",
            "principal_utility",
        ])
        .map_err(csv_err)?;
        for (label, r) in &rep.comparison {
            w.write_record([
                label.clone(),
                fmt(r.expected_output),
                fmt(r.expected_payment),
                fmt(r.cost),
                fmt(r.agent_utility),
                fmt(r.principal_utility),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    files.push(path);

    let path = out_dir.join("scalars.json");
    let scalars = json!({
        "alpha_prime": rep.alpha_prime,
        "mu": rep.constrained.mu,
        "cost_unconstrained": rep.unconstrained.cost,
        "agent_value": {"low": rep.agent_value_low, "high": rep.agent_value_high},
        "capacity": inst.capacity,
        "chord_slopes": {"output_less_transfer": rep.chord_slopes.0, "payment": rep.chord_slopes.1},
    });
    fs::write(&path, to_canonical_string(&scalars))?;
    files.push(path);

    for (tag, fig) in &rep.figures {
        write_figure(out_dir, tag, fig, &inst.decisions)?;
        for suffix in ["", "_lines", "_points"] {
            files.push(out_dir.join(format!("fig_{tag}{suffix}.csv")));
        }
    }

    let path = out_dir.join("golden.csv");
    {
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["check", "expected", "actual", "tolerance", "pass"])
            .map_err(csv_err)?;
        for c in &rep.checks {
            w.write_record([
                c.name.clone(),
                fmt(c.expected),
                fmt(c.actual),
                fmt(c.tol),
                c.passed().to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    files.push(path);
    Ok(files)
}

/// Computes and writes everything; mismatches are reported in the result,
/// not as an error.
pub fn reproduce(out_dir: &Path) -> Result<Reproduction> {
    let rep = compute()?;
    write_outputs(&rep, out_dir)?;
    Ok(rep)
}
