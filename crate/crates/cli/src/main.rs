use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::{debug, info};
use serde_json::{json, Value};

use infocontract::agent::{agent_kkt_residual, best_response, best_response_capacity, AgentSolution};
use infocontract::contract::{
    alpha_prime, alpha_star, brute_force_pareto, first_best_frontier, pareto_solve, solve_for_reservation, SecondBest,
    DEFAULT_ORACLE_GRID,
};
use infocontract::geometry::{default_grid, figure_data, write_figure, FigureExtras, DEFAULT_GRID_POINTS};
use infocontract::io::{labelled_matrix, parse_contract, parse_problem, to_canonical_string, write_matrix_csv};
use infocontract::model::{evaluate_profile, Contract, Matrix, ProblemInstance};
use infocontract::reproduce::reproduce;
use infocontract::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MALFORMED: u8 = 65;
const EXIT_NO_INPUT: u8 = 66;
const EXIT_SOLVER: u8 = 70;

#[derive(Parser)]
#[command(
    name = "infocontract",
    version,
    about = "Contracts for an agent who acquires costly information"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ProblemArgs {
    /// Problem JSON file.
    #[arg(long)]
    problem: PathBuf,
    /// Replace the problem's capacity (use `inf` for none).
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Agent's optimal experiment for a given contract.
    #[command(group(ArgGroup::new("mode").args(["mu", "capacity"])))]
    SolveAgent {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Contract JSON file.
        #[arg(long)]
        contract: PathBuf,
        /// Fixed capacity multiplier.
        #[arg(long)]
        mu: Option<f64>,
        /// Enforce the problem's capacity.
        #[arg(long)]
        capacity: bool,
    },
    /// Pareto-optimal contract for given weights or a reservation utility.
    #[command(group(ArgGroup::new("target").args(["xi", "reservation"]).required(true)))]
    SolveContract {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Weight on the agent's participation constraint.
        #[arg(long, requires = "alpha")]
        xi: Option<f64>,
        /// Piece rate.
        #[arg(long, requires = "xi")]
        alpha: Option<f64>,
        /// Agent reservation utility.
        #[arg(long, allow_negative_numbers = true)]
        reservation: Option<f64>,
        /// Also run the grid oracle and report its payoff.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = DEFAULT_ORACLE_GRID)]
        oracle_grid: usize,
        /// Write all matrices as CSV into this directory.
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
    /// First-best contract delivering a reservation utility.
    FirstBest {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, allow_negative_numbers = true)]
        reservation: f64,
    },
    /// Smallest piece rate at which the capacity binds under `αy`.
    AlphaPrime {
        #[command(flatten)]
        problem: ProblemArgs,
    },
    /// Capacity-equivalent piece rate for a reservation utility.
    AlphaStar {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, allow_negative_numbers = true)]
        reservation: f64,
    },
    /// Concavification data for a two-state contract.
    Geometry {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        contract: PathBuf,
        /// Output directory for the figure CSVs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "custom")]
        tag: String,
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        grid: usize,
    },
    /// Recompute the built-in example and compare against the golden table.
    Reproduce {
        #[arg(long, default_value = "reproduce-out")]
        out: PathBuf,
    },
    /// Exhaustive grid search over contracts (small instances only).
    Oracle {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, allow_negative_numbers = true)]
        reservation: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_ORACLE_GRID)]
        grid: usize,
    },
}

enum Failure {
    Usage(String),
    NoInput(String),
    Lib(Error),
    Golden(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<Value, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Failure::NoInput(format!("{}: no such file", path.display())),
        _ => Failure::Lib(Error::Io(format!("{}: {e}", path.display()))),
    })
}

fn load(args: &ProblemArgs) -> Result<ProblemInstance, Failure> {
    let mut inst = parse_problem(&read(&args.problem)?)?;
    if let Some(k) = args.kappa {
        if k.is_nan() || k < 0.0 {
            return Err(Failure::Usage(format!("--kappa must be nonnegative, got {k}")));
        }
        inst = inst.with_capacity(k);
    }
    info!(
        "loaded {} ({} decisions, {} states)",
        args.problem.display(),
        inst.n_decisions(),
        inst.n_states()
    );
    Ok(inst)
}

fn load_contract(path: &Path, inst: &ProblemInstance) -> Result<Contract, Failure> {
    Ok(parse_contract(&read(path)?, inst)?)
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn agent_json(sol: &AgentSolution, inst: &ProblemInstance) -> Value {
    json!({
        "experiment": labelled_matrix(sol.experiment.conditionals(), inst),
        "mu": sol.mu,
        "value": sol.value,
        "cost": sol.cost,
        "residual": sol.residual,
        "rho": sol.rho,
    })
}

fn second_best_json(sb: &SecondBest, inst: &ProblemInstance) -> Value {
    let d = &sb.decomposition;
    json!({
        "pattern": sb.pattern,
        "objective": sb.objective,
        "residual": sb.residual,
        "decomposition": {
            "alpha": d.alpha,
            "beta": d.beta,
            "gamma": labelled_matrix(&d.gamma, inst),
            "gamma_hat": d.gamma_hat,
        },
        "duals": {
            "lambda": labelled_matrix(&sb.duals.lambda, inst),
            "xi": sb.duals.xi,
            "tau": sb.duals.tau,
            "rho": sb.duals.rho,
            "mu": sb.duals.mu,
        },
    })
}

fn cmd_solve_agent(problem: &ProblemArgs, contract: &Path, mu: Option<f64>, capacity: bool) -> CmdResult {
    let inst = load(problem)?;
    let b = load_contract(contract, &inst)?;
    let sol = if capacity {
        best_response_capacity(&b, &inst.prior, inst.capacity, &inst.cost)?
    } else {
        best_response(&b, &inst.prior, &inst.cost, mu.unwrap_or(0.0))?
    };
    debug!("agent solver: {} iterations", sol.iterations);
    Ok(agent_json(&sol, &inst))
}

fn emit_csv(dir: &Path, files: &[(&str, &Matrix)], inst: &ProblemInstance) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    for (name, m) in files {
        write_matrix_csv(&dir.join(format!("{name}.csv")), m, &inst.decisions, &inst.states)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve_contract(
    problem: &ProblemArgs,
    xi: Option<f64>,
    alpha: Option<f64>,
    reservation: Option<f64>,
    oracle: bool,
    oracle_grid: usize,
    emit: Option<&Path>,
) -> CmdResult {
    let inst = load(problem)?;
    let (mut out, contract, experiment, sb, target) = if let Some(r) = reservation {
        let alpha = alpha_star(&inst, r)?;
        info!("capacity-equivalent piece rate {alpha}");
        let free = inst.with_capacity(f64::INFINITY);
        let sol = solve_for_reservation(&free, r, alpha)?;
        let report = evaluate_profile(&sol.contract, &sol.experiment, &inst)?;
        let out = json!({
            "mode": "reservation",
            "reservation": r,
            "alpha": sol.alpha,
            "xi": sol.xi,
            "first_best": sol.first_best,
            "report": report,
        });
        (out, sol.contract, sol.experiment, sol.second_best, r)
    } else {
        let (xi, alpha) = (xi.unwrap_or_default(), alpha.unwrap_or(1.0));
        let sol = pareto_solve(&inst, xi, alpha)?;
        let out = json!({
            "mode": "weights",
            "xi": xi,
            "alpha": alpha,
            "objective": sol.objective,
            "support": sol.support,
            "report": sol.report,
        });
        let v = sol.report.agent_utility;
        (out, sol.contract, sol.experiment, sol.interior, v)
    };
    let kkt = agent_kkt_residual(&contract, &inst.prior, &inst.cost, &experiment).ok();
    out["contract"] = labelled_matrix(contract.payments(), &inst);
    out["experiment"] = labelled_matrix(experiment.conditionals(), &inst);
    out["agent_kkt_residual"] = kkt.map_or(Value::Null, |k| num(k.residual));
    out["second_best"] = sb.as_ref().map_or(Value::Null, |s| second_best_json(s, &inst));
    if oracle {
        let res = brute_force_pareto(&inst, target - 1e-9, oracle_grid)?;
        out["oracle"] = json!({
            "contract": labelled_matrix(res.contract.payments(), &inst),
            "principal_utility": res.report.principal_utility,
            "grid_error": res.grid_error,
            "evaluated": res.evaluated,
        });
    }
    if let Some(dir) = emit {
        let mut files: Vec<(&str, &Matrix)> = vec![
            ("contract", contract.payments()),
            ("experiment", experiment.conditionals()),
        ];
        if let Some(s) = &sb {
            files.push(("gamma", &s.decomposition.gamma));
            files.push(("lambda", &s.duals.lambda));
        }
        emit_csv(dir, &files, &inst)?;
    }
    Ok(out)
}

fn cmd_first_best(problem: &ProblemArgs, r: f64) -> CmdResult {
    let inst = load(problem)?;
    let fb = first_best_frontier(&inst, r)?;
    let report = evaluate_profile(&fb.contract, &fb.solution.experiment, &inst)?;
    Ok(json!({
        "alpha": fb.alpha,
        "beta": fb.beta,
        "contract": labelled_matrix(fb.contract.payments(), &inst),
        "agent": agent_json(&fb.solution, &inst),
        "report": report,
    }))
}

fn cmd_geometry(problem: &ProblemArgs, contract: &Path, out: &Path, tag: &str, grid: usize) -> CmdResult {
    let inst = load(problem)?;
    if inst.n_states() != 2 {
        return Err(Failure::Lib(Error::InvalidInput(format!(
            "geometry needs exactly two states, problem has {}",
            inst.n_states()
        ))));
    }
    if grid < 3 {
        return Err(Failure::Usage("--grid needs at least 3 points".into()));
    }
    let b = load_contract(contract, &inst)?;
    let fig = figure_data(
        &b,
        &inst.cost,
        inst.prior[1],
        &default_grid(grid),
        FigureExtras::default(),
    )?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write_figure(out, tag, &fig, &inst.decisions)?;
    let c = &fig.concavified;
    let contacts: Vec<Value> = c
        .contacts
        .iter()
        .map(|k| {
            json!({
                "q": k.q,
                "weight": k.weight,
                "decision": k.label.map(|d| inst.decisions[d].clone()),
            })
        })
        .collect();
    Ok(json!({
        "prior": c.prior,
        "value": c.value,
        "agent_value": c.value - inst.cost.uncertainty(inst.prior.as_slice()),
        "tangent": {"slope": c.tangent.slope, "intercept": c.tangent.intercept},
        "contacts": contacts,
        "files": [format!("fig_{tag}.csv"), format!("fig_{tag}_lines.csv"), format!("fig_{tag}_points.csv")],
    }))
}

fn cmd_reproduce(out: &Path) -> CmdResult {
    let rep = reproduce(out)?;
    for c in &rep.checks {
        let mark = if c.passed() { "ok  " } else { "FAIL" };
        println!(
            "{mark} {:<48} expected {:>10} actual {:>12.6} tol {}",
            c.name, c.expected, c.actual, c.tol
        );
    }
    let failures = rep.failures();
    if !failures.is_empty() {
        let mut diff = String::new();
        for c in failures {
            diff.push_str(&format!(
                "- {}: {}\n+ {}: {} (off by {:.3e}, tol {})\n",
                c.name,
                c.expected,
                c.name,
                c.actual,
                (c.actual - c.expected).abs(),
                c.tol
            ));
        }
        return Err(Failure::Golden(diff));
    }
    println!(
        "all {} golden checks passed; outputs in {}",
        rep.checks.len(),
        out.display()
    );
    Ok(Value::Null)
}

fn cmd_oracle(problem: &ProblemArgs, reservation: Option<f64>, grid: usize) -> CmdResult {
    let inst = load(problem)?;
    let r = reservation.unwrap_or(f64::NEG_INFINITY);
    let res = brute_force_pareto(&inst, r, grid)?;
    Ok(json!({
        "contract": labelled_matrix(res.contract.payments(), &inst),
        "experiment": labelled_matrix(res.experiment.conditionals(), &inst),
        "report": res.report,
        "grid_error": res.grid_error,
        "evaluated": res.evaluated,
    }))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::SolveAgent {
            problem,
            contract,
            mu,
            capacity,
        } => cmd_solve_agent(&problem, &contract, mu, capacity),
        Command::SolveContract {
            problem,
            xi,
            alpha,
            reservation,
            oracle,
            oracle_grid,
            emit_csv,
        } => cmd_solve_contract(
            &problem,
            xi,
            alpha,
            reservation,
            oracle,
            oracle_grid,
            emit_csv.as_deref(),
        ),
        Command::FirstBest { problem, reservation } => cmd_first_best(&problem, reservation),
        Command::AlphaPrime { problem } => {
            let inst = load(&problem)?;
            Ok(json!({ "alpha_prime": alpha_prime(&inst)? }))
        }
        Command::AlphaStar { problem, reservation } => {
            let inst = load(&problem)?;
            Ok(json!({ "alpha_star": alpha_star(&inst, reservation)?, "reservation": reservation }))
        }
        Command::Geometry {
            problem,
            contract,
            out,
            tag,
            grid,
        } => cmd_geometry(&problem, &contract, &out, &tag, grid),
        Command::Reproduce { out } => cmd_reproduce(&out),
        Command::Oracle {
            problem,
            reservation,
            grid,
        } => cmd_oracle(&problem, reservation, grid),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            print!("{}", to_canonical_string(&v));
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::NoInput(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NO_INPUT)
        }
        Err(Failure::Lib(e @ Error::Malformed { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_MALFORMED)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_SOLVER)
        }
        Err(Failure::Golden(diff)) => {
            eprintln!("golden mismatch:\n{diff}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
