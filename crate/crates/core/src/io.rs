//! Problem and contract files: JSON in, canonical JSON and CSV out.
//!
//! Problem files look like
//!
//! ```json
//! {"decisions": ["d1", "d2"], "states": ["theta1", "theta2"],
//!  "output": [[0, 10], [5, 5]], "prior": [0.6667, 0.3333],
//!  "capacity": 0.5, "cost": {"type": "shannon", "scale": 1.0}}
//! ```
//!
//! `capacity` may be omitted or `null` for an unconstrained agent.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::cost::{BregmanKernel, CostModel, Uncertainty};
use crate::error::{Error, Result};
use crate::model::{Contract, Matrix, Prior, ProblemInstance};

/// Tolerance on the prior summing to one in problem files.
pub const PRIOR_SUM_TOL: f64 = 1e-9;

const PROBLEM_KEYS: [&str; 7] = ["decisions", "states", "output", "prior", "capacity", "cost", "name"];

fn malformed(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Malformed {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn labels(root: &Map<String, Value>, key: &str) -> Result<Vec<String>> {
    let ptr = format!("/{key}");
    let arr = root
        .get(key)
        .ok_or_else(|| malformed(&ptr, "missing"))?
        .as_array()
        .ok_or_else(|| malformed(&ptr, "expected an array of strings"))?;
    if arr.is_empty() {
        return Err(malformed(&ptr, "must not be empty"));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(arr.len());
    for (i, v) in arr.iter().enumerate() {
        let s = v
            .as_str()
            .ok_or_else(|| malformed(format!("{ptr}/{i}"), "expected a string"))?;
        if !seen.insert(s) {
            return Err(malformed(format!("{ptr}/{i}"), format!("duplicate label {s:?}")));
        }
        out.push(s.to_string());
    }
    Ok(out)
}

fn number(v: &Value, ptr: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| malformed(ptr, "expected a finite number"))
}

fn numbers(v: &Value, ptr: &str, len: usize) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| malformed(ptr, "expected an array of numbers"))?;
    if arr.len() != len {
        return Err(malformed(ptr, format!("expected {len} entries, found {}", arr.len())));
    }
    arr.iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{ptr}/{i}")))
        .collect()
}

fn output(root: &Map<String, Value>, nd: usize, nt: usize) -> Result<Matrix> {
    let v = root.get("output").ok_or_else(|| malformed("/output", "missing"))?;
    let rows = v
        .as_array()
        .ok_or_else(|| malformed("/output", "expected one row per decision"))?;
    if rows.len() != nd {
        return Err(malformed(
            "/output",
            format!("expected {nd} rows, found {}", rows.len()),
        ));
    }
    let mut m = Matrix::zeros(nd, nt);
    for (d, row) in rows.iter().enumerate() {
        for (t, x) in numbers(row, &format!("/output/{d}"), nt)?.into_iter().enumerate() {
            m[(d, t)] = x;
        }
    }
    Ok(m)
}

fn prior(root: &Map<String, Value>, nt: usize) -> Result<Prior> {
    let v = root.get("prior").ok_or_else(|| malformed("/prior", "missing"))?;
    let p = numbers(v, "/prior", nt)?;
    if let Some(i) = p.iter().position(|&x| x < 0.0) {
        return Err(malformed(format!("/prior/{i}"), "probabilities must be nonnegative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PRIOR_SUM_TOL {
        return Err(malformed("/prior", format!("probabilities sum to {sum}, not 1")));
    }
    // Absorb rounding in the file so downstream simplex checks hold.
    Prior::new(p.iter().map(|x| x / sum).collect()).map_err(|e| malformed("/prior", e.to_string()))
}

fn capacity(root: &Map<String, Value>) -> Result<f64> {
    match root.get("capacity") {
        None | Some(Value::Null) => Ok(f64::INFINITY),
        Some(v) => {
            let k = number(v, "/capacity")?;
            if k < 0.0 {
                return Err(malformed("/capacity", "must be nonnegative"));
            }
            Ok(k)
        }
    }
}

/// Parses the `cost` object of a problem file.
pub fn parse_cost(v: &Value, ptr: &str, states: usize) -> Result<CostModel> {
    let obj = v
        .as_object()
        .ok_or_else(|| malformed(ptr, "expected an object with a \"type\" key"))?;
    let tag = obj
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("{ptr}/type"), "expected a string"))?;
    let model = match tag {
        "shannon" => {
            let scale = match obj.get("scale") {
                None => 1.0,
                Some(s) => number(s, &format!("{ptr}/scale"))?,
            };
            if scale <= 0.0 {
                return Err(malformed(format!("{ptr}/scale"), "must be positive"));
            }
            CostModel::Shannon { scale }
        }
        "bregman" => {
            let name = obj
                .get("matrix")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed(format!("{ptr}/matrix"), "expected a string"))?;
            let kernel = match name {
                "inverse_fisher" | "named:inverse_fisher" => BregmanKernel::InverseFisher,
                "named:quadratic" => BregmanKernel::Quadratic,
                "named:burg" => BregmanKernel::Burg,
                other => {
                    return Err(malformed(
                        format!("{ptr}/matrix"),
                        format!("unknown matrix {other:?}; expected inverse_fisher, named:quadratic or named:burg"),
                    ))
                }
            };
            CostModel::Bregman(kernel)
        }
        "posterior_separable" => {
            let u = obj
                .get("upsilon")
                .ok_or_else(|| malformed(format!("{ptr}/upsilon"), "missing"))?;
            let upsilon = match u {
                Value::String(s) if s == "entropy" || s == "named:entropy" => Uncertainty::Entropy,
                Value::String(s) if s == "quadratic" || s == "named:quadratic" => Uncertainty::Quadratic,
                Value::Object(g) => {
                    let gp = format!("{ptr}/upsilon/grid");
                    let arr = g
                        .get("grid")
                        .and_then(Value::as_array)
                        .ok_or_else(|| malformed(&gp, "expected an array of numbers"))?;
                    let vals = numbers(&Value::Array(arr.clone()), &gp, arr.len())?;
                    if vals.len() < 2 {
                        return Err(malformed(&gp, "needs at least two values"));
                    }
                    Uncertainty::Grid(vals)
                }
                _ => {
                    return Err(malformed(
                        format!("{ptr}/upsilon"),
                        "expected \"entropy\", \"quadratic\" or {\"grid\": [...]}",
                    ))
                }
            };
            CostModel::PosteriorSeparable(upsilon)
        }
        other => return Err(malformed(format!("{ptr}/type"), format!("unknown cost type {other:?}"))),
    };
    model.validate(states).map_err(|e| malformed(ptr, e.to_string()))?;
    Ok(model)
}

pub fn parse_problem_value(v: &Value) -> Result<ProblemInstance> {
    let root = v.as_object().ok_or_else(|| malformed("", "expected a JSON object"))?;
    if let Some(k) = root.keys().find(|k| !PROBLEM_KEYS.contains(&k.as_str())) {
        return Err(malformed(format!("/{k}"), "unknown key"));
    }
    let decisions = labels(root, "decisions")?;
    let states = labels(root, "states")?;
    let y = output(root, decisions.len(), states.len())?;
    let pi = prior(root, states.len())?;
    let kappa = capacity(root)?;
    let cost_v = root.get("cost").ok_or_else(|| malformed("/cost", "missing"))?;
    let cost = parse_cost(cost_v, "/cost", states.len())?;
    ProblemInstance::new(decisions, states, y, pi, kappa, cost).map_err(|e| malformed("", e.to_string()))
}

pub fn parse_problem(text: &str) -> Result<ProblemInstance> {
    let v: Value = serde_json::from_str(text).map_err(|e| malformed("", format!("invalid JSON: {e}")))?;
    parse_problem_value(&v)
}

pub fn read_problem(path: &Path) -> Result<ProblemInstance> {
    parse_problem(&std::fs::read_to_string(path)?)
}

pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn cost_to_json(model: &CostModel) -> Value {
    match model {
        CostModel::Shannon { scale } => json!({"type": "shannon", "scale": scale}),
        CostModel::Bregman(k) => {
            let name = match k {
                BregmanKernel::InverseFisher => "inverse_fisher",
                BregmanKernel::Quadratic => "named:quadratic",
                BregmanKernel::Burg => "named:burg",
            };
            json!({"type": "bregman", "matrix": name})
        }
        CostModel::PosteriorSeparable(u) => {
            let upsilon = match u {
                Uncertainty::Entropy => json!("entropy"),
                Uncertainty::Quadratic => json!("quadratic"),
                Uncertainty::Grid(v) => json!({"grid": v}),
            };
            json!({"type": "posterior_separable", "upsilon": upsilon})
        }
    }
}

pub fn problem_to_json(inst: &ProblemInstance) -> Value {
    json!({
        "decisions": inst.decisions,
        "states": inst.states,
        "output": matrix_rows(&inst.output),
        "prior": inst.prior.as_slice(),
        "capacity": finite_or_null(inst.capacity),
        "cost": cost_to_json(&inst.cost),
    })
}

/// Labelled matrix `{"decisions", "states", "values"}`.
pub fn labelled_matrix(m: &Matrix, inst: &ProblemInstance) -> Value {
    json!({
        "decisions": inst.decisions,
        "states": inst.states,
        "values": matrix_rows(m),
    })
}

/// Reads a contract file: either a bare array of rows or an object with a
/// `values` (or `payments`) array.
pub fn parse_contract(text: &str, inst: &ProblemInstance) -> Result<Contract> {
    let v: Value = serde_json::from_str(text).map_err(|e| malformed("", format!("invalid JSON: {e}")))?;
    let (rows, ptr) = match &v {
        Value::Array(_) => (&v, String::new()),
        Value::Object(o) => match (o.get("values"), o.get("payments")) {
            (Some(r), _) => (r, "/values".to_string()),
            (None, Some(r)) => (r, "/payments".to_string()),
            _ => return Err(malformed("/values", "missing")),
        },
        _ => return Err(malformed("", "expected an array of rows or an object")),
    };
    let (nd, nt) = inst.output.shape();
    let arr = rows
        .as_array()
        .ok_or_else(|| malformed(&ptr, "expected one row per decision"))?;
    if arr.len() != nd {
        return Err(malformed(&ptr, format!("expected {nd} rows, found {}", arr.len())));
    }
    let mut m = Matrix::zeros(nd, nt);
    for (d, row) in arr.iter().enumerate() {
        for (t, x) in numbers(row, &format!("{ptr}/{d}"), nt)?.into_iter().enumerate() {
            m[(d, t)] = x;
        }
    }
    Contract::new(m)
}

/// Canonical rendering: sorted keys, shortest round-trip floats.
pub fn to_canonical_string(v: &Value) -> String {
    // serde_json's default map is ordered by key.
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

/// Writes `decision,state,value` rows.
pub fn write_matrix_csv(path: &Path, m: &Matrix, decisions: &[String], states: &[String]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["decision", "state", "value"]).map_err(io)?;
    for d in 0..m.nrows() {
        for t in 0..m.ncols() {
            w.write_record([decisions[d].as_str(), states[t].as_str(), &format!("{}", m[(d, t)])])
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `decision,state,value` file back against known labels.
pub fn read_matrix_csv(path: &Path, decisions: &[String], states: &[String]) -> Result<Matrix> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let mut m = Matrix::from_element(decisions.len(), states.len(), f64::NAN);
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(io)?;
        let bad = |what: &str| Error::InvalidInput(format!("{}: row {}: {what}", path.display(), line + 2));
        let d = decisions
            .iter()
            .position(|x| x == &rec[0])
            .ok_or_else(|| bad("unknown decision"))?;
        let t = states
            .iter()
            .position(|x| x == &rec[1])
            .ok_or_else(|| bad("unknown state"))?;
        m[(d, t)] = rec[2].parse().map_err(|_| bad("value is not a number"))?;
    }
    if m.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidInput(format!("{}: missing cells", path.display())));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "decisions": ["d1", "d2"], "states": ["theta1", "theta2"],
        "output": [[0, 10], [5, 5]], "prior": [0.6666666666666666, 0.3333333333333333],
        "capacity": 0.5, "cost": {"type": "shannon", "scale": 1.0}
    }"#;

    fn pointer(text: &str) -> String {
        match parse_problem(text) {
            Err(Error::Malformed { pointer, .. }) => pointer,
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn parses_example() {
        let inst = parse_problem(EXAMPLE).unwrap();
        assert_eq!(inst.output[(0, 1)], 10.0);
        assert_eq!(inst.capacity, 0.5);
        assert!(inst.cost.is_shannon());
    }

    #[test]
    fn round_trip() {
        let inst = parse_problem(EXAMPLE).unwrap();
        let again = parse_problem_value(&problem_to_json(&inst)).unwrap();
        assert_eq!(again.output, inst.output);
        assert_eq!(again.prior, inst.prior);
        assert_eq!(again.cost, inst.cost);
        let free = parse_problem(&EXAMPLE.replace("0.5,", "null,")).unwrap();
        assert!(free.capacity.is_infinite());
        assert_eq!(problem_to_json(&free)["capacity"], Value::Null);
    }

    #[test]
    fn pointers() {
        assert_eq!(pointer(&EXAMPLE.replace("0.3333333333333333", "0.5")), "/prior");
        assert_eq!(pointer(&EXAMPLE.replace("[5, 5]", "[5]")), "/output/1");
        assert_eq!(pointer(&EXAMPLE.replace("\"shannon\"", "\"renyi\"")), "/cost/type");
        assert_eq!(
            pointer(&EXAMPLE.replace("\"scale\": 1.0", "\"scale\": -1")),
            "/cost/scale"
        );
        assert_eq!(pointer(&EXAMPLE.replace("0.5,", "-1,")), "/capacity");
        assert_eq!(pointer(&EXAMPLE.replace("\"d2\"", "\"d1\"")), "/decisions/1");
        assert_eq!(pointer("[1]"), "");
    }

    #[test]
    fn cost_variants() {
        for spec in [
            r#"{"type":"bregman","matrix":"inverse_fisher"}"#,
            r#"{"type":"bregman","matrix":"named:burg"}"#,
            r#"{"type":"posterior_separable","upsilon":"entropy"}"#,
            r#"{"type":"posterior_separable","upsilon":{"grid":[0,0.2,0.25,0.2,0]}}"#,
        ] {
            let v: Value = serde_json::from_str(spec).unwrap();
            let m = parse_cost(&v, "/cost", 2).unwrap();
            assert_eq!(parse_cost(&cost_to_json(&m), "/cost", 2).unwrap(), m);
        }
    }

    #[test]
    fn csv_round_trip() {
        let inst = parse_problem(EXAMPLE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        let m = Matrix::from_fn(2, 2, |d, t| 0.1 + d as f64 / 3.0 + t as f64 * 1e-17);
        write_matrix_csv(&path, &m, &inst.decisions, &inst.states).unwrap();
        assert_eq!(read_matrix_csv(&path, &inst.decisions, &inst.states).unwrap(), m);
    }

    #[test]
    fn contract_forms() {
        let inst = parse_problem(EXAMPLE).unwrap();
        let a = parse_contract("[[0, 1], [0.7, 0]]", &inst).unwrap();
        let b = parse_contract(r#"{"values": [[0, 1], [0.7, 0]]}"#, &inst).unwrap();
        assert_eq!(a, b);
        assert!(parse_contract("[[0, 1]]", &inst).is_err());
    }
}
