//! Two-state geometry: reduced forms, net-utility curves over the posterior
//! `q = p(θ2)`, their concave envelopes, and CSV export of the plotted data.

use std::path::Path;

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::model::{Contract, Matrix};

pub const DEFAULT_GRID_POINTS: usize = 5001;
pub const GRID_MARGIN: f64 = 1e-6;

/// `B(q)` with the maximizing decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedForm {
    pub value: f64,
    /// Lowest-index maximizer.
    pub decision: usize,
    /// All maximizers, ascending.
    pub ties: Vec<usize>,
}

/// `B(q) = max_d E_q b(d,·)`; works for any number of states.
pub fn reduced_form(b: &Contract, q: &[f64]) -> Result<ReducedForm> {
    if q.len() != b.states() {
        return Err(Error::DimensionMismatch(format!(
            "posterior has {} states, contract has {}",
            q.len(),
            b.states()
        )));
    }
    let vals: Vec<f64> = (0..b.decisions())
        .map(|d| (0..b.states()).map(|t| q[t] * b.get(d, t)).sum())
        .collect();
    let value = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * (1.0 + value.abs());
    let ties: Vec<usize> = (0..vals.len()).filter(|&d| vals[d] >= value - tol).collect();
    Ok(ReducedForm {
        value,
        decision: ties[0],
        ties,
    })
}

/// A function sampled on a strictly increasing grid of `q = p(θ2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Argmax decision per grid point, when the curve comes from a contract.
    pub labels: Vec<Option<usize>>,
}

impl EnvelopeCurve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>, labels: Vec<Option<usize>>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != values.len() || grid.len() != labels.len() {
            return Err(Error::DimensionMismatch(
                "curve needs matching grid, values and labels".into(),
            ));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("curve grid must be strictly increasing".into()));
        }
        if values.iter().chain(&grid).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("curve values must be finite".into()));
        }
        Ok(Self { grid, values, labels })
    }

    pub fn unlabeled(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, values, vec![None; n])
    }

    /// `B(q)` alone.
    pub fn reduced(b: &Contract, grid: &[f64]) -> Result<Self> {
        check_two_states(b)?;
        let (values, labels) = grid
            .iter()
            .map(|&q| {
                let r = reduced_form(b, &[1.0 - q, q])?;
                Ok((r.value, Some(r.decision)))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Self::new(grid.to_vec(), values, labels)
    }

    /// Net utility `B(q) + Υ(q)`.
    pub fn net_utility(b: &Contract, model: &CostModel, grid: &[f64]) -> Result<Self> {
        let mut curve = Self::reduced(b, grid)?;
        for (v, &q) in curve.values.iter_mut().zip(grid) {
            *v += model.uncertainty(&[1.0 - q, q]);
        }
        Self::new(curve.grid, curve.values, curve.labels)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// Equally spaced grid on `[GRID_MARGIN, 1 − GRID_MARGIN]`.
pub fn default_grid(points: usize) -> Vec<f64> {
    let lo = GRID_MARGIN;
    let hi = 1.0 - GRID_MARGIN;
    let n = points.max(2) - 1;
    (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
}

/// A posterior at which the envelope touches the curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Contact {
    pub q: f64,
    /// Mixing weight in the tangent representation of the prior.
    pub weight: f64,
    pub index: usize,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tangent {
    pub slope: f64,
    pub intercept: f64,
}

impl Tangent {
    pub fn at(&self, q: f64) -> f64 {
        self.intercept + self.slope * q
    }
}

/// Upper concave envelope of an [`EnvelopeCurve`] with tangent data at a prior.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcavifiedCurve {
    pub grid: Vec<f64>,
    pub curve: Vec<f64>,
    pub envelope: Vec<f64>,
    /// Grid indices of the upper hull vertices.
    pub hull: Vec<usize>,
    pub prior: f64,
    /// Envelope evaluated at the prior.
    pub value: f64,
    pub tangent: Tangent,
    pub contacts: Vec<Contact>,
}

impl ConcavifiedCurve {
    /// Envelope at an arbitrary `q` inside the grid range.
    pub fn envelope_at(&self, q: f64) -> f64 {
        let (i, j) = self.hull_edge(q);
        interpolate(self.grid[i], self.curve[i], self.grid[j], self.curve[j], q)
    }

    fn hull_edge(&self, q: f64) -> (usize, usize) {
        let k = self.hull.partition_point(|&h| self.grid[h] <= q);
        let k = k.clamp(1, self.hull.len() - 1);
        (self.hull[k - 1], self.hull[k])
    }
}

fn interpolate(x0: f64, y0: f64, x1: f64, y1: f64, x: f64) -> f64 {
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Indices of the upper convex hull of `(x, y)` points sorted by `x`.
/// Collinear interior points are dropped.
pub fn upper_hull(x: &[f64], y: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        while hull.len() >= 2 {
            let o = hull[hull.len() - 2];
            let a = hull[hull.len() - 1];
            let cross = (x[a] - x[o]) * (y[k] - y[o]) - (y[a] - y[o]) * (x[k] - x[o]);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    hull
}

/// Envelope values on the grid from hull vertices.
pub fn envelope_values(x: &[f64], y: &[f64], hull: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for w in hull.windows(2) {
        let (i, j) = (w[0], w[1]);
        out[i] = y[i];
        for k in i + 1..j {
            out[k] = interpolate(x[i], y[i], x[j], y[j], x[k]);
        }
        out[j] = y[j];
    }
    if hull.len() == 1 {
        out[hull[0]] = y[hull[0]];
    }
    out
}

pub fn concavify(curve: &EnvelopeCurve, prior: f64) -> Result<ConcavifiedCurve> {
    let lo = curve.grid[0];
    let hi = *curve.grid.last().expect("nonempty grid");
    if !(prior >= lo && prior <= hi) {
        return Err(Error::DegeneratePrior {
            prior,
            low: lo,
            high: hi,
        });
    }
    let hull = upper_hull(&curve.grid, &curve.values);
    let envelope = envelope_values(&curve.grid, &curve.values, &hull);
    let mut out = ConcavifiedCurve {
        grid: curve.grid.clone(),
        curve: curve.values.clone(),
        envelope,
        hull,
        prior,
        value: 0.0,
        tangent: Tangent {
            slope: 0.0,
            intercept: 0.0,
        },
        contacts: Vec::new(),
    };
    let (i, j) = out.hull_edge(prior);
    let (xi, xj) = (curve.grid[i], curve.grid[j]);
    let slope = (curve.values[j] - curve.values[i]) / (xj - xi);
    out.tangent = Tangent {
        slope,
        intercept: curve.values[i] - slope * xi,
    };
    out.value = out.tangent.at(prior);
    out.contacts = if prior == xi || prior == xj {
        let k = if prior == xi { i } else { j };
        vec![Contact {
            q: curve.grid[k],
            weight: 1.0,
            index: k,
            label: curve.labels[k],
        }]
    } else if j == i + 1 && (curve.labels[i] == curve.labels[j] || curve.labels[i].is_none()) {
        // Prior sits inside a grid cell where the curve is its own envelope.
        vec![Contact {
            q: prior,
            weight: 1.0,
            index: if prior - xi <= xj - prior { i } else { j },
            label: curve.labels[i],
        }]
    } else {
        let wj = (prior - xi) / (xj - xi);
        vec![
            Contact {
                q: xi,
                weight: 1.0 - wj,
                index: i,
                label: curve.labels[i],
            },
            Contact {
                q: xj,
                weight: wj,
                index: j,
                label: curve.labels[j],
            },
        ]
    };
    Ok(out)
}

fn check_two_states(b: &Contract) -> Result<()> {
    if b.states() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "curve export needs two states, contract has {}",
            b.states()
        )));
    }
    Ok(())
}

/// Expected payment line of decision `d` at `q`.
pub fn decision_line(b: &Contract, d: usize, q: f64) -> f64 {
    (1.0 - q) * b.get(d, 0) + q * b.get(d, 1)
}

/// Optional overlays for a figure: extra lines and points beyond the
/// standard curve columns.
#[derive(Clone, Debug, Default)]
pub struct FigureExtras {
    /// Named `(slope, intercept)` lines drawn over the grid.
    pub lines: Vec<(String, f64, f64)>,
    /// Named points `(kind, q, value)`.
    pub points: Vec<(String, f64, f64)>,
}

/// Data behind one figure, ready to serialize.
#[derive(Clone, Debug)]
pub struct FigureData {
    pub concavified: ConcavifiedCurve,
    pub reduced: EnvelopeCurve,
    pub upsilon: Vec<f64>,
    pub decision_lines: Matrix,
    pub points: Vec<(String, f64, f64)>,
    pub lines: Vec<(String, f64, f64)>,
}

pub fn figure_data(
    b: &Contract,
    model: &CostModel,
    prior: f64,
    grid: &[f64],
    extras: FigureExtras,
) -> Result<FigureData> {
    let reduced = EnvelopeCurve::reduced(b, grid)?;
    let net = EnvelopeCurve::net_utility(b, model, grid)?;
    let concavified = concavify(&net, prior)?;
    let upsilon: Vec<f64> = grid.iter().map(|&q| model.uncertainty(&[1.0 - q, q])).collect();
    let decision_lines = Matrix::from_fn(grid.len(), b.decisions(), |k, d| decision_line(b, d, grid[k]));
    let mut points: Vec<(String, f64, f64)> = concavified
        .contacts
        .iter()
        .map(|c| ("contact".to_string(), c.q, net_at(b, model, c.q)))
        .collect();
    points.push(("prior".into(), prior, concavified.value));
    points.push((
        "agent_value".into(),
        prior,
        concavified.value - model.uncertainty(&[1.0 - prior, prior]),
    ));
    points.extend(extras.points);
    let mut lines = vec![(
        "tangent".to_string(),
        concavified.tangent.slope,
        concavified.tangent.intercept,
    )];
    lines.extend(extras.lines);
    Ok(FigureData {
        concavified,
        reduced,
        upsilon,
        decision_lines,
        points,
        lines,
    })
}

fn net_at(b: &Contract, model: &CostModel, q: f64) -> f64 {
    let r = reduced_form(b, &[1.0 - q, q]).map(|r| r.value).unwrap_or(f64::NAN);
    r + model.uncertainty(&[1.0 - q, q])
}

/// Writes `<dir>/fig_<tag>.csv`, `fig_<tag>_lines.csv` and `fig_<tag>_points.csv`.
pub fn write_figure(dir: &Path, tag: &str, fig: &FigureData, decision_labels: &[String]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let c = &fig.concavified;
    let contact_idx: Vec<usize> = c.contacts.iter().map(|k| k.index).collect();

    let mut w = csv::Writer::from_path(dir.join(format!("fig_{tag}.csv"))).map_err(io)?;
    w.write_record(["q", "B", "upsilon", "net", "envelope", "decision", "is_contact"])
        .map_err(io)?;
    for k in 0..c.grid.len() {
        let label = fig.reduced.labels[k]
            .map(|d| decision_labels[d].clone())
            .unwrap_or_default();
        w.write_record([
            fmt(c.grid[k]),
            fmt(fig.reduced.values[k]),
            fmt(fig.upsilon[k]),
            fmt(c.curve[k]),
            fmt(c.envelope[k]),
            label,
            u8::from(contact_idx.contains(&k)).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(format!("fig_{tag}_lines.csv"))).map_err(io)?;
    let mut header = vec!["q".to_string()];
    header.extend(decision_labels.iter().map(|l| format!("line_{l}")));
    header.extend(fig.lines.iter().map(|(n, _, _)| n.clone()));
    w.write_record(&header).map_err(io)?;
    for k in 0..c.grid.len() {
        let q = c.grid[k];
        let mut row = vec![fmt(q)];
        row.extend((0..fig.decision_lines.ncols()).map(|d| fmt(fig.decision_lines[(k, d)])));
        row.extend(fig.lines.iter().map(|(_, s, i)| fmt(i + s * q)));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(format!("fig_{tag}_points.csv"))).map_err(io)?;
    w.write_record(["kind", "q", "value"]).map_err(io)?;
    for (kind, q, v) in &fig.points {
        w.write_record([kind.clone(), fmt(*q), fmt(*v)]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that round-trips.
pub fn fmt(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::entropy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_line_contract() -> Contract {
        Contract::from_rows(&[&[0.0, 2.0], &[1.0, 1.0]]).unwrap()
    }

    /// Max over all chords spanning each grid point.
    fn chord_oracle(x: &[f64], y: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut out = y.to_vec();
        for i in 0..n {
            for j in i + 1..n {
                for k in i + 1..j {
                    out[k] = out[k].max(interpolate(x[i], y[i], x[j], y[j], x[k]));
                }
            }
        }
        out
    }

    #[test]
    fn reduced_form_of_two_line_contract() {
        let b = two_line_contract();
        let r = reduced_form(&b, &[0.75, 0.25]).unwrap();
        assert_eq!((r.value, r.decision), (1.0, 1));
        let r = reduced_form(&b, &[0.25, 0.75]).unwrap();
        assert_eq!((r.value, r.decision), (1.5, 0));
        let r = reduced_form(&b, &[0.5, 0.5]).unwrap();
        assert_eq!(r.ties, vec![0, 1]);
    }

    #[test]
    fn constant_contract_ties_everywhere() {
        let b = Contract::from_rows(&[&[3.0, 3.0], &[3.0, 3.0], &[3.0, 3.0]]).unwrap();
        let r = reduced_form(&b, &[0.3, 0.7]).unwrap();
        assert!((r.value - 3.0).abs() < 1e-15);
        assert_eq!(r.ties, vec![0, 1, 2]);
        assert_eq!(r.decision, 0);
    }

    #[test]
    fn two_line_contract_contacts() {
        let b = two_line_contract();
        let curve = EnvelopeCurve::net_utility(&b, &CostModel::shannon(), &default_grid(DEFAULT_GRID_POINTS)).unwrap();
        let c = concavify(&curve, 0.45).unwrap();
        assert_eq!(c.contacts.len(), 2);
        assert!((c.contacts[0].q - 0.268941).abs() < 2e-4, "{:?}", c.contacts);
        assert!((c.contacts[1].q - 0.731059).abs() < 2e-4, "{:?}", c.contacts);
        assert_eq!(c.contacts[0].label, Some(1));
        assert_eq!(c.contacts[1].label, Some(0));
        assert!((c.tangent.slope - 1.0).abs() < 1e-3);
        let mean: f64 = c.contacts.iter().map(|k| k.weight * k.q).sum();
        assert!((mean - 0.45).abs() < 1e-10);
    }

    #[test]
    fn concave_curve_is_its_own_envelope() {
        let grid = default_grid(201);
        let values: Vec<f64> = grid.iter().map(|&q| entropy(&[q, 1.0 - q])).collect();
        let c = concavify(&EnvelopeCurve::unlabeled(grid, values.clone()).unwrap(), 0.3).unwrap();
        for (e, v) in c.envelope.iter().zip(&values) {
            assert!((e - v).abs() < 1e-15);
        }
        assert_eq!(c.contacts.len(), 1);
        assert!((c.contacts[0].q - 0.3).abs() < 1e-15);
    }

    #[test]
    fn prior_outside_grid_is_rejected() {
        let grid = default_grid(11);
        let curve = EnvelopeCurve::unlabeled(grid.clone(), vec![0.0; 11]).unwrap();
        assert!(matches!(concavify(&curve, 0.0), Err(Error::DegeneratePrior { .. })));
    }

    #[test]
    fn hull_matches_chord_oracle_on_random_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(20..80);
            let grid = default_grid(n);
            let slopes: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let scale = rng.gen_range(0.1..2.0);
            let values: Vec<f64> = grid
                .iter()
                .map(|&q| {
                    let b = slopes.iter().map(|(s, i)| i + s * q).fold(f64::NEG_INFINITY, f64::max);
                    b + scale * entropy(&[q, 1.0 - q]) + rng.gen_range(-0.05..0.05)
                })
                .collect();
            let hull = upper_hull(&grid, &values);
            let env = envelope_values(&grid, &values, &hull);
            let oracle = chord_oracle(&grid, &values);
            for k in 0..n {
                assert!((env[k] - oracle[k]).abs() <= 1e-12 * (1.0 + oracle[k].abs()));
            }
        }
    }

    proptest! {
        #[test]
        fn envelope_properties(
            raw in prop::collection::vec(-1.0f64..1.0, 30),
            a in -2.0f64..2.0,
            s in -2.0f64..2.0,
            prior in 0.05f64..0.95,
        ) {
            let grid = default_grid(30);
            let curve = EnvelopeCurve::unlabeled(grid.clone(), raw.clone()).unwrap();
            let c = concavify(&curve, prior).unwrap();
            for k in 0..30 {
                prop_assert!(c.envelope[k] >= raw[k] - 1e-12);
            }
            for k in 1..29 {
                prop_assert!(c.envelope[k] >= 0.5 * (c.envelope[k - 1] + c.envelope[k + 1]) - 1e-12);
            }
            for h in &c.hull {
                prop_assert_eq!(c.envelope[*h], raw[*h]);
            }
            let again = concavify(&EnvelopeCurve::unlabeled(grid.clone(), c.envelope.clone()).unwrap(), prior).unwrap();
            for k in 0..30 {
                prop_assert!((again.envelope[k] - c.envelope[k]).abs() < 1e-12);
            }
            let shifted: Vec<f64> = raw.iter().zip(&grid).map(|(v, q)| v + a + s * q).collect();
            let cs = concavify(&EnvelopeCurve::unlabeled(grid.clone(), shifted).unwrap(), prior).unwrap();
            for k in 0..30 {
                prop_assert!((cs.envelope[k] - c.envelope[k] - a - s * grid[k]).abs() < 1e-10);
            }
            let wsum: f64 = c.contacts.iter().map(|k| k.weight).sum();
            let mean: f64 = c.contacts.iter().map(|k| k.weight * k.q).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-10);
            prop_assert!((mean - prior).abs() < 1e-10);
            prop_assert!(c.contacts.iter().all(|k| (0.0..=1.0).contains(&k.weight)));
        }
    }
}
