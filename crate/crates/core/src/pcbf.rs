//! The safe-MPC value `V*` as a predictive control barrier function: grid
//! evaluation, level sets and the discrete-time CBF check.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conic::SolveStatus;
use crate::error::{check_dim, Error, Result};
use crate::model::Grid;
use crate::safempc::{self, shifted_candidate, SafeMpcProblem, ZERO_TOL};

/// Stand-in for `+∞` when contouring infeasible or unresolved cells.
pub const INFEASIBLE_VALUE: f64 = 1e6;
/// Tolerance of the CBF decrease check.
pub const CBF_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellValue {
    Value(f64),
    Infeasible,
    /// The solver stopped without a verdict.
    Unresolved,
}

impl CellValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            CellValue::Value(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.finite().is_some_and(|v| v <= ZERO_TOL)
    }
}

/// `V*` sampled on the points of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrid {
    pub grid: Grid,
    pub cells: Vec<CellValue>,
    /// Hash of the problem (preset, variant, tie-break).
    pub fingerprint: String,
}

impl ValueGrid {
    pub fn zero_set(&self) -> Vec<bool> {
        self.cells.iter().map(CellValue::is_zero).collect()
    }

    pub fn zero_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_zero()).count()
    }

    pub fn unresolved(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| **c == CellValue::Unresolved)
            .count()
    }

    pub fn unresolved_fraction(&self) -> f64 {
        self.unresolved() as f64 / self.cells.len().max(1) as f64
    }

    /// Values with infeasible and unresolved cells replaced by
    /// [`INFEASIBLE_VALUE`].
    pub fn field(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| c.finite().unwrap_or(INFEASIBLE_VALUE))
            .collect()
    }

    /// `x1,...,xn,V,feasible`; infeasible cells print `inf`, unresolved `nan`.
    pub fn to_csv(&self) -> String {
        let n = self.grid.dim();
        let mut head: Vec<String> = (1..=n).map(|d| format!("x{d}")).collect();
        head.push("V".into());
        head.push("feasible".into());
        let mut s = head.join(",");
        s.push('\n');
        for (i, c) in self.cells.iter().enumerate() {
            for v in self.grid.point(i).iter() {
                let _ = write!(s, "{v},");
            }
            let _ = match c {
                CellValue::Value(v) => writeln!(s, "{v},1"),
                CellValue::Infeasible => writeln!(s, "inf,0"),
                CellValue::Unresolved => writeln!(s, "nan,0"),
            };
        }
        s
    }

    /// Parses [`ValueGrid::to_csv`] output.
    pub fn from_csv(text: &str, fingerprint: &str) -> Result<ValueGrid> {
        let mut lines = text.lines();
        let head: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Config("empty grid file".into()))?
            .split(',')
            .collect();
        let n = head.len().saturating_sub(2);
        if n == 0 || head[n] != "V" || head[n + 1] != "feasible" {
            return Err(Error::Config("grid header must be x1,..,xn,V,feasible".into()));
        }
        let mut coords = Vec::new();
        let mut cells = Vec::new();
        for (k, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != n + 2 {
                return Err(Error::Config(format!("grid row {}: expected {} fields", k + 2, n + 2)));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("grid row {}: {e}", k + 2)))
            };
            let x: Vec<f64> = f[..n].iter().map(|s| parse(s)).collect::<Result<_>>()?;
            let v = parse(f[n])?;
            coords.push(x);
            cells.push(match (f[n + 1].trim(), v.is_finite()) {
                ("1", true) => CellValue::Value(v),
                (_, _) if v.is_nan() => CellValue::Unresolved,
                _ => CellValue::Infeasible,
            });
        }
        let grid = Grid::from_nodes(&coords)?;
        Ok(ValueGrid {
            grid,
            cells,
            fingerprint: fingerprint.into(),
        })
    }
}

/// Stable hash of everything that determines `V*`.
pub fn fingerprint(problem: &SafeMpcProblem) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}|{:?}|{:e}", problem.preset, problem.variant, problem.tie_break));
    format!("{:x}", h.finalize())
}

/// Hash of the preset alone, shared by all variants of one problem.
pub fn preset_fingerprint(problem: &SafeMpcProblem) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}", problem.preset));
    format!("{:x}", h.finalize())
}

/// Solves the problem at every grid point. `jobs` bounds the worker count
/// (`None`: rayon's default).
pub fn eval_grid(problem: &SafeMpcProblem, grid: &Grid, jobs: Option<usize>) -> Result<ValueGrid> {
    check_dim("grid dimension", problem.preset.nx(), grid.dim())?;
    problem.validate()?;
    let work = || -> Result<Vec<CellValue>> {
        (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let sol = safempc::solve(problem, &grid.point(i), None)?;
                Ok(match sol.status {
                    SolveStatus::Optimal => CellValue::Value(sol.value),
                    SolveStatus::Infeasible => CellValue::Infeasible,
                    SolveStatus::Unbounded | SolveStatus::MaxIter => CellValue::Unresolved,
                })
            })
            .collect()
    };
    let cells = match jobs {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    Ok(ValueGrid {
        grid: grid.clone(),
        cells,
        fingerprint: fingerprint(problem),
    })
}

/// Polylines of one level set. Closed polylines repeat their first point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourSet {
    pub level: f64,
    pub polylines: Vec<Vec<[f64; 2]>>,
    pub closed: Vec<bool>,
}

impl ContourSet {
    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }

    pub fn vertices(&self) -> impl Iterator<Item = &[f64; 2]> {
        self.polylines.iter().flatten()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("contour serializes")
    }
}

/// Level set of `V*`. Level 0 is taken at [`ZERO_TOL`]; infeasible and
/// unresolved cells count as [`INFEASIBLE_VALUE`].
pub fn extract_contour(values: &ValueGrid, level: f64) -> Result<ContourSet> {
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::Config(format!("contour level must be finite and ≥ 0, got {level}")));
    }
    let at = if level == 0.0 { ZERO_TOL } else { level };
    let mut c = marching_squares(&values.grid, &values.field(), at)?;
    c.level = level;
    Ok(c)
}

// Crossing point on a grid edge: (horizontal?, i, j) of its lower-left node.
type EdgeKey = (bool, usize, usize);

/// Marching squares on a 2-D grid with linear interpolation. Segments are
/// oriented with `{f < level}` on the left, so closed curves run
/// counterclockwise around sublevel regions; saddles are split by the mean
/// of the four corners.
pub fn marching_squares(grid: &Grid, values: &[f64], level: f64) -> Result<ContourSet> {
    if grid.dim() != 2 {
        return Err(Error::Config("contours need a 2-D grid".into()));
    }
    check_dim("grid values", grid.len(), values.len())?;
    let (nx, ny) = (grid.points[0], grid.points[1]);
    let f = |i: usize, j: usize| values[i * ny + j];
    let inside = |v: f64| v < level;
    let point = |key: EdgeKey| -> [f64; 2] {
        let (horizontal, i, j) = key;
        let (i2, j2) = if horizontal { (i + 1, j) } else { (i, j + 1) };
        let (fa, fb) = (f(i, j), f(i2, j2));
        let t = ((level - fa) / (fb - fa)).clamp(0.0, 1.0);
        let xa = [grid.coordinate(0, i), grid.coordinate(1, j)];
        let xb = [grid.coordinate(0, i2), grid.coordinate(1, j2)];
        [xa[0] + t * (xb[0] - xa[0]), xa[1] + t * (xb[1] - xa[1])]
    };

    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            // counterclockwise corners and the edge leaving each one
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let edges: [EdgeKey; 4] = [(true, i, j), (false, i + 1, j), (true, i, j + 1), (false, i, j)];
            let vals = corners.map(|(a, b)| f(a, b));
            let ins = vals.map(inside);
            // (edge, leaves the sublevel set?) in counterclockwise order
            let crossings: Vec<(EdgeKey, bool)> = (0..4)
                .filter(|&k| ins[k] != ins[(k + 1) % 4])
                .map(|k| (edges[k], ins[k]))
                .collect();
            if crossings.is_empty() {
                continue;
            }
            let center_inside = inside(vals.iter().sum::<f64>() / 4.0);
            let c = crossings.len();
            for k in 0..c {
                let (from, leaving) = crossings[k];
                if !leaving {
                    continue;
                }
                let to = if center_inside || c == 2 {
                    crossings[(k + 1) % c].0
                } else {
                    crossings[(k + c - 1) % c].0
                };
                segments.push((from, to));
            }
        }
    }

    let mut next: HashMap<EdgeKey, usize> = HashMap::with_capacity(segments.len());
    let mut has_pred: HashMap<EdgeKey, bool> = HashMap::with_capacity(segments.len());
    for (s, (a, b)) in segments.iter().enumerate() {
        next.insert(*a, s);
        has_pred.insert(*b, true);
    }
    let mut used = vec![false; segments.len()];
    let mut polylines = Vec::new();
    let mut closed = Vec::new();
    let mut trace = |start: usize, used: &mut Vec<bool>| {
        let mut keys = vec![segments[start].0];
        let mut s = start;
        let mut is_closed = false;
        loop {
            used[s] = true;
            let end = segments[s].1;
            keys.push(end);
            match next.get(&end) {
                Some(&t) if t == start => {
                    is_closed = true;
                    break;
                }
                Some(&t) if !used[t] => s = t,
                _ => break,
            }
        }
        polylines.push(keys.into_iter().map(point).collect::<Vec<_>>());
        closed.push(is_closed);
    };
    // open chains first, from their heads, then the remaining loops
    for s in 0..segments.len() {
        if !used[s] && !has_pred.contains_key(&segments[s].0) {
            trace(s, &mut used);
        }
    }
    for s in 0..segments.len() {
        if !used[s] {
            trace(s, &mut used);
        }
    }
    Ok(ContourSet {
        level,
        polylines,
        closed,
    })
}

/// Symmetric Hausdorff distance between the vertex sets of two contours;
/// `∞` when exactly one is empty.
pub fn hausdorff(a: &ContourSet, b: &ContourSet) -> f64 {
    let pa: Vec<&[f64; 2]> = a.vertices().collect();
    let pb: Vec<&[f64; 2]> = b.vertices().collect();
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let directed = |from: &[&[f64; 2]], to: &[&[f64; 2]]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p[0] - q[0]).hypot(p[1] - q[1]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

/// Ellipse-shaped barrier `h(x) = 1 − x₁²/a² − x₂²/b² − x₁x₂/(ab)`, positive
/// inside.
pub fn ellipse_barrier(a: f64, b: f64, x: &[f64]) -> f64 {
    1.0 - x[0] * x[0] / (a * a) - x[1] * x[1] / (b * b) - x[0] * x[1] / (a * b)
}

/// Zero contour of [`ellipse_barrier`] on a 2-D grid, oriented around
/// `{h > 0}`.
pub fn ellipse_barrier_contour(grid: &Grid, a: f64, b: f64) -> Result<ContourSet> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Config(format!("barrier axes must be positive, got a = {a}, b = {b}")));
    }
    let field: Vec<f64> = (0..grid.len())
        .map(|i| -ellipse_barrier(a, b, grid.point(i).as_slice()))
        .collect();
    marching_squares(grid, &field, 0.0)
}

/// One evaluation of `V*(f(x, u₀*(x))) − V*(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CbfSample {
    pub x: DVector<f64>,
    pub value: f64,
    pub xi0: f64,
    pub u0: DVector<f64>,
    /// `None` when the successor is outside the domain.
    pub next_value: Option<f64>,
}

impl CbfSample {
    /// `V*(x⁺) − V*(x)`, `∞` if the successor is infeasible.
    pub fn change(&self) -> f64 {
        self.next_value.map_or(f64::INFINITY, |n| n - self.value)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CbfReport {
    pub samples: Vec<CbfSample>,
    /// Points where the problem itself is infeasible or unresolved.
    pub out_of_domain: Vec<DVector<f64>>,
    /// Largest `V*(x⁺) − V*(x)`.
    pub max_change: f64,
    pub witness: Option<DVector<f64>>,
    /// Samples with a change above [`CBF_TOL`].
    pub violations: usize,
}

/// Checks the discrete-time CBF decrease at each point. The successor is
/// solved warm from the shifted candidate.
pub fn check_cbf(problem: &SafeMpcProblem, points: &[DVector<f64>]) -> Result<CbfReport> {
    let mut report = CbfReport {
        max_change: f64::NEG_INFINITY,
        ..CbfReport::default()
    };
    for x in points {
        let sol = safempc::solve(problem, x, None)?;
        if !sol.is_optimal() {
            report.out_of_domain.push(x.clone());
            continue;
        }
        let next = problem.preset.system.step(x, sol.u0())?;
        let cand = shifted_candidate(problem, &sol.plan);
        let after = safempc::solve(problem, &next, Some(&cand))?;
        let sample = CbfSample {
            x: x.clone(),
            value: sol.value,
            xi0: sol.xi0(),
            u0: sol.u0().clone(),
            next_value: after.is_optimal().then_some(after.value),
        };
        let change = sample.change();
        if change > report.max_change {
            report.max_change = change;
            report.witness = Some(x.clone());
        }
        if change > CBF_TOL {
            report.violations += 1;
        }
        report.samples.push(sample);
    }
    Ok(report)
}
