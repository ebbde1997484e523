//! Systems, constraint sets, terminal sets and the built-in example problems.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::conic::{self, ConicProgram, SolveStatus};
use crate::error::{check_dim, Error, Result};

/// Continuous-time vector fields with analytic Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub enum VectorField {
    /// `ẋ₁ = x₂`, `ẋ₂ = stiffness·sin(freq·x₁) + input_gain·u`.
    Pendulum {
        stiffness: f64,
        freq: f64,
        input_gain: f64,
    },
}

impl VectorField {
    pub fn pendulum() -> Self {
        VectorField::Pendulum {
            stiffness: 10.0,
            freq: 2.0,
            input_gain: 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VectorField::Pendulum { .. } => "pendulum",
        }
    }

    pub fn nx(&self) -> usize {
        match self {
            VectorField::Pendulum { .. } => 2,
        }
    }

    pub fn nu(&self) -> usize {
        match self {
            VectorField::Pendulum { .. } => 1,
        }
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match *self {
            VectorField::Pendulum {
                stiffness,
                freq,
                input_gain,
            } => DVector::from_vec(vec![
                x[1],
                stiffness * (freq * x[0]).sin() + input_gain * u[0],
            ]),
        }
    }

    pub fn jac_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        match *self {
            VectorField::Pendulum {
                stiffness, freq, ..
            } => DMatrix::from_row_slice(
                2,
                2,
                &[0.0, 1.0, stiffness * freq * (freq * x[0]).cos(), 0.0],
            ),
        }
    }

    pub fn jac_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        match *self {
            VectorField::Pendulum { input_gain, .. } => {
                DMatrix::from_column_slice(2, 1, &[0.0, input_gain])
            }
        }
    }
}

/// Discrete-time dynamics `x⁺ = f(x, u)`.
#[derive(Clone, Debug, PartialEq)]
pub enum SystemModel {
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
    /// Forward Euler discretization `x⁺ = x + dt·fc(x, u)`.
    Euler { field: VectorField, dt: f64 },
}

impl SystemModel {
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_dim("A columns", a.nrows(), a.ncols())?;
        check_dim("B rows", a.nrows(), b.nrows())?;
        Ok(SystemModel::Linear { a, b })
    }

    pub fn nx(&self) -> usize {
        match self {
            SystemModel::Linear { a, .. } => a.nrows(),
            SystemModel::Euler { field, .. } => field.nx(),
        }
    }

    pub fn nu(&self) -> usize {
        match self {
            SystemModel::Linear { b, .. } => b.ncols(),
            SystemModel::Euler { field, .. } => field.nu(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, SystemModel::Linear { .. })
    }

    fn check(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        check_dim("state", self.nx(), x.len())?;
        check_dim("input", self.nu(), u.len())
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, u)?;
        Ok(self.step_unchecked(x, u))
    }

    pub(crate) fn step_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            SystemModel::Linear { a, b } => a * x + b * u,
            SystemModel::Euler { field, dt } => x + field.eval(x, u) * *dt,
        }
    }

    /// Affine model `x⁺ ≈ A_d x + B_d u + c_d`, exact at `(x, u)`.
    pub fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        self.check(x, u)?;
        Ok(self.linearize_unchecked(x, u))
    }

    pub(crate) fn linearize_unchecked(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        match self {
            SystemModel::Linear { a, b } => (a.clone(), b.clone(), DVector::zeros(a.nrows())),
            SystemModel::Euler { field, dt } => {
                let n = field.nx();
                let ad = DMatrix::identity(n, n) + field.jac_x(x, u) * *dt;
                let bd = field.jac_u(x, u) * *dt;
                let cd = self.step_unchecked(x, u) - &ad * x - &bd * u;
                (ad, bd, cd)
            }
        }
    }
}

/// H-representation `{x : lhs·x ≤ rhs}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    pub lhs: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

const LP_TOL: f64 = 1e-9;

impl Polytope {
    pub fn new(lhs: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self> {
        check_dim("polytope rows", lhs.nrows(), rhs.len())?;
        Ok(Polytope { lhs, rhs })
    }

    /// `{x : lower ≤ x ≤ upper}` with rows `x_i ≤ upper_i` then `−x_i ≤ −lower_i`.
    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        let n = lower.len();
        let mut lhs = DMatrix::zeros(2 * n, n);
        let mut rhs = DVector::zeros(2 * n);
        for i in 0..n {
            lhs[(i, i)] = 1.0;
            rhs[i] = upper[i];
            lhs[(n + i, i)] = -1.0;
            rhs[n + i] = -lower[i];
        }
        Ok(Polytope { lhs, rhs })
    }

    /// `{x : |x_i| ≤ radius_i}`.
    pub fn symmetric_box(radius: &[f64]) -> Self {
        let lower: Vec<f64> = radius.iter().map(|r| -r).collect();
        Self::from_bounds(&lower, radius).expect("matching lengths")
    }

    /// `{x ∈ ℝⁿ : ‖x‖∞ ≤ r}`.
    pub fn cube(n: usize, r: f64) -> Self {
        Self::symmetric_box(&vec![r; n])
    }

    pub fn dim(&self) -> usize {
        self.lhs.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.lhs.nrows()
    }

    /// Constraint values `lhs·x − rhs`; nonpositive inside.
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.lhs * x - &self.rhs
    }

    /// Largest row violation at `x`, zero when inside.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        if self.num_rows() == 0 {
            return 0.0;
        }
        self.residual(x).max().max(0.0)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.num_rows() == 0 || self.residual(x).max() <= tol
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        check_dim("polytope dimension", self.dim(), other.dim())?;
        let n = self.dim();
        let (k1, k2) = (self.num_rows(), other.num_rows());
        let mut lhs = DMatrix::zeros(k1 + k2, n);
        lhs.view_mut((0, 0), (k1, n)).copy_from(&self.lhs);
        lhs.view_mut((k1, 0), (k2, n)).copy_from(&other.lhs);
        let mut rhs = DVector::zeros(k1 + k2);
        rhs.rows_mut(0, k1).copy_from(&self.rhs);
        rhs.rows_mut(k1, k2).copy_from(&other.rhs);
        Ok(Polytope { lhs, rhs })
    }

    /// `{x : m·x ∈ self}`.
    pub fn preimage(&self, m: &DMatrix<f64>) -> Result<Polytope> {
        check_dim("preimage map rows", self.dim(), m.nrows())?;
        Ok(Polytope {
            lhs: &self.lhs * m,
            rhs: self.rhs.clone(),
        })
    }

    /// Support function `max dirᵀx` over the set; `+∞` when unbounded in
    /// `dir`, `−∞` when the set is empty.
    pub fn support(&self, dir: &DVector<f64>) -> Result<f64> {
        check_dim("support direction", self.dim(), dir.len())?;
        support_of(&self.lhs, &self.rhs, dir)
    }

    pub fn is_empty(&self) -> Result<bool> {
        match conic::solve_lp_feasibility(&self.lhs, &self.rhs)? {
            conic::Feasibility::Feasible => Ok(false),
            conic::Feasibility::Infeasible => Ok(true),
        }
    }

    /// Drops rows implied by the others, one LP per row.
    pub fn reduce(&self) -> Result<Polytope> {
        let n = self.dim();
        let mut keep: Vec<bool> = vec![true; self.num_rows()];
        for i in 0..self.num_rows() {
            let row = self.lhs.row(i).transpose();
            if row.amax() == 0.0 {
                if self.rhs[i] >= 0.0 {
                    keep[i] = false;
                }
                continue;
            }
            let others: Vec<usize> = (0..self.num_rows())
                .filter(|&j| j != i && keep[j])
                .collect();
            let lhs = DMatrix::from_fn(others.len(), n, |r, c| self.lhs[(others[r], c)]);
            let rhs = DVector::from_fn(others.len(), |r, _| self.rhs[others[r]]);
            let max = support_of(&lhs, &rhs, &row)?;
            if max <= self.rhs[i] + LP_TOL {
                keep[i] = false;
            }
        }
        Ok(self.select_rows(&keep))
    }

    fn select_rows(&self, keep: &[bool]) -> Polytope {
        let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        Polytope {
            lhs: DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.lhs[(idx[r], c)]),
            rhs: DVector::from_fn(idx.len(), |r, _| self.rhs[idx[r]]),
        }
    }

    /// `other ⊆ self` up to `tol` on every row of `self`.
    pub fn contains_polytope(&self, other: &Polytope, tol: f64) -> Result<bool> {
        check_dim("polytope dimension", self.dim(), other.dim())?;
        for i in 0..self.num_rows() {
            let max = other.support(&self.lhs.row(i).transpose())?;
            if max > self.rhs[i] + tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "G": matrix_rows(&self.lhs),
            "g": self.rhs.as_slice(),
        })
    }
}

fn support_of(lhs: &DMatrix<f64>, rhs: &DVector<f64>, dir: &DVector<f64>) -> Result<f64> {
    let sol = conic::solve(&ConicProgram::linear(-dir, lhs.clone(), rhs.clone()), None)?;
    match sol.status {
        SolveStatus::Optimal => Ok(-sol.objective),
        SolveStatus::Unbounded => Ok(f64::INFINITY),
        SolveStatus::Infeasible => Ok(f64::NEG_INFINITY),
        SolveStatus::MaxIter => Err(Error::Solver("support LP did not converge".into())),
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

/// Tensor grid of points `linspace(lower_d, upper_d, points_d)` per axis,
/// stored with the first axis varying slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        check_dim("grid upper bounds", lower.len(), upper.len())?;
        check_dim("grid resolution", lower.len(), points.len())?;
        for d in 0..lower.len() {
            if points[d] == 0 || !(upper[d] >= lower[d]) {
                return Err(Error::Config(format!(
                    "axis {d}: need at least one point and lower ≤ upper"
                )));
            }
        }
        Ok(Grid {
            lower,
            upper,
            points,
        })
    }

    /// Square grid with `res` points per axis over `[lo, hi]ⁿ`.
    pub fn square(n: usize, lo: f64, hi: f64, res: usize) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n], vec![res; n])
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        if self.points[axis] > 1 {
            (self.upper[axis] - self.lower[axis]) / (self.points[axis] - 1) as f64
        } else {
            0.0
        }
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        if self.points[axis] > 1 {
            self.lower[axis] + i as f64 * self.spacing(axis)
        } else {
            0.5 * (self.lower[axis] + self.upper[axis])
        }
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = flat % self.points[d];
            flat /= self.points[d];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.points)
            .fold(0, |acc, (i, p)| acc * p + i)
    }

    pub fn point(&self, flat: usize) -> DVector<f64> {
        let idx = self.multi_index(flat);
        DVector::from_fn(self.dim(), |d, _| self.coordinate(d, idx[d]))
    }

    /// Grid whose points, in storage order, are `nodes` (as read back from a
    /// CSV export).
    pub fn from_nodes(nodes: &[Vec<f64>]) -> Result<Grid> {
        let n = nodes.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::Config("no grid nodes".into()));
        }
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        for d in 0..n {
            let mut axis: Vec<f64> = nodes.iter().map(|x| x[d]).collect();
            axis.sort_by(f64::total_cmp);
            axis.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + b.abs()));
            lower.push(axis[0]);
            upper.push(axis[axis.len() - 1]);
            points.push(axis.len());
        }
        let grid = Grid::new(lower, upper, points)?;
        if grid.len() != nodes.len() {
            return Err(Error::Config("nodes do not form a full tensor grid".into()));
        }
        for (i, x) in nodes.iter().enumerate() {
            check_dim("grid node", n, x.len())?;
            let p = grid.point(i);
            if (0..n).any(|d| (p[d] - x[d]).abs() > 1e-6 * (1.0 + x[d].abs())) {
                return Err(Error::Config(format!("grid node {i} is out of order")));
            }
        }
        Ok(grid)
    }

    /// Index of the grid point whose cell contains `x` (nearest point per
    /// axis); `None` outside the half-cell-padded range.
    pub fn locate(&self, x: &DVector<f64>) -> Option<usize> {
        let mut idx = vec![0; self.dim()];
        for d in 0..self.dim() {
            let h = self.spacing(d);
            if h == 0.0 {
                if (x[d] - self.coordinate(d, 0)).abs() > 0.0 {
                    return None;
                }
                continue;
            }
            let t = ((x[d] - self.lower[d]) / h).round();
            if !(t >= 0.0 && t <= (self.points[d] - 1) as f64) {
                return None;
            }
            idx[d] = t as usize;
        }
        Some(self.flat_index(&idx))
    }
}

/// Terminal region used at the end of the horizon.
#[derive(Clone, Debug, PartialEq)]
pub enum TerminalSet {
    /// `{x : xᵀPx ≤ alpha}`.
    Ellipsoid { p: DMatrix<f64>, alpha: f64 },
    Polytope(Polytope),
    Point(DVector<f64>),
}

impl TerminalSet {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            TerminalSet::Ellipsoid { p, alpha } => {
                check_dim("terminal P rows", n, p.nrows())?;
                check_dim("terminal P columns", n, p.ncols())?;
                if (p - p.transpose()).amax() > 1e-10 {
                    return Err(Error::Config("terminal P is not symmetric".into()));
                }
                if p.clone().symmetric_eigenvalues().min() <= 0.0 {
                    return Err(Error::Config("terminal P is not positive definite".into()));
                }
                if *alpha < 0.0 {
                    return Err(Error::Config(format!("terminal alpha {alpha} is negative")));
                }
                Ok(())
            }
            TerminalSet::Polytope(poly) => check_dim("terminal polytope", n, poly.dim()),
            TerminalSet::Point(xf) => check_dim("terminal point", n, xf.len()),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.violation(x) <= tol
    }

    /// Membership residual, zero inside.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        match self {
            TerminalSet::Ellipsoid { p, alpha } => {
                ((x.dot(&(p * x))).max(0.0).sqrt() - alpha.sqrt()).max(0.0)
            }
            TerminalSet::Polytope(poly) => poly.violation(x),
            TerminalSet::Point(xf) => (x - xf).amax(),
        }
    }

    /// `max rowᵀx` over the terminal set.
    pub fn support(&self, row: &DVector<f64>) -> Result<f64> {
        match self {
            TerminalSet::Ellipsoid { p, alpha } => {
                let pinv = p
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Config("terminal P is not positive definite".into()))?
                    .inverse();
                Ok((alpha * row.dot(&(&pinv * row))).max(0.0).sqrt())
            }
            TerminalSet::Polytope(poly) => poly.support(row),
            TerminalSet::Point(xf) => Ok(row.dot(xf)),
        }
    }

    /// `self ⊆ set`, checked row by row of `set`.
    pub fn is_inside(&self, set: &Polytope, tol: f64) -> Result<bool> {
        for i in 0..set.num_rows() {
            if self.support(&set.lhs.row(i).transpose())? > set.rhs[i] + tol {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// A complete problem: dynamics, constraint sets, terminal set and horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemPreset {
    pub name: String,
    pub system: SystemModel,
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub terminal: TerminalSet,
    pub horizon: usize,
    /// Terminal controller `κf(x) = K x`; `None` means `κf ≡ 0`.
    pub terminal_gain: Option<DMatrix<f64>>,
}

pub const PRESET_NAMES: [&str; 2] = ["linear-unstable", "nonlinear-pendulum"];

pub fn preset(name: &str) -> Result<ProblemPreset> {
    match name {
        "linear-unstable" => {
            let system = SystemModel::linear(
                DMatrix::from_row_slice(2, 2, &[1.5, 1.0, 0.0, 1.0]),
                DMatrix::from_column_slice(2, 1, &[0.5, 0.5]),
            )?;
            Ok(ProblemPreset {
                name: name.into(),
                system,
                state_set: Polytope::cube(2, 1.0),
                input_set: Polytope::cube(1, 1.5),
                terminal: TerminalSet::Ellipsoid {
                    p: DMatrix::from_row_slice(2, 2, &[3.3729, 0.3776, 0.3776, 1.1956]),
                    alpha: 0.6,
                },
                horizon: 10,
                terminal_gain: Some(DMatrix::from_row_slice(1, 2, &[-1.3735, -1.6166])),
            })
        }
        "nonlinear-pendulum" => Ok(ProblemPreset {
            name: name.into(),
            system: SystemModel::Euler {
                field: VectorField::pendulum(),
                dt: 0.5,
            },
            state_set: Polytope::symmetric_box(&[0.3, 0.6]),
            input_set: Polytope::cube(1, 3.0),
            terminal: TerminalSet::Point(DVector::zeros(2)),
            horizon: 10,
            terminal_gain: None,
        }),
        _ => Err(Error::UnknownPreset {
            name: name.into(),
            valid: PRESET_NAMES.join(", "),
        }),
    }
}

impl ProblemPreset {
    pub fn nx(&self) -> usize {
        self.system.nx()
    }

    pub fn nu(&self) -> usize {
        self.system.nu()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.nx(), self.nu());
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        check_dim("state set", n, self.state_set.dim())?;
        check_dim("input set", m, self.input_set.dim())?;
        self.terminal.validate(n)?;
        if let Some(k) = &self.terminal_gain {
            check_dim("terminal gain rows", m, k.nrows())?;
            check_dim("terminal gain columns", n, k.ncols())?;
        }
        if !self.terminal.is_inside(&self.state_set, 1e-9)? {
            return Err(Error::Config("terminal set is not contained in the state set".into()));
        }
        Ok(())
    }

    pub fn terminal_input(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.terminal_gain {
            Some(k) => k * x,
            None => DVector::zeros(self.nu()),
        }
    }

    pub fn with_horizon(&self, horizon: usize) -> ProblemPreset {
        ProblemPreset {
            horizon,
            ..self.clone()
        }
    }

    /// Parses the JSON problem format.
    pub fn from_json(text: &str) -> Result<ProblemPreset> {
        let spec: SpecFile = serde_json::from_str(text)?;
        spec.into_problem()
    }
}

// ---------------------------------------------------------------------------
// JSON problem format

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    #[serde(default)]
    name: Option<String>,
    system: SpecSystem,
    #[serde(rename = "X")]
    x: SpecSet,
    #[serde(rename = "U")]
    u: SpecSet,
    #[serde(rename = "Xf")]
    xf: SpecTerminal,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "Kf", default)]
    kf: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum SpecSystem {
    Linear {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
    },
    Nonlinear { name: String, dt: f64 },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecSet {
    Box {
        #[serde(rename = "box")]
        radius: BoxRadius,
    },
    Rows {
        #[serde(rename = "G")]
        g_mat: Vec<Vec<f64>>,
        g: Vec<f64>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxRadius {
    Scalar(f64),
    PerAxis(Vec<f64>),
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum SpecTerminal {
    Ellipsoid {
        #[serde(rename = "P")]
        p: Vec<Vec<f64>>,
        alpha: f64,
    },
    Polytope {
        #[serde(rename = "G")]
        g_mat: Vec<Vec<f64>>,
        g: Vec<f64>,
    },
    Point(Vec<f64>),
}

fn dense(rows: &[Vec<f64>], context: &'static str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    for row in rows {
        check_dim(context, c, row.len())?;
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl SpecSet {
    fn into_polytope(self, dim: usize, context: &'static str) -> Result<Polytope> {
        let poly = match self {
            SpecSet::Box { radius } => match radius {
                BoxRadius::Scalar(r) => Polytope::cube(dim, r),
                BoxRadius::PerAxis(r) => {
                    check_dim(context, dim, r.len())?;
                    Polytope::symmetric_box(&r)
                }
            },
            SpecSet::Rows { g_mat, g } => {
                Polytope::new(dense(&g_mat, context)?, DVector::from_vec(g))?
            }
        };
        check_dim(context, dim, poly.dim())?;
        Ok(poly)
    }
}

impl SpecFile {
    fn into_problem(self) -> Result<ProblemPreset> {
        let system = match self.system {
            SpecSystem::Linear { a, b } => {
                SystemModel::linear(dense(&a, "A rows")?, dense(&b, "B rows")?)?
            }
            SpecSystem::Nonlinear { name, dt } => {
                let field = match name.as_str() {
                    "pendulum" => VectorField::pendulum(),
                    other => {
                        return Err(Error::Config(format!(
                            "unknown vector field `{other}` (valid: pendulum)"
                        )))
                    }
                };
                if !(dt > 0.0) {
                    return Err(Error::Config(format!("step size {dt} must be positive")));
                }
                SystemModel::Euler { field, dt }
            }
        };
        let (n, m) = (system.nx(), system.nu());
        let terminal = match self.xf {
            SpecTerminal::Ellipsoid { p, alpha } => TerminalSet::Ellipsoid {
                p: dense(&p, "terminal P rows")?,
                alpha,
            },
            SpecTerminal::Polytope { g_mat, g } => TerminalSet::Polytope(Polytope::new(
                dense(&g_mat, "terminal polytope rows")?,
                DVector::from_vec(g),
            )?),
            SpecTerminal::Point(p) => TerminalSet::Point(DVector::from_vec(p)),
        };
        let problem = ProblemPreset {
            name: self.name.unwrap_or_else(|| "custom".into()),
            system,
            state_set: self.x.into_polytope(n, "state set")?,
            input_set: self.u.into_polytope(m, "input set")?,
            terminal,
            horizon: self.n,
            terminal_gain: self.kf.map(|k| dense(&k, "Kf rows")).transpose()?,
        };
        problem.validate()?;
        Ok(problem)
    }
}
