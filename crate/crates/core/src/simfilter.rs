//! Closed-loop simulation under the safe MPC and the two-stage predictive
//! safety filter.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conic::SolveStatus;
use crate::error::{check_dim, Error, Result};
use crate::model::Polytope;
use crate::pcbf::ValueGrid;
use crate::safempc::{
    self, shifted_candidate, Plan, SafeMpcProblem, SafeMpcSolution, Variant, BUDGET_MARGIN,
    ZERO_TOL,
};

/// `ξ₀*` below this counts as safe.
pub const SAFE_SLACK: f64 = 1e-4;
/// Consecutive safe steps that end a run as converged.
pub const CONVERGED_STEPS: usize = 5;
/// Tolerance of `V*(k+1) ≤ V*(k) − ξ₀*(k)`.
pub const DECREASE_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Horizon,
    Infeasible,
    Converged,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Horizon => "horizon",
            Termination::Infeasible => "infeasible",
            Termination::Converged => "converged",
        }
    }
}

pub fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::Infeasible => "infeasible",
        SolveStatus::Unbounded => "unbounded",
        SolveStatus::MaxIter => "max_iter",
    }
}

/// Desired input and modification of one filtered step.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRecord {
    pub u_desired: DVector<f64>,
    pub modification: f64,
    pub stage2: SolveStatus,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `x(0..=T)`; shorter when the run stops early.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub slacks: Vec<f64>,
    /// `V*` at every state; `∞` where the problem is infeasible.
    pub values: Vec<f64>,
    pub statuses: Vec<SolveStatus>,
    pub termination: Termination,
    /// First step of the converged window.
    pub converged_at: Option<usize>,
    pub filter: Vec<FilterRecord>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// `V*(k+1) − V*(k) + ξ₀*(k)` for every step with both values finite.
    pub fn decrease_margins(&self) -> Vec<f64> {
        (0..self.steps())
            .filter(|&k| k + 1 < self.values.len())
            .map(|k| self.values[k + 1] - self.values[k] + self.slacks[k])
            .collect()
    }

    pub fn max_decrease_margin(&self) -> f64 {
        self.decrease_margins()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn satisfies_decrease(&self) -> bool {
        self.decrease_margins().iter().all(|d| *d <= DECREASE_TOL)
    }

    /// Largest `‖x(k+1) − f(x(k), u(k))‖∞`.
    pub fn dynamics_residual(&self, problem: &SafeMpcProblem) -> Result<f64> {
        let mut worst = 0.0f64;
        for k in 0..self.steps().min(self.states.len() - 1) {
            let next = problem.preset.system.step(&self.states[k], &self.inputs[k])?;
            worst = worst.max((&next - &self.states[k + 1]).amax());
        }
        Ok(worst)
    }

    /// First step with `ξ₀* ≤ SAFE_SLACK`.
    pub fn first_safe_step(&self) -> Option<usize> {
        self.slacks.iter().position(|s| *s <= SAFE_SLACK)
    }

    /// First step from which `ξ₀* ≤ SAFE_SLACK` for the rest of the run.
    pub fn settled_step(&self) -> Option<usize> {
        let k = self
            .slacks
            .iter()
            .rposition(|s| *s > SAFE_SLACK)
            .map_or(0, |k| k + 1);
        (k < self.slacks.len()).then_some(k)
    }

    /// Largest state-constraint violation from step `k` on.
    pub fn violation_after(&self, set: &Polytope, k: usize) -> f64 {
        self.states[k.min(self.states.len())..]
            .iter()
            .map(|x| set.violation(x))
            .fold(0.0, f64::max)
    }

    /// `k,x1..xn,u1..um,xi0,V,status`, plus `u_des_1..m,mod_norm` for filter
    /// runs. The last state has empty input fields.
    pub fn to_csv(&self) -> String {
        let n = self.states[0].len();
        let m = self
            .inputs
            .first()
            .or(self.filter.first().map(|f| &f.u_desired))
            .map_or(0, |u| u.len());
        let filtered = !self.filter.is_empty();
        let mut head = vec!["k".to_string()];
        head.extend((1..=n).map(|i| format!("x{i}")));
        head.extend((1..=m).map(|i| format!("u{i}")));
        head.extend(["xi0", "V", "status"].map(String::from));
        if filtered {
            head.extend((1..=m).map(|i| format!("u_des_{i}")));
            head.push("mod_norm".into());
        }
        let mut s = head.join(",");
        s.push('\n');
        for (k, x) in self.states.iter().enumerate() {
            let mut row: Vec<String> = vec![k.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            match self.inputs.get(k) {
                Some(u) => row.extend(u.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat(String::new()).take(m)),
            }
            row.push(self.slacks.get(k).map_or(String::new(), |v| v.to_string()));
            row.push(self.values.get(k).map_or(String::new(), |v| v.to_string()));
            row.push(
                self.statuses
                    .get(k)
                    .map_or(String::new(), |s| status_name(*s).to_string()),
            );
            if filtered {
                match self.filter.get(k) {
                    Some(f) => {
                        row.extend(f.u_desired.iter().map(|v| v.to_string()));
                        row.push(f.modification.to_string());
                    }
                    None => row.extend(std::iter::repeat(String::new()).take(m + 1)),
                }
            }
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Result of the two-stage filter at one state.
#[derive(Clone, Debug)]
pub struct FilterStep {
    pub x: DVector<f64>,
    pub u_desired: DVector<f64>,
    pub u_applied: DVector<f64>,
    /// Stage-1 `V*(x)`.
    pub slack_budget: f64,
    pub stage1: SafeMpcSolution,
    pub stage2: SafeMpcSolution,
    pub modification: f64,
}

impl FilterStep {
    /// Solution whose first input is applied.
    pub fn applied(&self) -> &SafeMpcSolution {
        if self.stage2.is_optimal() {
            &self.stage2
        } else {
            &self.stage1
        }
    }
}

fn soft_of(problem: &SafeMpcProblem) -> SafeMpcProblem {
    match problem.variant {
        Variant::Filter { .. } | Variant::Hard => problem.with_variant(Variant::Soft),
        _ => problem.clone(),
    }
}

/// Stage 1 solves the soft problem for the slack budget `V*(x)`; stage 2
/// finds the input closest to `u_desired` within that budget. Falls back to
/// the stage-1 input if stage 2 fails.
pub fn filter_step(
    problem: &SafeMpcProblem,
    x: &DVector<f64>,
    u_desired: &DVector<f64>,
    warm: Option<&Plan>,
) -> Result<FilterStep> {
    check_dim("desired input", problem.preset.nu(), u_desired.len())?;
    let soft = soft_of(problem);
    let stage1 = safempc::solve(&soft, x, warm)?;
    if !stage1.is_optimal() {
        return Err(Error::Solver(format!(
            "filter stage 1 at {:?} ended with status {:?}",
            x.as_slice(),
            stage1.status
        )));
    }
    let budget = stage1.value.max(0.0);
    let second = SafeMpcProblem::filter(soft.preset.clone(), u_desired.clone(), budget + BUDGET_MARGIN);
    let stage2 = safempc::solve(&second, x, Some(&stage1.plan))?;
    let u_applied = if stage2.is_optimal() {
        stage2.u0().clone()
    } else {
        stage1.u0().clone()
    };
    Ok(FilterStep {
        x: x.clone(),
        u_desired: u_desired.clone(),
        modification: (&u_applied - u_desired).norm(),
        u_applied,
        slack_budget: budget,
        stage1,
        stage2,
    })
}

struct Run {
    traj: Trajectory,
    safe_streak: usize,
}

impl Run {
    fn new(x0: &DVector<f64>) -> Run {
        Run {
            traj: Trajectory {
                states: vec![x0.clone()],
                inputs: Vec::new(),
                slacks: Vec::new(),
                values: Vec::new(),
                statuses: Vec::new(),
                termination: Termination::Horizon,
                converged_at: None,
                filter: Vec::new(),
            },
            safe_streak: 0,
        }
    }

    fn fail(mut self, status: SolveStatus) -> Trajectory {
        self.traj.values.push(f64::INFINITY);
        self.traj.statuses.push(status);
        self.traj.termination = Termination::Infeasible;
        self.traj
    }

    fn record(&mut self, problem: &SafeMpcProblem, value: f64, sol: &SafeMpcSolution, u: DVector<f64>) -> Result<()> {
        let k = self.traj.inputs.len();
        let x = self.traj.states[k].clone();
        let xi0 = sol.xi0();
        self.traj.values.push(value);
        self.traj.statuses.push(sol.status);
        self.traj.slacks.push(xi0);
        self.traj.states.push(problem.preset.system.step(&x, &u)?);
        self.traj.inputs.push(u);
        self.safe_streak = if xi0 <= SAFE_SLACK { self.safe_streak + 1 } else { 0 };
        if self.safe_streak == CONVERGED_STEPS && self.traj.converged_at.is_none() {
            self.traj.converged_at = Some(k + 1 - CONVERGED_STEPS);
        }
        Ok(())
    }

    fn close(mut self, problem: &SafeMpcProblem, warm: Option<&Plan>) -> Result<Trajectory> {
        let last = self.traj.states.last().expect("nonempty").clone();
        let sol = safempc::solve(&soft_of(problem), &last, warm)?;
        if !sol.is_optimal() {
            return Ok(self.fail(sol.status));
        }
        self.traj.values.push(sol.value);
        self.traj.statuses.push(sol.status);
        if self.traj.converged_at.is_some() {
            self.traj.termination = Termination::Converged;
        }
        Ok(self.traj)
    }
}

/// Applies `u₀*(x)` for `steps` steps, warm-starting each solve from the
/// shifted candidate. Stops early only on infeasibility.
pub fn simulate(problem: &SafeMpcProblem, x0: &DVector<f64>, steps: usize) -> Result<Trajectory> {
    check_dim("initial state", problem.preset.nx(), x0.len())?;
    let soft = soft_of(problem);
    let mut run = Run::new(x0);
    let mut warm: Option<Plan> = None;
    for k in 0..steps {
        let x = run.traj.states[k].clone();
        let sol = safempc::solve(&soft, &x, warm.as_ref())?;
        if !sol.is_optimal() {
            return Ok(run.fail(sol.status));
        }
        warm = Some(shifted_candidate(&soft, &sol.plan));
        let u = sol.u0().clone();
        run.record(&soft, sol.value, &sol, u)?;
    }
    run.close(&soft, warm.as_ref())
}

/// As [`simulate`], applying the filtered input around `policy(x)`.
pub fn simulate_filtered(
    problem: &SafeMpcProblem,
    x0: &DVector<f64>,
    policy: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    steps: usize,
) -> Result<Trajectory> {
    check_dim("initial state", problem.preset.nx(), x0.len())?;
    let soft = soft_of(problem);
    let mut run = Run::new(x0);
    let mut warm: Option<Plan> = None;
    for k in 0..steps {
        let x = run.traj.states[k].clone();
        let step = match filter_step(&soft, &x, &policy(&x), warm.as_ref()) {
            Ok(s) => s,
            Err(Error::Solver(_)) => {
                let status = safempc::solve(&soft, &x, None)?.status;
                return Ok(run.fail(status));
            }
            Err(e) => return Err(e),
        };
        let applied = step.applied();
        warm = Some(shifted_candidate(&soft, &applied.plan));
        run.traj.filter.push(FilterRecord {
            u_desired: step.u_desired.clone(),
            modification: step.modification,
            stage2: step.stage2.status,
        });
        run.record(&soft, step.slack_budget, applied, step.u_applied.clone())?;
    }
    run.close(&soft, warm.as_ref())
}

/// `u = K x` with the preset's terminal gain.
pub fn linear_policy(problem: &SafeMpcProblem) -> Result<impl Fn(&DVector<f64>) -> DVector<f64>> {
    let k = problem
        .preset
        .terminal_gain
        .clone()
        .ok_or_else(|| Error::Config(format!("preset `{}` has no feedback gain", problem.preset.name)))?;
    Ok(move |x: &DVector<f64>| &k * x)
}

/// Seeded rejection sampling of `count` states, uniform in the box
/// `[lower, upper]`, with `V*(x) > ε₀` and `accept(x)`.
pub fn sample_unsafe_states(
    problem: &SafeMpcProblem,
    lower: &[f64],
    upper: &[f64],
    count: usize,
    seed: u64,
    accept: &dyn Fn(&DVector<f64>) -> bool,
) -> Result<Vec<DVector<f64>>> {
    let soft = soft_of(problem);
    sample_states(&soft, lower, upper, count, seed, &|x, sol| {
        sol.is_optimal() && sol.value > ZERO_TOL && accept(x)
    })
}

/// Seeded rejection sampling with an arbitrary acceptance test on the
/// problem's solution at the sample.
pub fn sample_states(
    problem: &SafeMpcProblem,
    lower: &[f64],
    upper: &[f64],
    count: usize,
    seed: u64,
    accept: &dyn Fn(&DVector<f64>, &SafeMpcSolution) -> bool,
) -> Result<Vec<DVector<f64>>> {
    let n = problem.preset.nx();
    check_dim("sampling box", n, lower.len())?;
    check_dim("sampling box", n, upper.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let max_tries = 2000 * count.max(1);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Config(format!(
                "found only {} of {count} admissible samples after {max_tries} draws",
                out.len()
            )));
        }
        let x = DVector::from_fn(n, |i, _| {
            if upper[i] > lower[i] {
                rng.gen_range(lower[i]..=upper[i])
            } else {
                lower[i]
            }
        });
        let sol = safempc::solve(problem, &x, None)?;
        if accept(&x, &sol) {
            out.push(x);
        }
    }
    Ok(out)
}

/// Convex hull of the zero cells of a 2-D value grid, used as the
/// approximation of `X⁰_MPC` for distances.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroSetHull {
    /// Counterclockwise vertices.
    pub vertices: Vec<[f64; 2]>,
}

impl ZeroSetHull {
    pub fn from_grid(values: &ValueGrid) -> Result<ZeroSetHull> {
        if values.grid.dim() != 2 {
            return Err(Error::Config("zero-set hull needs a 2-D grid".into()));
        }
        let pts: Vec<[f64; 2]> = values
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_zero())
            .map(|(i, _)| {
                let p = values.grid.point(i);
                [p[0], p[1]]
            })
            .collect();
        if pts.is_empty() {
            return Err(Error::Config("grid has no zero cells".into()));
        }
        Ok(ZeroSetHull {
            vertices: convex_hull(pts),
        })
    }

    /// Euclidean distance from `x` to the hull.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let p = [x[0], x[1]];
        let v = &self.vertices;
        if v.len() >= 3 && (0..v.len()).all(|i| cross(v[i], v[(i + 1) % v.len()], p) >= 0.0) {
            return 0.0;
        }
        if v.len() == 1 {
            return (p[0] - v[0][0]).hypot(p[1] - v[0][1]);
        }
        (0..v.len())
            .map(|i| segment_distance(p, v[i], v[(i + 1) % v.len()]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
}

// monotone chain
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, Grid};
    use crate::pcbf::CellValue;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn linear() -> SafeMpcProblem {
        SafeMpcProblem::soft(preset("linear-unstable").unwrap())
    }

    #[test]
    fn origin_stays_put() {
        let t = simulate(&linear(), &v(&[0.0, 0.0]), 50).unwrap();
        assert_eq!(t.states.len(), 51);
        assert_eq!(t.termination, Termination::Converged);
        assert_eq!(t.converged_at, Some(0));
        assert!(t.values.iter().all(|v| *v <= ZERO_TOL));
        assert!(t.satisfies_decrease());
        assert_eq!(t.dynamics_residual(&linear()).unwrap(), 0.0);
    }

    #[test]
    fn unsafe_start_recovers() {
        let p = linear();
        let t = simulate(&p, &v(&[1.1, 0.0]), 50).unwrap();
        assert!(t.values[0] > ZERO_TOL);
        assert!(t.satisfies_decrease(), "{}", t.max_decrease_margin());
        let k = t.settled_step().unwrap();
        assert!(k <= 30);
        assert!(t.violation_after(&p.preset.state_set, k) <= 1e-4);
    }

    #[test]
    fn infeasible_start_stops() {
        let t = simulate(&linear(), &v(&[50.0, 50.0]), 10).unwrap();
        assert_eq!(t.termination, Termination::Infeasible);
        assert_eq!(t.steps(), 0);
        assert_eq!(t.statuses, vec![SolveStatus::Infeasible]);
    }

    #[test]
    fn filter_leaves_safe_input_alone() {
        let p = linear();
        let x = v(&[0.1, -0.1]);
        let k = p.preset.terminal_gain.clone().unwrap();
        let s = filter_step(&p, &x, &(&k * &x), None).unwrap();
        assert!(s.stage2.is_optimal());
        assert!(s.modification <= 1e-5);
    }

    #[test]
    fn filter_recovers_from_unsafe_state() {
        let p = linear();
        let policy = linear_policy(&p).unwrap();
        let x0 = v(&[1.1, 0.0]);
        assert!(policy(&x0)[0].abs() > 1.5);
        let s = filter_step(&p, &x0, &policy(&x0), None).unwrap();
        assert!(p.preset.input_set.contains(&s.u_applied, 1e-8));
        assert!((s.stage2.plan.total_slack() - s.slack_budget).abs() <= 1e-6);
        let t = simulate_filtered(&p, &x0, &policy, 50).unwrap();
        assert!(t.settled_step().unwrap() <= 30);
        assert!(t.satisfies_decrease());
        let csv = t.to_csv();
        assert!(csv.starts_with("k,x1,x2,u1,xi0,V,status,u_des_1,mod_norm\n"));
        assert_eq!(csv.lines().count(), 52);
    }

    #[test]
    fn sampling_is_seeded() {
        let p = linear();
        let box_ = [-1.2, -1.2];
        let hi = [1.2, 1.2];
        let a = sample_unsafe_states(&p, &box_, &hi, 3, 7, &|_| true).unwrap();
        let b = sample_unsafe_states(&p, &box_, &hi, 3, 7, &|_| true).unwrap();
        assert_eq!(a, b);
        for x in &a {
            assert!(safempc::solve(&p, x, None).unwrap().value > ZERO_TOL);
        }
    }

    #[test]
    fn hull_distance() {
        let grid = Grid::square(2, -1.0, 1.0, 5).unwrap();
        let cells = (0..grid.len())
            .map(|i| {
                if grid.point(i).amax() <= 0.5 {
                    CellValue::Value(0.0)
                } else {
                    CellValue::Infeasible
                }
            })
            .collect();
        let vg = ValueGrid {
            grid,
            cells,
            fingerprint: String::new(),
        };
        let h = ZeroSetHull::from_grid(&vg).unwrap();
        assert_eq!(h.vertices.len(), 4);
        assert_eq!(h.distance(&v(&[0.2, 0.1])), 0.0);
        assert!((h.distance(&v(&[1.0, 0.0])) - 0.5).abs() < 1e-12);
        assert!((h.distance(&v(&[1.0, 1.0])) - 0.5f64.hypot(0.5)).abs() < 1e-12);
    }
}
