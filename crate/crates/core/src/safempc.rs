//! Soft-constrained MPC whose optimal value is a predictive control barrier
//! function, plus its hard, tightened and filter variants.

use nalgebra::{DMatrix, DVector};

use crate::conic::{self, ConicProgram, ProgramBuilder, SocBlock, SolveStatus};
use crate::error::{check_dim, Error, Result};
use crate::invariance;
use crate::model::{ProblemPreset, SystemModel, TerminalSet};

/// Default weight of the `ε_u‖u‖²` tie-break.
pub const TIE_BREAK: f64 = 1e-6;
/// Values at or below this count as zero (hard-feasible).
pub const ZERO_TOL: f64 = 1e-5;
/// Extra room given to the slack budget of the filter stage.
pub const BUDGET_MARGIN: f64 = 1e-8;

const MERIT_WEIGHT: f64 = 1e3;
const TRUST_INIT: f64 = 0.5;
const TRUST_MAX: f64 = 10.0;
const TRUST_ACCEPT: f64 = 0.1;
const TRUST_GROW: f64 = 0.75;
const SQP_MAX_ITER: usize = 100;
const SQP_STEP_TOL: f64 = 1e-9;
const SQP_PRED_TOL: f64 = 1e-12;
const SQP_FEAS_TOL: f64 = 1e-8;
const STALL_WINDOW: usize = 5;
const STALL_DECREASE: f64 = 0.01;
const STALL_VIOLATION: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    Soft,
    Hard,
    /// Relaxed rows shifted by `delta[i]` at stage `i`.
    Tightened { delta: Vec<f64> },
    /// Minimize `‖u₀ − u_desired‖²` with `Σξ ≤ slack_budget`.
    Filter {
        u_desired: DVector<f64>,
        slack_budget: f64,
    },
}

#[derive(Clone, Debug)]
pub struct SafeMpcProblem {
    pub preset: ProblemPreset,
    pub variant: Variant,
    pub tie_break: f64,
}

impl SafeMpcProblem {
    pub fn new(preset: ProblemPreset, variant: Variant) -> Result<Self> {
        let p = SafeMpcProblem {
            preset,
            variant,
            tie_break: TIE_BREAK,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn soft(preset: ProblemPreset) -> Self {
        SafeMpcProblem {
            preset,
            variant: Variant::Soft,
            tie_break: TIE_BREAK,
        }
    }

    pub fn hard(preset: ProblemPreset) -> Self {
        SafeMpcProblem {
            preset,
            variant: Variant::Hard,
            tie_break: TIE_BREAK,
        }
    }

    /// `Δᵢ = i·step`.
    pub fn tightened(preset: ProblemPreset, step: f64) -> Self {
        let delta = (0..preset.horizon).map(|i| i as f64 * step).collect();
        SafeMpcProblem {
            preset,
            variant: Variant::Tightened { delta },
            tie_break: TIE_BREAK,
        }
    }

    pub fn filter(preset: ProblemPreset, u_desired: DVector<f64>, slack_budget: f64) -> Self {
        SafeMpcProblem {
            preset,
            variant: Variant::Filter {
                u_desired,
                slack_budget,
            },
            tie_break: TIE_BREAK,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        SafeMpcProblem {
            preset: self.preset.clone(),
            variant,
            tie_break: self.tie_break,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            n: self.preset.nx(),
            m: self.preset.nu(),
            horizon: self.preset.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preset.validate()?;
        if !(self.tie_break >= 0.0) {
            return Err(Error::Config("tie-break weight must be nonnegative".into()));
        }
        match &self.variant {
            Variant::Tightened { delta } => {
                check_dim("tightening vector", self.preset.horizon, delta.len())?;
                if delta[0] != 0.0 {
                    return Err(Error::Config("tightening must vanish at stage 0".into()));
                }
                if delta.windows(2).any(|w| w[1] < w[0]) || delta.iter().any(|d| *d < 0.0) {
                    return Err(Error::Config(
                        "tightening must be nonnegative and nondecreasing".into(),
                    ));
                }
            }
            Variant::Filter {
                u_desired,
                slack_budget,
            } => {
                check_dim("desired input", self.preset.nu(), u_desired.len())?;
                if !(*slack_budget >= 0.0) {
                    return Err(Error::Config("slack budget must be nonnegative".into()));
                }
            }
            Variant::Soft | Variant::Hard => {}
        }
        Ok(())
    }

    fn tightening(&self, stage: usize) -> f64 {
        match &self.variant {
            Variant::Tightened { delta } => delta[stage],
            _ => 0.0,
        }
    }

    fn relaxed(&self) -> bool {
        !matches!(self.variant, Variant::Hard)
    }
}

/// Index map of the stacked decision vector `(x₀..x_N, u₀..u_{N−1}, ξ₀..ξ_{N−1})`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn x(&self, stage: usize) -> usize {
        stage * self.n
    }

    pub fn u(&self, stage: usize) -> usize {
        (self.horizon + 1) * self.n + stage * self.m
    }

    pub fn xi(&self, stage: usize) -> usize {
        (self.horizon + 1) * self.n + self.horizon * self.m + stage
    }

    pub fn num_vars(&self) -> usize {
        (self.horizon + 1) * self.n + self.horizon * (self.m + 1)
    }
}

/// State, input and slack sequences over one horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub xi: Vec<f64>,
}

impl Plan {
    pub fn from_vector(layout: &Layout, z: &DVector<f64>) -> Plan {
        Plan {
            x: (0..=layout.horizon)
                .map(|i| z.rows(layout.x(i), layout.n).into_owned())
                .collect(),
            u: (0..layout.horizon)
                .map(|i| z.rows(layout.u(i), layout.m).into_owned())
                .collect(),
            xi: (0..layout.horizon).map(|i| z[layout.xi(i)]).collect(),
        }
    }

    pub fn to_vector(&self, layout: &Layout) -> DVector<f64> {
        let mut z = DVector::zeros(layout.num_vars());
        for (i, x) in self.x.iter().enumerate() {
            z.rows_mut(layout.x(i), layout.n).copy_from(x);
        }
        for (i, u) in self.u.iter().enumerate() {
            z.rows_mut(layout.u(i), layout.m).copy_from(u);
        }
        for (i, xi) in self.xi.iter().enumerate() {
            z[layout.xi(i)] = *xi;
        }
        z
    }

    pub fn total_slack(&self) -> f64 {
        self.xi.iter().sum()
    }

    /// Largest `‖x_{i+1} − f(x_i, u_i)‖∞`.
    pub fn dynamics_residual(&self, system: &SystemModel) -> f64 {
        self.u
            .iter()
            .enumerate()
            .map(|(i, u)| (&self.x[i + 1] - system.step_unchecked(&self.x[i], u)).amax())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct SafeMpcSolution {
    pub status: SolveStatus,
    pub plan: Plan,
    /// `Σ ξᵢ`.
    pub value: f64,
    pub conic_iterations: usize,
    pub sqp_iterations: usize,
    pub dynamics_residual: f64,
}

impl SafeMpcSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn u0(&self) -> &DVector<f64> {
        &self.plan.u[0]
    }

    pub fn xi0(&self) -> f64 {
        self.plan.xi[0]
    }
}

/// Affine stage dynamics `x_{i+1} = A x_i + B u_i + c`.
type Affine = (DMatrix<f64>, DMatrix<f64>, DVector<f64>);

/// Transcribes the problem at state `x` into a conic program. Nonlinear
/// dynamics are linearized along the constant-state, zero-input rollout.
pub fn build(problem: &SafeMpcProblem, x: &DVector<f64>) -> Result<ConicProgram> {
    problem.validate()?;
    check_dim("initial state", problem.preset.nx(), x.len())?;
    let plan = rollout_guess(problem, x);
    Ok(transcribe(problem, x, &linearize_along(problem, &plan)))
}

fn linearize_along(problem: &SafeMpcProblem, plan: &Plan) -> Vec<Affine> {
    (0..problem.preset.horizon)
        .map(|i| problem.preset.system.linearize_unchecked(&plan.x[i], &plan.u[i]))
        .collect()
}

fn transcribe(problem: &SafeMpcProblem, x0: &DVector<f64>, dynamics: &[Affine]) -> ConicProgram {
    let pre = &problem.preset;
    let lay = problem.layout();
    let (n, m, horizon) = (lay.n, lay.m, lay.horizon);
    let mut b = ProgramBuilder::new(lay.num_vars());

    // objective
    match &problem.variant {
        Variant::Filter { u_desired, .. } => {
            for j in 0..m {
                b.add_quad_cost(lay.u(0) + j, lay.u(0) + j, 2.0);
                b.add_linear_cost(lay.u(0) + j, -2.0 * u_desired[j]);
            }
            b.add_offset(u_desired.norm_squared());
        }
        _ => {
            for i in 0..horizon {
                b.add_linear_cost(lay.xi(i), 1.0);
            }
            if problem.tie_break > 0.0 {
                for k in 0..horizon * m {
                    b.add_quad_cost(lay.u(0) + k, lay.u(0) + k, 2.0 * problem.tie_break);
                }
            }
        }
    }

    // initial state and dynamics
    for r in 0..n {
        b.add_eq(vec![(lay.x(0) + r, 1.0)], x0[r]);
    }
    for (i, (a, bm, c)) in dynamics.iter().enumerate() {
        for r in 0..n {
            let mut row = vec![(lay.x(i + 1) + r, 1.0)];
            row.extend((0..n).map(|k| (lay.x(i) + k, -a[(r, k)])));
            row.extend((0..m).map(|k| (lay.u(i) + k, -bm[(r, k)])));
            b.add_eq(row, c[r]);
        }
    }

    // inputs
    let us = &pre.input_set;
    for i in 0..horizon {
        for r in 0..us.num_rows() {
            let row = (0..m).map(|k| (lay.u(i) + k, us.lhs[(r, k)])).collect();
            b.add_le(row, us.rhs[r]);
        }
    }

    // states with per-stage slack
    let xs = &pre.state_set;
    for i in 0..horizon {
        let delta = problem.tightening(i);
        for r in 0..xs.num_rows() {
            let mut row: Vec<(usize, f64)> =
                (0..n).map(|k| (lay.x(i) + k, xs.lhs[(r, k)])).collect();
            if problem.relaxed() {
                row.push((lay.xi(i), -1.0));
            }
            b.add_le(row, xs.rhs[r] - delta);
        }
    }
    for i in 0..horizon {
        if problem.relaxed() {
            b.add_le(vec![(lay.xi(i), -1.0)], 0.0);
        } else {
            b.add_eq(vec![(lay.xi(i), 1.0)], 0.0);
        }
    }
    if let Variant::Filter { slack_budget, .. } = &problem.variant {
        b.add_le((0..horizon).map(|i| (lay.xi(i), 1.0)).collect(), *slack_budget);
    }

    // terminal set
    let xn = lay.x(horizon);
    match &pre.terminal {
        TerminalSet::Ellipsoid { p, alpha } => {
            let l = p.clone().cholesky().expect("validated positive definite").l();
            let mut f = DMatrix::zeros(n, lay.num_vars());
            f.view_mut((0, xn), (n, n)).copy_from(&l.transpose());
            b.add_soc(SocBlock {
                f,
                d: DVector::zeros(n),
                r: DVector::zeros(lay.num_vars()),
                s: alpha.sqrt(),
            });
        }
        TerminalSet::Polytope(poly) => {
            for r in 0..poly.num_rows() {
                let row = (0..n).map(|k| (xn + k, poly.lhs[(r, k)])).collect();
                b.add_le(row, poly.rhs[r]);
            }
        }
        TerminalSet::Point(xf) => {
            for r in 0..n {
                b.add_eq(vec![(xn + r, 1.0)], xf[r]);
            }
        }
    }
    b.build()
}

/// Solves the soft (or tightened) problem at `x`.
pub fn solve_soft(problem: &SafeMpcProblem, x: &DVector<f64>) -> Result<SafeMpcSolution> {
    if matches!(problem.variant, Variant::Hard | Variant::Filter { .. }) {
        return Err(Error::Config("solve_soft needs the soft or tightened variant".into()));
    }
    solve(problem, x, None)
}

/// Solves the hard-constrained problem; optimal exactly when `x ∈ X⁰_MPC`.
pub fn solve_hard(problem: &SafeMpcProblem, x: &DVector<f64>) -> Result<SafeMpcSolution> {
    if problem.variant != Variant::Hard {
        return Err(Error::Config("solve_hard needs the hard variant".into()));
    }
    solve(problem, x, None)
}

/// Solves any variant: one conic solve for linear models, SQP otherwise.
pub fn solve(
    problem: &SafeMpcProblem,
    x: &DVector<f64>,
    warm: Option<&Plan>,
) -> Result<SafeMpcSolution> {
    problem.validate()?;
    check_dim("initial state", problem.preset.nx(), x.len())?;
    if problem.preset.system.is_linear() {
        let plan = rollout_guess(problem, x);
        let prog = transcribe(problem, x, &linearize_along(problem, &plan));
        let warm_z = warm.map(|w| w.to_vector(&problem.layout()));
        let sol = conic::solve(&prog, warm_z.as_ref())?;
        Ok(finish(problem, x, &sol.z, sol.status, sol.iterations, 0))
    } else {
        sqp_solve(problem, x, warm)
    }
}

fn finish(
    problem: &SafeMpcProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    status: SolveStatus,
    conic_iterations: usize,
    sqp_iterations: usize,
) -> SafeMpcSolution {
    let mut plan = Plan::from_vector(&problem.layout(), z);
    plan.x[0] = x.clone();
    for xi in plan.xi.iter_mut() {
        *xi = xi.max(0.0);
    }
    let value = plan.total_slack();
    let dynamics_residual = plan.dynamics_residual(&problem.preset.system);
    SafeMpcSolution {
        status,
        plan,
        value,
        conic_iterations,
        sqp_iterations,
        dynamics_residual,
    }
}

/// Constant-state, zero-input rollout with the smallest consistent slacks.
fn rollout_guess(problem: &SafeMpcProblem, x: &DVector<f64>) -> Plan {
    let pre = &problem.preset;
    let horizon = pre.horizon;
    let mut plan = Plan {
        x: vec![x.clone(); horizon + 1],
        u: vec![DVector::zeros(pre.nu()); horizon],
        xi: vec![0.0; horizon],
    };
    fit_slacks(problem, &mut plan);
    plan
}

fn fit_slacks(problem: &SafeMpcProblem, plan: &mut Plan) {
    if !problem.relaxed() {
        plan.xi.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let xs = &problem.preset.state_set;
    for i in 0..plan.xi.len() {
        let worst = if xs.num_rows() == 0 {
            0.0
        } else {
            xs.residual(&plan.x[i]).max() + problem.tightening(i)
        };
        plan.xi[i] = worst.max(0.0);
    }
}

/// Nonlinear rollout of `u` from `x0`.
fn rollout(system: &SystemModel, x0: &DVector<f64>, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut xs = Vec::with_capacity(u.len() + 1);
    xs.push(x0.clone());
    for ui in u {
        let next = system.step_unchecked(xs.last().expect("nonempty"), ui);
        xs.push(next);
    }
    xs
}

/// Rollout of an input sequence with its fitted slacks and ℓ1 merit.
struct Shot {
    plan: Plan,
    /// Violation of the rows that slack cannot absorb.
    violation: f64,
    merit: f64,
}

fn terminal_violation(terminal: &TerminalSet, x: &DVector<f64>) -> f64 {
    match terminal {
        TerminalSet::Point(xf) => (x - xf).lp_norm(1),
        TerminalSet::Polytope(poly) => poly.residual(x).iter().map(|r| r.max(0.0)).sum(),
        TerminalSet::Ellipsoid { p, alpha } => {
            ((x.dot(&(p * x))).max(0.0).sqrt() - alpha.sqrt()).max(0.0)
        }
    }
}

fn shoot(problem: &SafeMpcProblem, x0: &DVector<f64>, u: Vec<DVector<f64>>) -> Shot {
    let pre = &problem.preset;
    let x = rollout(&pre.system, x0, &u);
    let mut plan = Plan {
        x,
        u,
        xi: vec![0.0; pre.horizon],
    };
    fit_slacks(problem, &mut plan);
    let mut violation = terminal_violation(&pre.terminal, &plan.x[pre.horizon]);
    let objective = match &problem.variant {
        Variant::Filter {
            u_desired,
            slack_budget,
        } => {
            violation += (plan.total_slack() - slack_budget).max(0.0);
            (&plan.u[0] - u_desired).norm_squared()
        }
        variant => {
            if *variant == Variant::Hard {
                for xi in &plan.x[..pre.horizon] {
                    violation += pre.state_set.residual(xi).iter().map(|r| r.max(0.0)).sum::<f64>();
                }
            }
            let effort: f64 = plan.u.iter().map(|v| v.norm_squared()).sum();
            plan.total_slack() + problem.tie_break * effort
        }
    };
    Shot {
        plan,
        violation,
        merit: objective + MERIT_WEIGHT * violation,
    }
}

/// Convex subproblem in `(u, ξ, e)` around the rollout `shot`, with the
/// states eliminated through the linearized dynamics, elastic slacks `e` on
/// the rows slack cannot absorb, and `‖u − ū‖∞ ≤ radius`. With
/// `correction`, the predicted states are shifted so they are exact at that
/// trial plan.
fn shooting_subproblem(
    problem: &SafeMpcProblem,
    shot: &Shot,
    radius: f64,
    correction: Option<&Plan>,
) -> ConicProgram {
    let pre = &problem.preset;
    let (n, m, horizon) = (pre.nx(), pre.nu(), pre.horizon);
    let nu = horizon * m;
    let xi_at = |i: usize| nu + i;
    let xs = &pre.state_set;
    let hard = problem.variant == Variant::Hard;
    let terminal_rows = match &pre.terminal {
        TerminalSet::Point(_) => n,
        TerminalSet::Polytope(poly) => poly.num_rows(),
        TerminalSet::Ellipsoid { .. } => 1,
    };
    let num_elastic = terminal_rows
        + if hard { horizon * xs.num_rows() } else { 0 }
        + usize::from(matches!(problem.variant, Variant::Filter { .. }));
    let e0 = nu + horizon;
    let mut b = ProgramBuilder::new(e0 + num_elastic);

    // x_i ≈ c_i + M_i u
    let ubar = DVector::from_iterator(nu, shot.plan.u.iter().flat_map(|v| v.iter().copied()));
    let mut sens = vec![DMatrix::zeros(n, nu)];
    for i in 0..horizon {
        let (a, bm, _) = pre.system.linearize_unchecked(&shot.plan.x[i], &shot.plan.u[i]);
        let mut next = &a * &sens[i];
        let mut cols = next.view_mut((0, i * m), (n, m));
        cols += &bm;
        sens.push(next);
    }
    let mut offsets: Vec<DVector<f64>> = (0..=horizon)
        .map(|i| &shot.plan.x[i] - &sens[i] * &ubar)
        .collect();
    // second-order correction: shift by the linearization error at a trial
    if let Some(trial) = correction {
        let ut = DVector::from_iterator(nu, trial.u.iter().flat_map(|v| v.iter().copied()));
        for i in 0..=horizon {
            let err = &trial.x[i] - &offsets[i] - &sens[i] * &ut;
            offsets[i] += err;
        }
    }
    let affine = |i: usize, g: &DVector<f64>| -> (Vec<(usize, f64)>, f64) {
        let coeffs = (sens[i].transpose() * g).iter().copied().enumerate().collect();
        (coeffs, g.dot(&offsets[i]))
    };

    let mut next_elastic = e0;
    let mut elastic = |b: &mut ProgramBuilder| {
        let k = next_elastic;
        next_elastic += 1;
        b.add_linear_cost(k, MERIT_WEIGHT);
        b.add_le(vec![(k, -1.0)], 0.0);
        k
    };

    match &problem.variant {
        Variant::Filter {
            u_desired,
            slack_budget,
        } => {
            for j in 0..m {
                b.add_quad_cost(j, j, 2.0);
                b.add_linear_cost(j, -2.0 * u_desired[j]);
            }
            b.add_offset(u_desired.norm_squared());
            let k = elastic(&mut b);
            let mut row: Vec<(usize, f64)> = (0..horizon).map(|i| (xi_at(i), 1.0)).collect();
            row.push((k, -1.0));
            b.add_le(row, *slack_budget);
        }
        _ => {
            for i in 0..horizon {
                b.add_linear_cost(xi_at(i), 1.0);
            }
            if problem.tie_break > 0.0 {
                for k in 0..nu {
                    b.add_quad_cost(k, k, 2.0 * problem.tie_break);
                }
            }
        }
    }

    // inputs and trust region; single-coordinate rows fold into the box
    let us = &pre.input_set;
    let mut lo: Vec<f64> = ubar.iter().map(|v| v - radius).collect();
    let mut hi: Vec<f64> = ubar.iter().map(|v| v + radius).collect();
    for r in 0..us.num_rows() {
        let nonzero: Vec<usize> = (0..m).filter(|&k| us.lhs[(r, k)] != 0.0).collect();
        if let [k] = nonzero[..] {
            let (a, bound) = (us.lhs[(r, k)], us.rhs[r]);
            for i in 0..horizon {
                if a > 0.0 {
                    hi[i * m + k] = hi[i * m + k].min(bound / a);
                } else {
                    lo[i * m + k] = lo[i * m + k].max(bound / a);
                }
            }
            continue;
        }
        for i in 0..horizon {
            let row = (0..m).map(|k| (i * m + k, us.lhs[(r, k)])).collect();
            b.add_le(row, us.rhs[r]);
        }
    }
    for k in 0..nu {
        b.add_le(vec![(k, 1.0)], hi[k]);
        b.add_le(vec![(k, -1.0)], -lo[k]);
    }

    // states
    for i in 0..horizon {
        let delta = problem.tightening(i);
        for r in 0..xs.num_rows() {
            let (mut row, c) = affine(i, &xs.lhs.row(r).transpose());
            if hard {
                let k = elastic(&mut b);
                row.push((k, -1.0));
            } else {
                row.push((xi_at(i), -1.0));
            }
            b.add_le(row, xs.rhs[r] - delta - c);
        }
        if hard {
            b.add_eq(vec![(xi_at(i), 1.0)], 0.0);
        } else {
            b.add_le(vec![(xi_at(i), -1.0)], 0.0);
        }
    }

    // terminal set
    match &pre.terminal {
        TerminalSet::Point(xf) => {
            for j in 0..n {
                let k = elastic(&mut b);
                let (row, c) = affine(horizon, &DVector::from_fn(n, |r, _| f64::from(r == j)));
                for sign in [1.0, -1.0] {
                    let mut signed: Vec<(usize, f64)> =
                        row.iter().map(|&(col, v)| (col, sign * v)).collect();
                    signed.push((k, -1.0));
                    b.add_le(signed, sign * (xf[j] - c));
                }
            }
        }
        TerminalSet::Polytope(poly) => {
            for r in 0..poly.num_rows() {
                let k = elastic(&mut b);
                let (mut row, c) = affine(horizon, &poly.lhs.row(r).transpose());
                row.push((k, -1.0));
                b.add_le(row, poly.rhs[r] - c);
            }
        }
        TerminalSet::Ellipsoid { p, alpha } => {
            let k = elastic(&mut b);
            let lt = p.clone().cholesky().expect("validated positive definite").l().transpose();
            let mut f = DMatrix::zeros(n, b.num_vars());
            f.view_mut((0, 0), (n, nu)).copy_from(&(&lt * &sens[horizon]));
            let mut r = DVector::zeros(b.num_vars());
            r[k] = 1.0;
            b.add_soc(SocBlock {
                f,
                d: &lt * &offsets[horizon],
                r,
                s: alpha.sqrt(),
            });
        }
    }
    b.build()
}

/// Moves each input into the input set if it lies outside.
fn project_inputs(problem: &SafeMpcProblem, u: &mut [DVector<f64>]) -> Result<()> {
    let us = &problem.preset.input_set;
    let m = problem.preset.nu();
    for ui in u.iter_mut() {
        if us.violation(ui) <= 0.0 {
            continue;
        }
        let mut b = ProgramBuilder::new(m);
        for j in 0..m {
            b.add_quad_cost(j, j, 2.0);
            b.add_linear_cost(j, -2.0 * ui[j]);
        }
        for r in 0..us.num_rows() {
            b.add_le((0..m).map(|k| (k, us.lhs[(r, k)])).collect(), us.rhs[r]);
        }
        let sol = conic::solve(&b.build(), None)?;
        if !sol.is_optimal() {
            return Err(Error::Solver("input set is empty".into()));
        }
        *ui = sol.z;
    }
    Ok(())
}

/// Inputs of the closed loop `u = κ(x)` rolled out from `x`, where `κ` is the
/// terminal gain or else an LQR gain of the linearization at the terminal
/// reference point.
fn feedback_guess(problem: &SafeMpcProblem, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let pre = &problem.preset;
    let (n, m) = (pre.nx(), pre.nu());
    let reference = match &pre.terminal {
        TerminalSet::Point(xf) => xf.clone(),
        _ => DVector::zeros(n),
    };
    let gain = match &pre.terminal_gain {
        Some(k) => k.clone(),
        None => {
            let (a, b, _) = pre.system.linearize_unchecked(&reference, &DVector::zeros(m));
            match invariance::dare(&a, &b, &DMatrix::identity(n, n), &DMatrix::identity(m, m)) {
                Ok(lqr) => lqr.k,
                Err(_) => DMatrix::zeros(m, n),
            }
        }
    };
    let mut state = x.clone();
    let mut u = Vec::with_capacity(pre.horizon);
    for _ in 0..pre.horizon {
        let mut ui = [&gain * (&state - &reference)];
        project_inputs(problem, &mut ui)?;
        let [ui] = ui;
        state = pre.system.step_unchecked(&state, &ui);
        u.push(ui);
    }
    Ok(u)
}

/// Sequential convex programming over the input sequence: the states are
/// re-simulated after every accepted step, so the dynamics hold exactly and
/// only the rows slack cannot absorb need to be driven to zero. Steps are
/// globalized by an ℓ1 merit with a box trust region. Starts from `init`
/// when given, then from a feedback rollout, and returns the first optimal
/// result. `Infeasible` is a local verdict: the merit became stationary or
/// stalled with rows still violated.
pub fn sqp_solve(
    problem: &SafeMpcProblem,
    x: &DVector<f64>,
    init: Option<&Plan>,
) -> Result<SafeMpcSolution> {
    problem.validate()?;
    check_dim("initial state", problem.preset.nx(), x.len())?;
    let lay = problem.layout();
    let mut starts = Vec::with_capacity(2);
    if let Some(p) = init {
        check_dim("initial guess stages", lay.horizon, p.u.len())?;
        for ui in &p.u {
            check_dim("initial guess input", lay.m, ui.len())?;
        }
        starts.push(p.u.clone());
    }
    starts.push(feedback_guess(problem, x)?);
    let mut best: Option<SafeMpcSolution> = None;
    let mut conic_iterations = 0;
    let mut sqp_iterations = 0;
    for u in starts {
        let mut sol = sqp_from(problem, x, u)?;
        conic_iterations += sol.conic_iterations;
        sqp_iterations += sol.sqp_iterations;
        sol.conic_iterations = conic_iterations;
        sol.sqp_iterations = sqp_iterations;
        if sol.is_optimal() {
            return Ok(sol);
        }
        if best.as_ref().map_or(true, |b| b.status == SolveStatus::MaxIter) {
            best = Some(sol);
        }
    }
    let mut sol = best.expect("at least one start");
    sol.conic_iterations = conic_iterations;
    sol.sqp_iterations = sqp_iterations;
    Ok(sol)
}

fn sqp_from(
    problem: &SafeMpcProblem,
    x: &DVector<f64>,
    mut u: Vec<DVector<f64>>,
) -> Result<SafeMpcSolution> {
    let lay = problem.layout();
    project_inputs(problem, &mut u)?;
    let mut shot = shoot(problem, x, u);
    let mut radius = TRUST_INIT;
    let mut conic_iterations = 0;
    let done = |shot: &Shot, status: SolveStatus, conic_iterations: usize, iter: usize| {
        let z = shot.plan.to_vector(&lay);
        finish(problem, x, &z, status, conic_iterations, iter)
    };
    let converged = |shot: &Shot| {
        if shot.violation <= SQP_FEAS_TOL {
            SolveStatus::Optimal
        } else {
            // stationary for the merit with rows that cannot be satisfied
            SolveStatus::Infeasible
        }
    };

    let mut history = Vec::with_capacity(SQP_MAX_ITER);
    for iter in 1..=SQP_MAX_ITER {
        history.push(shot.merit);
        if iter > STALL_WINDOW && shot.violation > STALL_VIOLATION {
            let before = history[iter - 1 - STALL_WINDOW];
            if before - shot.merit < STALL_DECREASE * before.abs() {
                // the penalty merit stagnates with rows still violated
                return Ok(done(&shot, SolveStatus::Infeasible, conic_iterations, iter));
            }
        }
        let sub = shooting_subproblem(problem, &shot, radius, None);
        let sol = conic::solve(&sub, None)?;
        conic_iterations += sol.iterations;
        if !sol.is_optimal() {
            return Ok(done(&shot, sol.status, conic_iterations, iter));
        }
        let (candidate, size) = step_from(&lay, &shot, &sol.z);
        let predicted = shot.merit - sol.objective;
        if size <= SQP_STEP_TOL || predicted <= SQP_PRED_TOL * (1.0 + shot.merit.abs()) {
            return Ok(done(&shot, converged(&shot), conic_iterations, iter));
        }
        let mut trial = shoot(problem, x, candidate);
        let mut ratio = (shot.merit - trial.merit) / predicted;
        let mut size = size;
        if ratio < TRUST_GROW {
            let sub = shooting_subproblem(problem, &shot, radius, Some(&trial.plan));
            let sol = conic::solve(&sub, None)?;
            conic_iterations += sol.iterations;
            if sol.is_optimal() {
                let (candidate, corrected_size) = step_from(&lay, &shot, &sol.z);
                let corrected = shoot(problem, x, candidate);
                let corrected_ratio = (shot.merit - corrected.merit) / predicted;
                if corrected_ratio > ratio {
                    (trial, ratio, size) = (corrected, corrected_ratio, corrected_size);
                }
            }
        }
        if ratio >= TRUST_ACCEPT {
            shot = trial;
            if ratio >= TRUST_GROW && size >= 0.99 * radius {
                radius = (2.0 * radius).min(TRUST_MAX);
            }
        } else {
            radius = 0.25 * size;
            if radius <= SQP_STEP_TOL {
                return Ok(done(&shot, converged(&shot), conic_iterations, iter));
            }
        }
    }
    Ok(done(&shot, SolveStatus::MaxIter, conic_iterations, SQP_MAX_ITER))
}

/// Inputs of a subproblem solution and their `∞`-distance from the current ones.
fn step_from(lay: &Layout, shot: &Shot, z: &DVector<f64>) -> (Vec<DVector<f64>>, f64) {
    let candidate: Vec<DVector<f64>> = (0..lay.horizon)
        .map(|i| z.rows(i * lay.m, lay.m).into_owned())
        .collect();
    let size = candidate
        .iter()
        .zip(&shot.plan.u)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    (candidate, size)
}

/// Shifted candidate for the next step: drop stage 0, append the terminal
/// controller with zero slack.
pub fn shifted_candidate(problem: &SafeMpcProblem, plan: &Plan) -> Plan {
    let pre = &problem.preset;
    let xn = plan.x.last().expect("nonempty plan");
    let uf = pre.terminal_input(xn);
    let xf = pre.system.step_unchecked(xn, &uf);
    let mut u: Vec<DVector<f64>> = plan.u[1..].to_vec();
    u.push(uf);
    let mut x: Vec<DVector<f64>> = plan.x[1..].to_vec();
    x.push(xf);
    let mut xi: Vec<f64> = plan.xi[1..].to_vec();
    xi.push(0.0);
    Plan { x, u, xi }
}

/// Largest constraint violation of `plan` as a solution of the problem at `x`
/// (dynamics, sets, slacks).
pub fn plan_violation(problem: &SafeMpcProblem, x: &DVector<f64>, plan: &Plan) -> f64 {
    let pre = &problem.preset;
    let mut worst = (&plan.x[0] - x).amax();
    worst = worst.max(plan.dynamics_residual(&pre.system));
    for (i, u) in plan.u.iter().enumerate() {
        worst = worst.max(pre.input_set.violation(u));
        let slack = if problem.relaxed() { plan.xi[i] } else { 0.0 };
        if pre.state_set.num_rows() > 0 {
            let r = pre.state_set.residual(&plan.x[i]).max() + problem.tightening(i) - slack;
            worst = worst.max(r);
        }
        worst = worst.max(-plan.xi[i]);
    }
    worst.max(pre.terminal.violation(plan.x.last().expect("nonempty plan")))
}

/// Output of one controller evaluation.
#[derive(Clone, Debug)]
pub struct ControlAction {
    pub u0: DVector<f64>,
    pub xi0: f64,
    pub value: f64,
    pub solution: SafeMpcSolution,
    /// Slack total of the shifted candidate carried over from the previous
    /// call, if any.
    pub candidate_value: Option<f64>,
}

/// Receding-horizon controller `u₀*(x)` with shifted warm starts.
#[derive(Clone, Debug)]
pub struct Controller {
    problem: SafeMpcProblem,
    candidate: Option<Plan>,
}

impl Controller {
    pub fn new(problem: SafeMpcProblem) -> Self {
        Controller {
            problem,
            candidate: None,
        }
    }

    pub fn problem(&self) -> &SafeMpcProblem {
        &self.problem
    }

    pub fn reset(&mut self) {
        self.candidate = None;
    }

    /// Shifted candidate prepared by the last successful call.
    pub fn candidate(&self) -> Option<&Plan> {
        self.candidate.as_ref()
    }

    pub fn act(&mut self, x: &DVector<f64>) -> Result<ControlAction> {
        let warm = self
            .candidate
            .take()
            .filter(|c| (&c.x[0] - x).amax() <= 1e-9);
        let candidate_value = warm.as_ref().map(Plan::total_slack);
        let solution = solve(&self.problem, x, warm.as_ref())?;
        if !solution.is_optimal() {
            return Err(Error::Solver(format!(
                "safe MPC at {:?} ended with status {:?}",
                x.as_slice(),
                solution.status
            )));
        }
        self.candidate = Some(shifted_candidate(&self.problem, &solution.plan));
        Ok(ControlAction {
            u0: solution.u0().clone(),
            xi0: solution.xi0(),
            value: solution.value,
            solution,
            candidate_value,
        })
    }
}
