//! Terminal-set synthesis and invariant-set baselines.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{Grid, Polytope, SystemModel};

const DARE_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 100_000;
const SET_TOL: f64 = 1e-9;

/// Infinite-horizon LQR solution, `u = Kx`.
#[derive(Clone, Debug)]
pub struct LqrResult {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub iterations: usize,
}

fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let lhs = r + &bt_p * b;
    lhs.lu().solve(&(bt_p * a)).map(|k| -k)
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// from `P = Q`.
pub fn dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrResult> {
    let n = a.nrows();
    check_dim("A columns", n, a.ncols())?;
    check_dim("B rows", n, b.nrows())?;
    check_dim("Q rows", n, q.nrows())?;
    check_dim("Q columns", n, q.ncols())?;
    check_dim("R rows", b.ncols(), r.nrows())?;
    check_dim("R columns", b.ncols(), r.ncols())?;
    if r.clone().cholesky().is_none() {
        return Err(Error::Config("R must be positive definite".into()));
    }
    let mut p = q.clone();
    for it in 1..=DARE_MAX_ITER {
        let k = lqr_gain(a, b, r, &p).ok_or(Error::NotStabilizable(it))?;
        // Pₖ₊₁ = Q + AᵀPA + AᵀPB·K
        let at_p = a.transpose() * &p;
        let mut next = q + &at_p * a + &at_p * b * &k;
        next = 0.5 * (&next + next.transpose());
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NotStabilizable(it));
        }
        let change = (&next - &p).amax();
        p = next;
        if change <= DARE_TOL * p.amax().max(1.0) {
            let k = lqr_gain(a, b, r, &p).ok_or(Error::NotStabilizable(it))?;
            return Ok(LqrResult { k, p, iterations: it });
        }
    }
    Err(Error::NotStabilizable(DARE_MAX_ITER))
}

/// `‖P − (Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA)‖∞`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let at_p = a.transpose() * p;
    let bt_p = b.transpose() * p;
    let inner = (r + &bt_p * b)
        .lu()
        .solve(&(bt_p * a))
        .unwrap_or_else(|| DMatrix::from_element(b.ncols(), a.ncols(), f64::NAN));
    (p - (q + &at_p * a - &at_p * b * inner)).amax()
}

/// Spectral radius via the complex eigenvalues of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Largest `α` with `{xᵀPx ≤ α}` inside the state set and `Kx` inside the
/// input set.
pub fn max_alpha(p: &DMatrix<f64>, k: &DMatrix<f64>, state: &Polytope, input: &Polytope) -> Result<f64> {
    let n = p.nrows();
    check_dim("P columns", n, p.ncols())?;
    check_dim("state set dimension", n, state.dim())?;
    check_dim("gain columns", n, k.ncols())?;
    check_dim("input set dimension", k.nrows(), input.dim())?;
    let p_inv = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("P must be positive definite".into()))?
        .inverse();
    let mapped = input.preimage(k)?;
    let mut alpha = f64::INFINITY;
    for set in [state, &mapped] {
        for r in 0..set.num_rows() {
            let a = set.lhs.row(r).transpose();
            let b = set.rhs[r];
            if b < 0.0 {
                return Err(Error::EmptyInterior { row: r, offset: b });
            }
            let spread = a.dot(&(&p_inv * &a));
            if spread <= 0.0 {
                continue;
            }
            alpha = alpha.min(b * b / spread);
        }
    }
    Ok(alpha)
}

#[derive(Clone, Debug)]
pub struct InvariantPolytope {
    pub set: Polytope,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximal positively invariant subset of `c` for `x⁺ = acl·x`.
pub fn max_invariant_polytope(acl: &DMatrix<f64>, c: &Polytope, max_iter: usize) -> Result<InvariantPolytope> {
    let n = c.dim();
    check_dim("closed-loop rows", n, acl.nrows())?;
    check_dim("closed-loop columns", n, acl.ncols())?;
    let mut omega = c.reduce()?;
    for it in 1..=max_iter {
        let next = omega.intersect(&omega.preimage(acl)?)?.reduce()?;
        if next.contains_polytope(&omega, SET_TOL)? {
            return Ok(InvariantPolytope {
                set: next,
                iterations: it,
                converged: true,
            });
        }
        omega = next;
    }
    Ok(InvariantPolytope {
        set: omega,
        iterations: max_iter,
        converged: false,
    })
}

/// Uniform samples of a bounded input set: `per_axis` points over its
/// bounding box, kept when inside the set.
pub fn sample_inputs(input: &Polytope, per_axis: usize) -> Result<Vec<DVector<f64>>> {
    let m = input.dim();
    let mut lower = Vec::with_capacity(m);
    let mut upper = Vec::with_capacity(m);
    for d in 0..m {
        let e = DVector::from_fn(m, |i, _| f64::from(i == d));
        let hi = input.support(&e)?;
        let lo = -input.support(&-e)?;
        if !(hi.is_finite() && lo.is_finite()) {
            return Err(Error::Config("input set must be bounded and nonempty".into()));
        }
        lower.push(lo);
        upper.push(hi);
    }
    let grid = Grid::new(lower, upper, vec![per_axis; m])?;
    Ok((0..grid.len())
        .map(|i| grid.point(i))
        .filter(|u| input.contains(u, SET_TOL))
        .collect())
}

/// Grid inner approximation of the viability kernel.
#[derive(Clone, Debug)]
pub struct GridKernel {
    pub grid: Grid,
    pub member: Vec<bool>,
    pub inputs: Vec<DVector<f64>>,
    pub sweeps: usize,
}

impl GridKernel {
    pub fn count(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.grid.locate(x).is_some_and(|i| self.member[i])
    }

    pub fn to_csv(&self) -> String {
        let n = self.grid.dim();
        let mut out: Vec<String> = (1..=n).map(|d| format!("x{d}")).collect();
        out.push("member".into());
        let mut s = out.join(",");
        s.push('\n');
        for (i, m) in self.member.iter().enumerate() {
            let p = self.grid.point(i);
            for v in p.iter() {
                let _ = write!(s, "{v},");
            }
            let _ = writeln!(s, "{}", u8::from(*m));
        }
        s
    }

    /// Parses [`GridKernel::to_csv`] output; the input samples are not stored
    /// and come back empty.
    pub fn from_csv(text: &str) -> Result<GridKernel> {
        let mut lines = text.lines();
        let head: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Config("empty kernel file".into()))?
            .split(',')
            .collect();
        if head.len() < 2 || head[head.len() - 1] != "member" {
            return Err(Error::Config("kernel header must be x1,..,xn,member".into()));
        }
        let n = head.len() - 1;
        let mut nodes = Vec::new();
        let mut member = Vec::new();
        for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != n + 1 {
                return Err(Error::Config(format!("kernel row {}: expected {} fields", k + 2, n + 1)));
            }
            let x = f[..n]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("kernel row {}: {e}", k + 2)))?;
            nodes.push(x);
            member.push(match f[n] {
                "1" => true,
                "0" => false,
                other => return Err(Error::Config(format!("kernel row {}: bad member `{other}`", k + 2))),
            });
        }
        Ok(GridKernel {
            grid: Grid::from_nodes(&nodes)?,
            member,
            inputs: Vec::new(),
            sweeps: 0,
        })
    }
}

/// Removes cells whose successors leave the surviving cells for every
/// sampled input, until nothing changes.
pub fn viability_kernel_grid(
    model: &SystemModel,
    state: &Polytope,
    inputs: &[DVector<f64>],
    grid: &Grid,
) -> Result<GridKernel> {
    check_dim("grid dimension", model.nx(), grid.dim())?;
    check_dim("state set dimension", model.nx(), state.dim())?;
    for u in inputs {
        check_dim("input sample", model.nu(), u.len())?;
    }
    let points: Vec<DVector<f64>> = (0..grid.len()).map(|i| grid.point(i)).collect();
    let successors: Vec<Vec<Option<usize>>> = points
        .par_iter()
        .map(|x| {
            inputs
                .iter()
                .map(|u| grid.locate(&model.step_unchecked(x, u)))
                .collect()
        })
        .collect();
    let mut member: Vec<bool> = points.iter().map(|x| state.contains(x, SET_TOL)).collect();
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let next: Vec<bool> = (0..member.len())
            .into_par_iter()
            .map(|i| member[i] && successors[i].iter().any(|s| s.is_some_and(|j| member[j])))
            .collect();
        let changed = next != member;
        member = next;
        if !changed {
            break;
        }
    }
    Ok(GridKernel {
        grid: grid.clone(),
        member,
        inputs: inputs.to_vec(),
        sweeps,
    })
}
