//! Small dense convex conic solver.
//!
//! Handles programs of the form
//!
//! ```text
//! minimize    qᵀz + ½ zᵀQz + offset
//! subject to  A_eq z = b_eq
//!             A_in z ≤ b_in
//!             ‖F_j z + d_j‖₂ ≤ r_jᵀz + s_j      for every second-order-cone block j
//! ```
//!
//! with a primal-dual interior-point method on the homogeneous self-dual
//! embedding (Nesterov-Todd scaling, Mehrotra predictor-corrector). The
//! quadratic term enters the embedding directly. The embedding yields
//! Farkas-type certificates when the program is infeasible or unbounded.
//!
//! All linear algebra is dense; the programs generated by the MPC
//! transcriptions have at most a few hundred variables.

use std::cell::OnceCell;

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// One second-order-cone constraint `‖F z + d‖₂ ≤ rᵀz + s`.
#[derive(Clone, Debug)]
pub struct SocBlock {
    pub f: DMatrix<f64>,
    pub d: DVector<f64>,
    pub r: DVector<f64>,
    pub s: f64,
}

#[derive(Clone, Debug)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub q: DVector<f64>,
    /// Symmetric positive semidefinite quadratic cost, entering as `½ zᵀQz`.
    pub quad: Option<DMatrix<f64>>,
    pub offset: f64,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub soc: Vec<SocBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub z: DVector<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    /// Normalized Farkas residual of the certificate when `status` is
    /// `Infeasible` or `Unbounded`, `NaN` otherwise.
    pub certificate_residual: f64,
    pub iterations: usize,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Settings {
    pub max_iter: usize,
    pub feas_tol: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Threshold on the normalized Farkas residual for declaring infeasibility.
    pub infeas_tol: f64,
    /// Accepted accuracy when the iteration stalls before reaching full accuracy.
    pub reduced_tol: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            max_iter: 100,
            feas_tol: 1e-9,
            abs_tol: 1e-13,
            rel_tol: 1e-13,
            infeas_tol: 1e-7,
            reduced_tol: 1e-6,
        }
    }
}

/// Row-oriented builder for [`ConicProgram`].
#[derive(Clone, Debug)]
pub struct ProgramBuilder {
    num_vars: usize,
    q: DVector<f64>,
    quad: Option<DMatrix<f64>>,
    offset: f64,
    eq_rows: Vec<(Vec<(usize, f64)>, f64)>,
    in_rows: Vec<(Vec<(usize, f64)>, f64)>,
    soc: Vec<SocBlock>,
}

impl ProgramBuilder {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            q: DVector::zeros(num_vars),
            quad: None,
            offset: 0.0,
            eq_rows: Vec::new(),
            in_rows: Vec::new(),
            soc: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn add_linear_cost(&mut self, index: usize, coeff: f64) {
        self.q[index] += coeff;
    }

    /// Adds `weight · z_i z_j` (symmetrized) to `½ zᵀQz`; diagonal weight `w`
    /// therefore contributes `½ w z_i²`.
    pub fn add_quad_cost(&mut self, i: usize, j: usize, weight: f64) {
        let n = self.num_vars;
        let quad = self.quad.get_or_insert_with(|| DMatrix::zeros(n, n));
        if i == j {
            quad[(i, i)] += weight;
        } else {
            quad[(i, j)] += 0.5 * weight;
            quad[(j, i)] += 0.5 * weight;
        }
    }

    pub fn add_offset(&mut self, value: f64) {
        self.offset += value;
    }

    pub fn add_eq(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.eq_rows.push((coeffs, rhs));
    }

    pub fn add_le(&mut self, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.in_rows.push((coeffs, rhs));
    }

    pub fn add_soc(&mut self, block: SocBlock) {
        self.soc.push(block);
    }

    pub fn build(self) -> ConicProgram {
        let n = self.num_vars;
        let dense = |rows: &[(Vec<(usize, f64)>, f64)]| {
            let mut a = DMatrix::zeros(rows.len(), n);
            let mut b = DVector::zeros(rows.len());
            for (r, (coeffs, rhs)) in rows.iter().enumerate() {
                for &(c, v) in coeffs {
                    a[(r, c)] += v;
                }
                b[r] = *rhs;
            }
            (a, b)
        };
        let (a_eq, b_eq) = dense(&self.eq_rows);
        let (a_in, b_in) = dense(&self.in_rows);
        ConicProgram {
            num_vars: n,
            q: self.q,
            quad: self.quad,
            offset: self.offset,
            a_eq,
            b_eq,
            a_in,
            b_in,
            soc: self.soc,
        }
    }
}

impl ConicProgram {
    /// Linear program `min qᵀz s.t. A_in z ≤ b_in`.
    pub fn linear(q: DVector<f64>, a_in: DMatrix<f64>, b_in: DVector<f64>) -> Self {
        let n = q.len();
        ConicProgram {
            num_vars: n,
            q,
            quad: None,
            offset: 0.0,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in,
            b_in,
            soc: Vec::new(),
        }
    }

    /// Checks block dimensions and positive semidefiniteness of the quadratic cost.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars;
        check_dim("linear cost", n, self.q.len())?;
        check_dim("equality matrix columns", n, self.a_eq.ncols())?;
        check_dim("equality rhs", self.a_eq.nrows(), self.b_eq.len())?;
        check_dim("inequality matrix columns", n, self.a_in.ncols())?;
        check_dim("inequality rhs", self.a_in.nrows(), self.b_in.len())?;
        for block in &self.soc {
            check_dim("cone matrix columns", n, block.f.ncols())?;
            check_dim("cone offset", block.f.nrows(), block.d.len())?;
            check_dim("cone scalar row", n, block.r.len())?;
        }
        if let Some(quad) = &self.quad {
            check_dim("quadratic cost rows", n, quad.nrows())?;
            check_dim("quadratic cost columns", n, quad.ncols())?;
            let asym = (quad - quad.transpose()).amax();
            if asym > 1e-9 * quad.amax().max(1.0) {
                return Err(Error::Config(format!(
                    "quadratic cost is not symmetric (max asymmetry {asym:e})"
                )));
            }
            let min_eig = quad.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-9 {
                return Err(Error::Config(format!(
                    "quadratic cost is not positive semidefinite (min eigenvalue {min_eig:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let mut value = self.q.dot(z) + self.offset;
        if let Some(quad) = &self.quad {
            value += 0.5 * z.dot(&(quad * z));
        }
        value
    }

    /// Largest violation of any constraint at `z` (zero when feasible).
    pub fn constraint_violation(&self, z: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        if self.a_eq.nrows() > 0 {
            worst = worst.max((&self.a_eq * z - &self.b_eq).amax());
        }
        if self.a_in.nrows() > 0 {
            worst = worst.max((&self.a_in * z - &self.b_in).max());
        }
        for block in &self.soc {
            let lhs = (&block.f * z + &block.d).norm();
            worst = worst.max(lhs - block.r.dot(z) - block.s);
        }
        worst.max(0.0)
    }

    /// Writes the program as plain-text coordinate lists, one section per block.
    pub fn write_debug<W: Write>(&self, mut out: W) -> Result<()> {
        let write_matrix = |out: &mut W, name: &str, m: &DMatrix<f64>| -> std::io::Result<()> {
            let nnz = m.iter().filter(|v| **v != 0.0).count();
            writeln!(out, "%% {name}")?;
            writeln!(out, "{} {} {}", m.nrows(), m.ncols(), nnz)?;
            for c in 0..m.ncols() {
                for r in 0..m.nrows() {
                    if m[(r, c)] != 0.0 {
                        writeln!(out, "{} {} {:.17e}", r + 1, c + 1, m[(r, c)])?;
                    }
                }
            }
            Ok(())
        };
        let as_col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        write_matrix(&mut out, "q", &as_col(&self.q))?;
        if let Some(quad) = &self.quad {
            write_matrix(&mut out, "Q", quad)?;
        }
        write_matrix(&mut out, "A_eq", &self.a_eq)?;
        write_matrix(&mut out, "b_eq", &as_col(&self.b_eq))?;
        write_matrix(&mut out, "A_in", &self.a_in)?;
        write_matrix(&mut out, "b_in", &as_col(&self.b_in))?;
        for (j, block) in self.soc.iter().enumerate() {
            write_matrix(&mut out, &format!("soc{j}.F"), &block.f)?;
            write_matrix(&mut out, &format!("soc{j}.d"), &as_col(&block.d))?;
            write_matrix(&mut out, &format!("soc{j}.r"), &as_col(&block.r))?;
            writeln!(out, "%% soc{j}.s\n{:.17e}", block.s)?;
        }
        Ok(())
    }
}

/// Solves `p` with default settings.
///
/// The interior-point iteration starts from its own central initial point, so
/// `warm` is validated for dimension but does not influence the iterates; the
/// result is deterministic in `p` alone.
pub fn solve(p: &ConicProgram, warm: Option<&DVector<f64>>) -> Result<ConicSolution> {
    solve_with(p, warm, &Settings::default())
}

pub fn solve_with(
    p: &ConicProgram,
    warm: Option<&DVector<f64>>,
    settings: &Settings,
) -> Result<ConicSolution> {
    p.validate()?;
    if let Some(w) = warm {
        check_dim("warm start", p.num_vars, w.len())?;
    }
    let sf = StandardForm::from_program(p);
    let raw = hsde(&sf, settings);
    let z = raw.x.rows(0, p.num_vars).into_owned();
    let objective = match raw.status {
        SolveStatus::Optimal => p.objective(&z),
        SolveStatus::Infeasible => f64::INFINITY,
        SolveStatus::Unbounded => f64::NEG_INFINITY,
        SolveStatus::MaxIter => f64::NAN,
    };
    let primal_residual = p.constraint_violation(&z);
    Ok(ConicSolution {
        status: raw.status,
        z,
        objective,
        primal_residual,
        dual_residual: raw.dres,
        gap: raw.gap,
        certificate_residual: raw.cert,
        iterations: raw.iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

/// Decides whether `{z : A_in z ≤ b_in}` is nonempty.
pub fn solve_lp_feasibility(a_in: &DMatrix<f64>, b_in: &DVector<f64>) -> Result<Feasibility> {
    let p = ConicProgram::linear(DVector::zeros(a_in.ncols()), a_in.clone(), b_in.clone());
    let sol = solve(&p, None)?;
    match sol.status {
        SolveStatus::Optimal => Ok(Feasibility::Feasible),
        SolveStatus::Infeasible => Ok(Feasibility::Infeasible),
        other => Err(Error::Solver(format!(
            "feasibility check ended with status {other:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Internal standard form: min cᵀx  s.t. Ax = b, Gx + s = h, s ∈ K.

#[derive(Clone, Debug)]
struct Cones {
    nonneg: usize,
    soc: Vec<usize>,
}

impl Cones {
    fn dim(&self) -> usize {
        self.nonneg + self.soc.iter().sum::<usize>()
    }

    fn degree(&self) -> usize {
        self.nonneg + self.soc.len()
    }

    /// Start offsets of each second-order cone.
    fn soc_ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut start = self.nonneg;
        self.soc.iter().map(move |&len| {
            let r = (start, len);
            start += len;
            r
        })
    }

    fn identity(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.dim());
        e.rows_mut(0, self.nonneg).fill(1.0);
        for (start, _) in self.soc_ranges() {
            e[start] = 1.0;
        }
        e
    }

    fn min_eig(&self, v: &DVector<f64>) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.nonneg {
            m = m.min(v[i]);
        }
        for (start, len) in self.soc_ranges() {
            let tail = v.rows(start + 1, len - 1).norm();
            m = m.min(v[start] - tail);
        }
        m
    }

    fn jordan(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(u.len());
        for i in 0..self.nonneg {
            out[i] = u[i] * v[i];
        }
        for (start, len) in self.soc_ranges() {
            let u0 = u[start];
            let v0 = v[start];
            let u1 = u.rows(start + 1, len - 1);
            let v1 = v.rows(start + 1, len - 1);
            out[start] = u0 * v0 + u1.dot(&v1);
            let tail = v1 * u0 + u1 * v0;
            out.rows_mut(start + 1, len - 1).copy_from(&tail);
        }
        out
    }

    /// Solves `λ ∘ u = v` for `u`.
    fn jordan_inv(&self, lambda: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for i in 0..self.nonneg {
            out[i] = v[i] / lambda[i];
        }
        for (start, len) in self.soc_ranges() {
            let l0 = lambda[start];
            let l1 = lambda.rows(start + 1, len - 1);
            let v0 = v[start];
            let v1 = v.rows(start + 1, len - 1);
            let det = soc_det(l0, l1.norm());
            let u0 = (l0 * v0 - l1.dot(&v1)) / det;
            let u1 = (v1 - l1 * u0) / l0;
            out[start] = u0;
            out.rows_mut(start + 1, len - 1).copy_from(&u1);
        }
        out
    }

    /// Largest step `α ≥ 0` keeping `v + α dv` in the cone (may be infinite).
    fn max_step(&self, v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
        let mut alpha = f64::INFINITY;
        for i in 0..self.nonneg {
            if dv[i] < 0.0 {
                alpha = alpha.min(-v[i] / dv[i]);
            }
        }
        for (start, len) in self.soc_ranges() {
            alpha = alpha.min(soc_max_step(
                v.rows(start, len).into_owned(),
                dv.rows(start, len).into_owned(),
            ));
        }
        alpha
    }

    /// Shifts `v` along the identity so that it lies in the interior.
    fn shift_interior(&self, v: &mut DVector<f64>) {
        let me = self.min_eig(v);
        if self.dim() > 0 && me < 1e-8 * v.norm().max(1.0) {
            let e = self.identity();
            *v += e * (1.0 - me);
        }
    }
}

/// `x0² − ‖x1‖²` evaluated in factored form.
fn soc_det(x0: f64, tail_norm: f64) -> f64 {
    (x0 - tail_norm) * (x0 + tail_norm)
}

fn soc_max_step(v: DVector<f64>, dv: DVector<f64>) -> f64 {
    let len = v.len();
    let jdot = |a: &DVector<f64>, b: &DVector<f64>| {
        a[0] * b[0] - a.rows(1, len - 1).dot(&b.rows(1, len - 1))
    };
    let qa = jdot(&dv, &dv);
    let qb = 2.0 * jdot(&v, &dv);
    let qc = soc_det(v[0], v.rows(1, len - 1).norm()).max(0.0);
    // smallest positive root of qa α² + qb α + qc
    let scale = qa.abs().max(qb.abs()).max(qc.abs()).max(f64::MIN_POSITIVE);
    if qa.abs() <= 1e-14 * scale {
        if qb < 0.0 {
            return -qc / qb;
        }
        return if dv[0] < 0.0 { -v[0] / dv[0] } else { f64::INFINITY };
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (qb + qb.signum() * sq);
    let mut roots = Vec::with_capacity(2);
    if q != 0.0 {
        roots.push(q / qa);
        roots.push(qc / q);
    } else {
        roots.push(0.0);
    }
    roots
        .into_iter()
        .filter(|r| *r > 0.0)
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug)]
struct StandardForm {
    p: Option<DMatrix<f64>>,
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    cones: Cones,
}

impl StandardForm {
    fn from_program(p: &ConicProgram) -> Self {
        let n = p.num_vars;
        let soc_dims: Vec<usize> = p.soc.iter().map(|blk| blk.f.nrows() + 1).collect();
        let nonneg = p.a_in.nrows();
        let m = nonneg + soc_dims.iter().sum::<usize>();
        let mut g = DMatrix::zeros(m, n);
        let mut h = DVector::zeros(m);
        g.rows_mut(0, nonneg).copy_from(&p.a_in);
        h.rows_mut(0, nonneg).copy_from(&p.b_in);

        // cone slack (rᵀz + s, Fz + d) = h − Gz
        let mut row = nonneg;
        for blk in &p.soc {
            g.row_mut(row).copy_from(&(-blk.r.transpose()));
            h[row] = blk.s;
            let k = blk.f.nrows();
            g.rows_mut(row + 1, k).copy_from(&(-&blk.f));
            h.rows_mut(row + 1, k).copy_from(&blk.d);
            row += k + 1;
        }

        StandardForm {
            p: p.quad.clone().filter(|q| q.amax() > 0.0),
            c: p.q.clone(),
            a: p.a_eq.clone(),
            b: p.b_eq.clone(),
            g,
            h,
            cones: Cones {
                nonneg,
                soc: soc_dims,
            },
        }
    }

    fn quad_times(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.p {
            Some(p) => p * x,
            None => DVector::zeros(x.len()),
        }
    }
}

// ---------------------------------------------------------------------------
// Nesterov-Todd scaling.

#[derive(Clone, Debug)]
struct SocScaling {
    eta: f64,
    wbar: DVector<f64>,
}

#[derive(Clone, Debug)]
struct Scaling {
    diag: DVector<f64>,
    soc: Vec<SocScaling>,
}

fn j_reflect(v: &DVector<f64>) -> DVector<f64> {
    let mut out = -v;
    out[0] = v[0];
    out
}

impl SocScaling {
    fn new(eta: f64, wbar: DVector<f64>) -> Self {
        SocScaling { eta, wbar }
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (&self.wbar * (2.0 * self.wbar.dot(v)) - j_reflect(v)) * self.eta
    }

    fn apply_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        let jw = j_reflect(&self.wbar);
        (&jw * (2.0 * jw.dot(v)) - j_reflect(v)) / self.eta
    }
}

impl Scaling {
    fn identity(cones: &Cones) -> Self {
        let soc = cones
            .soc
            .iter()
            .map(|&len| {
                let mut wbar = DVector::zeros(len);
                wbar[0] = 1.0;
                SocScaling::new(1.0, wbar)
            })
            .collect();
        Scaling {
            diag: DVector::from_element(cones.nonneg, 1.0),
            soc,
        }
    }

    /// Scaling `W` with `W z = W⁻¹ s = λ`.
    fn nesterov_todd(cones: &Cones, s: &DVector<f64>, z: &DVector<f64>) -> Self {
        let diag = DVector::from_fn(cones.nonneg, |i, _| (s[i] / z[i]).sqrt());
        let soc = cones
            .soc_ranges()
            .map(|(start, len)| {
                let sb = s.rows(start, len).into_owned();
                let zb = z.rows(start, len).into_owned();
                let s_norm = soc_det(sb[0], sb.rows(1, len - 1).norm()).max(1e-300).sqrt();
                let z_norm = soc_det(zb[0], zb.rows(1, len - 1).norm()).max(1e-300).sqrt();
                let sbar = &sb / s_norm;
                let zbar = &zb / z_norm;
                let gamma = ((1.0 + sbar.dot(&zbar)) / 2.0).sqrt();
                // NT point w with wᵀJw = 1, then the hyperbolic Householder vector
                let w = (&sbar + j_reflect(&zbar)) / (2.0 * gamma);
                let mut v = w.clone();
                v[0] += 1.0;
                v /= (2.0 * (w[0] + 1.0)).sqrt();
                SocScaling::new((s_norm / z_norm).sqrt(), v)
            })
            .collect();
        Scaling { diag, soc }
    }

    fn apply(&self, cones: &Cones, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for i in 0..cones.nonneg {
            out[i] = self.diag[i] * v[i];
        }
        for ((start, len), sc) in cones.soc_ranges().zip(&self.soc) {
            let blk = sc.apply(&v.rows(start, len).into_owned());
            out.rows_mut(start, len).copy_from(&blk);
        }
        out
    }

    fn apply_inv(&self, cones: &Cones, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for i in 0..cones.nonneg {
            out[i] = v[i] / self.diag[i];
        }
        for ((start, len), sc) in cones.soc_ranges().zip(&self.soc) {
            let blk = sc.apply_inv(&v.rows(start, len).into_owned());
            out.rows_mut(start, len).copy_from(&blk);
        }
        out
    }

    fn apply_sq(&self, cones: &Cones, v: &DVector<f64>) -> DVector<f64> {
        self.apply(cones, &self.apply(cones, v))
    }

    /// `W⁻¹ M` for a matrix with one row per cone coordinate.
    fn apply_inv_rows(&self, cones: &Cones, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for i in 0..cones.nonneg {
            out.row_mut(i).scale_mut(1.0 / self.diag[i]);
        }
        for ((start, len), sc) in cones.soc_ranges().zip(&self.soc) {
            for c in 0..m.ncols() {
                let col = sc.apply_inv(&m.view((start, c), (len, 1)).column(0).into_owned());
                out.view_mut((start, c), (len, 1)).copy_from(&col);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Newton system
//
//   [ P  Aᵀ  Gᵀ  ] [dx]   [bx]
//   [ A  0   0   ] [dy] = [by]
//   [ G  0  −W²  ] [dz]   [bz]

struct Kkt<'a> {
    sf: &'a StandardForm,
    scaling: &'a Scaling,
    winv_g: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    full: OnceCell<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    full_only: bool,
}

const KKT_REG: f64 = 1e-10;
const KKT_REFINE: usize = 8;
const STALL_ITERS: usize = 8;
const STALL_FACTOR: f64 = 0.5;
const KKT_ACCEPT: f64 = 1e-10;

impl<'a> Kkt<'a> {
    /// Factors the scaled system with the cone block eliminated
    ///
    /// ```text
    /// [ P+G̃ᵀG̃+δI  Aᵀ  ]
    /// [ A         −δI ]      G̃ = W⁻¹G
    /// ```
    fn new(sf: &'a StandardForm, scaling: &'a Scaling) -> Self {
        let n = sf.c.len();
        let p = sf.b.len();
        let winv_g = scaling.apply_inv_rows(&sf.cones, &sf.g);
        let mut mat = DMatrix::zeros(n + p, n + p);
        mat.view_mut((0, 0), (n, n))
            .copy_from(&(winv_g.transpose() * &winv_g));
        if let Some(quad) = &sf.p {
            let mut top = mat.view_mut((0, 0), (n, n));
            top += quad;
        }
        for i in 0..n {
            mat[(i, i)] += KKT_REG;
        }
        mat.view_mut((0, n), (n, p)).copy_from(&sf.a.transpose());
        mat.view_mut((n, 0), (p, n)).copy_from(&sf.a);
        for i in 0..p {
            mat[(n + i, n + i)] = -KKT_REG;
        }
        Kkt {
            sf,
            scaling,
            winv_g,
            lu: mat.lu(),
            full: OnceCell::new(),
            full_only: false,
        }
    }

    /// Eliminates `W dz = G̃ dx − W⁻¹bz` and solves the remaining block.
    fn solve_reduced(
        &self,
        bx: &DVector<f64>,
        by: &DVector<f64>,
        bz: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = bx.len();
        let p = by.len();
        let cones = &self.sf.cones;
        let bz_scaled = self.scaling.apply_inv(cones, bz);
        let mut rhs = DVector::zeros(n + p);
        rhs.rows_mut(0, n)
            .copy_from(&(bx + self.winv_g.transpose() * &bz_scaled));
        rhs.rows_mut(n, p).copy_from(by);
        let sol = self
            .lu
            .solve(&rhs)
            .unwrap_or_else(|| DVector::from_element(n + p, f64::NAN));
        let dx = sol.rows(0, n).into_owned();
        let dy = sol.rows(n, p).into_owned();
        let w = &self.winv_g * &dx - bz_scaled;
        let dz = self.scaling.apply_inv(cones, &w);
        (dx, dy, dz)
    }

    /// Solves with the full augmented system
    ///
    /// ```text
    /// [ P+δI  Aᵀ   G̃ᵀ ]
    /// [ A    −δI   0  ]      unknowns (dx, dy, W dz)
    /// [ G̃    0   −I  ]
    /// ```
    fn solve_full(
        &self,
        bx: &DVector<f64>,
        by: &DVector<f64>,
        bz: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let sf = self.sf;
        let (n, p, m) = (bx.len(), by.len(), bz.len());
        let lu = self.full.get_or_init(|| {
            let mut mat = DMatrix::zeros(n + p + m, n + p + m);
            if let Some(quad) = &sf.p {
                mat.view_mut((0, 0), (n, n)).copy_from(quad);
            }
            for i in 0..n {
                mat[(i, i)] += KKT_REG;
            }
            mat.view_mut((0, n), (n, p)).copy_from(&sf.a.transpose());
            mat.view_mut((n, 0), (p, n)).copy_from(&sf.a);
            for i in 0..p {
                mat[(n + i, n + i)] = -KKT_REG;
            }
            mat.view_mut((0, n + p), (n, m))
                .copy_from(&self.winv_g.transpose());
            mat.view_mut((n + p, 0), (m, n)).copy_from(&self.winv_g);
            for i in 0..m {
                mat[(n + p + i, n + p + i)] = -1.0;
            }
            mat.lu()
        });
        let cones = &sf.cones;
        let mut rhs = DVector::zeros(n + p + m);
        rhs.rows_mut(0, n).copy_from(bx);
        rhs.rows_mut(n, p).copy_from(by);
        rhs.rows_mut(n + p, m)
            .copy_from(&self.scaling.apply_inv(cones, bz));
        let sol = lu
            .solve(&rhs)
            .unwrap_or_else(|| DVector::from_element(n + p + m, f64::NAN));
        let dz = self
            .scaling
            .apply_inv(cones, &sol.rows(n + p, m).into_owned());
        (sol.rows(0, n).into_owned(), sol.rows(n, p).into_owned(), dz)
    }

    fn refine<F>(
        &self,
        bx: &DVector<f64>,
        by: &DVector<f64>,
        bz: &DVector<f64>,
        inner: F,
    ) -> ((DVector<f64>, DVector<f64>, DVector<f64>), f64)
    where
        F: Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>),
    {
        let sf = self.sf;
        let scale = bx.amax().max(by.amax()).max(bz.amax()).max(1.0);
        let (mut dx, mut dy, mut dz) = inner(bx, by, bz);
        let mut err = f64::INFINITY;
        for k in 0..=KKT_REFINE {
            let rx = bx - sf.quad_times(&dx) - sf.a.transpose() * &dy - sf.g.transpose() * &dz;
            let ry = by - &sf.a * &dx;
            let rz = bz - (&sf.g * &dx - self.scaling.apply_sq(&sf.cones, &dz));
            let next = rx.amax().max(ry.amax()).max(rz.amax()) / scale;
            let stalled = next > 0.5 * err && next <= KKT_ACCEPT;
            err = next;
            if !next.is_finite() || next <= 1e-14 || k == KKT_REFINE || stalled {
                break;
            }
            let (cx, cy, cz) = inner(&rx, &ry, &rz);
            dx += cx;
            dy += cy;
            dz += cz;
        }
        ((dx, dy, dz), err)
    }

    fn solve(
        &self,
        bx: &DVector<f64>,
        by: &DVector<f64>,
        bz: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        if !self.full_only {
            let (d, err) = self.refine(bx, by, bz, |x, y, z| self.solve_reduced(x, y, z));
            if err.is_finite() && err <= KKT_ACCEPT {
                return d;
            }
        }
        self.refine(bx, by, bz, |x, y, z| self.solve_full(x, y, z)).0
    }
}

// ---------------------------------------------------------------------------
// Homogeneous self-dual embedding.

struct RawResult {
    status: SolveStatus,
    x: DVector<f64>,
    dres: f64,
    gap: f64,
    cert: f64,
    iterations: usize,
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dz: DVector<f64>,
    ds: DVector<f64>,
    dtau: f64,
    dkappa: f64,
}

fn norm_or_zero(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.norm()
    }
}

/// Interior-point iteration on the homogeneous embedding
///
/// ```text
/// Px + Aᵀy + Gᵀz + cτ = 0,   Ax = bτ,   Gx + s = hτ,
/// κ + cᵀx + bᵀy + hᵀz + xᵀPx/τ = 0,   (s, z) ∈ K × K*,  τ, κ ≥ 0.
/// ```
fn hsde(sf: &StandardForm, settings: &Settings) -> RawResult {
    let n = sf.c.len();
    let p = sf.b.len();
    let cones = &sf.cones;
    let degree = cones.degree() as f64;

    let resx0 = norm_or_zero(&sf.c).max(1.0);
    let resy0 = norm_or_zero(&sf.b).max(1.0);
    let resz0 = norm_or_zero(&sf.h).max(1.0);

    // Initial point: least-squares primal and dual estimates, shifted into the cone.
    let ident = Scaling::identity(cones);
    let kkt0 = Kkt::new(sf, &ident);
    let (mut x, mut y, mut z, mut s);
    if sf.p.is_some() {
        let (x0, y0, z0) = kkt0.solve(&(-&sf.c), &sf.b, &sf.h);
        s = -&z0;
        (x, y, z) = (x0, y0, z0);
    } else {
        let (x0, _, zt) = kkt0.solve(&DVector::zeros(n), &sf.b, &sf.h);
        s = -zt;
        let (_, y0, z0) =
            kkt0.solve(&(-&sf.c), &DVector::zeros(p), &DVector::zeros(sf.h.len()));
        (x, y, z) = (x0, y0, z0);
    }
    cones.shift_interior(&mut s);
    cones.shift_interior(&mut z);
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut best: Option<(f64, DVector<f64>, f64, f64)> = None;
    let mut last_progress = 0;
    let mut iterations = 0;
    let mut full_only = false;
    let gap_scale = sf.c.amax().max(1.0);
    let mut last_dres = f64::NAN;
    let mut last_gap = f64::NAN;

    for iter in 0..=settings.max_iter {
        let px = sf.quad_times(&x);
        let xpx = x.dot(&px);
        let aty_gtz = sf.a.transpose() * &y + sf.g.transpose() * &z;
        let rx = &px + &aty_gtz + &sf.c * tau;
        let ry = &sf.a * &x - &sf.b * tau;
        let rz = &sf.g * &x + &s - &sf.h * tau;
        let cx = sf.c.dot(&x);
        let by = sf.b.dot(&y);
        let hz = sf.h.dot(&z);
        let rt = kappa + cx + by + hz + xpx / tau;

        let pcost = (cx + 0.5 * xpx / tau) / tau;
        let dcost = -(by + hz + 0.5 * xpx / tau) / tau;
        let gap = s.dot(&z) / (tau * tau);
        let pres = (norm_or_zero(&ry) / resy0).max(norm_or_zero(&rz) / resz0) / tau;
        let dres = norm_or_zero(&rx) / resx0 / tau;
        let relgap = gap / pcost.abs().min(dcost.abs()).max(1e-300);
        last_dres = dres;
        last_gap = gap;

        if pres <= settings.feas_tol
            && dres <= settings.feas_tol
            && (gap <= settings.abs_tol * gap_scale || relgap <= settings.rel_tol)
        {
            return RawResult {
                status: SolveStatus::Optimal,
                x: &x / tau,
                dres,
                gap,
                cert: f64::NAN,
                iterations: iter,
            };
        }

        let merit = pres.max(dres).max(gap.min(relgap));
        if merit.is_finite() && best.as_ref().map_or(true, |b| merit < b.0) {
            if best.as_ref().map_or(true, |b| merit < STALL_FACTOR * b.0) {
                last_progress = iter;
            }
            best = Some((merit, &x / tau, dres, gap));
        }
        iterations = iter;
        if iter >= last_progress + STALL_ITERS
            && best.as_ref().is_some_and(|b| b.0 <= settings.reduced_tol)
        {
            break;
        }

        if by + hz < 0.0 {
            let pinf = norm_or_zero(&aty_gtz) / resx0 / -(by + hz);
            if pinf <= settings.infeas_tol {
                return RawResult {
                    status: SolveStatus::Infeasible,
                    x: &x / tau,
                    dres,
                    gap,
                    cert: pinf,
                    iterations: iter,
                };
            }
        }
        if cx < 0.0 {
            let dinf = (norm_or_zero(&px) / resx0)
                .max(norm_or_zero(&(&sf.a * &x)) / resy0)
                .max(norm_or_zero(&(&sf.g * &x + &s)) / resz0)
                / -cx;
            if dinf <= settings.infeas_tol {
                return RawResult {
                    status: SolveStatus::Unbounded,
                    x: &x / tau,
                    dres,
                    gap,
                    cert: dinf,
                    iterations: iter,
                };
            }
        }
        if iter == settings.max_iter {
            break;
        }

        let scaling = Scaling::nesterov_todd(cones, &s, &z);
        let lambda = scaling.apply(cones, &z);
        let mut kkt = Kkt::new(sf, &scaling);
        kkt.full_only = full_only;
        let (x1, y1, z1) = kkt.solve(&(-&sf.c), &sf.b, &sf.h);
        // linearization of xᵀPx/τ contributes 2Px/τ and −xᵀPx/τ² to the τ row
        let xi = &sf.c + &px * (2.0 / tau);
        let denom_tau =
            xi.dot(&x1) + sf.b.dot(&y1) + sf.h.dot(&z1) - kappa / tau - xpx / (tau * tau);

        let direction = |rfac: f64, d_s: &DVector<f64>, d_tk: f64| -> Direction {
            let u = cones.jordan_inv(&lambda, d_s);
            let bz = -(&rz * rfac) - scaling.apply(cones, &u);
            let (x2, y2, z2) = kkt.solve(&(-(&rx * rfac)), &(-(&ry * rfac)), &bz);
            let num = -rfac * rt - d_tk / tau - (xi.dot(&x2) + sf.b.dot(&y2) + sf.h.dot(&z2));
            let dtau = num / denom_tau;
            let dx = x2 + &x1 * dtau;
            let dy = y2 + &y1 * dtau;
            let dz = z2 + &z1 * dtau;
            let ds = -(&rz * rfac) - &sf.g * &dx + &sf.h * dtau;
            let dkappa = (d_tk - kappa * dtau) / tau;
            Direction {
                dx,
                dy,
                dz,
                ds,
                dtau,
                dkappa,
            }
        };
        let step_to_boundary = |d: &Direction| -> f64 {
            let mut a = cones.max_step(&s, &d.ds).min(cones.max_step(&z, &d.dz));
            if d.dtau < 0.0 {
                a = a.min(-tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-kappa / d.dkappa);
            }
            a
        };

        let mu = (s.dot(&z) + tau * kappa) / (degree + 1.0);
        let lam_sq = cones.jordan(&lambda, &lambda);

        let aff = direction(1.0, &(-&lam_sq), -tau * kappa);
        let alpha_aff = step_to_boundary(&aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        let corr = cones.jordan(
            &scaling.apply_inv(cones, &aff.ds),
            &scaling.apply(cones, &aff.dz),
        );
        let d_s = -lam_sq - corr + cones.identity() * (sigma * mu);
        let d_tk = -tau * kappa - aff.dtau * aff.dkappa + sigma * mu;
        let comb = direction(1.0 - sigma, &d_s, d_tk);
        let alpha = (0.99 * step_to_boundary(&comb)).min(1.0);

        if !alpha.is_finite() || alpha < 1e-12 || comb.dx.iter().any(|v| !v.is_finite()) {
            if full_only {
                break;
            }
            full_only = true;
            continue;
        }
        x += &comb.dx * alpha;
        y += &comb.dy * alpha;
        z += &comb.dz * alpha;
        s += &comb.ds * alpha;
        tau += alpha * comb.dtau;
        kappa += alpha * comb.dkappa;

        // Keep the homogeneous iterate bounded.
        let scale = x.amax().max(y.amax()).max(z.amax()).max(s.amax()).max(tau).max(kappa);
        if scale > 1e12 {
            x /= scale;
            y /= scale;
            z /= scale;
            s /= scale;
            tau /= scale;
            kappa /= scale;
        }
    }

    // Stalled or out of iterations: accept reduced accuracy if attained.
    match best {
        Some((merit, xb, dres, gap)) if merit <= settings.reduced_tol => RawResult {
            status: SolveStatus::Optimal,
            x: xb,
            dres,
            gap,
            cert: f64::NAN,
            iterations,
        },
        _ => RawResult {
            status: SolveStatus::MaxIter,
            x: if tau > 0.0 { &x / tau } else { x },
            dres: last_dres,
            gap: last_gap,
            cert: f64::NAN,
            iterations,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_program() -> ProgramBuilder {
        ProgramBuilder::new(1)
    }

    #[test]
    fn lower_bounded_linear_cost() {
        let mut b = scalar_program();
        b.add_linear_cost(0, 1.0);
        b.add_le(vec![(0, -1.0)], -1.0);
        let sol = solve(&b.build(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn box_projection() {
        // (u - 2)² = u² - 4u + 4
        let mut b = scalar_program();
        b.add_quad_cost(0, 0, 2.0);
        b.add_linear_cost(0, -4.0);
        b.add_offset(4.0);
        b.add_le(vec![(0, 1.0)], 1.5);
        b.add_le(vec![(0, -1.0)], 1.5);
        let sol = solve(&b.build(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 1.5, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.objective, 0.25, epsilon = 1e-7);
    }

    #[test]
    fn norm_epigraph() {
        // min t  s.t. ‖(3, 4)‖ ≤ t
        let mut b = scalar_program();
        b.add_linear_cost(0, 1.0);
        b.add_soc(SocBlock {
            f: DMatrix::zeros(2, 1),
            d: DVector::from_vec(vec![3.0, 4.0]),
            r: DVector::from_vec(vec![1.0]),
            s: 0.0,
        });
        let sol = solve(&b.build(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 5.0, epsilon = 1e-7);
    }

    #[test]
    fn empty_feasible_set() {
        let mut b = scalar_program();
        b.add_le(vec![(0, 1.0)], 0.0);
        b.add_le(vec![(0, -1.0)], -1.0);
        let sol = solve(&b.build(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        assert!(sol.certificate_residual <= 1e-7);
    }

    #[test]
    fn unbounded_below() {
        let mut b = scalar_program();
        b.add_linear_cost(0, 1.0);
        b.add_le(vec![(0, 1.0)], 3.0);
        let sol = solve(&b.build(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn feasibility_examples() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert_eq!(
            solve_lp_feasibility(&a, &DVector::from_vec(vec![1.0, 0.0])).unwrap(),
            Feasibility::Feasible
        );
        assert_eq!(
            solve_lp_feasibility(&a, &DVector::from_vec(vec![-1.0, -1.0])).unwrap(),
            Feasibility::Infeasible
        );
        let a = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, -0.5]);
        assert_eq!(solve_lp_feasibility(&a, &b).unwrap(), Feasibility::Feasible);
    }

    #[test]
    fn equality_constrained_least_squares() {
        // min ½(z0² + z1²)  s.t. z0 + z1 = 2
        let mut b = ProgramBuilder::new(2);
        b.add_quad_cost(0, 0, 1.0);
        b.add_quad_cost(1, 1, 1.0);
        b.add_eq(vec![(0, 1.0), (1, 1.0)], 2.0);
        let sol = solve(&b.build(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.z[1], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn rejects_indefinite_quadratic() {
        let mut b = ProgramBuilder::new(2);
        b.add_quad_cost(0, 0, 1.0);
        b.add_quad_cost(1, 1, -1.0);
        assert!(solve(&b.build(), None).is_err());
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut p = ProgramBuilder::new(2).build();
        p.q = DVector::zeros(3);
        assert!(matches!(solve(&p, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn nt_scaling_maps_both_sides_to_lambda() {
        let cones = Cones {
            nonneg: 2,
            soc: vec![3],
        };
        let s = DVector::from_vec(vec![1.0, 2.0, 2.0, 0.5, -0.3]);
        let z = DVector::from_vec(vec![0.5, 3.0, 1.5, -0.2, 0.9]);
        let w = Scaling::nesterov_todd(&cones, &s, &z);
        let wz = w.apply(&cones, &z);
        let winv_s = w.apply_inv(&cones, &s);
        assert!((wz - winv_s).amax() < 1e-12);
        let round_trip = w.apply_inv(&cones, &w.apply(&cones, &s));
        assert!((round_trip - &s).amax() < 1e-12);
    }

    #[test]
    fn jordan_inverse_round_trip() {
        let cones = Cones {
            nonneg: 1,
            soc: vec![3],
        };
        let lambda = DVector::from_vec(vec![2.0, 3.0, 1.0, -1.5]);
        let v = DVector::from_vec(vec![0.7, -0.4, 2.0, 0.3]);
        let u = cones.jordan_inv(&lambda, &v);
        assert!((cones.jordan(&lambda, &u) - v).amax() < 1e-12);
    }

    #[test]
    fn soc_step_hits_boundary() {
        let v = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let dv = DVector::from_vec(vec![-1.0, 1.0, 0.0]);
        // (2 - a) = a  ⇒ a = 1
        assert_abs_diff_eq!(soc_max_step(v, dv), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn debug_dump_lists_blocks() {
        let mut b = scalar_program();
        b.add_linear_cost(0, 1.0);
        b.add_le(vec![(0, -1.0)], -1.0);
        let mut buf = Vec::new();
        b.build().write_debug(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("%% A_in"));
        assert!(text.contains("1 1 -1.0"));
    }
}
