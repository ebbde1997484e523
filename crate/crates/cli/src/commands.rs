use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use pcbf_core::invariance::{max_invariant_polytope, sample_inputs, viability_kernel_grid, GridKernel};
use pcbf_core::model::{preset, Grid, ProblemPreset, SystemModel};
use pcbf_core::pcbf::{
    ellipse_barrier_contour, eval_grid, extract_contour, fingerprint, hausdorff, preset_fingerprint,
    ValueGrid,
};
use pcbf_core::safempc::SafeMpcProblem;
use pcbf_core::simfilter::{self, linear_policy, sample_unsafe_states, simulate_filtered, Termination, Trajectory};
use pcbf_core::Error;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::manifest::RunManifest;
use crate::{Method, ProblemArgs, RunArgs};

/// Largest tolerated share of unresolved grid cells.
const MAX_UNRESOLVED: f64 = 0.05;
const MAX_INVARIANT_ITERATIONS: usize = 100;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Unresolved(String),
    Invariant(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Unresolved(_) => 3,
            Failure::Invariant(_) => 4,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Unresolved(m) | Failure::Invariant(m) | Failure::Runtime(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Solver(_) | Error::Io(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn load_problem(args: &ProblemArgs) -> Result<(ProblemPreset, String), Failure> {
    let (mut pre, label) = match (&args.preset, &args.spec) {
        (Some(name), None) => (preset(name)?, name.clone()),
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            (ProblemPreset::from_json(&text)?, path.display().to_string())
        }
        _ => return usage("give exactly one of --preset or --spec"),
    };
    if let Some(n) = args.horizon {
        if n == 0 {
            return usage("--horizon must be at least 1");
        }
        pre = pre.with_horizon(n);
    }
    pre.validate()?;
    Ok((pre, label))
}

/// Bounding box of the state set.
fn state_box(pre: &ProblemPreset) -> Result<(Vec<f64>, Vec<f64>), Failure> {
    let n = pre.nx();
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for d in 0..n {
        let e = DVector::from_fn(n, |i, _| f64::from(i == d));
        let up = pre.state_set.support(&e)?;
        let down = -pre.state_set.support(&-e)?;
        if !(up.is_finite() && down.is_finite()) {
            return usage("state set is unbounded; give --range");
        }
        lo.push(tidy(down));
        hi.push(tidy(up));
    }
    Ok((lo, hi))
}

// strip LP round-off from support values
fn tidy(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

fn scaled(lo: &[f64], hi: &[f64], s: f64) -> (Vec<f64>, Vec<f64>) {
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let half: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * s * (b - a)).collect();
    (
        mid.iter().zip(&half).map(|(m, h)| m - h).collect(),
        mid.iter().zip(&half).map(|(m, h)| m + h).collect(),
    )
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    if jobs == Some(0) {
        return usage("--jobs must be at least 1");
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(k) = jobs {
        b = b.num_threads(k);
    }
    b.build().map_err(|e| Failure::Runtime(e.to_string()))
}

fn prepare_out(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn to_json_text(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

pub fn grid(
    problem: &ProblemArgs,
    run: &RunArgs,
    range: Option<Vec<f64>>,
    res: usize,
    tighten: Option<f64>,
    levels: &[f64],
) -> Outcome {
    let started = Instant::now();
    if res < 3 {
        return usage(format!("--res must be at least 3, got {res}"));
    }
    if let Some(d) = tighten {
        if !(d >= 0.0 && d.is_finite()) {
            return usage(format!("--tighten must be finite and ≥ 0, got {d}"));
        }
    }
    if let Some(l) = levels.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return usage(format!("contour levels must be finite and ≥ 0, got {l}"));
    }
    let (pre, label) = load_problem(problem)?;
    if pre.nx() != 2 {
        return usage(format!("grid export needs a 2-D state, this problem has {}", pre.nx()));
    }
    let (lo, hi) = match range {
        Some(r) => {
            if r[0] >= r[1] || r[2] >= r[3] {
                return usage("--range needs min < max on both axes");
            }
            (vec![r[0], r[2]], vec![r[1], r[3]])
        }
        None => {
            let (lo, hi) = state_box(&pre)?;
            scaled(&lo, &hi, 1.5)
        }
    };
    let delta = tighten.unwrap_or(0.0);
    let p = if delta > 0.0 {
        SafeMpcProblem::tightened(pre.clone(), delta)
    } else {
        SafeMpcProblem::soft(pre.clone())
    };
    let g = Grid::new(lo.clone(), hi.clone(), vec![res, res])?;
    let pool = pool(run.jobs)?;
    let values = pool.install(|| eval_grid(&p, &g, None))?;

    prepare_out(&run.out)?;
    let mut m = RunManifest::new("grid", label, &run.out, started);
    m.param("range", json!([lo[0], hi[0], lo[1], hi[1]]));
    m.param("resolution", res);
    m.param("horizon", pre.horizon);
    m.param("tighten", delta);
    m.param("levels", json!(levels));
    m.write("grid.csv", &values.to_csv())?;
    m.write("contour_zero.json", &to_json_text(&extract_contour(&values, 0.0)?.to_json()))?;
    let contours = levels
        .iter()
        .map(|l| extract_contour(&values, *l).map(|c| c.to_json()))
        .collect::<Result<Vec<_>, _>>()?;
    m.write("contours.json", &to_json_text(&Value::Array(contours)))?;
    m.record("fingerprint", fingerprint(&p));
    m.record("preset_fingerprint", preset_fingerprint(&p));
    m.record("zero_cells", values.zero_count());
    m.record("unresolved_cells", values.unresolved());
    m.finish()?;

    let frac = values.unresolved_fraction();
    if frac > MAX_UNRESOLVED {
        return Err(Failure::Unresolved(format!(
            "{} of {} cells unresolved ({:.1}%)",
            values.unresolved(),
            values.cells.len(),
            100.0 * frac
        )));
    }
    Ok(())
}

fn trajectory_summary(index: usize, seed: u64, t: &Trajectory, residual: f64) -> Value {
    json!({
        "index": index,
        "seed": seed,
        "x0": t.states[0].as_slice(),
        "termination": t.termination.as_str(),
        "steps": t.steps(),
        "converged_at": t.converged_at,
        "settled_step": t.settled_step(),
        "max_decrease_margin": if t.steps() > 0 { json!(t.max_decrease_margin()) } else { Value::Null },
        "dynamics_residual": residual,
    })
}

pub fn simulate(
    problem: &ProblemArgs,
    run: &RunArgs,
    samples: usize,
    seed: u64,
    steps: usize,
    filter: bool,
    scale: f64,
) -> Outcome {
    let started = Instant::now();
    if samples == 0 {
        return usage("--samples must be at least 1");
    }
    if steps == 0 {
        return usage("--steps must be at least 1");
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return usage("--scale must be positive");
    }
    let (pre, label) = load_problem(problem)?;
    let p = SafeMpcProblem::soft(pre.clone());
    let policy = if filter {
        match linear_policy(&p) {
            Ok(f) => Some(f),
            Err(_) => return usage(format!("--filter needs a feedback gain; `{label}` has none")),
        }
    } else {
        None
    };
    let (lo, hi) = state_box(&pre)?;
    let (lo, hi) = scaled(&lo, &hi, scale);
    let pool = pool(run.jobs)?;
    let starts = match &policy {
        // unsafe state and saturating desired input
        Some(f) => sample_unsafe_states(&p, &lo, &hi, samples, seed, &|x| {
            !pre.state_set.contains(x, 0.0) && !pre.input_set.contains(&f(x), 0.0)
        })?,
        None => sample_unsafe_states(&p, &lo, &hi, samples, seed, &|_| true)?,
    };
    let runs: Vec<Trajectory> = pool.install(|| {
        starts
            .par_iter()
            .map(|x0| match &policy {
                Some(f) => simulate_filtered(&p, x0, f, steps),
                None => simfilter::simulate(&p, x0, steps),
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    prepare_out(&run.out)?;
    let mut m = RunManifest::new("simulate", label, &run.out, started);
    m.param("samples", samples);
    m.param("seed", seed);
    m.param("steps", steps);
    m.param("filter", filter);
    m.param("horizon", pre.horizon);
    m.param("sampling_box", json!({"lower": lo, "upper": hi}));
    let mut summaries = Vec::with_capacity(runs.len());
    let mut bad = Vec::new();
    for (i, t) in runs.iter().enumerate() {
        m.write(&format!("traj_{i:03}.csv"), &t.to_csv())?;
        let residual = t.dynamics_residual(&p)?;
        if !t.satisfies_decrease() || residual > 0.0 || t.termination == Termination::Infeasible {
            bad.push(i);
        }
        summaries.push(trajectory_summary(i, seed, t, residual));
    }
    m.record("trajectories", Value::Array(summaries));
    m.finish()?;
    if !bad.is_empty() {
        return Err(Failure::Invariant(format!("trajectories {bad:?} violate the closed-loop invariants")));
    }
    Ok(())
}

pub fn baseline(
    problem: &ProblemArgs,
    run: &RunArgs,
    method: Method,
    res: usize,
    inputs: usize,
    a: f64,
    b: f64,
) -> Outcome {
    let started = Instant::now();
    let (pre, label) = load_problem(problem)?;
    let p = SafeMpcProblem::soft(pre.clone());
    let pool = pool(run.jobs)?;
    let mut params: Vec<(&str, Value)> = vec![("method", json!(format!("{method:?}").to_lowercase()))];
    let (name, contents, extra) = match method {
        Method::Polytope => {
            let SystemModel::Linear { a: am, b: bm } = &pre.system else {
                return usage("the polytope baseline needs a linear system; use --method kernel for nonlinear presets");
            };
            let Some(k) = &pre.terminal_gain else {
                return usage("the polytope baseline needs the feedback gain of the problem");
            };
            let acl = am + bm * k;
            let c = pre.state_set.intersect(&pre.input_set.preimage(k)?)?;
            let inv = max_invariant_polytope(&acl, &c, MAX_INVARIANT_ITERATIONS)?;
            let inside = pre.terminal.is_inside(&inv.set, 1e-8)?;
            let v = json!({
                "polytope": inv.set.to_json(),
                "iterations": inv.iterations,
                "converged": inv.converged,
                "contains_terminal_set": inside,
            });
            ("mpi_polytope.json", to_json_text(&v), json!({"rows": inv.set.num_rows()}))
        }
        Method::Kernel => {
            if res < 3 || inputs < 2 {
                return usage("kernel needs --res ≥ 3 and --inputs ≥ 2");
            }
            let (lo, hi) = state_box(&pre)?;
            let g = Grid::new(lo, hi, vec![res; pre.nx()])?;
            let us = sample_inputs(&pre.input_set, inputs)?;
            let k: GridKernel = pool.install(|| viability_kernel_grid(&pre.system, &pre.state_set, &us, &g))?;
            params.push(("resolution", json!(res)));
            params.push(("inputs", json!(inputs)));
            ("kernel.csv", k.to_csv(), json!({"kernel_cells": k.count(), "sweeps": k.sweeps}))
        }
        Method::HandcraftedCbf => {
            if res < 3 {
                return usage(format!("--res must be at least 3, got {res}"));
            }
            if pre.nx() != 2 {
                return usage("the handcrafted barrier is 2-D");
            }
            let (lo, hi) = state_box(&pre)?;
            let g = Grid::new(lo, hi, vec![res, res])?;
            let c = ellipse_barrier_contour(&g, a, b)?;
            params.push(("resolution", json!(res)));
            params.push(("a", json!(a)));
            params.push(("b", json!(b)));
            ("handcrafted_cbf.json", to_json_text(&c.to_json()), json!({"polylines": c.polylines.len()}))
        }
    };
    prepare_out(&run.out)?;
    let mut m = RunManifest::new("baseline", label, &run.out, started);
    for (k, v) in params {
        m.param(k, v);
    }
    m.param("horizon", pre.horizon);
    m.write(name, &contents)?;
    m.record("preset_fingerprint", preset_fingerprint(&p));
    m.record("summary", extra);
    m.finish()?;
    Ok(())
}

struct GridRun {
    path: PathBuf,
    delta: f64,
    preset_fingerprint: String,
    values: ValueGrid,
}

fn read_manifest(dir: &Path) -> Result<Value, Failure> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn split_input(p: &Path, file: &str) -> (PathBuf, PathBuf) {
    if p.is_dir() {
        (p.join(file), p.to_path_buf())
    } else {
        (p.to_path_buf(), p.parent().unwrap_or(Path::new(".")).to_path_buf())
    }
}

fn load_grid_run(p: &Path) -> Result<GridRun, Failure> {
    let (csv, dir) = split_input(p, "grid.csv");
    let man = read_manifest(&dir)?;
    let text = fs::read_to_string(&csv)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", csv.display())))?;
    let fp = man["fingerprint"].as_str().unwrap_or_default();
    Ok(GridRun {
        path: p.to_path_buf(),
        delta: man["parameters"]["tighten"].as_f64().unwrap_or(0.0),
        preset_fingerprint: man["preset_fingerprint"].as_str().unwrap_or_default().to_string(),
        values: ValueGrid::from_csv(&text, fp)?,
    })
}

fn cell_area(g: &Grid) -> f64 {
    (0..g.dim()).map(|d| g.spacing(d)).product()
}

pub fn compare(grids: &[PathBuf], baseline: Option<&Path>, out: &Path) -> Outcome {
    let mut runs = grids.iter().map(|p| load_grid_run(p)).collect::<Result<Vec<_>, _>>()?;
    for r in &runs[1..] {
        let first = &runs[0];
        if r.preset_fingerprint != first.preset_fingerprint {
            return usage(format!(
                "grid fingerprints differ: {} and {} come from different problems",
                first.path.display(),
                r.path.display()
            ));
        }
        if r.values.grid != first.values.grid {
            return usage(format!(
                "grids differ: {} and {} do not share ranges and resolution",
                first.path.display(),
                r.path.display()
            ));
        }
    }
    runs.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    let first = &runs[0];
    let area = cell_area(&first.values.grid);
    let reference = runs.last().expect("at least one grid");
    let ref_area = reference.values.zero_count() as f64 * area;
    let ref_contour = extract_contour(&reference.values, 0.0)?;

    let kernel = match baseline {
        Some(p) => {
            let (csv, dir) = split_input(p, "kernel.csv");
            let man = read_manifest(&dir)?;
            if man["preset_fingerprint"].as_str().unwrap_or_default() != first.preset_fingerprint {
                return usage(format!(
                    "baseline fingerprint differs: {} comes from a different problem",
                    p.display()
                ));
            }
            let text = fs::read_to_string(&csv)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", csv.display())))?;
            Some(GridKernel::from_csv(&text)?)
        }
        None => None,
    };
    let kernel_area = kernel.as_ref().map(|k| k.count() as f64 * cell_area(&k.grid));

    let mut entries = Vec::new();
    for r in &runs {
        let zero = r.values.zero_set();
        let zero_area = r.values.zero_count() as f64 * area;
        let contour = extract_contour(&r.values, 0.0)?;
        let mut e = json!({
            "grid": r.path.display().to_string(),
            "delta": r.delta,
            "zero_cells": r.values.zero_count(),
            "zero_area": zero_area,
            "area_ratio_to_reference": if ref_area > 0.0 { json!(zero_area / ref_area) } else { Value::Null },
            "hausdorff_to_reference": finite_or_null(hausdorff(&contour, &ref_contour)),
        });
        if let (Some(k), Some(ka)) = (&kernel, kernel_area) {
            let outside = (0..zero.len())
                .filter(|&i| zero[i] && !k.contains(&r.values.grid.point(i)))
                .count();
            e["area_ratio_to_baseline"] = if ka > 0.0 { json!(zero_area / ka) } else { Value::Null };
            e["zero_cells_outside_baseline"] = json!(outside);
        }
        entries.push(e);
    }
    let mut nesting = Vec::new();
    for w in runs.windows(2) {
        let (outer, inner) = (&w[1], &w[0]);
        let (zi, zo) = (inner.values.zero_set(), outer.values.zero_set());
        let violations = (0..zi.len()).filter(|&i| zi[i] && !zo[i]).count();
        nesting.push(json!({
            "inner_delta": inner.delta,
            "outer_delta": outer.delta,
            "nested": violations == 0,
            "violating_cells": violations,
        }));
    }
    let mut report = json!({
        "reference_delta": reference.delta,
        "grids": entries,
        "nesting": nesting,
        "preset_fingerprint": first.preset_fingerprint,
    });
    if let (Some(k), Some(ka)) = (&kernel, kernel_area) {
        report["baseline"] = json!({
            "path": baseline.map(|p| p.display().to_string()),
            "cells": k.count(),
            "area": ka,
        });
    }
    prepare_out(out)?;
    fs::write(out.join("report.json"), to_json_text(&report))?;
    Ok(())
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}
