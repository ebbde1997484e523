use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pcbf_core::invariance::GridKernel;
use pcbf_core::model::{preset, Polytope, TerminalSet};
use pcbf_core::pcbf::{ContourSet, ValueGrid};
use serde_json::Value;
use tempfile::TempDir;

fn pcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcbf"))
        .args(args)
        .env_remove("PCBF_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = pcbf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    pcbf(args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every listed file exists and is non-empty.
fn check_manifest(dir: &Path) -> Value {
    let m = json(&dir.join("manifest.json"));
    for f in m["files"].as_array().unwrap() {
        let len = fs::metadata(dir.join(f.as_str().unwrap())).unwrap().len();
        assert!(len > 0, "{f} is empty");
    }
    m
}

#[test]
fn grid_writes_all_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("g");
    ok(&["grid", "--preset", "linear-unstable", "--range", "-1.5", "1.5", "-1.5", "1.5", "--res", "41", "--out", s(&out)]);
    let m = check_manifest(&out);
    assert_eq!(m["files"].as_array().unwrap().len(), 3);
    assert_eq!(m["parameters"]["resolution"], 41);
    let csv = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1682);
    assert!(csv.starts_with("x1,x2,V,feasible\n"));
    let zero: ContourSet = serde_json::from_value(json(&out.join("contour_zero.json"))).unwrap();
    assert_eq!(zero.level, 0.0);
    assert_eq!(zero.closed, vec![true]);
    let levels = json(&out.join("contours.json"));
    assert_eq!(levels.as_array().unwrap().len(), 5);
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(code(&["grid", "--preset", "linear-unstable", "--res", "2"]), 2);
    assert_eq!(code(&["grid", "--preset", "no-such-preset"]), 2);
    assert_eq!(code(&["grid"]), 2);
    assert_eq!(code(&["simulate", "--preset", "linear-unstable", "--samples", "0"]), 2);
    assert_eq!(code(&["baseline", "--preset", "linear-unstable", "--method", "nope"]), 2);
    assert_eq!(code(&["simulate", "--preset", "nonlinear-pendulum", "--filter"]), 2);
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("p");
    let o = pcbf(&["baseline", "--preset", "nonlinear-pendulum", "--method", "polytope", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("linear"));
}

#[test]
fn spec_file_matches_preset() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("linear.json");
    fs::write(
        &spec,
        r#"{"system": {"linear": {"A": [[1.5, 1.0], [0.0, 1.0]], "B": [[0.5], [0.5]]}},
            "X": {"box": 1.0}, "U": {"box": 1.5},
            "Xf": {"ellipsoid": {"P": [[3.3729, 0.3776], [0.3776, 1.1956]], "alpha": 0.6}},
            "N": 10, "Kf": [[-1.3735, -1.6166]]}"#,
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["grid", "--spec", s(&spec), "--res", "9", "--out", s(&a)]);
    ok(&["grid", "--preset", "linear-unstable", "--res", "9", "--out", s(&b), "--jobs", "2"]);
    let ga = ValueGrid::from_csv(&fs::read_to_string(a.join("grid.csv")).unwrap(), "").unwrap();
    let gb = ValueGrid::from_csv(&fs::read_to_string(b.join("grid.csv")).unwrap(), "").unwrap();
    assert_eq!(ga.zero_set(), gb.zero_set());
}

#[test]
fn tightening_comparison() {
    let tmp = TempDir::new().unwrap();
    let dir = |n: &str| tmp.path().join(n);
    for (name, delta) in [("d0", None), ("d005", Some("0.005")), ("d05", Some("0.05"))] {
        let out = dir(name);
        let mut args = vec!["grid", "--preset", "linear-unstable", "--res", "41", "--out", s(&out)];
        if let Some(d) = delta {
            args.extend(["--tighten", d]);
        }
        ok(&args);
    }
    let kernel = dir("kernel");
    ok(&["baseline", "--preset", "linear-unstable", "--method", "kernel", "--res", "101", "--out", s(&kernel)]);
    check_manifest(&kernel);
    let grids = [dir("d05"), dir("d0"), dir("d005")];
    let mut args = vec!["compare", "--grid"];
    args.extend(grids.iter().map(|p| s(p)));
    args.extend(["--baseline", s(&kernel)]);
    let (c1, c2) = (dir("c1"), dir("c2"));
    let mut a1 = args.clone();
    a1.extend(["--out", s(&c1)]);
    let mut a2 = args.clone();
    a2.extend(["--out", s(&c2)]);
    ok(&a1);
    ok(&a2);
    let text = fs::read(c1.join("report.json")).unwrap();
    assert_eq!(text, fs::read(c2.join("report.json")).unwrap());

    let r = json(&c1.join("report.json"));
    let entries = r["grids"].as_array().unwrap();
    let deltas: Vec<f64> = entries.iter().map(|e| e["delta"].as_f64().unwrap()).collect();
    assert_eq!(deltas, vec![0.05, 0.005, 0.0]);
    let ratio = |i: usize| entries[i]["area_ratio_to_reference"].as_f64().unwrap();
    assert!(ratio(1) >= ratio(0));
    assert!(ratio(0) < 1.0);
    for e in entries {
        assert!(e["zero_area"].as_f64().unwrap() <= r["baseline"]["area"].as_f64().unwrap());
    }
    for n in r["nesting"].as_array().unwrap() {
        assert_eq!(n["nested"], true);
    }

    // a different horizon is a different problem
    let other = dir("n7");
    ok(&["grid", "--preset", "linear-unstable", "--horizon", "7", "--res", "41", "--out", s(&other)]);
    assert_eq!(code(&["compare", "--grid", s(&dir("d0")), s(&other), "--out", s(&dir("c3"))]), 2);
    let coarse = dir("coarse");
    ok(&["grid", "--preset", "linear-unstable", "--res", "11", "--out", s(&coarse)]);
    assert_eq!(code(&["compare", "--grid", s(&dir("d0")), s(&coarse), "--out", s(&dir("c4"))]), 2);
}

#[test]
fn filtered_linear_runs_converge() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    ok(&["simulate", "--preset", "linear-unstable", "--samples", "20", "--seed", "7", "--steps", "50", "--filter", "--out", s(&out)]);
    let m = check_manifest(&out);
    assert_eq!(m["files"].as_array().unwrap().len(), 20);
    for t in m["trajectories"].as_array().unwrap() {
        assert_eq!(t["termination"], "converged");
        assert_eq!(t["seed"], 7);
    }
    let csv = fs::read_to_string(out.join("traj_000.csv")).unwrap();
    assert!(csv.starts_with("k,x1,x2,u1,xi0,V,status,u_des_1,mod_norm\n"));
    assert_eq!(csv.lines().count(), 52);

    // same seed, same files
    let again = tmp.path().join("again");
    ok(&["simulate", "--preset", "linear-unstable", "--samples", "20", "--seed", "7", "--steps", "50", "--filter", "--out", s(&again)]);
    for i in 0..20 {
        let f = format!("traj_{i:03}.csv");
        assert_eq!(fs::read(out.join(&f)).unwrap(), fs::read(again.join(&f)).unwrap());
    }
}

#[test]
fn pendulum_runs_reach_kernel() {
    let tmp = TempDir::new().unwrap();
    let kdir = tmp.path().join("kernel");
    ok(&["baseline", "--preset", "nonlinear-pendulum", "--method", "kernel", "--res", "201", "--out", s(&kdir)]);
    let csv = fs::read_to_string(kdir.join("kernel.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201 * 201 + 1);
    let kernel = GridKernel::from_csv(&csv).unwrap();

    let out = tmp.path().join("sim");
    let o = Command::new(env!("CARGO_BIN_EXE_pcbf"))
        .args(["simulate", "--preset", "nonlinear-pendulum", "--samples", "5", "--seed", "1", "--steps", "60", "--out", s(&out)])
        .env("PCBF_JOBS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = check_manifest(&out);
    assert_eq!(m["files"].as_array().unwrap().len(), 5);
    for i in 0..5 {
        let text = fs::read_to_string(out.join(format!("traj_{i:03}.csv"))).unwrap();
        let last: Vec<f64> = text.lines().last().unwrap().split(',').skip(1).take(2).map(|v| v.parse().unwrap()).collect();
        assert!(kernel.contains(&nalgebra::DVector::from_vec(last)));
    }
}

#[test]
fn baselines() {
    let tmp = TempDir::new().unwrap();
    let poly = tmp.path().join("poly");
    ok(&["baseline", "--preset", "linear-unstable", "--method", "polytope", "--out", s(&poly)]);
    check_manifest(&poly);
    let v = json(&poly.join("mpi_polytope.json"));
    assert_eq!(v["converged"], true);
    assert_eq!(v["contains_terminal_set"], true);
    let rows: Vec<Vec<f64>> = serde_json::from_value(v["polytope"]["G"].clone()).unwrap();
    let rhs: Vec<f64> = serde_json::from_value(v["polytope"]["g"].clone()).unwrap();
    let set = Polytope::new(
        nalgebra::DMatrix::from_row_iterator(rows.len(), 2, rows.iter().flatten().copied()),
        nalgebra::DVector::from_vec(rhs),
    )
    .unwrap();
    let pre = preset("linear-unstable").unwrap();
    assert!(pre.terminal.is_inside(&set, 1e-8).unwrap());
    assert!(matches!(pre.terminal, TerminalSet::Ellipsoid { .. }));

    let hand = tmp.path().join("hand");
    let kdir = tmp.path().join("kernel");
    ok(&["baseline", "--preset", "nonlinear-pendulum", "--method", "handcrafted-cbf", "--out", s(&hand)]);
    ok(&["baseline", "--preset", "nonlinear-pendulum", "--method", "kernel", "--res", "101", "--out", s(&kdir)]);
    let c: ContourSet = serde_json::from_value(json(&hand.join("handcrafted_cbf.json"))).unwrap();
    assert_eq!(c.closed, vec![true]);
    let kernel = GridKernel::from_csv(&fs::read_to_string(kdir.join("kernel.csv")).unwrap()).unwrap();
    for p in c.vertices() {
        assert!(kernel.contains(&nalgebra::DVector::from_row_slice(p)), "{p:?}");
    }
}
