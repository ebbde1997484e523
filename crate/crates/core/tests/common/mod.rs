#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pcbf_core::conic::{ConicProgram, SocBlock};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceKind {
    Lp,
    Qp,
    Soc,
    Infeasible,
}

pub struct Instance {
    pub kind: InstanceKind,
    pub program: ConicProgram,
    /// Known optimizer (absent for infeasible instances).
    pub optimum: Option<DVector<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Builds a program whose optimizer is known by construction: pick z*, an
/// active set with strictly positive multipliers, and choose the linear cost so
/// that the KKT conditions hold at z*.
pub fn kkt_instance(rng: &mut ChaCha8Rng, kind: InstanceKind) -> Instance {
    let n = rng.gen_range(2..=10);
    if kind == InstanceKind::Infeasible {
        return farkas_instance(rng, n);
    }
    let z_star = normal_vec(rng, n);
    let quad = match kind {
        InstanceKind::Lp => None,
        _ => {
            let m = normal_mat(rng, n, n);
            Some(&m * m.transpose() + DMatrix::identity(n, n) * 0.1)
        }
    };
    let n_eq = rng.gen_range(0..=n / 3);
    let n_active = match kind {
        InstanceKind::Lp => n - n_eq,
        _ => rng.gen_range(0..=(n - n_eq)),
    };
    let n_inactive = rng.gen_range(1..=n);

    let a_eq = normal_mat(rng, n_eq, n);
    let b_eq = &a_eq * &z_star;
    let nu = normal_vec(rng, n_eq);

    let a_in = normal_mat(rng, n_active + n_inactive, n);
    let mut b_in = &a_in * &z_star;
    let mut lambda = DVector::zeros(n_active + n_inactive);
    for i in 0..n_active {
        lambda[i] = rng.gen_range(0.5..2.0);
    }
    for i in n_active..n_active + n_inactive {
        b_in[i] += rng.gen_range(0.1..1.0);
    }

    let mut grad = a_in.transpose() * &lambda + a_eq.transpose() * &nu;
    let mut soc = Vec::new();
    if kind == InstanceKind::Soc {
        for _ in 0..rng.gen_range(1..=2) {
            let k = rng.gen_range(1..=3);
            let f = normal_mat(rng, k, n);
            let d = normal_vec(rng, k);
            let r = normal_vec(rng, n);
            let u = &f * &z_star + &d;
            let unorm = u.norm();
            let s = unorm - r.dot(&z_star);
            // complementary dual (μ‖u‖, −μu) on the opposite boundary ray
            let mu = rng.gen_range(0.5..2.0);
            let z0 = mu;
            let z1 = -&u * (mu / unorm);
            // cone slack is (rᵀz + s, Fz + d) = h − Gz with G = −[rᵀ; F]
            grad -= &r * z0 + f.transpose() * &z1;
            soc.push(SocBlock { f, d, r, s });
        }
    }
    if let Some(q) = &quad {
        grad += q * &z_star;
    }
    Instance {
        kind,
        program: ConicProgram {
            num_vars: n,
            q: -grad,
            quad,
            offset: 0.0,
            a_eq,
            b_eq,
            a_in,
            b_in,
            soc,
        },
        optimum: Some(z_star),
    }
}

/// Inequality system with a positive combination of rows giving `0 ≤ −1`.
fn farkas_instance(rng: &mut ChaCha8Rng, n: usize) -> Instance {
    let k = rng.gen_range(2..=n + 2);
    let mut a_in = normal_mat(rng, k + 1, n);
    let y = DVector::from_fn(k + 1, |_, _| rng.gen_range(0.5..2.0));
    let mut combo = DVector::zeros(n);
    for i in 0..k {
        combo += a_in.row(i).transpose() * y[i];
    }
    a_in.set_row(k, &(-(combo / y[k])).transpose());
    let mut b_in = normal_vec(rng, k + 1);
    let partial: f64 = (0..k).map(|i| y[i] * b_in[i]).sum();
    b_in[k] = (-1.0 - partial) / y[k];
    // dual-feasible cost, so the only valid certificate is primal infeasibility
    let w = DVector::from_fn(k + 1, |_, _| rng.gen_range(0.0..1.0));
    let q = -(a_in.transpose() * w);
    Instance {
        kind: InstanceKind::Infeasible,
        program: ConicProgram {
            num_vars: n,
            q,
            quad: None,
            offset: 0.0,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in,
            b_in,
            soc: Vec::new(),
        },
        optimum: None,
    }
}

pub fn instance_kind(i: usize) -> InstanceKind {
    match i % 5 {
        0 | 1 => InstanceKind::Lp,
        2 => InstanceKind::Qp,
        3 => InstanceKind::Soc,
        _ => InstanceKind::Infeasible,
    }
}
