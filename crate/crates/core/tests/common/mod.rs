#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scbf_core::qp::QpProblem;

/// Random strictly convex QP that is feasible by construction: rows are
/// drawn around a known interior point `z0`.
pub fn random_qp(seed: u64, k: usize, m: usize, boxed: bool) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = || rng.random_range(-1.0..1.0);
    let l = DMatrix::from_fn(k, k, |_, _| n());
    let p = &l * l.transpose() + DMatrix::identity(k, k) * 0.1;
    let q = DVector::from_fn(k, |_, _| 3.0 * n());
    let z0 = DVector::from_fn(k, |_, _| 0.5 * n());
    let a = DMatrix::from_fn(m, k, |_, _| n());
    let az = &a * &z0;
    let ub = DVector::from_fn(m, |i, _| az[i] + 0.5 * (n() + 1.0));
    let (lo, hi) = if boxed {
        (
            DVector::from_fn(k, |i, _| z0[i] - 0.2 - (n() + 1.0)),
            DVector::from_fn(k, |i, _| z0[i] + 0.2 + (n() + 1.0)),
        )
    } else {
        (
            DVector::from_element(k, f64::NEG_INFINITY),
            DVector::from_element(k, f64::INFINITY),
        )
    };
    QpProblem::new(p, q, a, ub, lo, hi).unwrap()
}

/// Global minimum by enumerating every active set: solve each equality
/// QP, keep the feasible ones, return the lowest objective.
pub fn enumerate_optimum(prob: &QpProblem) -> (f64, DVector<f64>) {
    let k = prob.dim();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..prob.n_rows() {
        rows.push((prob.a.row(i).transpose(), prob.ub[i]));
    }
    for i in 0..k {
        if prob.hi[i].is_finite() {
            let mut e = DVector::zeros(k);
            e[i] = 1.0;
            rows.push((e, prob.hi[i]));
        }
        if prob.lo[i].is_finite() {
            let mut e = DVector::zeros(k);
            e[i] = -1.0;
            rows.push((e, -prob.lo[i]));
        }
    }
    let n = rows.len();
    assert!(n <= 20, "enumeration too large");
    let mut best = (f64::INFINITY, DVector::zeros(k));
    for mask in 0u32..(1 << n) {
        let act: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if act.len() > k {
            continue;
        }
        let m = act.len();
        let mut kkt = DMatrix::zeros(k + m, k + m);
        kkt.view_mut((0, 0), (k, k)).copy_from(&prob.p);
        let mut rhs = DVector::zeros(k + m);
        rhs.rows_mut(0, k).copy_from(&(-&prob.q));
        for (j, &r) in act.iter().enumerate() {
            for c in 0..k {
                kkt[(c, k + j)] = rows[r].0[c];
                kkt[(k + j, c)] = rows[r].0[c];
            }
            rhs[k + j] = rows[r].1;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z = sol.rows(0, k).into_owned();
        if rows.iter().all(|(a, b)| a.dot(&z) <= b + 1e-9) {
            let f = prob.objective(&z);
            if f < best.0 {
                best = (f, z);
            }
        }
    }
    best
}
