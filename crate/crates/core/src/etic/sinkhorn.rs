use ndarray::Array2;

use super::EticConfig;
use crate::error::{Error, Result};
use crate::linalg::OpCount;
use crate::par;

/// An `n x 2` matrix stored row-wise; column 0 is the source atom.
pub type TwoCol = Vec<[f64; 2]>;

/// Scaling matrices from the fixed-point iteration.
#[derive(Debug, Clone)]
pub struct Scaling {
    pub u: TwoCol,
    pub v: TwoCol,
    pub iterations: usize,
    pub converged: bool,
    /// Counted scalar operations across all iterations.
    pub ops: OpCount,
}

/// Operations per fixed-point iteration on `n` points: two kernel
/// applications of `2n^2 + 4n` each and two element-wise divisions of `2n`.
pub fn iteration_op_count(n: usize) -> u64 {
    let n = n as u64;
    4 * n * n + 12 * n
}

/// `K1 * M * K2^T` for an `n x 2` matrix `M`.
pub fn apply_kernel(k1: &Array2<f64>, m: &TwoCol, k2: &[[f64; 2]; 2], ops: &mut OpCount) -> TwoCol {
    let n = m.len();
    assert_eq!(k1.dim(), (n, n), "kernel shape");
    let out = par::map_rows(n, |i| {
        let row = k1.row(i);
        let (mut t0, mut t1) = (0.0, 0.0);
        for (k, &w) in row.iter().enumerate() {
            t0 += w * m[k][0];
            t1 += w * m[k][1];
        }
        [t0 * k2[0][0] + t1 * k2[0][1], t0 * k2[1][0] + t1 * k2[1][1]]
    });
    ops.add(2 * (n as u64) * (n as u64) + 4 * n as u64);
    out
}

fn divide(num: &TwoCol, den: &TwoCol, ops: &mut OpCount) -> TwoCol {
    ops.add(2 * num.len() as u64);
    num.iter()
        .zip(den)
        .map(|(a, d)| [a[0] / d[0], a[1] / d[1]])
        .collect()
}

pub(crate) fn max_abs_diff(p: &TwoCol, q: &TwoCol) -> f64 {
    p.iter()
        .zip(q)
        .flat_map(|(x, y)| [(x[0] - y[0]).abs(), (x[1] - y[1]).abs()])
        .fold(0.0, f64::max)
}

/// `max |A - U . D|` for a precomputed `D = K1 V K2^T`.
pub(crate) fn row_residual(a: &TwoCol, u: &TwoCol, d: &TwoCol) -> f64 {
    a.iter()
        .zip(u)
        .zip(d)
        .flat_map(|((a, u), d)| [(a[0] - u[0] * d[0]).abs(), (a[1] - u[1] * d[1]).abs()])
        .fold(0.0, f64::max)
}

/// Both the change of `U` and the row-marginal residual must be within `tol`.
pub(crate) fn is_converged(change: f64, residual: f64, tol: f64) -> bool {
    change <= tol && residual <= tol
}

fn all_finite(m: &TwoCol) -> bool {
    m.iter().flatten().all(|x| x.is_finite())
}

/// Alternate `U <- A / (K1 V K2^T)` and `V <- B / (K1 U K2^T)` from all-ones
/// starts until `U` moves by at most `cfg.tol` and the row marginal of the
/// scaled plan is within `cfg.tol` of `A`, or `cfg.max_iters` is reached.
///
/// Each iteration ends by computing the next update's denominator, which
/// doubles as the residual check. A run of `L` iterations costs
/// `L * iteration_op_count(n)`, plus one extra kernel product (`2n^2 + 4n`)
/// when it stops on convergence.
pub fn sinkhorn_scaling(
    a: &TwoCol,
    b: &TwoCol,
    k1: &Array2<f64>,
    k2: &[[f64; 2]; 2],
    cfg: &EticConfig,
) -> Result<Scaling> {
    let n = a.len();
    if b.len() != n || k1.dim() != (n, n) {
        return Err(Error::Dimension(format!(
            "marginals {}x2 and {}x2 with kernel {:?}",
            n,
            b.len(),
            k1.dim()
        )));
    }
    let mut ops = OpCount::default();
    let mut u: TwoCol = vec![[1.0; 2]; n];
    let mut v: TwoCol = vec![[1.0; 2]; n];
    let mut d = apply_kernel(k1, &v, k2, &mut ops);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let next_u = divide(a, &d, &mut ops);
        v = divide(b, &apply_kernel(k1, &next_u, k2, &mut ops), &mut ops);
        if !all_finite(&next_u) || !all_finite(&v) {
            return Err(Error::Numerical {
                class: None,
                detail: format!("non-finite scaling at iteration {iterations}"),
            });
        }
        let change = max_abs_diff(&next_u, &u);
        u = next_u;
        if iterations == cfg.max_iters {
            break;
        }
        // denominator of the next update; also gives the residual of (U, V)
        d = apply_kernel(k1, &v, k2, &mut ops);
        if is_converged(change, row_residual(a, &u, &d), cfg.tol) {
            converged = true;
            break;
        }
    }
    Ok(Scaling {
        u,
        v,
        iterations,
        converged,
        ops,
    })
}

/// `sum(U . [K1 V (K2 . C2)^T]) + sum(U . [(K1 . C1) V K2^T])`.
pub fn sinkhorn_cost_estimate(
    u: &TwoCol,
    v: &TwoCol,
    k1: &Array2<f64>,
    k2: &[[f64; 2]; 2],
    c1: &Array2<f64>,
    c2: &[[f64; 2]; 2],
) -> f64 {
    let n = u.len();
    let mut kc2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            kc2[i][j] = k2[i][j] * c2[i][j];
        }
    }
    let terms = par::map_rows(n, |i| {
        let (mut p0, mut p1, mut q0, mut q1) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..n {
            let w = k1[[i, k]];
            let wc = w * c1[[i, k]];
            p0 += w * v[k][0];
            p1 += w * v[k][1];
            q0 += wc * v[k][0];
            q1 += wc * v[k][1];
        }
        let first = u[i][0] * (p0 * kc2[0][0] + p1 * kc2[0][1])
            + u[i][1] * (p0 * kc2[1][0] + p1 * kc2[1][1]);
        let second =
            u[i][0] * (q0 * k2[0][0] + q1 * k2[0][1]) + u[i][1] * (q0 * k2[1][0] + q1 * k2[1][1]);
        first + second
    });
    terms.iter().sum()
}

/// `max |A - U . (K1 V K2^T)|`, the row-marginal violation of the scaled plan.
pub fn fixed_point_residual(
    a: &TwoCol,
    u: &TwoCol,
    v: &TwoCol,
    k1: &Array2<f64>,
    k2: &[[f64; 2]; 2],
) -> f64 {
    let d = apply_kernel(k1, v, k2, &mut OpCount::default());
    row_residual(a, u, &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etic::{build_marginals, Domain, EticWorkspace};
    use ndarray::array;

    fn small() -> (Array2<f64>, Vec<Domain>) {
        let f = array![[0.0, 0.0], [1.0, 0.3], [0.2, 1.5], [1.1, 1.0], [-0.4, 0.7]];
        let d = vec![
            Domain::Source,
            Domain::Target,
            Domain::Source,
            Domain::Target,
            Domain::Target,
        ];
        (f, d)
    }

    #[test]
    fn op_count_per_iteration() {
        let (f, d) = small();
        let cfg = EticConfig {
            tol: 0.0,
            max_iters: 7,
            ..EticConfig::default()
        };
        let ws = EticWorkspace::new(f.view(), &d, &cfg).unwrap();
        let s = sinkhorn_scaling(&ws.a, &ws.b, &ws.k1, &ws.k2, &cfg).unwrap();
        assert_eq!(s.iterations, 7);
        assert_eq!(s.ops.0, 7 * iteration_op_count(5));
        assert_eq!(iteration_op_count(5), 4 * 25 + 60);
    }

    #[test]
    fn converged_plan_matches_marginals() {
        let (f, d) = small();
        let cfg = EticConfig {
            max_iters: 5000,
            tol: 1e-13,
            ..EticConfig::default()
        };
        let ws = EticWorkspace::new(f.view(), &d, &cfg).unwrap();
        let s = sinkhorn_scaling(&ws.a, &ws.b, &ws.k1, &ws.k2, &cfg).unwrap();
        assert!(s.converged);
        assert!(fixed_point_residual(&ws.a, &s.u, &s.v, &ws.k1, &ws.k2) < 1e-12);
        // column marginal: V . (K1 U K2^T) = B
        let mut ops = OpCount::default();
        let e = apply_kernel(&ws.k1, &s.u, &ws.k2, &mut ops);
        for i in 0..5 {
            for c in 0..2 {
                assert!((s.v[i][c] * e[i][c] - ws.b[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_kernel_matches_dense() {
        let k1 = array![[1.0, 0.5], [0.5, 1.0]];
        let k2 = [[1.0, 0.2], [0.2, 1.0]];
        let m = vec![[1.0, 2.0], [3.0, 4.0]];
        let out = apply_kernel(&k1, &m, &k2, &mut OpCount::default());
        let mm = array![[1.0, 2.0], [3.0, 4.0]];
        let k2m = array![[1.0, 0.2], [0.2, 1.0]];
        let dense = k1.dot(&mm).dot(&k2m.t());
        for i in 0..2 {
            for c in 0..2 {
                assert!((out[i][c] - dense[[i, c]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_kernel_is_numerical_error() {
        let (a, b) = build_marginals(&[Domain::Source, Domain::Target]).unwrap();
        let k1 = array![[1.0, 0.0], [0.0, 1.0]];
        let k2 = [[0.0, 0.0], [0.0, 0.0]];
        assert!(matches!(
            sinkhorn_scaling(&a, &b, &k1, &k2, &EticConfig::default()),
            Err(Error::Numerical { .. })
        ));
    }
}
