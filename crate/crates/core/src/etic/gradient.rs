use ndarray::{Array2, ArrayView2};

use super::sinkhorn::{
    apply_kernel, is_converged, max_abs_diff, row_residual, sinkhorn_cost_estimate,
    sinkhorn_scaling, TwoCol,
};
use super::workspace::EticWorkspace;
use super::{Domain, EticConfig, EticValue, GradientMode};
use crate::error::{Error, Result};
use crate::linalg::OpCount;

/// `sum_ab X[i,a] M[a,b] Y[k,b]` for every `(i, k)`.
fn bilinear(x: &TwoCol, m: &[[f64; 2]; 2], y: &TwoCol) -> Array2<f64> {
    let n = x.len();
    Array2::from_shape_fn((n, y.len()), |(i, k)| {
        let mut s = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                s += x[i][a] * m[a][b] * y[k][b];
            }
        }
        s
    })
}

fn hadamard2(p: &[[f64; 2]; 2], q: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            out[a][b] = p[a][b] * q[a][b];
        }
    }
    out
}

/// `dK1/dC1`, zero where the kernel sits on its floor.
fn kernel_slope(ws: &EticWorkspace, cfg: &EticConfig) -> Array2<f64> {
    let scale = ws.lambda1 * cfg.epsilon;
    Array2::from_shape_fn(ws.k1.raw_dim(), |(i, k)| {
        let raw = (-ws.c1[[i, k]] / scale).exp();
        if raw < cfg.kernel_floor {
            0.0
        } else {
            -raw / scale
        }
    })
}

/// Partial derivative of the cost estimate in `C1` with `U`, `V` held fixed:
/// the direct `C1` term plus the term through `K1`.
fn frozen_cost_gradient(
    ws: &EticWorkspace,
    u: &TwoCol,
    v: &TwoCol,
    cfg: &EticConfig,
) -> Array2<f64> {
    let w = bilinear(u, &ws.k2, v);
    let q = bilinear(u, &hadamard2(&ws.k2, &ws.c2), v);
    let slope = kernel_slope(ws, cfg);
    let mut g = &ws.k1 * &w;
    g += &(&slope * &(&q + &(&ws.c1 * &w)));
    g
}

/// Value of the cost estimate and its gradient in `C1`, differentiating
/// through every fixed-point iteration.
pub fn scaled_cost_gradient_unrolled(
    ws: &EticWorkspace,
    first: &TwoCol,
    second: &TwoCol,
    cfg: &EticConfig,
) -> Result<(f64, Array2<f64>)> {
    let n = ws.len();
    let k2 = &ws.k2;
    let k1t = ws.k1.t().to_owned();
    let mut ops = OpCount::default();

    // forward, keeping every iterate
    let mut vs: Vec<TwoCol> = vec![vec![[1.0; 2]; n]];
    let mut us: Vec<TwoCol> = Vec::new();
    let mut ds: Vec<TwoCol> = Vec::new();
    let mut es: Vec<TwoCol> = Vec::new();
    let mut prev_u: TwoCol = vec![[1.0; 2]; n];
    let mut d = apply_kernel(&ws.k1, &vs[0], k2, &mut ops);
    for iteration in 1..=cfg.max_iters {
        let u: TwoCol = first
            .iter()
            .zip(&d)
            .map(|(a, d)| [a[0] / d[0], a[1] / d[1]])
            .collect();
        let e = apply_kernel(&ws.k1, &u, k2, &mut ops);
        let v: TwoCol = second
            .iter()
            .zip(&e)
            .map(|(b, e)| [b[0] / e[0], b[1] / e[1]])
            .collect();
        if u.iter().chain(&v).flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                class: None,
                detail: "non-finite scaling in unrolled pass".into(),
            });
        }
        let change = max_abs_diff(&u, &prev_u);
        prev_u = u.clone();
        let d_next = apply_kernel(&ws.k1, &v, k2, &mut ops);
        let residual = row_residual(first, &u, &d_next);
        us.push(u);
        ds.push(std::mem::replace(&mut d, d_next));
        es.push(e);
        vs.push(v);
        if iteration == cfg.max_iters || is_converged(change, residual, cfg.tol) {
            break;
        }
    }
    let steps = us.len();
    let u_last = &us[steps - 1];
    let v_last = &vs[steps];
    let value = sinkhorn_cost_estimate(u_last, v_last, &ws.k1, k2, &ws.c1, &ws.c2);

    let kc2 = hadamard2(k2, &ws.c2);
    let kc1 = &ws.k1 * &ws.c1;
    let kc1t = kc1.t().to_owned();
    let mut scratch = OpCount::default();
    let sum2 = |p: &TwoCol, q: &TwoCol| -> TwoCol {
        p.iter()
            .zip(q)
            .map(|(a, b)| [a[0] + b[0], a[1] + b[1]])
            .collect()
    };

    // seeds from the cost estimate
    let w = bilinear(u_last, k2, v_last);
    let q = bilinear(u_last, &kc2, v_last);
    let mut c1_bar = &ws.k1 * &w;
    let mut k1_bar = &q + &(&ws.c1 * &w);
    // dS/dU = K1 V kc2^T + (K1.C1) V K2^T;  dS/dV = K1^T U kc2 + (K1.C1)^T U K2
    let kc2t = [[kc2[0][0], kc2[1][0]], [kc2[0][1], kc2[1][1]]];
    let k2t = [[k2[0][0], k2[1][0]], [k2[0][1], k2[1][1]]];
    let mut u_bar = sum2(
        &apply_kernel(&ws.k1, v_last, &kc2, &mut scratch),
        &apply_kernel(&kc1, v_last, k2, &mut scratch),
    );
    let mut v_bar = sum2(
        &apply_kernel(&k1t, u_last, &kc2t, &mut scratch),
        &apply_kernel(&kc1t, u_last, &k2t, &mut scratch),
    );

    for l in (0..steps).rev() {
        let (u, v, d, e) = (&us[l], &vs[l + 1], &ds[l], &es[l]);
        // V = B / E,  E = K1 U K2^T
        let e_bar: TwoCol = v_bar
            .iter()
            .zip(v)
            .zip(e)
            .map(|((vb, v), e)| [-vb[0] * v[0] / e[0], -vb[1] * v[1] / e[1]])
            .collect();
        k1_bar += &bilinear(&e_bar, k2, u);
        u_bar = sum2(&u_bar, &apply_kernel(&k1t, &e_bar, &k2t, &mut scratch));
        // U = A / D,  D = K1 V_prev K2^T
        let d_bar: TwoCol = u_bar
            .iter()
            .zip(u)
            .zip(d)
            .map(|((ub, u), d)| [-ub[0] * u[0] / d[0], -ub[1] * u[1] / d[1]])
            .collect();
        let v_prev = &vs[l];
        k1_bar += &bilinear(&d_bar, k2, v_prev);
        v_bar = apply_kernel(&k1t, &d_bar, &k2t, &mut scratch);
        u_bar = vec![[0.0; 2]; n];
    }
    c1_bar += &(&k1_bar * &kernel_slope(ws, cfg));
    Ok((value, c1_bar))
}

/// Chain a cost-matrix gradient through `C1[i,k] = |f_i - f_k|`.
fn chain_to_features(
    g: &Array2<f64>,
    c1: &Array2<f64>,
    features: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let (n, dim) = features.dim();
    let mut out = Array2::zeros((n, dim));
    for i in 0..n {
        for k in 0..n {
            let dist = c1[[i, k]];
            if dist == 0.0 {
                continue;
            }
            let w = (g[[i, k]] + g[[k, i]]) / dist;
            for c in 0..dim {
                out[[i, c]] += w * (features[[i, c]] - features[[k, c]]);
            }
        }
    }
    out
}

/// Criterion value and its gradient in the feature rows of one class.
///
/// With [`GradientMode::Envelope`] the scalings and `lambda1` are frozen; with
/// [`GradientMode::Unrolled`] only `lambda1` is.
pub fn etic_gradient_per_class(
    features: ArrayView2<'_, f64>,
    domains: &[Domain],
    cfg: &EticConfig,
) -> Result<(EticValue, Array2<f64>)> {
    let ws = EticWorkspace::new(features, domains, cfg)?;
    let pairs = [
        (&ws.a, &ws.b, 1.0),
        (&ws.a, &ws.a, -0.5),
        (&ws.b, &ws.b, -0.5),
    ];
    let mut costs = [0.0; 3];
    let mut iterations = [0; 3];
    let mut g = Array2::<f64>::zeros(ws.c1.raw_dim());
    for (slot, (first, second, weight)) in pairs.into_iter().enumerate() {
        let gc = match cfg.gradient {
            GradientMode::Envelope => {
                let s = sinkhorn_scaling(first, second, &ws.k1, &ws.k2, cfg)?;
                costs[slot] = sinkhorn_cost_estimate(&s.u, &s.v, &ws.k1, &ws.k2, &ws.c1, &ws.c2);
                iterations[slot] = s.iterations;
                frozen_cost_gradient(&ws, &s.u, &s.v, cfg)
            }
            GradientMode::Unrolled => {
                let (value, gc) = scaled_cost_gradient_unrolled(&ws, first, second, cfg)?;
                costs[slot] = value;
                gc
            }
        };
        g.scaled_add(weight, &gc);
    }
    let value = EticValue {
        value: costs[0] - 0.5 * costs[1] - 0.5 * costs[2],
        cross: costs[0],
        joint_self: costs[1],
        product_self: costs[2],
        iterations,
    };
    Ok((value, chain_to_features(&g, &ws.c1, features)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etic::{build_marginals, domain_cost};
    use crate::rng::RandomSource;

    fn instance(seed: u64, n: usize, d: usize) -> (Array2<f64>, Vec<Domain>) {
        let mut rng = RandomSource::new(seed);
        let f = Array2::from_shape_fn((n, d), |_| rng.normal());
        let mut flags: Vec<Domain> = (0..n)
            .map(|_| {
                if rng.uniform() < 0.5 {
                    Domain::Source
                } else {
                    Domain::Target
                }
            })
            .collect();
        flags[0] = Domain::Source;
        flags[1] = Domain::Target;
        (f, flags)
    }

    /// Cost estimate for the given features with `U`, `V` and `lambda1` fixed.
    fn frozen_value(
        f: &Array2<f64>,
        domains: &[Domain],
        lambda1: f64,
        scalings: &[(TwoCol, TwoCol); 3],
        cfg: &EticConfig,
    ) -> f64 {
        let ws = EticWorkspace::with_lambda1(f.view(), domains, lambda1, cfg).unwrap();
        let c2 = domain_cost();
        let s: Vec<f64> = scalings
            .iter()
            .map(|(u, v)| sinkhorn_cost_estimate(u, v, &ws.k1, &ws.k2, &ws.c1, &c2))
            .collect();
        s[0] - 0.5 * s[1] - 0.5 * s[2]
    }

    fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
        let scale = numeric
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()))
            .max(1e-12);
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn envelope_gradient_matches_frozen_finite_differences() {
        let cfg = EticConfig::default();
        for seed in 0..12 {
            let n = 4 + (seed as usize * 3) % 13;
            let d = 1 + seed as usize % 8;
            let (f, dom) = instance(seed, n, d);
            let ws = EticWorkspace::new(f.view(), &dom, &cfg).unwrap();
            let (a, b) = build_marginals(&dom).unwrap();
            let run = |p: &TwoCol, q: &TwoCol| {
                let s = sinkhorn_scaling(p, q, &ws.k1, &ws.k2, &cfg).unwrap();
                (s.u, s.v)
            };
            let scalings = [run(&a, &b), run(&a, &a), run(&b, &b)];
            let (_, g) = etic_gradient_per_class(f.view(), &dom, &cfg).unwrap();
            let h = 1e-5;
            let numeric = Array2::from_shape_fn(f.raw_dim(), |(i, c)| {
                let mut p = f.clone();
                p[[i, c]] += h;
                let mut m = f.clone();
                m[[i, c]] -= h;
                (frozen_value(&p, &dom, ws.lambda1, &scalings, &cfg)
                    - frozen_value(&m, &dom, ws.lambda1, &scalings, &cfg))
                    / (2.0 * h)
            });
            let err = max_rel_err(&g, &numeric);
            assert!(err <= 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        let cfg = EticConfig {
            gradient: GradientMode::Unrolled,
            tol: 0.0,
            max_iters: 30,
            ..EticConfig::default()
        };
        for seed in 0..4 {
            let (f, dom) = instance(100 + seed, 7, 3);
            let lambda1 = EticWorkspace::new(f.view(), &dom, &cfg).unwrap().lambda1;
            let (_, g) = etic_gradient_per_class(f.view(), &dom, &cfg).unwrap();
            let value = |x: &Array2<f64>| {
                let ws = EticWorkspace::with_lambda1(x.view(), &dom, lambda1, &cfg).unwrap();
                let c = |p: &TwoCol, q: &TwoCol| ws.transport_cost(p, q, &cfg).unwrap().0;
                c(&ws.a, &ws.b) - 0.5 * c(&ws.a, &ws.a) - 0.5 * c(&ws.b, &ws.b)
            };
            let h = 1e-5;
            let numeric = Array2::from_shape_fn(f.raw_dim(), |(i, c)| {
                let mut p = f.clone();
                p[[i, c]] += h;
                let mut m = f.clone();
                m[[i, c]] -= h;
                (value(&p) - value(&m)) / (2.0 * h)
            });
            let err = max_rel_err(&g, &numeric);
            assert!(err <= 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn translation_invariant() {
        let cfg = EticConfig::default();
        let (f, dom) = instance(7, 9, 3);
        let shifted = &f + &ndarray::array![2.5, -1.0, 0.25];
        let (_, g0) = etic_gradient_per_class(f.view(), &dom, &cfg).unwrap();
        let (_, g1) = etic_gradient_per_class(shifted.view(), &dom, &cfg).unwrap();
        assert!(g0.iter().zip(&g1).all(|(a, b)| (a - b).abs() <= 1e-9));
    }

    #[test]
    fn coincident_points_use_zero_subgradient() {
        let cfg = EticConfig::default();
        let f = ndarray::array![[0.0, 0.0], [0.0, 0.0], [1.0, 2.0]];
        let dom = [Domain::Source, Domain::Target, Domain::Target];
        let (_, g) = etic_gradient_per_class(f.view(), &dom, &cfg).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }
}
