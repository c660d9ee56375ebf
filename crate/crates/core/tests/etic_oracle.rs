use ndarray::Array2;
use pda_core::etic::{
    build_marginals, etic_per_class, fixed_point_residual, hsic_per_class,
    reference_scaling_aggregated, sinkhorn_scaling, tensor_sinkhorn_reference, Domain, EticConfig,
    EticWorkspace,
};
use pda_core::RandomSource;

fn instance(rng: &mut RandomSource, n: usize, d: usize) -> (Array2<f64>, Vec<Domain>) {
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
    flags[n - 1] = Domain::Target;
    (f, flags)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn fast_path_agrees_with_square_formulation() {
    let cfg = EticConfig::default();
    let mut rng = RandomSource::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 4 + rng.index(61);
        let d = 1 + rng.index(6);
        let (f, dom) = instance(&mut rng, n, d);
        let fast = etic_per_class(f.view(), &dom, &cfg).unwrap();
        let slow = tensor_sinkhorn_reference(f.view(), &dom, &cfg).unwrap();
        for (a, b) in [
            (fast.cross, slow.cross),
            (fast.joint_self, slow.joint_self),
            (fast.product_self, slow.product_self),
        ] {
            worst = worst.max(rel(a, b));
        }
        assert_eq!(fast.iterations, slow.iterations);
        let scale = fast.cross.abs().max(slow.cross.abs());
        assert!(
            (fast.value - slow.value).abs() <= 1e-8 * scale,
            "n={n}: {} vs {}",
            fast.value,
            slow.value
        );
    }
    assert!(worst <= 1e-8, "worst relative cost difference {worst}");
}

#[test]
fn two_point_scalings_match_aggregated_reference() {
    let cfg = EticConfig::default();
    let f = ndarray::array![[0.0, 1.0], [2.0, -0.5]];
    let dom = [Domain::Source, Domain::Target];
    let ws = EticWorkspace::new(f.view(), &dom, &cfg).unwrap();
    let s = sinkhorn_scaling(&ws.a, &ws.b, &ws.k1, &ws.k2, &cfg).unwrap();
    let (u, v, iters) = reference_scaling_aggregated(f.view(), &dom, &cfg).unwrap();
    assert_eq!(iters, s.iterations);
    for i in 0..2 {
        for c in 0..2 {
            assert!((s.u[i][c] - u[i][c]).abs() <= 1e-8);
            assert!((s.v[i][c] - v[i][c]).abs() <= 1e-8);
        }
    }
}

#[test]
fn first_iteration_is_exact() {
    let cfg = EticConfig {
        max_iters: 1,
        ..EticConfig::default()
    };
    let f = ndarray::array![[0.0], [1.0], [3.0]];
    let dom = [Domain::Source, Domain::Target, Domain::Source];
    let ws = EticWorkspace::new(f.view(), &dom, &cfg).unwrap();
    let s = sinkhorn_scaling(&ws.a, &ws.b, &ws.k1, &ws.k2, &cfg).unwrap();
    for i in 0..3 {
        let row: f64 = ws.k1.row(i).sum();
        for c in 0..2 {
            let d = row * (ws.k2[c][0] + ws.k2[c][1]);
            assert_eq!(s.u[i][c], ws.a[i][c] / d);
        }
    }
}

#[test]
fn residual_bound_on_random_instances() {
    let cfg = EticConfig {
        max_iters: 100_000,
        ..EticConfig::default()
    };
    let mut rng = RandomSource::new(77);
    for _ in 0..50 {
        let n = 4 + rng.index(61);
        let (f, dom) = instance(&mut rng, n, 3);
        let ws = EticWorkspace::new(f.view(), &dom, &cfg).unwrap();
        let s = sinkhorn_scaling(&ws.a, &ws.b, &ws.k1, &ws.k2, &cfg).unwrap();
        assert!(s.converged, "n={n}");
        let r = fixed_point_residual(&ws.a, &s.u, &s.v, &ws.k1, &ws.k2);
        assert!(
            r <= 10.0 * cfg.tol,
            "n={n} iters={} residual {r}",
            s.iterations
        );
    }
}

#[test]
fn independence_gives_near_zero() {
    let cfg = EticConfig::default();
    let mut rng = RandomSource::new(5);
    for m in [3, 8, 20] {
        let half = Array2::from_shape_fn((m, 4), |_| rng.normal());
        let f = ndarray::concatenate(ndarray::Axis(0), &[half.view(), half.view()]).unwrap();
        let dom: Vec<Domain> = (0..2 * m)
            .map(|i| {
                if i < m {
                    Domain::Source
                } else {
                    Domain::Target
                }
            })
            .collect();
        let t = etic_per_class(f.view(), &dom, &cfg).unwrap().value;
        assert!(t <= 1e-4, "m={m}: {t}");
        let r = tensor_sinkhorn_reference(f.view(), &dom, &cfg)
            .unwrap()
            .value;
        assert!(r <= 1e-4);
        assert!(hsic_per_class(f.view(), &dom).unwrap() <= 1e-4);
    }
}

#[test]
fn separated_clusters_are_dependent() {
    let cfg = EticConfig::default();
    let mut rng = RandomSource::new(9);
    let n = 40;
    let f = Array2::from_shape_fn(
        (n, 2),
        |(i, _)| if i < n / 2 { 0.0 } else { 10.0 } + 0.3 * rng.normal(),
    );
    let dom: Vec<Domain> = (0..n)
        .map(|i| {
            if i < n / 2 {
                Domain::Source
            } else {
                Domain::Target
            }
        })
        .collect();
    let t = etic_per_class(f.view(), &dom, &cfg).unwrap().value;
    assert!(t > 0.1, "{t}");
}

#[test]
fn column_relabeling_and_permutation_invariance() {
    let cfg = EticConfig::default();
    let mut rng = RandomSource::new(31);
    for _ in 0..10 {
        let n = 5 + rng.index(30);
        let (f, dom) = instance(&mut rng, n, 3);
        let base = etic_per_class(f.view(), &dom, &cfg).unwrap().value;
        let swapped: Vec<Domain> = dom
            .iter()
            .map(|d| {
                if *d == Domain::Source {
                    Domain::Target
                } else {
                    Domain::Source
                }
            })
            .collect();
        let t_swap = etic_per_class(f.view(), &swapped, &cfg).unwrap().value;
        assert!((base - t_swap).abs() <= 1e-10 * base.abs().max(1.0));
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let pf = f.select(ndarray::Axis(0), &order);
        let pd: Vec<Domain> = order.iter().map(|&i| dom[i]).collect();
        let t_perm = etic_per_class(pf.view(), &pd, &cfg).unwrap().value;
        assert!((base - t_perm).abs() <= 1e-10, "{base} vs {t_perm}");
    }
}

#[test]
fn debiased_value_is_nonnegative_in_practice() {
    let cfg = EticConfig::default();
    let mut rng = RandomSource::new(404);
    for _ in 0..100 {
        let n = 2 + rng.index(63);
        let d = 1 + rng.index(5);
        let (f, dom) = instance(&mut rng, n, d);
        let t = etic_per_class(f.view(), &dom, &cfg).unwrap().value;
        assert!(t >= -1e-6, "n={n}: {t}");
    }
}

#[test]
fn zero_costs_give_zero() {
    let cfg = EticConfig::default();
    let f = Array2::zeros((4, 2));
    let dom = [
        Domain::Source,
        Domain::Target,
        Domain::Source,
        Domain::Target,
    ];
    let ws = EticWorkspace::new(f.view(), &dom, &cfg).unwrap();
    let (a, b) = build_marginals(&dom).unwrap();
    let s = sinkhorn_scaling(&a, &b, &ws.k1, &ws.k2, &cfg).unwrap();
    let zero2 = [[0.0; 2]; 2];
    let v = pda_core::etic::sinkhorn_cost_estimate(&s.u, &s.v, &ws.k1, &ws.k2, &ws.c1, &zero2);
    assert_eq!(v, 0.0);
}
