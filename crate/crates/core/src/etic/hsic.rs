use ndarray::{Array2, ArrayView2};

use super::Domain;
use crate::error::{Error, Result};
use crate::linalg::{median, pairwise_distances};

/// Median pairwise distance over distinct pairs, or `1` when that is zero.
fn bandwidth(dist: &Array2<f64>) -> f64 {
    let n = dist.nrows();
    let off: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |k| (i, k)))
        .map(|(i, k)| dist[[i, k]])
        .collect();
    let m = median(&off);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Gaussian kernel, doubly centred domain Gram matrix and the bandwidth.
fn parts(
    features: ArrayView2<'_, f64>,
    domains: &[Domain],
) -> Result<(Array2<f64>, Array2<f64>, f64)> {
    let n = domains.len();
    if features.nrows() != n {
        return Err(Error::Dimension(format!(
            "{} rows, {} domain flags",
            features.nrows(),
            n
        )));
    }
    let ns = domains.iter().filter(|d| **d == Domain::Source).count();
    if ns == 0 || ns == n {
        return Err(Error::DegenerateClass {
            source_count: ns,
            target_count: n - ns,
        });
    }
    let dist = pairwise_distances(features);
    let sigma = bandwidth(&dist);
    let k = dist.mapv(|r| (-r * r / (2.0 * sigma * sigma)).exp());
    let nf = n as f64;
    let frac = |d: Domain| {
        if d == Domain::Source {
            ns as f64 / nf
        } else {
            (n - ns) as f64 / nf
        }
    };
    let grand = (ns * ns + (n - ns) * (n - ns)) as f64 / (nf * nf);
    let lc = Array2::from_shape_fn((n, n), |(i, m)| {
        let same = if domains[i] == domains[m] { 1.0 } else { 0.0 };
        same - frac(domains[i]) - frac(domains[m]) + grand
    });
    Ok((k, lc, sigma))
}

/// Biased kernel independence estimate `tr(K H L H) / n^2` with a Gaussian
/// feature kernel (median-distance bandwidth) and a delta kernel on domains.
pub fn hsic_per_class(features: ArrayView2<'_, f64>, domains: &[Domain]) -> Result<f64> {
    let (k, lc, _) = parts(features, domains)?;
    let n = domains.len() as f64;
    Ok((&k * &lc).sum() / (n * n))
}

/// Value and feature gradient with the bandwidth held fixed.
pub fn hsic_gradient_per_class(
    features: ArrayView2<'_, f64>,
    domains: &[Domain],
) -> Result<(f64, Array2<f64>)> {
    let (k, lc, sigma) = parts(features, domains)?;
    let n = domains.len();
    let nf = n as f64;
    let value = (&k * &lc).sum() / (nf * nf);
    let mut grad = Array2::zeros(features.raw_dim());
    for i in 0..n {
        for m in 0..n {
            let w = -2.0 / (nf * nf) * lc[[i, m]] * k[[i, m]] / (sigma * sigma);
            if w == 0.0 {
                continue;
            }
            for c in 0..features.ncols() {
                grad[[i, c]] += w * (features[[i, c]] - features[[m, c]]);
            }
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn data() -> (Array2<f64>, Vec<Domain>) {
        let f = array![
            [0.0, 0.1],
            [1.0, 0.3],
            [0.2, 1.5],
            [1.1, 1.0],
            [-0.4, 0.7],
            [0.5, -0.5]
        ];
        let d = vec![
            Domain::Source,
            Domain::Target,
            Domain::Source,
            Domain::Target,
            Domain::Target,
            Domain::Source,
        ];
        (f, d)
    }

    #[test]
    fn matches_trace_formula() {
        let (f, d) = data();
        let n = 6;
        let dist = pairwise_distances(f.view());
        let sigma = bandwidth(&dist);
        let k = dist.mapv(|r| (-r * r / (2.0 * sigma * sigma)).exp());
        let l = Array2::from_shape_fn((n, n), |(i, m)| if d[i] == d[m] { 1.0 } else { 0.0 });
        let h = Array2::from_shape_fn(
            (n, n),
            |(i, m)| if i == m { 1.0 } else { 0.0 } - 1.0 / n as f64,
        );
        let expected = k.dot(&h).dot(&l).dot(&h).diag().sum() / 36.0;
        assert!((hsic_per_class(f.view(), &d).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn nonnegative_and_zero_for_identical_features() {
        let (f, d) = data();
        assert!(hsic_per_class(f.view(), &d).unwrap() >= -1e-15);
        let same = Array2::from_elem((6, 2), 0.7);
        assert!(hsic_per_class(same.view(), &d).unwrap().abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_difference_with_fixed_bandwidth() {
        let (f, d) = data();
        let (_, g) = hsic_gradient_per_class(f.view(), &d).unwrap();
        let sigma = bandwidth(&pairwise_distances(f.view()));
        let eval = |x: &Array2<f64>| {
            let (_, lc, _) = parts(x.view(), &d).unwrap();
            let dist = pairwise_distances(x.view());
            let k = dist.mapv(|r| (-r * r / (2.0 * sigma * sigma)).exp());
            (&k * &lc).sum() / 36.0
        };
        let h = 1e-6;
        for i in 0..6 {
            for c in 0..2 {
                let mut p = f.clone();
                p[[i, c]] += h;
                let mut m = f.clone();
                m[[i, c]] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                assert!(
                    (fd - g[[i, c]]).abs() < 1e-7,
                    "{i},{c}: {fd} vs {}",
                    g[[i, c]]
                );
            }
        }
    }
}
