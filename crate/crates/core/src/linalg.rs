//! Small dense kernels with operation counting.
//!
//! The count is the number of scalar multiply-accumulate steps plus
//! element-wise divisions a kernel performs, the unit used when comparing
//! the two Sinkhorn formulations.

use ndarray::{Array2, ArrayView2};

use crate::par;

/// Running total of counted scalar operations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCount(pub u64);

impl OpCount {
    pub fn add(&mut self, n: u64) {
        self.0 += n;
    }
}

/// Dense `a * b`, rows computed in parallel.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, ops: &mut OpCount) -> Array2<f64> {
    let (n, inner) = a.dim();
    assert_eq!(inner, b.nrows(), "matmul inner dimension");
    let m = b.ncols();
    let b = b.as_standard_layout();
    let b_slice = b.as_slice().expect("standard layout");
    let a = a.as_standard_layout();
    let a_slice = a.as_slice().expect("standard layout");
    let rows = par::map_indices(n, |i| {
        let mut out = vec![0.0; m];
        let arow = &a_slice[i * inner..(i + 1) * inner];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b_slice[k * m..(k + 1) * m];
            for (o, &bkj) in out.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
        out
    });
    ops.add((n * inner * m) as u64);
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).expect("shape")
}

/// Dense `a * b^T`.
pub fn matmul_bt(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, ops: &mut OpCount) -> Array2<f64> {
    let (n, inner) = a.dim();
    assert_eq!(inner, b.ncols(), "matmul_bt inner dimension");
    let m = b.nrows();
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a_slice = a.as_slice().expect("standard layout");
    let b_slice = b.as_slice().expect("standard layout");
    let rows = par::map_indices(n, |i| {
        let arow = &a_slice[i * inner..(i + 1) * inner];
        (0..m)
            .map(|j| {
                let brow = &b_slice[j * inner..(j + 1) * inner];
                arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect::<Vec<_>>()
    });
    ops.add((n * inner * m) as u64);
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).expect("shape")
}

/// Euclidean (not squared) distances between all pairs of rows.
pub fn pairwise_distances(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let x = x.as_standard_layout();
    let d = x.ncols();
    let xs = x.as_slice().expect("standard layout");
    let rows = par::map_indices(n, |i| {
        let xi = &xs[i * d..(i + 1) * d];
        (0..n)
            .map(|k| {
                if k == i {
                    return 0.0;
                }
                let xk = &xs[k * d..(k + 1) * d];
                xi.iter()
                    .zip(xk)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect::<Vec<_>>()
    });
    Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("shape")
}

/// Median of a slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: ArrayView2<'_, f64>, iters: usize) -> f64 {
    let cols = w.ncols();
    if cols == 0 || w.nrows() == 0 {
        return 0.0;
    }
    // deterministic, non-degenerate start
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let wv: Vec<f64> = w
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        sigma = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut next = vec![0.0; cols];
        for (r, &s) in w.rows().into_iter().zip(&wv) {
            for (n, &a) in next.iter_mut().zip(r.iter()) {
                *n += a * s;
            }
        }
        v = next;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_ndarray_dot() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![[1.0, 0.5], [0.0, -1.0], [2.0, 2.0]];
        let mut ops = OpCount::default();
        let c = matmul(a.view(), b.view(), &mut ops);
        assert_eq!(c, a.dot(&b));
        assert_eq!(ops.0, 2 * 3 * 2);
        let bt = b.t().to_owned();
        let c2 = matmul_bt(a.view(), bt.view(), &mut ops);
        assert_eq!(c2, a.dot(&b));
    }

    #[test]
    fn distances_345() {
        let x = array![[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(pairwise_distances(x.view()), array![[0.0, 5.0], [5.0, 0.0]]);
    }

    #[test]
    fn spectral_norm_of_diag() {
        let w = array![[3.0, 0.0], [0.0, -5.0], [0.0, 0.0]];
        assert!((spectral_norm(w.view(), 200) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "square matrix required");
    let mut m = a.to_owned();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

#[cfg(test)]
mod more_tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn jacobi_known_spectrum() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        let ev = symmetric_eigenvalues(a.view());
        for (e, want) in ev.iter().zip([1.0, 3.0, 5.0]) {
            assert!((e - want).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        let p = project_simplex(&[2.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0]);
        let p = project_simplex(&[1.0, 1.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex_and_is_closest(v in prop::collection::vec(-3.0f64..3.0, 1..8)) {
            let p = project_simplex(&v);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            // optimality: <v - p, q - p> <= 0 for the simplex vertices q
            for k in 0..v.len() {
                let inner: f64 = (0..v.len())
                    .map(|i| (v[i] - p[i]) * (if i == k { 1.0 } else { 0.0 } - p[i]))
                    .sum();
                prop_assert!(inner <= 1e-9);
            }
        }
    }
}
