use ndarray::{Array2, ArrayView2};

use super::sinkhorn::{sinkhorn_cost_estimate, sinkhorn_scaling, TwoCol};
use super::{Domain, EticConfig};
use crate::error::{Error, Result};
use crate::linalg::{median, pairwise_distances};

/// Plain Euclidean distances between feature rows.
pub fn pairwise_cost(features: ArrayView2<'_, f64>) -> Array2<f64> {
    pairwise_distances(features)
}

/// Distances between the domain atoms `z_s = [0 1]` and `z_t = [1 0]`.
pub fn domain_cost() -> [[f64; 2]; 2] {
    let s = std::f64::consts::SQRT_2;
    [[0.0, s], [s, 0.0]]
}

/// Joint marginal `A` (row `i` is one-hot of its domain, divided by `n`) and
/// product marginal `B` (every row `[n_s, n_t] / n^2`). Both have total mass one.
pub fn build_marginals(domains: &[Domain]) -> Result<(TwoCol, TwoCol)> {
    let n = domains.len();
    let ns = domains.iter().filter(|d| **d == Domain::Source).count();
    let nt = n - ns;
    if ns == 0 || nt == 0 {
        return Err(Error::DegenerateClass {
            source_count: ns,
            target_count: nt,
        });
    }
    let nf = n as f64;
    let a = domains
        .iter()
        .map(|d| {
            let mut row = [0.0; 2];
            row[d.column()] = 1.0 / nf;
            row
        })
        .collect();
    let brow = [ns as f64 / (nf * nf), nt as f64 / (nf * nf)];
    Ok((a, vec![brow; n]))
}

/// `scale * median(C1)` over all entries of the cost matrix.
///
/// Falls back to the mean positive cost when more than half the entries are
/// zero, and to `1` for an all-zero matrix.
pub fn lambda1_for(c1: &Array2<f64>, scale: f64) -> f64 {
    let values = c1
        .as_slice()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| c1.iter().copied().collect());
    let m = median(&values);
    if m > 0.0 {
        return scale * m;
    }
    let positive: Vec<f64> = values.into_iter().filter(|&x| x > 0.0).collect();
    if positive.is_empty() {
        1.0
    } else {
        scale * positive.iter().sum::<f64>() / positive.len() as f64
    }
}

/// Cost, kernel and marginal matrices for one class.
#[derive(Debug, Clone)]
pub struct EticWorkspace {
    pub c1: Array2<f64>,
    pub c2: [[f64; 2]; 2],
    pub k1: Array2<f64>,
    pub k2: [[f64; 2]; 2],
    pub a: TwoCol,
    pub b: TwoCol,
    pub lambda1: f64,
    pub n_source: usize,
    pub n_target: usize,
}

impl EticWorkspace {
    pub fn new(
        features: ArrayView2<'_, f64>,
        domains: &[Domain],
        cfg: &EticConfig,
    ) -> Result<Self> {
        if features.nrows() != domains.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows, {} domain flags",
                features.nrows(),
                domains.len()
            )));
        }
        let (a, b) = build_marginals(domains)?;
        let c1 = pairwise_cost(features);
        let lambda1 = lambda1_for(&c1, cfg.lambda1_scale);
        Ok(Self::from_parts(c1, lambda1, a, b, domains, cfg))
    }

    /// Workspace with a caller-chosen feature bandwidth.
    pub fn with_lambda1(
        features: ArrayView2<'_, f64>,
        domains: &[Domain],
        lambda1: f64,
        cfg: &EticConfig,
    ) -> Result<Self> {
        let (a, b) = build_marginals(domains)?;
        let c1 = pairwise_cost(features);
        Ok(Self::from_parts(c1, lambda1, a, b, domains, cfg))
    }

    fn from_parts(
        c1: Array2<f64>,
        lambda1: f64,
        a: TwoCol,
        b: TwoCol,
        domains: &[Domain],
        cfg: &EticConfig,
    ) -> Self {
        let floor = cfg.kernel_floor;
        let k1 = c1.mapv(|c| (-c / (lambda1 * cfg.epsilon)).exp().max(floor));
        let c2 = domain_cost();
        let mut k2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                k2[i][j] = (-c2[i][j] / (cfg.lambda2 * cfg.epsilon)).exp().max(floor);
            }
        }
        let n_source = domains.iter().filter(|d| **d == Domain::Source).count();
        Self {
            c1,
            c2,
            k1,
            k2,
            a,
            b,
            lambda1,
            n_source,
            n_target: domains.len() - n_source,
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Scale between two marginals and return the transport-cost estimate and
    /// the iteration count.
    pub fn transport_cost(
        &self,
        first: &TwoCol,
        second: &TwoCol,
        cfg: &EticConfig,
    ) -> Result<(f64, usize)> {
        let s = sinkhorn_scaling(first, second, &self.k1, &self.k2, cfg)?;
        let cost = sinkhorn_cost_estimate(&s.u, &s.v, &self.k1, &self.k2, &self.c1, &self.c2);
        Ok((cost, s.iterations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn domain_cost_is_sqrt2() {
        let c = domain_cost();
        assert_eq!(c[0][0], 0.0);
        assert_eq!(c[1][1], 0.0);
        assert_eq!(c[0][1], c[1][0]);
        assert!((c[0][1] - 1.41421356).abs() < 1e-8);
    }

    #[test]
    fn marginals_two_points() {
        let (a, b) = build_marginals(&[Domain::Source, Domain::Target]).unwrap();
        assert_eq!(a, vec![[0.5, 0.0], [0.0, 0.5]]);
        assert_eq!(b, vec![[0.25, 0.25], [0.25, 0.25]]);
    }

    #[test]
    fn marginals_three_points() {
        let (a, b) = build_marginals(&[Domain::Source, Domain::Source, Domain::Target]).unwrap();
        for row in &b {
            assert!((row[0] - 2.0 / 9.0).abs() < 1e-15 && (row[1] - 1.0 / 9.0).abs() < 1e-15);
        }
        let sa: f64 = a.iter().flatten().sum();
        let sb: f64 = b.iter().flatten().sum();
        assert!((sa - 1.0).abs() < 1e-12 && (sb - 1.0).abs() < 1e-12);
        for (row, d) in a.iter().zip([0, 0, 1]) {
            assert_eq!(row.iter().filter(|x| **x != 0.0).count(), 1);
            assert!((row[d] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_domain_is_degenerate() {
        assert!(matches!(
            build_marginals(&[Domain::Source, Domain::Source]),
            Err(Error::DegenerateClass {
                source_count: 2,
                target_count: 0
            })
        ));
    }

    #[test]
    fn pairwise_cost_examples() {
        assert_eq!(
            pairwise_cost(array![[0.0, 0.0], [3.0, 4.0]].view()),
            array![[0.0, 5.0], [5.0, 0.0]]
        );
        assert_eq!(
            pairwise_cost(array![[1.0, 2.0], [1.0, 2.0]].view()),
            Array2::<f64>::zeros((2, 2))
        );
        let c = pairwise_cost(array![[0.3, -1.0], [2.0, 0.5], [-0.7, 0.9]].view());
        assert!(c[[0, 2]] <= c[[0, 1]] + c[[1, 2]]);
    }

    #[test]
    fn workspace_invariants() {
        let f = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
        let d = [
            Domain::Source,
            Domain::Target,
            Domain::Source,
            Domain::Target,
        ];
        let ws = EticWorkspace::new(f.view(), &d, &EticConfig::default()).unwrap();
        assert!(ws.k1.iter().all(|&k| k > 0.0 && k <= 1.0));
        assert!(ws.k2.iter().flatten().all(|&k| k > 0.0 && k <= 1.0));
        for i in 0..4 {
            assert_eq!(ws.c1[[i, i]], 0.0);
            for j in 0..4 {
                assert_eq!(ws.c1[[i, j]], ws.c1[[j, i]]);
            }
        }
        assert_eq!((ws.n_source, ws.n_target), (2, 2));
    }
}
