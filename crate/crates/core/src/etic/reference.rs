//! Square tensor formulation, kept as the equivalence oracle.
//!
//! Every domain sample is its own atom, so the scaling matrices are `n x n`
//! and one iteration costs `4n^3 + 2n^2` operations.

use ndarray::{Array2, ArrayView2};

use super::sinkhorn::{is_converged, max_abs_diff};
use super::workspace::{domain_cost, lambda1_for, pairwise_cost};
use super::{Domain, EticConfig};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_bt, OpCount};

#[derive(Debug, Clone)]
pub struct ReferenceValue {
    pub value: f64,
    pub cross: f64,
    pub joint_self: f64,
    pub product_self: f64,
    pub iterations: [usize; 3],
    /// Counted operations of the cross-term scaling run.
    pub cross_ops: OpCount,
}

pub fn reference_iteration_op_count(n: usize) -> u64 {
    let n = n as u64;
    4 * n * n * n + 2 * n * n
}

/// The square formulation with kernels and marginals built once.
pub struct ReferenceProblem {
    c1: Array2<f64>,
    c2: Array2<f64>,
    k1: Array2<f64>,
    k2: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    domains: Vec<Domain>,
    counts: [f64; 2],
}

impl ReferenceProblem {
    pub fn new(
        features: ArrayView2<'_, f64>,
        domains: &[Domain],
        cfg: &EticConfig,
    ) -> Result<Self> {
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
        let c1 = pairwise_cost(features);
        let lambda1 = lambda1_for(&c1, cfg.lambda1_scale);
        let k1 = c1.mapv(|c| (-c / (lambda1 * cfg.epsilon)).exp().max(cfg.kernel_floor));
        let dc = domain_cost();
        let c2 = Array2::from_shape_fn((n, n), |(p, q)| {
            dc[domains[p].column()][domains[q].column()]
        });
        let k2 = c2.mapv(|c| {
            (-c / (cfg.lambda2 * cfg.epsilon))
                .exp()
                .max(cfg.kernel_floor)
        });
        let nf = n as f64;
        let a = Array2::from_shape_fn((n, n), |(i, m)| if i == m { 1.0 / nf } else { 0.0 });
        let b = Array2::from_elem((n, n), 1.0 / (nf * nf));
        let counts = [ns as f64, (n - ns) as f64];
        Ok(Self {
            c1,
            c2,
            k1,
            k2,
            a,
            b,
            domains: domains.to_vec(),
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Run the joint-to-product fixed point; returns iterations and counted ops.
    pub fn cross_scaling(&self, cfg: &EticConfig) -> Result<(usize, OpCount)> {
        let (_, _, iterations, ops) = self.scale(&self.a, &self.b, cfg)?;
        Ok((iterations, ops))
    }

    fn apply(&self, m: &Array2<f64>, ops: &mut OpCount) -> Array2<f64> {
        let t = matmul(self.k1.view(), m.view(), ops);
        matmul_bt(t.view(), self.k2.view(), ops)
    }

    /// Sum the columns of an `n x n` scaling over the atoms of each domain.
    fn aggregate(&self, m: &Array2<f64>) -> Vec<[f64; 2]> {
        m.rows()
            .into_iter()
            .map(|row| {
                let mut out = [0.0; 2];
                for (x, d) in row.iter().zip(&self.domains) {
                    out[d.column()] += x;
                }
                out
            })
            .collect()
    }

    /// Scalings after the fixed-point loop, plus iterations and counted ops.
    ///
    /// `V` starts at `1 / n_b` on each atom of domain `b`, which aggregates to
    /// the all-ones start of the two-column path; convergence is judged on the
    /// aggregated `U` and residual, so both formulations stop at the same
    /// iteration.
    fn scale(
        &self,
        first: &Array2<f64>,
        second: &Array2<f64>,
        cfg: &EticConfig,
    ) -> Result<(Array2<f64>, Array2<f64>, usize, OpCount)> {
        let n = first.nrows();
        let mut ops = OpCount::default();
        let mut u_agg = vec![[1.0; 2]; n];
        let mut u = Array2::<f64>::ones((n, n));
        let mut v =
            Array2::from_shape_fn((n, n), |(_, m)| 1.0 / self.counts[self.domains[m].column()]);
        let mut d = self.apply(&v, &mut ops);
        let mut iterations = 0;
        for _ in 0..cfg.max_iters {
            iterations += 1;
            let next_u = first / &d;
            ops.add((n * n) as u64);
            v = second / &self.apply(&next_u, &mut ops);
            ops.add((n * n) as u64);
            if next_u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
                return Err(Error::Numerical {
                    class: None,
                    detail: format!("non-finite reference scaling at iteration {iterations}"),
                });
            }
            let next_agg = self.aggregate(&next_u);
            let change = max_abs_diff(&next_agg, &u_agg);
            u = next_u;
            u_agg = next_agg;
            if iterations == cfg.max_iters {
                break;
            }
            d = self.apply(&v, &mut ops);
            let residual = self
                .aggregate(&(first - &(&u * &d)))
                .iter()
                .flatten()
                .fold(0.0f64, |m, x| m.max(x.abs()));
            if is_converged(change, residual, cfg.tol) {
                break;
            }
        }
        Ok((u, v, iterations, ops))
    }

    fn cost(
        &self,
        first: &Array2<f64>,
        second: &Array2<f64>,
        cfg: &EticConfig,
    ) -> Result<(f64, usize, OpCount)> {
        let (u, v, iterations, ops) = self.scale(first, second, cfg)?;
        let mut scratch = OpCount::default();
        let kc2 = &self.k2 * &self.c2;
        let kc1 = &self.k1 * &self.c1;
        let t1 = matmul_bt(
            matmul(self.k1.view(), v.view(), &mut scratch).view(),
            kc2.view(),
            &mut scratch,
        );
        let t2 = matmul_bt(
            matmul(kc1.view(), v.view(), &mut scratch).view(),
            self.k2.view(),
            &mut scratch,
        );
        let value = (&u * &t1).sum() + (&u * &t2).sum();
        Ok((value, iterations, ops))
    }
}

/// Joint-to-product scalings of the square formulation, summed over the
/// atoms of each domain so they are comparable with the two-column path.
pub fn reference_scaling_aggregated(
    features: ArrayView2<'_, f64>,
    domains: &[Domain],
    cfg: &EticConfig,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>, usize)> {
    let p = ReferenceProblem::new(features, domains, cfg)?;
    let (u, v, iterations, _) = p.scale(&p.a, &p.b, cfg)?;
    Ok((p.aggregate(&u), p.aggregate(&v), iterations))
}

/// Criterion for one class via the square formulation.
pub fn tensor_sinkhorn_reference(
    features: ArrayView2<'_, f64>,
    domains: &[Domain],
    cfg: &EticConfig,
) -> Result<ReferenceValue> {
    let p = ReferenceProblem::new(features, domains, cfg)?;
    let (cross, i0, cross_ops) = p.cost(&p.a, &p.b, cfg)?;
    let (joint_self, i1, _) = p.cost(&p.a, &p.a, cfg)?;
    let (product_self, i2, _) = p.cost(&p.b, &p.b, cfg)?;
    Ok(ReferenceValue {
        value: cross - 0.5 * joint_self - 0.5 * product_self,
        cross,
        joint_self,
        product_self,
        iterations: [i0, i1, i2],
        cross_ops,
    })
}
