//! Black-box shift estimation of the label ratio `p_t(y) / p_s(y)`.
//!
//! The constrained least-squares problem
//! `min_a ||p_hat_t - M a||^2  s.t.  a >= 0, a . p_s = 1`
//! is solved in the variable `b = a * p_s`, which turns the feasible set into
//! the probability simplex. Projected gradient with step `1/L` then decreases
//! the objective monotonically.

use ndarray::Array2;

use crate::dataset::{check_labels, label_frequencies, LabelDistribution};
use crate::error::{Error, Result};
use crate::linalg::{project_simplex, symmetric_eigenvalues};

pub const DEFAULT_MAX_ITERS: usize = 5000;
pub const DEFAULT_TOL: f64 = 1e-8;
/// Estimated target mass below this is zeroed before renormalising.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// Joint plug-in estimate `M[i][j] = p(y_hat = i, y = j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    m: Array2<f64>,
}

impl ConfusionMatrix {
    /// Wrap a precomputed joint matrix. Entries must be nonnegative and sum to one.
    pub fn from_joint(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension(
                "confusion matrix must be square and nonempty".into(),
            ));
        }
        if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidDistribution(
                "negative confusion entry".into(),
            ));
        }
        let total: f64 = m.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "confusion mass {total}"
            )));
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.m
    }

    pub fn num_classes(&self) -> usize {
        self.m.nrows()
    }

    /// Column sums, i.e. the true-label marginal.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.m.ncols())
            .map(|j| self.m.column(j).sum())
            .collect()
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Dimension("no predictions".into()));
    }
    check_labels(preds, k)?;
    check_labels(labels, k)?;
    let mut m = Array2::<f64>::zeros((k, k));
    for (&p, &l) in preds.iter().zip(labels) {
        m[[p, l]] += 1.0;
    }
    m /= preds.len() as f64;
    Ok(ConfusionMatrix { m })
}

/// Frequencies of the predicted labels.
pub fn pseudo_label_marginal(preds: &[usize], k: usize) -> Result<LabelDistribution> {
    label_frequencies(preds, k)
}

/// Label-ratio vector `a`, feasible by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    a: Vec<f64>,
}

impl ImportanceWeights {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidDistribution(
                "importance weights must be nonnegative".into(),
            ));
        }
        Ok(Self { a })
    }

    pub fn values(&self) -> &[f64] {
        &self.a
    }

    pub fn get(&self, class: usize) -> f64 {
        self.a[class]
    }
}

#[derive(Debug, Clone)]
pub struct BbseEstimate {
    pub weights: ImportanceWeights,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the scaled projected-gradient step at the returned iterate.
    pub residual: f64,
    /// `||p_hat_t - M a||^2` after each iteration, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

pub fn bbse_estimate(
    m: &ConfusionMatrix,
    p_hat_t: &LabelDistribution,
    p_s: &LabelDistribution,
    max_iters: usize,
    tol: f64,
) -> Result<BbseEstimate> {
    let k = m.num_classes();
    if p_hat_t.num_classes() != k || p_s.num_classes() != k {
        return Err(Error::Dimension(format!(
            "confusion over {k} classes, p_hat_t over {}, p_s over {}",
            p_hat_t.num_classes(),
            p_s.num_classes()
        )));
    }
    if let Some(j) = p_s.probs().iter().position(|&p| p <= 0.0) {
        return Err(Error::InvalidSource(j));
    }
    for (j, (c, p)) in m.column_sums().iter().zip(p_s.probs()).enumerate() {
        if (c - p).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!(
                "confusion column {j} sums to {c}, source mass is {p}"
            )));
        }
    }

    // G = M diag(1/p_s): objective in b is ||G b - p_hat_t||^2 over the simplex
    let ps = p_s.probs();
    let mut g = m.matrix().clone();
    for j in 0..k {
        g.column_mut(j).mapv_inplace(|x| x / ps[j]);
    }
    let gtg = g.t().dot(&g);
    let lipschitz = symmetric_eigenvalues(gtg.view())
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(1e-12);
    let target = ndarray::Array1::from(p_hat_t.probs().to_vec());
    let gtp = g.t().dot(&target);

    let objective = |b: &[f64]| -> f64 {
        let bv = ndarray::ArrayView1::from(b);
        let r = g.dot(&bv) - &target;
        r.dot(&r)
    };
    // gradient of 0.5 * objective
    let step_from = |b: &[f64]| -> Vec<f64> {
        let bv = ndarray::ArrayView1::from(b);
        let grad = gtg.dot(&bv) - &gtp;
        let moved: Vec<f64> = b
            .iter()
            .zip(grad.iter())
            .map(|(x, gr)| x - gr / lipschitz)
            .collect();
        project_simplex(&moved)
    };

    let mut b = ps.to_vec(); // a = 1
    let mut trace = vec![objective(&b)];
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for it in 0..max_iters {
        let next = step_from(&b);
        residual = b
            .iter()
            .zip(&next)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if residual <= tol {
            converged = true;
            iterations = it;
            break;
        }
        b = next;
        trace.push(objective(&b));
        iterations = it + 1;
    }
    if !converged {
        residual = step_from(&b)
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        converged = residual <= tol;
    }

    let a = b.iter().zip(ps).map(|(bj, pj)| bj / pj).collect();
    Ok(BbseEstimate {
        weights: ImportanceWeights::new(a)?,
        converged,
        iterations,
        residual,
        objective_trace: trace,
    })
}

/// `p_t = p_s * a`, with entries below `floor` zeroed, renormalised.
pub fn target_label_distribution(
    p_s: &LabelDistribution,
    a: &ImportanceWeights,
    floor: f64,
) -> Result<LabelDistribution> {
    if p_s.num_classes() != a.values().len() {
        return Err(Error::Dimension(format!(
            "p_s over {} classes, weights over {}",
            p_s.num_classes(),
            a.values().len()
        )));
    }
    let raw: Vec<f64> = p_s
        .probs()
        .iter()
        .zip(a.values())
        .map(|(p, w)| p * w)
        .collect();
    let kept: Vec<f64> = raw
        .iter()
        .map(|&x| if x < floor { 0.0 } else { x })
        .collect();
    if kept.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateEstimate);
    }
    LabelDistribution::from_weights(&kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dist(p: &[f64]) -> LabelDistribution {
        LabelDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.matrix(), &array![[0.5, 0.0], [0.0, 0.5]]);
        let m = confusion_matrix(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.matrix(), &array![[0.0, 0.0], [0.5, 0.5]]);
        let m = confusion_matrix(&[0, 1, 1, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.matrix(), &array![[0.25, 0.25], [0.25, 0.25]]);
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(
            confusion_matrix(&[0], &[0, 1], 2),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            confusion_matrix(&[0, 2], &[0, 1], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn marginal_examples() {
        assert_eq!(
            pseudo_label_marginal(&[0, 0, 1, 1], 2).unwrap().probs(),
            &[0.5, 0.5]
        );
        assert_eq!(
            pseudo_label_marginal(&[2, 2, 2], 3).unwrap().probs(),
            &[0.0, 0.0, 1.0]
        );
        assert_eq!(
            pseudo_label_marginal(&[0, 1, 1, 1], 2).unwrap().probs(),
            &[0.25, 0.75]
        );
    }

    #[test]
    fn perfect_classifier_recovers_ratio() {
        let m = ConfusionMatrix::from_joint(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        let est = bbse_estimate(&m, &dist(&[0.8, 0.2]), &dist(&[0.5, 0.5]), 5000, 1e-12).unwrap();
        assert!(est.converged);
        let a = est.weights.values();
        assert!(
            (a[0] - 1.6).abs() < 1e-6 && (a[1] - 0.4).abs() < 1e-6,
            "{a:?}"
        );
        assert!((a[0] * 0.5 + a[1] * 0.5 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_shift_gives_unit_weights() {
        // consistent, imperfect predictor; p_hat_t is what it predicts on p_s
        let m = ConfusionMatrix::from_joint(array![
            [0.25, 0.05, 0.0],
            [0.05, 0.3, 0.1],
            [0.0, 0.05, 0.2]
        ])
        .unwrap();
        let p_s = dist(&m.column_sums());
        let row_sums: Vec<f64> = (0..3).map(|i| m.matrix().row(i).sum()).collect();
        let est = bbse_estimate(&m, &dist(&row_sums), &p_s, 5000, 1e-12).unwrap();
        for a in est.weights.values() {
            assert!((a - 1.0).abs() < 1e-6, "{a}");
        }
    }

    #[test]
    fn zero_source_mass_rejected() {
        let m = ConfusionMatrix::from_joint(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(
            bbse_estimate(&m, &dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]), 10, 1e-8).unwrap_err(),
            Error::InvalidSource(1)
        );
    }

    #[test]
    fn non_converged_is_still_feasible_and_monotone() {
        let m = ConfusionMatrix::from_joint(array![
            [0.3, 0.1, 0.05],
            [0.02, 0.2, 0.1],
            [0.01, 0.02, 0.2]
        ])
        .unwrap();
        let p_s = dist(&m.column_sums());
        let est = bbse_estimate(&m, &dist(&[0.9, 0.1, 0.0]), &p_s, 3, 1e-14).unwrap();
        assert!(!est.converged);
        let a = est.weights.values();
        assert!(a.iter().all(|&x| x >= 0.0));
        let dot: f64 = a.iter().zip(p_s.probs()).map(|(x, p)| x * p).sum();
        assert!((dot - 1.0).abs() < 1e-6);
        assert!(est.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn target_distribution_examples() {
        let ps = dist(&[0.5, 0.5]);
        let pt = target_label_distribution(
            &ps,
            &ImportanceWeights::new(vec![1.0, 1.0]).unwrap(),
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert_eq!(pt.probs(), ps.probs());
        let pt = target_label_distribution(
            &ps,
            &ImportanceWeights::new(vec![1.6, 0.4]).unwrap(),
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert!((pt.get(0) - 0.8).abs() < 1e-15 && (pt.get(1) - 0.2).abs() < 1e-15);
        let pt = target_label_distribution(
            &ps,
            &ImportanceWeights::new(vec![2.0, 0.0]).unwrap(),
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert_eq!(pt.probs(), &[1.0, 0.0]);
        let err = target_label_distribution(
            &ps,
            &ImportanceWeights::new(vec![1e-5, 1e-5]).unwrap(),
            DEFAULT_FLOOR,
        );
        assert_eq!(err.unwrap_err(), Error::DegenerateEstimate);
    }
}
