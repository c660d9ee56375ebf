//! Error definitions, bound terms and alignment diagnostics.

mod adistance;
mod convexity;
mod lipschitz;

pub use adistance::{class_conditional_a_distance, ADistanceReport, ClassSkip};
pub use convexity::{convexity_experiment, ConvexityCurves, ConvexityOptions};
pub use lipschitz::{estimate_lipschitz, LipschitzKind};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{empirical_label_distribution, FeatureDataset, LabelDistribution, PdaTask};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::RandomSource;
use crate::sampling::SamplingDomain;

/// Above this many same-class pairs the sampled points stand in for the pair law.
pub const MAX_ENUMERATED_PAIRS: usize = 4_000_000;

/// Misclassification rate.
pub fn model_error(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    check_pair(preds, labels, k)?;
    let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Largest per-class error over classes that occur in `labels`.
pub fn balanced_prediction_error(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    check_pair(preds, labels, k)?;
    let mut wrong = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(labels) {
        seen[l] += 1;
        wrong[l] += usize::from(p != l);
    }
    (0..k)
        .filter(|&j| seen[j] > 0)
        .map(|j| wrong[j] as f64 / seen[j] as f64)
        .reduce(f64::max)
        .ok_or_else(|| Error::Undefined("no class is represented in the labels".into()))
}

/// `sum_j p_t[j] * max_{i != j} |p_s(i|j) - p_t(i|j)|`.
pub fn conditional_error_gap(
    preds_s: &[usize],
    labels_s: &[usize],
    preds_t: &[usize],
    labels_t: &[usize],
    p_t: &LabelDistribution,
    k: usize,
) -> Result<f64> {
    check_pair(preds_s, labels_s, k)?;
    check_pair(preds_t, labels_t, k)?;
    if p_t.num_classes() != k {
        return Err(Error::Dimension(format!(
            "p_t has {} classes, expected {k}",
            p_t.num_classes()
        )));
    }
    let rows_s = confusion_rows(preds_s, labels_s, k);
    let rows_t = confusion_rows(preds_t, labels_t, k);
    gap_from_rows(&rows_s, &rows_t, p_t.probs())
}

fn gap_from_rows(
    rows_s: &[Option<Vec<f64>>],
    rows_t: &[Option<Vec<f64>>],
    p_t: &[f64],
) -> Result<f64> {
    let k = p_t.len();
    let mut total = 0.0;
    for j in 0..k {
        if p_t[j] == 0.0 {
            continue;
        }
        let (Some(rs), Some(rt)) = (&rows_s[j], &rows_t[j]) else {
            let side = if rows_s[j].is_none() {
                "source"
            } else {
                "target"
            };
            return Err(Error::Undefined(format!(
                "class {j} has target mass but no {side} samples"
            )));
        };
        let worst = (0..k)
            .filter(|&i| i != j)
            .map(|i| (rs[i] - rt[i]).abs())
            .fold(0.0, f64::max);
        total += p_t[j] * worst;
    }
    Ok(total)
}

/// Largest per-class mean Euclidean norm.
pub fn source_norm_constant(source: &FeatureDataset) -> Result<f64> {
    let classes = source.class_indices()?;
    let mut best = 0.0f64;
    for rows in classes.iter().filter(|r| !r.is_empty()) {
        let mean = rows
            .iter()
            .map(|&i| source.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / rows.len() as f64;
        best = best.max(mean);
    }
    Ok(best)
}

/// `p(pred = i | label = j)` per class; `None` for classes absent from `labels`.
fn confusion_rows(preds: &[usize], labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        counts[l][p] += 1;
    }
    counts
        .into_iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row.iter().map(|&c| c as f64 / n as f64).collect())
        })
        .collect()
}

fn check_pair(preds: &[usize], labels: &[usize], k: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Undefined("no samples".into()));
    }
    for (row, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        if p >= k || l >= k {
            return Err(Error::LabelOutOfRange {
                row,
                label: p.max(l),
                num_classes: k,
            });
        }
    }
    Ok(())
}

/// Where the Lipschitz constant in the mixing term comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LipschitzSource {
    /// Pairwise lower estimate; the inequality is reported, not asserted.
    Empirical { num_pairs: usize },
    /// The model's own upper bound.
    Certified,
    /// A caller-supplied upper bound.
    Given { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Sampling-domain error under the same-class pair law.
    pub eps_c: f64,
    /// Error on the drawn sampling-domain points.
    pub eps_c_sample: f64,
    pub eps_t: f64,
    pub term_label: f64,
    pub term_cond: f64,
    pub term_mix: f64,
    pub lipschitz_estimate: f64,
    pub lipschitz_kind: LipschitzKind,
    pub theta: f64,
    pub c_s: f64,
    pub rhs_total: f64,
    pub gap: f64,
    pub slack: f64,
    /// `true` when `eps_c` enumerated every same-class pair.
    pub exact_pair_law: bool,
    /// `true` when `lipschitz_kind` is an upper bound and `slack >= 0`.
    pub certified_holds: Option<bool>,
    pub p_c: Vec<f64>,
    pub p_t: Vec<f64>,
    pub delta_be: f64,
    pub delta_ce: f64,
}

/// Evaluate every bound term for `model` on `task` against a fixed-θ sampling domain.
pub fn bound_report<M: Classifier + ?Sized>(
    model: &M,
    task: &PdaTask,
    domain: &SamplingDomain,
    theta: f64,
    lipschitz: LipschitzSource,
    rng: &mut RandomSource,
) -> Result<BoundReport> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!(
            "theta must lie in [0, 1], got {theta}"
        )));
    }
    if let Some(&other) = domain.thetas.iter().find(|&&t| t != theta) {
        return Err(Error::Config(format!(
            "bound report needs a sampling domain drawn with fixed theta = {theta}, found ratio {other}"
        )));
    }
    let k = task.num_classes;
    let source_labels = task.source.require_labels("the bound report")?;
    let target_labels = task.target.require_labels("the bound report")?;
    let domain_labels = domain.dataset.require_labels("the bound report")?;

    let preds_s = model.predict(task.source.features().view())?;
    let preds_t = model.predict(task.target.features().view())?;
    let preds_c = model.predict(domain.dataset.features().view())?;
    let eps_t = model_error(&preds_t, target_labels, k)?;
    let eps_c_sample = model_error(&preds_c, domain_labels, k)?;

    let p_t = empirical_label_distribution(&task.target)?;
    let p_c = empirical_label_distribution(&domain.dataset)?;
    let pairs: usize = task
        .source
        .class_indices()?
        .iter()
        .map(|r| r.len() * r.len())
        .sum();
    let exact_pair_law = pairs <= MAX_ENUMERATED_PAIRS;
    let rows_c = if exact_pair_law {
        pair_law_rows(model, &task.source, theta)?
    } else {
        confusion_rows(&preds_c, domain_labels, k)
    };
    let class_err = |j: usize| rows_c[j].as_ref().map(|r| 1.0 - r[j]);
    let mut eps_c = 0.0;
    for j in 0..k {
        if p_c.get(j) > 0.0 {
            eps_c += p_c.get(j)
                * class_err(j)
                    .ok_or_else(|| Error::Undefined(format!("class {j} has no source samples")))?;
        }
    }
    let delta_be = (0..k)
        .filter(|&j| p_c.get(j) > 0.0 || p_t.get(j) > 0.0)
        .map(|j| {
            class_err(j).ok_or_else(|| Error::Undefined(format!("class {j} has no source samples")))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let delta_ce = gap_from_rows(
        &confusion_rows(&preds_s, source_labels, k),
        &confusion_rows(&preds_t, target_labels, k),
        p_t.probs(),
    )?;

    let (ell, kind) = match lipschitz {
        LipschitzSource::Empirical { num_pairs } => (
            estimate_lipschitz(model, task.source.features().view(), num_pairs, rng)?,
            LipschitzKind::EmpiricalLowerBound,
        ),
        LipschitzSource::Certified => (
            model.certified_lipschitz(),
            LipschitzKind::CertifiedUpperBound,
        ),
        LipschitzSource::Given { value } => {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::Config(format!(
                    "Lipschitz constant must be finite and nonnegative, got {value}"
                )));
            }
            (value, LipschitzKind::CertifiedUpperBound)
        }
    };
    let c_s = source_norm_constant(&task.source)?;
    let km1 = k.saturating_sub(1) as f64;
    let term_label = p_c.l1_distance(&p_t)? * delta_be;
    let term_cond = km1 * delta_ce;
    let term_mix = 2.0 * ell * km1 * (theta * (1.0 - theta)).sqrt() * c_s;
    let rhs_total = term_label + term_cond + term_mix;
    let gap = (eps_t - eps_c).abs();
    let slack = rhs_total - gap;
    Ok(BoundReport {
        eps_c,
        eps_c_sample,
        eps_t,
        term_label,
        term_cond,
        term_mix,
        lipschitz_estimate: ell,
        lipschitz_kind: kind,
        theta,
        c_s,
        rhs_total,
        gap,
        slack,
        exact_pair_law,
        certified_holds: (kind == LipschitzKind::CertifiedUpperBound).then_some(slack >= 0.0),
        p_c: p_c.probs().to_vec(),
        p_t: p_t.probs().to_vec(),
        delta_be,
        delta_ce,
    })
}

/// Confusion rows of the sampling law: every ordered same-class pair mixed at `theta`.
fn pair_law_rows<M: Classifier + ?Sized>(
    model: &M,
    source: &FeatureDataset,
    theta: f64,
) -> Result<Vec<Option<Vec<f64>>>> {
    let k = source.num_classes();
    let x = source.features();
    let mut rows = Vec::with_capacity(k);
    for (j, members) in source.class_indices()?.iter().enumerate() {
        if members.is_empty() {
            rows.push(None);
            continue;
        }
        let mut counts = vec![0usize; k];
        // one block per first index keeps memory at n_j rows
        for &a in members {
            let mut block = Array2::<f64>::zeros((members.len(), x.ncols()));
            for (r, &b) in members.iter().enumerate() {
                let mut out = block.row_mut(r);
                out.assign(&x.row(b));
                out *= 1.0 - theta;
                out.scaled_add(theta, &x.row(a));
            }
            for p in model.predict(block.view())? {
                counts[p] += 1;
            }
        }
        let n = (members.len() * members.len()) as f64;
        debug_assert!(counts.iter().sum::<usize>() as f64 == n, "class {j}");
        rows.push(Some(counts.iter().map(|&c| c as f64 / n).collect()));
    }
    Ok(rows)
}
