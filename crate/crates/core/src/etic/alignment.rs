use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::gradient::etic_gradient_per_class;
use super::hsic::{hsic_gradient_per_class, hsic_per_class};
use super::{etic_per_class, Domain, EticConfig};
use crate::dataset::LabelDistribution;
use crate::error::{Error, Result};
use crate::par;

/// Which per-class dependence measure the loss sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dependence {
    Etic,
    Hsic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum SkipReason {
    ZeroWeight,
    MissingDomain { source: usize, target: usize },
    Numerical { detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub loss: f64,
    /// Per-class dependence value, `None` for skipped classes.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<(usize, SkipReason)>,
}

impl AlignmentReport {
    pub fn numerical_failures(&self) -> impl Iterator<Item = usize> + '_ {
        self.skipped
            .iter()
            .filter(|(_, r)| matches!(r, SkipReason::Numerical { .. }))
            .map(|(j, _)| *j)
    }
}

enum Outcome {
    Value(f64, Option<Array2<f64>>),
    Skip(SkipReason),
}

fn check(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    domains: &[Domain],
    p_t: &LabelDistribution,
) -> Result<()> {
    let n = features.nrows();
    if labels.len() != n || domains.len() != n {
        return Err(Error::Dimension(format!(
            "{n} feature rows, {} labels, {} domain flags",
            labels.len(),
            domains.len()
        )));
    }
    let k = p_t.num_classes();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange {
            row,
            label,
            num_classes: k,
        });
    }
    Ok(())
}

fn run(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    domains: &[Domain],
    p_t: &LabelDistribution,
    cfg: &EticConfig,
    measure: Dependence,
    with_gradient: bool,
) -> Result<(AlignmentReport, Vec<(Vec<usize>, Option<Array2<f64>>)>)> {
    check(features, labels, domains, p_t)?;
    let k = p_t.num_classes();
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let outcomes = par::map_indices(k, |j| {
        if p_t.get(j) <= 0.0 {
            return Outcome::Skip(SkipReason::ZeroWeight);
        }
        let rows = &members[j];
        let doms: Vec<Domain> = rows.iter().map(|&i| domains[i]).collect();
        let source = doms.iter().filter(|d| **d == Domain::Source).count();
        let target = doms.len() - source;
        if source == 0 || target == 0 {
            return Outcome::Skip(SkipReason::MissingDomain { source, target });
        }
        let sub = features.select(Axis(0), rows);
        let result = match (measure, with_gradient) {
            (Dependence::Etic, false) => {
                etic_per_class(sub.view(), &doms, cfg).map(|v| (v.value, None))
            }
            (Dependence::Etic, true) => {
                etic_gradient_per_class(sub.view(), &doms, cfg).map(|(v, g)| (v.value, Some(g)))
            }
            (Dependence::Hsic, false) => hsic_per_class(sub.view(), &doms).map(|v| (v, None)),
            (Dependence::Hsic, true) => {
                hsic_gradient_per_class(sub.view(), &doms).map(|(v, g)| (v, Some(g)))
            }
        };
        match result {
            Ok((v, g))
                if v.is_finite() && g.as_ref().is_none_or(|g| g.iter().all(|x| x.is_finite())) =>
            {
                Outcome::Value(v, g)
            }
            Ok(_) => Outcome::Skip(SkipReason::Numerical {
                detail: "non-finite value".into(),
            }),
            Err(e) => Outcome::Skip(SkipReason::Numerical {
                detail: e.to_string(),
            }),
        }
    });
    let mut loss = 0.0;
    let mut per_class = vec![None; k];
    let mut skipped = Vec::new();
    let mut grads = Vec::new();
    for (j, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Outcome::Value(v, g) => {
                loss += p_t.get(j) * v;
                per_class[j] = Some(v);
                grads.push((members[j].clone(), g.map(|g| g * p_t.get(j))));
            }
            Outcome::Skip(reason) => skipped.push((j, reason)),
        }
    }
    Ok((
        AlignmentReport {
            loss,
            per_class,
            skipped,
        },
        grads,
    ))
}

/// `sum_j p_t[j] * T_j` over classes with positive weight and samples from
/// both domains. `labels` holds true labels on source rows and pseudo-labels
/// on target rows. Classes are evaluated in parallel and summed in index order.
pub fn alignment_loss(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    domains: &[Domain],
    p_t: &LabelDistribution,
    cfg: &EticConfig,
    measure: Dependence,
) -> Result<AlignmentReport> {
    run(features, labels, domains, p_t, cfg, measure, false).map(|(r, _)| r)
}

/// [`alignment_loss`] together with its gradient in every feature row; rows of
/// skipped classes get exactly zero.
pub fn alignment_loss_and_gradient(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    domains: &[Domain],
    p_t: &LabelDistribution,
    cfg: &EticConfig,
    measure: Dependence,
) -> Result<(AlignmentReport, Array2<f64>)> {
    let (report, grads) = run(features, labels, domains, p_t, cfg, measure, true)?;
    let mut out = Array2::zeros(features.raw_dim());
    for (rows, g) in grads {
        if let Some(g) = g {
            for (local, &row) in rows.iter().enumerate() {
                out.row_mut(row).assign(&g.row(local));
            }
        }
    }
    Ok((report, out))
}
