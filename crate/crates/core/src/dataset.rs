//! Datasets, label distributions and task bundles.

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Tolerance for a probability vector summing to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Feature rows with optional dense class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Array2<f64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl FeatureDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(Error::InvalidDataset("dataset has no rows".into()));
        }
        if d == 0 {
            return Err(Error::InvalidDataset("feature dimension is zero".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidDataset("num_classes must be positive".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Dimension(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    n
                )));
            }
            check_labels(labels, num_classes)?;
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn labeled(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(features, Some(labels), num_classes)
    }

    pub fn unlabeled(features: Array2<f64>, num_classes: usize) -> Result<Self> {
        Self::new(features, None, num_classes)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self, what: &'static str) -> Result<&[usize]> {
        self.labels().ok_or(Error::LabelsRequired(what))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Same rows with labels dropped.
    pub fn without_labels(&self) -> FeatureDataset {
        FeatureDataset {
            features: self.features.clone(),
            labels: None,
            num_classes: self.num_classes,
        }
    }

    /// Row indices grouped by class. Requires labels.
    pub fn class_indices(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self.require_labels("grouping rows by class")?;
        Ok(group_by_class(labels, self.num_classes))
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<FeatureDataset> {
        let features = self.features.select(Axis(0), rows);
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        FeatureDataset::new(features, labels, self.num_classes)
    }
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= num_classes) {
        Some(row) => Err(Error::LabelOutOfRange {
            row,
            label: labels[row],
            num_classes,
        }),
        None => Ok(()),
    }
}

pub(crate) fn group_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

/// A probability vector over the `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no classes".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {p} is not a probability"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalise nonnegative weights onto the simplex.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(
                "weights must be nonnegative with positive sum".into(),
            ));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Classes with strictly positive mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.probs.len())
            .filter(|&j| self.probs[j] > 0.0)
            .collect()
    }

    /// `sum_i |p_i - q_i|`, which is twice the total-variation distance.
    pub fn l1_distance(&self, other: &LabelDistribution) -> Result<f64> {
        if self.probs.len() != other.probs.len() {
            return Err(Error::Dimension(format!(
                "label distributions over {} and {} classes",
                self.probs.len(),
                other.probs.len()
            )));
        }
        Ok(self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| (p - q).abs())
            .sum())
    }
}

/// Class frequencies of a labeled dataset.
pub fn empirical_label_distribution(dataset: &FeatureDataset) -> Result<LabelDistribution> {
    let labels = dataset.require_labels("the empirical label distribution")?;
    label_frequencies(labels, dataset.num_classes())
}

pub(crate) fn label_frequencies(labels: &[usize], num_classes: usize) -> Result<LabelDistribution> {
    if labels.is_empty() {
        return Err(Error::InvalidDataset("no labels to count".into()));
    }
    check_labels(labels, num_classes)?;
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    Ok(LabelDistribution {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// A partial domain adaptation problem.
///
/// Target labels, when present, are for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct PdaTask {
    pub source: FeatureDataset,
    pub target: FeatureDataset,
    pub num_classes: usize,
    pub shared_classes: Option<Vec<usize>>,
}

impl PdaTask {
    /// Check every task invariant, collecting all violations.
    pub fn validate(&self) -> Result<()> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Task(violations))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let k = self.num_classes;
        let mut out = Vec::new();
        if self.source.num_classes() != k {
            out.push(format!(
                "source declares {} classes, task declares {k}",
                self.source.num_classes()
            ));
        }
        if self.target.num_classes() != k {
            out.push(format!(
                "target declares {} classes, task declares {k}",
                self.target.num_classes()
            ));
        }
        match self.source.labels() {
            None => out.push("source labels missing".into()),
            Some(labels) => {
                let mut seen = vec![false; k];
                for &l in labels {
                    if l < k {
                        seen[l] = true;
                    }
                }
                for (j, s) in seen.iter().enumerate() {
                    if !s {
                        out.push(format!("source lacks class {j}"));
                    }
                }
            }
        }
        if self.source.dim() != self.target.dim() {
            out.push(format!(
                "feature dim mismatch (source {}, target {})",
                self.source.dim(),
                self.target.dim()
            ));
        }
        if let Some(shared) = &self.shared_classes {
            if shared.is_empty() {
                out.push("shared_classes is empty".into());
            }
            for &c in shared {
                if c >= k {
                    out.push(format!("shared class {c} outside [0, {k})"));
                }
            }
        }
        out
    }

    pub fn source_labels(&self) -> Result<&[usize]> {
        self.source.require_labels("the source domain")
    }
}
