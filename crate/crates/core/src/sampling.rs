//! Within-class mixup sampling domain.
//!
//! Each synthetic point picks a class from the target label distribution,
//! two source points of that class (uniformly, with replacement) and a mix
//! ratio, and returns their convex combination.

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_by_class, FeatureDataset, LabelDistribution};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::RandomSource;

/// Points generated from one forked stream.
const SHARD: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ThetaMode {
    /// Fresh `Beta(alpha, alpha)` draw per point.
    Beta,
    Fixed {
        theta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Sample count; `None` means twice the source size.
    #[serde(default)]
    pub n_c: Option<usize>,
    #[serde(default = "default_theta_mode")]
    pub theta_mode: ThetaMode,
}

fn default_alpha() -> f64 {
    0.2
}

fn default_theta_mode() -> ThetaMode {
    ThetaMode::Beta
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            n_c: None,
            theta_mode: default_theta_mode(),
        }
    }
}

impl SamplingConfig {
    pub fn fixed(theta: f64) -> Self {
        Self {
            theta_mode: ThetaMode::Fixed { theta },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "sampling.alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.n_c == Some(0) {
            return Err(Error::Config("sampling.n_c must be at least 1".into()));
        }
        if let ThetaMode::Fixed { theta } = self.theta_mode {
            if !(0.0..=1.0).contains(&theta) {
                return Err(Error::Config(format!(
                    "fixed theta must lie in [0, 1], got {theta}"
                )));
            }
        }
        Ok(())
    }

    /// Number of points to draw for a source of `n_source` rows.
    pub fn sample_count(&self, n_source: usize) -> usize {
        self.n_c.unwrap_or(2 * n_source)
    }
}

/// One mix ratio.
pub fn draw_mix_ratio(cfg: &SamplingConfig, rng: &mut RandomSource) -> f64 {
    match cfg.theta_mode {
        ThetaMode::Fixed { theta } => theta,
        ThetaMode::Beta => rng.beta(cfg.alpha, cfg.alpha).clamp(0.0, 1.0),
    }
}

/// Sampled points with the source pair and ratio behind each one.
#[derive(Debug, Clone)]
pub struct SamplingDomain {
    pub dataset: FeatureDataset,
    /// Source row indices `(k, l)`; the point is `theta * x_k + (1 - theta) * x_l`.
    pub pairs: Vec<(usize, usize)>,
    pub thetas: Vec<f64>,
}

impl SamplingDomain {
    pub fn into_dataset(self) -> FeatureDataset {
        self.dataset
    }
}

/// Draw the sampling domain. Consumes one value from `rng`; shards then use
/// independent forks, so the result does not depend on thread count.
pub fn build_sampling_domain(
    source: &FeatureDataset,
    p_t: &LabelDistribution,
    cfg: &SamplingConfig,
    rng: &mut RandomSource,
) -> Result<SamplingDomain> {
    cfg.validate()?;
    let labels = source.require_labels("building the sampling domain")?;
    let k = source.num_classes();
    if p_t.num_classes() != k {
        return Err(Error::Dimension(format!(
            "label distribution over {} classes, source has {k}",
            p_t.num_classes()
        )));
    }
    let members = group_by_class(labels, k);
    if let Some(j) = (0..k).find(|&j| p_t.get(j) > 0.0 && members[j].is_empty()) {
        return Err(Error::UnsatisfiableClass(j));
    }
    let mut cumulative = Vec::with_capacity(k);
    let mut acc = 0.0;
    for j in 0..k {
        acc += p_t.get(j);
        cumulative.push(acc);
    }

    let n_c = cfg.sample_count(source.len());
    let base = RandomSource::new(rng.next_u64());
    let shards = n_c.div_ceil(SHARD);
    let drawn: Vec<Vec<(usize, usize, usize, f64)>> = par::map_indices(shards, |s| {
        let mut r = base.fork(s as u64);
        let count = SHARD.min(n_c - s * SHARD);
        (0..count)
            .map(|_| {
                let j = r.categorical(&cumulative);
                let rows = &members[j];
                let a = rows[r.index(rows.len())];
                let b = rows[r.index(rows.len())];
                (j, a, b, draw_mix_ratio(cfg, &mut r))
            })
            .collect()
    });

    let x = source.features();
    let d = source.dim();
    let mut features = Array2::zeros((n_c, d));
    let mut out_labels = Vec::with_capacity(n_c);
    let mut pairs = Vec::with_capacity(n_c);
    let mut thetas = Vec::with_capacity(n_c);
    for (i, (j, a, b, theta)) in drawn.into_iter().flatten().enumerate() {
        let mut row = features.row_mut(i);
        row.assign(&x.row(a));
        row *= theta;
        row.scaled_add(1.0 - theta, &x.row(b));
        out_labels.push(j);
        pairs.push((a, b));
        thetas.push(theta);
    }
    Ok(SamplingDomain {
        dataset: FeatureDataset::labeled(features, out_labels, k)?,
        pairs,
        thetas,
    })
}
