use serde::{Deserialize, Serialize};

use crate::dataset::empirical_label_distribution;
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::synthetic::{generate_convex_study, ConvexStudyConfig};

/// Probability floor inside the training loss.
const LOSS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvexityOptions {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ConvexityOptions {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 10,
        }
    }
}

/// Per-epoch errors on the source and on its same-class mixing law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityCurves {
    pub theta: f64,
    /// Hard error of `clamp(relu(v.x + c), 0, 1) > 1/2`.
    pub eps_source: Vec<f64>,
    pub eps_sampling: Vec<f64>,
    /// Expected error of the affine output `v.x + c` read as `p(y = 1)`.
    pub linear_source: Vec<f64>,
    pub linear_sampling: Vec<f64>,
}

impl ConvexityCurves {
    pub fn mean_gap(&self) -> f64 {
        let n = self.eps_source.len().max(1) as f64;
        self.eps_source
            .iter()
            .zip(&self.eps_sampling)
            .map(|(s, c)| s - c)
            .sum::<f64>()
            / n
    }
}

/// Train the scalar model `clamp(relu(v.x + c), 0, 1)` on half of the
/// study data with cross-entropy, recording errors after every epoch.
///
/// The rectifier and clamp have zero derivative where they saturate; the
/// update passes the loss derivative straight through them so that
/// saturated points still move the boundary.
pub fn convexity_experiment(
    cfg: &ConvexStudyConfig,
    theta: f64,
    epochs: usize,
    opts: &ConvexityOptions,
) -> Result<ConvexityCurves> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!(
            "theta must lie in (0, 1), got {theta}"
        )));
    }
    if !(opts.lr > 0.0) || opts.batch_size == 0 {
        return Err(Error::Config("lr and batch_size must be positive".into()));
    }
    let study = generate_convex_study(cfg)?;
    let data = &study.data;
    let labels = data.require_labels("the convexity study")?;
    let x = data.features();
    let n = data.len();
    let mut rng = RandomSource::new(cfg.seed).fork(1);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut train = order[..n / 2].to_vec();

    let p_s = empirical_label_distribution(data)?;
    let classes = data.class_indices()?;
    let mut params = [rng.normal() / cfg.sigma, rng.normal() / cfg.sigma, 0.5];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0i32;

    let mut curves = ConvexityCurves {
        theta,
        eps_source: Vec::with_capacity(epochs),
        eps_sampling: Vec::with_capacity(epochs),
        linear_source: Vec::with_capacity(epochs),
        linear_sampling: Vec::with_capacity(epochs),
    };
    for _ in 0..epochs {
        rng.shuffle(&mut train);
        for batch in train.chunks(opts.batch_size) {
            let mut g = [0.0; 3];
            for &i in batch {
                let z = params[0] * x[[i, 0]] + params[1] * x[[i, 1]] + params[2];
                let p = z.clamp(LOSS_FLOOR, 1.0 - LOSS_FLOOR);
                let dz = if labels[i] == 1 {
                    -1.0 / p
                } else {
                    1.0 / (1.0 - p)
                };
                g[0] += dz * x[[i, 0]];
                g[1] += dz * x[[i, 1]];
                g[2] += dz;
            }
            step += 1;
            for k in 0..3 {
                let gk = g[k] / batch.len() as f64;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / (1.0 - b1.powi(step));
                let vh = v[k] / (1.0 - b2.powi(step));
                params[k] -= opts.lr * mh / (vh.sqrt() + eps);
            }
        }

        let score = |a: [f64; 2]| params[0] * a[0] + params[1] * a[1] + params[2];
        let hard_miss =
            |z: f64, y: usize| f64::from(u8::from(usize::from(convex_output(z) > 0.5) != y));
        let soft_miss = |z: f64, y: usize| if y == 1 { 1.0 - z } else { z };
        let (mut src_hard, mut src_soft) = (0.0, 0.0);
        for i in 0..n {
            let z = score([x[[i, 0]], x[[i, 1]]]);
            src_hard += hard_miss(z, labels[i]);
            src_soft += soft_miss(z, labels[i]);
        }
        let (mut mix_hard, mut mix_soft) = (0.0, 0.0);
        for (j, members) in classes.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let (mut h, mut s) = (0.0, 0.0);
            for &a in members {
                for &b in members {
                    let pt = [
                        theta * x[[a, 0]] + (1.0 - theta) * x[[b, 0]],
                        theta * x[[a, 1]] + (1.0 - theta) * x[[b, 1]],
                    ];
                    let z = score(pt);
                    h += hard_miss(z, j);
                    s += soft_miss(z, j);
                }
            }
            let pairs = (members.len() * members.len()) as f64;
            mix_hard += p_s.get(j) * h / pairs;
            mix_soft += p_s.get(j) * s / pairs;
        }
        curves.eps_source.push(src_hard / n as f64);
        curves.eps_sampling.push(mix_hard);
        curves.linear_source.push(src_soft / n as f64);
        curves.linear_sampling.push(mix_soft);
    }
    Ok(curves)
}

fn convex_output(z: f64) -> f64 {
    z.clamp(0.0, 1.0)
}
