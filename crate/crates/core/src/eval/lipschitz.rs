use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::RandomSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzKind {
    EmpiricalLowerBound,
    CertifiedUpperBound,
}

/// Relative size of the local perturbation paired with each sampled point.
const PERTURB: f64 = 1e-3;

/// Largest output/input distance ratio over sampled row pairs and over
/// small random perturbations of each pair's first row. A lower bound on
/// the true constant. Pair `i` uses the same draws for every `num_pairs`,
/// so the estimate never decreases as `num_pairs` grows.
pub fn estimate_lipschitz<M: Classifier + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    num_pairs: usize,
    rng: &mut RandomSource,
) -> Result<f64> {
    if num_pairs == 0 {
        return Err(Error::Config("num_pairs must be at least 1".into()));
    }
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::Undefined("no rows to probe".into()));
    }
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    // rows 4i..4i+4: a, b, a, a + delta
    let mut pts = Array2::<f64>::zeros((4 * num_pairs, d));
    for i in 0..num_pairs {
        let a = rng.index(n);
        let b = rng.index(n);
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = dir
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        pts.row_mut(4 * i).assign(&x.row(a));
        pts.row_mut(4 * i + 1).assign(&x.row(b));
        pts.row_mut(4 * i + 2).assign(&x.row(a));
        for (c, v) in dir.iter().enumerate() {
            pts[[4 * i + 3, c]] = x[[a, c]] + PERTURB * scale * v / norm;
        }
    }
    let out = model.predict_proba(pts.view())?;
    let mut best = 0.0f64;
    for i in 0..2 * num_pairs {
        let (p, q) = (2 * i, 2 * i + 1);
        let dx = dist(pts.row(p).iter(), pts.row(q).iter());
        if dx == 0.0 {
            continue;
        }
        best = best.max(dist(out.row(p).iter(), out.row(q).iter()) / dx);
    }
    Ok(best)
}

fn dist<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
