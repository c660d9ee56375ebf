use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::RandomSource;

const PROBE_STEPS: usize = 200;
const PROBE_LR: f64 = 0.5;
const MIN_PER_DOMAIN: usize = 4;
const SPLIT_SEED: u64 = 0x5eed_ad15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistance {
    pub class: usize,
    pub probe_error: f64,
    pub a_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSkip {
    pub class: usize,
    pub source_count: usize,
    pub target_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ADistanceReport {
    /// Mean over the classes that were probed.
    pub mean: f64,
    pub classes: Vec<ClassDistance>,
    pub skipped: Vec<ClassSkip>,
}

/// Proxy A-distance between domains, per shared class, from a linear
/// logistic probe trained on half of each class and scored on the rest.
pub fn class_conditional_a_distance(
    features_s: ArrayView2<'_, f64>,
    labels_s: &[usize],
    features_t: ArrayView2<'_, f64>,
    labels_t: &[usize],
    shared_classes: &[usize],
) -> Result<ADistanceReport> {
    if features_s.nrows() != labels_s.len() || features_t.nrows() != labels_t.len() {
        return Err(Error::Dimension(
            "feature rows and labels differ in length".into(),
        ));
    }
    if features_s.ncols() != features_t.ncols() {
        return Err(Error::Dimension(format!(
            "source features have {} columns, target {}",
            features_s.ncols(),
            features_t.ncols()
        )));
    }
    let outcomes = par::map_indices(shared_classes.len(), |c| {
        let class = shared_classes[c];
        let s = class_rows(features_s, labels_s, class);
        let t = class_rows(features_t, labels_t, class);
        if s.len() < MIN_PER_DOMAIN || t.len() < MIN_PER_DOMAIN {
            return Err(ClassSkip {
                class,
                source_count: s.len(),
                target_count: t.len(),
            });
        }
        let probe_error = probe(s, t, class as u64);
        Ok(ClassDistance {
            class,
            probe_error,
            a_distance: (2.0 * (1.0 - 2.0 * probe_error)).clamp(0.0, 2.0),
        })
    });
    let mut classes = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(c) => classes.push(c),
            Err(s) => skipped.push(s),
        }
    }
    if classes.is_empty() {
        return Err(Error::Undefined(format!(
            "no shared class has {MIN_PER_DOMAIN} samples in both domains"
        )));
    }
    let mean = classes.iter().map(|c| c.a_distance).sum::<f64>() / classes.len() as f64;
    Ok(ADistanceReport {
        mean,
        classes,
        skipped,
    })
}

/// Rows of one class in a canonical order, so row order never matters.
fn class_rows(x: ArrayView2<'_, f64>, labels: &[usize], class: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| x.row(i).to_vec())
        .collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    rows
}

/// Held-out error of the domain probe; ties count as half an error.
fn probe(s: Vec<Vec<f64>>, t: Vec<Vec<f64>>, stream: u64) -> f64 {
    let d = s[0].len();
    // both domains use the same permutation stream
    let rng = RandomSource::new(SPLIT_SEED).fork(stream);
    let (s_train, s_test) = split(&s, rng.clone());
    let (t_train, t_test) = split(&t, rng);

    let n_train = (s_train.nrows() + t_train.nrows()) as f64;
    let mean = (s_train.sum_axis(ndarray::Axis(0)) + t_train.sum_axis(ndarray::Axis(0))) / n_train;
    let mut std = Array1::<f64>::zeros(d);
    for m in [&s_train, &t_train] {
        for row in m.rows() {
            std.zip_mut_with(&(&row - &mean), |a, v| *a += v * v);
        }
    }
    std.mapv_inplace(|v| {
        let s = (v / n_train).sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let standardize = |m: Array2<f64>| (m - &mean) / &std;
    let (s_train, s_test, t_train, t_test) = (
        standardize(s_train),
        standardize(s_test),
        standardize(t_train),
        standardize(t_test),
    );

    // label 0 = source, 1 = target
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    for _ in 0..PROBE_STEPS {
        let rs = (s_train.dot(&w) + b).mapv(sigmoid);
        let rt = (t_train.dot(&w) + b).mapv(|z| sigmoid(z) - 1.0);
        let gw = (s_train.t().dot(&rs) + t_train.t().dot(&rt)) / n_train;
        let gb = (rs.sum() + rt.sum()) / n_train;
        w.scaled_add(-PROBE_LR, &gw);
        b -= PROBE_LR * gb;
    }
    let miss = |z: f64, target: bool| match z.partial_cmp(&0.0) {
        Some(Ordering::Greater) => f64::from(u8::from(!target)),
        Some(Ordering::Less) => f64::from(u8::from(target)),
        _ => 0.5,
    };
    let errors: f64 = s_test
        .dot(&w)
        .iter()
        .map(|z| miss(z + b, false))
        .sum::<f64>()
        + t_test
            .dot(&w)
            .iter()
            .map(|z| miss(z + b, true))
            .sum::<f64>();
    errors / (s_test.nrows() + t_test.nrows()) as f64
}

fn split(rows: &[Vec<f64>], mut rng: RandomSource) -> (Array2<f64>, Array2<f64>) {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    rng.shuffle(&mut order);
    let half = rows.len() / 2;
    let gather = |idx: &[usize]| {
        let d = rows[0].len();
        Array2::from_shape_fn((idx.len(), d), |(r, c)| rows[idx[r]][c])
    };
    (gather(&order[..half]), gather(&order[half..]))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
