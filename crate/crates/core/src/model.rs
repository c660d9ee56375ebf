//! Two-layer feature transform `g` followed by a softmax classifier `h`.
//!
//! `g(x) = W2^T relu(W1^T x + b1) + b2` and `h(f) = softmax(Wh^T f + bh)`.
//! Weights are stored input-major (`fan_in x fan_out`) so a batch forward is
//! `X * W + b`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::rng::RandomSource;

pub const PROB_FLOOR: f64 = 1e-12;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut RandomSource) -> Self {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((fan_in, fan_out), |_| rng.uniform_range(-scale, scale)),
            b: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// A named row-major tensor, the unit of parameter snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
}

#[derive(Debug)]
pub struct MlpParams {
    pub g1: Dense,
    pub g2: Dense,
    pub h: Dense,
    /// Changes whenever the weights do; caches remember the version they saw.
    version: u64,
}

impl Clone for MlpParams {
    fn clone(&self) -> Self {
        Self {
            g1: self.g1.clone(),
            g2: self.g2.clone(),
            h: self.h.clone(),
            version: self.version,
        }
    }
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.g1 == other.g1 && self.g2 == other.g2 && self.h == other.h
    }
}

/// Gradients with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub g1: Dense,
    pub g2: Dense,
    pub h: Dense,
}

impl MlpGrads {
    fn layers(&self) -> [&Dense; 3] {
        [&self.g1, &self.g2, &self.h]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &MlpGrads) {
        for (a, b) in [
            (&mut self.g1, &other.g1),
            (&mut self.g2, &other.g2),
            (&mut self.h, &other.h),
        ] {
            a.w.scaled_add(scale, &b.w);
            a.b.scaled_add(scale, &b.b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }
}

impl MlpParams {
    /// Uniform weights in `+-1/sqrt(fan_in)`, zero biases.
    pub fn init(dims: ModelDims, rng: &mut RandomSource) -> Result<Self> {
        if dims.input == 0 || dims.hidden1 == 0 || dims.hidden2 == 0 || dims.classes == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {dims:?}"
            )));
        }
        Ok(Self {
            g1: Dense::init(dims.input, dims.hidden1, rng),
            g2: Dense::init(dims.hidden1, dims.hidden2, rng),
            h: Dense::init(dims.hidden2, dims.classes, rng),
            version: fresh_version(),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.g1.w.nrows(),
            hidden1: self.g1.w.ncols(),
            hidden2: self.g2.w.ncols(),
            classes: self.h.w.ncols(),
        }
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            g1: self.g1.zeros_like(),
            g2: self.g2.zeros_like(),
            h: self.h.zeros_like(),
        }
    }

    fn layers(&self) -> [(&'static str, &Dense); 3] {
        [("g1", &self.g1), ("g2", &self.g2), ("h", &self.h)]
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push(Tensor {
                name: format!("{name}.weight"),
                shape: layer.w.shape().to_vec(),
                data: layer.w.iter().copied().collect(),
            });
            out.push(Tensor {
                name: format!("{name}.bias"),
                shape: vec![layer.b.len()],
                data: layer.b.to_vec(),
            });
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::InvalidDataset(format!("snapshot lacks tensor {name}")))
        };
        let dense = |name: &str| -> Result<Dense> {
            let w = find(&format!("{name}.weight"))?;
            let b = find(&format!("{name}.bias"))?;
            if w.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != w.shape[1] {
                return Err(Error::Dimension(format!("tensor shapes for layer {name}")));
            }
            let wa = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
                .map_err(|e| Error::Dimension(format!("{name}.weight: {e}")))?;
            if b.data.len() != b.shape[0] {
                return Err(Error::Dimension(format!("{name}.bias length")));
            }
            Ok(Dense {
                w: wa,
                b: Array1::from(b.data.clone()),
            })
        };
        let p = Self {
            g1: dense("g1")?,
            g2: dense("g2")?,
            h: dense("h")?,
            version: fresh_version(),
        };
        if p.g1.w.ncols() != p.g2.w.nrows() || p.g2.w.ncols() != p.h.w.nrows() {
            return Err(Error::Dimension("layer widths do not chain".into()));
        }
        if p.layers()
            .iter()
            .any(|(_, l)| l.w.iter().chain(l.b.iter()).any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite("snapshot parameters".into()));
        }
        Ok(p)
    }

    /// Product of the layer spectral norms. Relu and softmax are 1-Lipschitz,
    /// so this bounds the Lipschitz constant of the probability output.
    pub fn certified_lipschitz(&self) -> f64 {
        self.layers()
            .iter()
            .map(|(_, l)| spectral_norm(l.w.view(), 500))
            .product()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if x.ncols() != self.g1.w.nrows() {
            return Err(Error::Dimension(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.g1.w.nrows()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        let pre1 = self.g1.apply(x);
        let hidden = pre1.mapv(|v| v.max(0.0));
        let features = self.g2.apply(hidden.view());
        let logits = self.h.apply(features.view());
        let probs = softmax_rows(&logits);
        Ok(ForwardCache {
            input: x.to_owned(),
            pre1,
            hidden,
            features,
            probs,
            version: self.version,
        })
    }

    /// Exact gradients of `mean CE(probs, labels)`-style objectives given the
    /// upstream gradient in the logits, plus `mu * feature_grad` pushed through
    /// `g` only.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        logit_grad: Option<&Array2<f64>>,
        feature_grad: Option<&Array2<f64>>,
        mu: f64,
    ) -> Result<MlpGrads> {
        if cache.version != self.version {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let n = cache.input.nrows();
        let mut grads = self.zero_grads();
        let mut dfeat = Array2::<f64>::zeros(cache.features.raw_dim());
        if let Some(dl) = logit_grad {
            if dl.dim() != cache.probs.dim() {
                return Err(Error::Dimension("logit gradient shape".into()));
            }
            grads.h.w = cache.features.t().dot(dl);
            grads.h.b = dl.sum_axis(Axis(0));
            dfeat = dl.dot(&self.h.w.t());
        }
        if let Some(df) = feature_grad {
            if df.dim() != (n, self.g2.w.ncols()) {
                return Err(Error::Dimension("feature gradient shape".into()));
            }
            if mu != 0.0 {
                dfeat.scaled_add(mu, df);
            }
        }
        grads.g2.w = cache.hidden.t().dot(&dfeat);
        grads.g2.b = dfeat.sum_axis(Axis(0));
        let mut dpre = dfeat.dot(&self.g2.w.t());
        Zip::from(&mut dpre).and(&cache.pre1).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        grads.g1.w = cache.input.t().dot(&dpre);
        grads.g1.b = dpre.sum_axis(Axis(0));
        Ok(grads)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?.probs))
    }

    pub fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.features)
    }

    fn touch(&mut self) {
        self.version = fresh_version();
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub pre1: Array2<f64>,
    pub hidden: Array2<f64>,
    /// Output of `g`.
    pub features: Array2<f64>,
    pub probs: Array2<f64>,
    version: u64,
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean of `-log(max(p[label], 1e-12))`.
pub fn cross_entropy_risk(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs[[i, l]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy_risk`] in the logits: `(p - onehot) / n`, and
/// zero for rows whose probability sits below the floor.
pub fn cross_entropy_logit_grad(probs: &Array2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut g = probs / n;
    for (i, &l) in labels.iter().enumerate() {
        if probs[[i, l]] < PROB_FLOOR {
            g.row_mut(i).fill(0.0);
        } else {
            g[[i, l]] -= 1.0 / n;
        }
    }
    Ok(g)
}

/// `(1/n) sum_i w_i * -log(max(p[i, y_i], 1e-12))` and its logit gradient.
pub fn weighted_cross_entropy(
    probs: &Array2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    check_labels(probs, labels)?;
    if weights.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} rows",
            weights.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    let mut total = 0.0;
    for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        let p = probs[[i, l]];
        total += w * -p.max(PROB_FLOOR).ln();
        if p >= PROB_FLOOR {
            let mut row = g.row_mut(i);
            row.assign(&probs.row(i));
            row[l] -= 1.0;
            row *= w / n;
        }
    }
    Ok((total / n, g))
}

/// Cross-entropy against soft targets (rows of `targets` sum to one) and its
/// logit gradient. Floored terms contribute no gradient.
pub fn soft_cross_entropy(
    probs: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    if probs.dim() != targets.dim() || probs.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "probs {:?}, targets {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    let n = probs.nrows() as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    let mut total = 0.0;
    for i in 0..probs.nrows() {
        let mut live = 0.0;
        for c in 0..probs.ncols() {
            let (p, y) = (probs[[i, c]], targets[[i, c]]);
            if y == 0.0 {
                continue;
            }
            total += y * -p.max(PROB_FLOOR).ln();
            if p >= PROB_FLOOR {
                live += y;
                g[[i, c]] -= y / n;
            }
        }
        for c in 0..probs.ncols() {
            g[[i, c]] += live * probs[[i, c]] / n;
        }
    }
    Ok((total / n, g))
}

fn check_labels(probs: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.nrows() || labels.is_empty() {
        return Err(Error::Dimension(format!(
            "{} label(s) for {} row(s)",
            labels.len(),
            probs.nrows()
        )));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= probs.ncols()) {
        return Err(Error::LabelOutOfRange {
            row,
            label,
            num_classes: probs.ncols(),
        });
    }
    Ok(())
}

/// Anything that maps feature rows to class probabilities.
pub trait Classifier {
    fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    /// An upper bound on the Lipschitz constant of `predict_proba` (l2 to l2).
    fn certified_lipschitz(&self) -> f64;

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x)?))
    }
}

impl Classifier for MlpParams {
    fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.probs)
    }

    fn certified_lipschitz(&self) -> f64 {
        MlpParams::certified_lipschitz(self)
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        MlpParams::predict(self, x)
    }
}

/// `softmax(X W + b)`: a purely linear scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmax {
    pub layer: Dense,
}

impl LinearSoftmax {
    pub fn zeros(input: usize, classes: usize) -> Self {
        Self {
            layer: Dense {
                w: Array2::zeros((input, classes)),
                b: Array1::zeros(classes),
            },
        }
    }

    /// Full-batch Adam on mean cross-entropy.
    pub fn fit(
        x: ArrayView2<'_, f64>,
        labels: &[usize],
        classes: usize,
        steps: usize,
        adam: AdamConfig,
    ) -> Result<Self> {
        let mut model = Self::zeros(x.ncols(), classes);
        let mut state = [
            (
                Array2::<f64>::zeros(model.layer.w.raw_dim()),
                Array2::<f64>::zeros(model.layer.w.raw_dim()),
            ),
            (Array2::zeros((1, classes)), Array2::zeros((1, classes))),
        ];
        for t in 1..=steps {
            let probs = model.predict_proba(x)?;
            let dl = cross_entropy_logit_grad(&probs, labels)?;
            let gw = x.t().dot(&dl);
            let gb = dl.sum_axis(Axis(0)).insert_axis(Axis(0));
            let c1 = 1.0 - adam.beta1.powi(t as i32);
            let c2 = 1.0 - adam.beta2.powi(t as i32);
            let mut bias = model.layer.b.view_mut().insert_axis(Axis(0)).to_owned();
            for ((p, g), (m, v)) in [(&mut model.layer.w, &gw), (&mut bias, &gb)]
                .into_iter()
                .zip(state.iter_mut())
            {
                Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
                    *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
                    *p -= adam.lr * (*m / c1) / ((*v / c2).sqrt() + adam.eps);
                });
            }
            model.layer.b = bias.row(0).to_owned();
        }
        Ok(model)
    }
}

impl Classifier for LinearSoftmax {
    fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.layer.w.nrows() {
            return Err(Error::Dimension(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.layer.w.nrows()
            )));
        }
        Ok(softmax_rows(&self.layer.apply(x)))
    }

    /// Spectral norm of `W`; softmax is 1-Lipschitz.
    fn certified_lipschitz(&self) -> f64 {
        spectral_norm(self.layer.w.view(), 500)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: MlpGrads,
    v: MlpGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let update =
            |p: &mut Array2<f64>, g: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>| {
                Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            };
        let update1 =
            |p: &mut Array1<f64>, g: &Array1<f64>, m: &mut Array1<f64>, v: &mut Array1<f64>| {
                Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            };
        for (p, g, m, v) in [
            (&mut params.g1, &grads.g1, &mut self.m.g1, &mut self.v.g1),
            (&mut params.g2, &grads.g2, &mut self.m.g2, &mut self.v.g2),
            (&mut params.h, &grads.h, &mut self.m.h, &mut self.v.h),
        ] {
            update(&mut p.w, &g.w, &mut m.w, &mut v.w);
            update1(&mut p.b, &g.b, &mut m.b, &mut v.b);
        }
        params.touch();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dims() -> ModelDims {
        ModelDims {
            input: 3,
            hidden1: 5,
            hidden2: 4,
            classes: 3,
        }
    }

    fn data(rng: &mut RandomSource, n: usize) -> (Array2<f64>, Vec<usize>) {
        let x = Array2::from_shape_fn((n, 3), |_| rng.normal());
        let y = (0..n).map(|i| i % 3).collect();
        (x, y)
    }

    #[test]
    fn init_is_deterministic_and_row_stochastic() {
        let a = MlpParams::init(dims(), &mut RandomSource::new(1)).unwrap();
        let b = MlpParams::init(dims(), &mut RandomSource::new(1)).unwrap();
        assert_eq!(a, b);
        let (x, _) = data(&mut RandomSource::new(2), 10);
        let p = a.forward(x.view()).unwrap().probs;
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let z = a.forward(Array2::zeros((1, 3)).view()).unwrap().probs;
        assert!(z.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn duplicate_rows_give_duplicate_outputs() {
        let m = MlpParams::init(dims(), &mut RandomSource::new(3)).unwrap();
        let x = array![[0.1, -0.3, 2.0], [0.1, -0.3, 2.0]];
        let c = m.forward(x.view()).unwrap();
        assert_eq!(c.probs.row(0), c.probs.row(1));
        assert_eq!(c.features.dim(), (2, 4));
        assert_eq!(c.hidden.dim(), (2, 5));
    }

    #[test]
    fn rejects_bad_input() {
        let m = MlpParams::init(dims(), &mut RandomSource::new(3)).unwrap();
        assert!(matches!(
            m.forward(array![[f64::NAN, 0.0, 0.0]].view()),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            m.forward(array![[0.0, 0.0]].view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cross_entropy_risk(&onehot, &[0, 1]).unwrap(), 0.0);
        let uniform = Array2::from_elem((3, 4), 0.25);
        assert!((cross_entropy_risk(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let p = array![[0.8, 0.2]];
        assert!((cross_entropy_risk(&p, &[0]).unwrap() - 0.22314355131420976).abs() < 1e-14);
        assert!((cross_entropy_risk(&onehot, &[1, 0]).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    fn total_loss(m: &MlpParams, x: &Array2<f64>, y: &[usize], fg: &Array2<f64>, mu: f64) -> f64 {
        let c = m.forward(x.view()).unwrap();
        cross_entropy_risk(&c.probs, y).unwrap() + mu * (&c.features * fg).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RandomSource::new(4);
        let m = MlpParams::init(dims(), &mut rng).unwrap();
        let (x, y) = data(&mut rng, 12);
        // a fixed linear functional of the features stands in for the alignment term
        let fg = Array2::from_shape_fn((12, 4), |_| rng.normal());
        let mu = 0.7;
        let c = m.forward(x.view()).unwrap();
        let dl = cross_entropy_logit_grad(&c.probs, &y).unwrap();
        let g = m.backward(&c, Some(&dl), Some(&fg), mu).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let check = |get: &dyn Fn(&mut MlpParams) -> &mut f64, analytic: f64, worst: &mut f64| {
            let mut p = m.clone();
            *get(&mut p) += h;
            let up = total_loss(&p, &x, &y, &fg, mu);
            let mut q = m.clone();
            *get(&mut q) -= h;
            let down = total_loss(&q, &x, &y, &fg, mu);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            *worst = worst.max(err);
        };
        for i in 0..3 {
            for j in 0..5 {
                check(
                    &|p: &mut MlpParams| &mut p.g1.w[[i, j]],
                    g.g1.w[[i, j]],
                    &mut worst,
                );
            }
        }
        for j in 0..5 {
            check(&|p: &mut MlpParams| &mut p.g1.b[j], g.g1.b[j], &mut worst);
            for k in 0..4 {
                check(
                    &|p: &mut MlpParams| &mut p.g2.w[[j, k]],
                    g.g2.w[[j, k]],
                    &mut worst,
                );
            }
        }
        for k in 0..4 {
            check(&|p: &mut MlpParams| &mut p.g2.b[k], g.g2.b[k], &mut worst);
            for c in 0..3 {
                check(
                    &|p: &mut MlpParams| &mut p.h.w[[k, c]],
                    g.h.w[[k, c]],
                    &mut worst,
                );
            }
        }
        for c in 0..3 {
            check(&|p: &mut MlpParams| &mut p.h.b[c], g.h.b[c], &mut worst);
        }
        assert!(worst <= 1e-5, "max relative error {worst}");
    }

    #[test]
    fn alignment_term_bypasses_head() {
        let mut rng = RandomSource::new(5);
        let m = MlpParams::init(dims(), &mut rng).unwrap();
        let (x, y) = data(&mut rng, 6);
        let c = m.forward(x.view()).unwrap();
        let dl = cross_entropy_logit_grad(&c.probs, &y).unwrap();
        let fg = Array2::from_elem((6, 4), 0.3);
        let pure = m.backward(&c, Some(&dl), None, 0.0).unwrap();
        let mu0 = m.backward(&c, Some(&dl), Some(&fg), 0.0).unwrap();
        assert_eq!(pure, mu0);
        let mu1 = m.backward(&c, Some(&dl), Some(&fg), 2.0).unwrap();
        assert_eq!(pure.h, mu1.h);
        let zero = m
            .backward(&c, Some(&dl), Some(&Array2::zeros((6, 4))), 2.0)
            .unwrap();
        assert_eq!(pure, zero);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = RandomSource::new(6);
        let mut m = MlpParams::init(dims(), &mut rng).unwrap();
        let (x, y) = data(&mut rng, 6);
        let c = m.forward(x.view()).unwrap();
        let dl = cross_entropy_logit_grad(&c.probs, &y).unwrap();
        let g = m.backward(&c, Some(&dl), None, 0.0).unwrap();
        let mut adam = AdamState::new(&m, AdamConfig::default());
        adam.step(&mut m, &g);
        assert!(matches!(
            m.backward(&c, Some(&dl), None, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut m = MlpParams::init(dims(), &mut RandomSource::new(7)).unwrap();
        let before = m.clone();
        let mut adam = AdamState::new(&m, AdamConfig::default());
        let zero = m.zero_grads();
        adam.step(&mut m, &zero);
        assert_eq!(m, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_constant_gradient_tends_to_lr_sign() {
        let mut m = MlpParams::init(dims(), &mut RandomSource::new(8)).unwrap();
        let mut g = m.zero_grads();
        g.h.b = array![0.5, -2.0, 1e-3];
        let mut adam = AdamState::new(&m, AdamConfig::default());
        let mut prev = m.h.b.clone();
        for _ in 0..5000 {
            adam.step(&mut m, &g);
            let delta = &m.h.b - &prev;
            prev = m.h.b.clone();
            let expected = [-1e-3, 1e-3, -1e-3];
            for c in 0..3 {
                // eps keeps the tiny-gradient coordinate a little short of lr
                let tol = if c == 2 { 2e-5 } else { 1e-9 };
                assert!(
                    (delta[c] - expected[c]).abs() <= tol,
                    "coord {c}: {}",
                    delta[c]
                );
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = RandomSource::new(9);
            let mut m = MlpParams::init(dims(), &mut rng).unwrap();
            let (x, y) = data(&mut rng, 9);
            let mut adam = AdamState::new(&m, AdamConfig::default());
            for _ in 0..20 {
                let c = m.forward(x.view()).unwrap();
                let dl = cross_entropy_logit_grad(&c.probs, &y).unwrap();
                let g = m.backward(&c, Some(&dl), None, 0.0).unwrap();
                adam.step(&mut m, &g);
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn predict_ties_and_monotone_invariance() {
        assert_eq!(
            argmax_rows(&array![[0.2, 0.5, 0.3], [0.5, 0.5, 0.0]]),
            vec![1, 0]
        );
        let logits = array![[0.3, -1.0, 2.0], [1.0, 1.0, 0.2]];
        let p = softmax_rows(&logits);
        let q = softmax_rows(&logits.mapv(|v| 3.0 * v + 1.0));
        assert_eq!(argmax_rows(&p), argmax_rows(&q));
    }

    #[test]
    fn weighted_and_soft_reduce_to_plain() {
        let mut rng = RandomSource::new(11);
        let m = MlpParams::init(dims(), &mut rng).unwrap();
        let (x, y) = data(&mut rng, 7);
        let p = m.forward(x.view()).unwrap().probs;
        let plain = cross_entropy_risk(&p, &y).unwrap();
        let plain_g = cross_entropy_logit_grad(&p, &y).unwrap();
        let (w, wg) = weighted_cross_entropy(&p, &y, &[1.0; 7]).unwrap();
        let onehot = Array2::from_shape_fn((7, 3), |(i, c)| if y[i] == c { 1.0 } else { 0.0 });
        let (s, sg) = soft_cross_entropy(&p, &onehot).unwrap();
        assert!((w - plain).abs() < 1e-15 && (s - plain).abs() < 1e-15);
        assert!(wg.iter().zip(&plain_g).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(sg.iter().zip(&plain_g).all(|(a, b)| (a - b).abs() < 1e-15));
        let (w2, _) = weighted_cross_entropy(&p, &y, &[2.0; 7]).unwrap();
        assert!((w2 - 2.0 * plain).abs() < 1e-14);
    }

    #[test]
    fn soft_gradient_matches_finite_differences() {
        let logits = array![[0.3, -1.0, 2.0], [1.0, 1.0, 0.2]];
        let t = array![[0.25, 0.75, 0.0], [0.5, 0.0, 0.5]];
        let (_, g) = soft_cross_entropy(&softmax_rows(&logits), &t).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for c in 0..3 {
                let mut up = logits.clone();
                up[[i, c]] += h;
                let mut dn = logits.clone();
                dn[[i, c]] -= h;
                let fd = (soft_cross_entropy(&softmax_rows(&up), &t).unwrap().0
                    - soft_cross_entropy(&softmax_rows(&dn), &t).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[[i, c]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_softmax_separates_easy_data() {
        let x = array![[-2.0, 0.0], [-1.5, 0.3], [2.0, 0.1], [1.7, -0.2]];
        let y = [0, 0, 1, 1];
        let m = LinearSoftmax::fit(
            x.view(),
            &y,
            2,
            300,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        )
        .unwrap();
        assert_eq!(Classifier::predict(&m, x.view()).unwrap(), y.to_vec());
        let w = &m.layer.w;
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(m.certified_lipschitz() <= norm + 1e-9);
    }

    #[test]
    fn snapshot_roundtrip() {
        let m = MlpParams::init(dims(), &mut RandomSource::new(10)).unwrap();
        let back = MlpParams::from_tensors(&m.to_tensors()).unwrap();
        assert_eq!(m, back);
        let mut t = m.to_tensors();
        t.retain(|t| t.name != "h.bias");
        assert!(MlpParams::from_tensors(&t).is_err());
    }
}
