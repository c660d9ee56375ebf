//! Training loop and its ablation variants.
//!
//! Every epoch pseudo-labels the target, re-estimates the target label
//! distribution, rebuilds the sampling domain, and takes one Adam step per
//! batch on `risk + mu * align`.

use std::time::Instant;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{empirical_label_distribution, FeatureDataset, LabelDistribution, PdaTask};
use crate::error::{Error, Result};
use crate::etic::{alignment_loss_and_gradient, Dependence, Domain, EticConfig, SkipReason};
use crate::labelshift::{
    bbse_estimate, confusion_matrix, pseudo_label_marginal, target_label_distribution,
    DEFAULT_FLOOR, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::model::{
    argmax_rows, cross_entropy_logit_grad, cross_entropy_risk, soft_cross_entropy,
    weighted_cross_entropy, AdamConfig, AdamState, MlpGrads, MlpParams, ModelDims,
};
use crate::rng::RandomSource;
use crate::sampling::{build_sampling_domain, draw_mix_ratio, SamplingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Is2c,
    SourceOnly,
    SamplingOnly,
    EticOnly,
    WermEtic,
    MixupEtic,
    Is2cHsic,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Is2c,
        Variant::SourceOnly,
        Variant::SamplingOnly,
        Variant::EticOnly,
        Variant::WermEtic,
        Variant::MixupEtic,
        Variant::Is2cHsic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Is2c => "is2c",
            Variant::SourceOnly => "source_only",
            Variant::SamplingOnly => "sampling_only",
            Variant::EticOnly => "etic_only",
            Variant::WermEtic => "werm_etic",
            Variant::MixupEtic => "mixup_etic",
            Variant::Is2cHsic => "is2c_hsic",
        }
    }

    fn aligns(self) -> bool {
        !matches!(self, Variant::SourceOnly | Variant::SamplingOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BatchMode {
    Full,
    Minibatch { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mu: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub sampling: SamplingConfig,
    pub etic: EticConfig,
    pub adam: AdamConfig,
    pub batch_mode: BatchMode,
    pub variant: Variant,
    pub hidden1: usize,
    pub hidden2: usize,
    /// When false the target label distribution is held at the source one.
    pub estimate_label_shift: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            epochs: 100,
            warmup_epochs: 100,
            sampling: SamplingConfig::default(),
            etic: EticConfig::default(),
            adam: AdamConfig::default(),
            batch_mode: BatchMode::Full,
            variant: Variant::Is2c,
            hidden1: 256,
            hidden2: 256,
            estimate_label_shift: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return bad(format!("mu must be a nonnegative number, got {}", self.mu));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return bad("hidden widths must be positive".into());
        }
        if let BatchMode::Minibatch { size } = self.batch_mode {
            if size < 2 {
                return bad("minibatch size must be at least 2".into());
            }
        }
        if !(self.adam.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        self.sampling.validate()?;
        self.etic.validate()
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub risk: f64,
    pub align: f64,
    /// The optimised scalar, `risk + mu * align`.
    pub total: f64,
    pub p_t: Vec<f64>,
    /// Classes with positive weight left out of the alignment term.
    pub skipped: Vec<usize>,
    /// Subset of `skipped` dropped for numerical failure.
    pub numerical_skips: Vec<usize>,
    /// The label-shift estimate failed and the previous one was kept.
    pub bbse_fallback: bool,
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub mu: f64,
    pub epochs: Vec<EpochRecord>,
    /// Seconds per epoch; kept apart from the records so they stay reproducible.
    pub wall_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn final_target_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.target_accuracy)
    }
}

const INIT_STREAM: u64 = 0;
const SAMPLING_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

/// Stream the sampling (or mixup) domain of `epoch` is drawn from.
pub fn sampling_rng(seed: u64, epoch: usize) -> RandomSource {
    RandomSource::new(seed)
        .fork(SAMPLING_STREAM)
        .fork(epoch as u64)
}

fn batch_rng(seed: u64, epoch: usize) -> RandomSource {
    RandomSource::new(seed)
        .fork(BATCH_STREAM)
        .fork(epoch as u64)
}

/// Model initialised from the configuration's seed.
pub fn init_params(task: &PdaTask, cfg: &TrainConfig) -> Result<MlpParams> {
    let dims = ModelDims {
        input: task.source.dim(),
        hidden1: cfg.hidden1,
        hidden2: cfg.hidden2,
        classes: task.num_classes,
    };
    MlpParams::init(dims, &mut RandomSource::new(cfg.seed).fork(INIT_STREAM))
}

/// `epochs` full-batch cross-entropy steps on the labelled source.
pub fn warm_start(
    mut params: MlpParams,
    source: &FeatureDataset,
    epochs: usize,
    adam: AdamConfig,
) -> Result<MlpParams> {
    let labels = source.require_labels("warm start")?;
    let mut opt = AdamState::new(&params, adam);
    for _ in 0..epochs {
        let cache = params.forward(source.features().view())?;
        let dl = cross_entropy_logit_grad(&cache.probs, labels)?;
        let grads = params.backward(&cache, Some(&dl), None, 0.0)?;
        opt.step(&mut params, &grads);
    }
    Ok(params)
}

pub fn train_is2c(task: &PdaTask, cfg: &TrainConfig) -> Result<(MlpParams, TrainReport)> {
    train(task, &cfg.with_variant(Variant::Is2c))
}

pub fn train_baseline(task: &PdaTask, cfg: &TrainConfig) -> Result<(MlpParams, TrainReport)> {
    train(task, cfg)
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

struct Shift {
    p_t: LabelDistribution,
    fallback: bool,
}

/// Label-shift estimate from the current model, or `previous` on failure.
fn estimate_shift(
    params: &MlpParams,
    source_x: ArrayView2<'_, f64>,
    source_y: &[usize],
    target_pred: &[usize],
    p_s: &LabelDistribution,
    previous: &LabelDistribution,
) -> Result<Shift> {
    let k = p_s.num_classes();
    let preds = params.predict(source_x)?;
    let attempt = || -> Result<LabelDistribution> {
        let m = confusion_matrix(&preds, source_y, k)?;
        let p_hat = pseudo_label_marginal(target_pred, k)?;
        let est = bbse_estimate(&m, &p_hat, p_s, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
        target_label_distribution(p_s, &est.weights, DEFAULT_FLOOR)
    };
    Ok(match attempt() {
        Ok(p_t) => Shift {
            p_t,
            fallback: false,
        },
        Err(_) => Shift {
            p_t: previous.clone(),
            fallback: true,
        },
    })
}

/// Rows to fit the risk term on: hard or soft labels plus optional weights.
enum RiskData {
    Hard {
        x: Array2<f64>,
        y: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
    Soft {
        x: Array2<f64>,
        targets: Array2<f64>,
    },
}

impl RiskData {
    fn len(&self) -> usize {
        match self {
            RiskData::Hard { x, .. } | RiskData::Soft { x, .. } => x.nrows(),
        }
    }

    fn rows(&self, idx: &[usize]) -> RiskData {
        match self {
            RiskData::Hard { x, y, weights } => RiskData::Hard {
                x: x.select(Axis(0), idx),
                y: idx.iter().map(|&i| y[i]).collect(),
                weights: weights
                    .as_ref()
                    .map(|w| idx.iter().map(|&i| w[i]).collect()),
            },
            RiskData::Soft { x, targets } => RiskData::Soft {
                x: x.select(Axis(0), idx),
                targets: targets.select(Axis(0), idx),
            },
        }
    }

    fn loss_and_grads(&self, params: &MlpParams) -> Result<(f64, MlpGrads)> {
        let (x, loss, dl) = match self {
            RiskData::Hard {
                x,
                y,
                weights: None,
            } => {
                let cache = params.forward(x.view())?;
                let loss = cross_entropy_risk(&cache.probs, y)?;
                let dl = cross_entropy_logit_grad(&cache.probs, y)?;
                return Ok((loss, params.backward(&cache, Some(&dl), None, 0.0)?));
            }
            RiskData::Hard {
                x,
                y,
                weights: Some(w),
            } => {
                let probs = params.forward(x.view())?.probs;
                let (loss, dl) = weighted_cross_entropy(&probs, y, w)?;
                (x, loss, dl)
            }
            RiskData::Soft { x, targets } => {
                let probs = params.forward(x.view())?.probs;
                let (loss, dl) = soft_cross_entropy(&probs, targets)?;
                (x, loss, dl)
            }
        };
        let cache = params.forward(x.view())?;
        Ok((loss, params.backward(&cache, Some(&dl), None, 0.0)?))
    }
}

/// Cross-domain mixup: pairs drawn uniformly from source (true labels) and
/// target (pseudo-labels) pooled together, labels mixed as one-hot vectors.
fn mixup_domain(
    source_x: &Array2<f64>,
    source_y: &[usize],
    target_x: &Array2<f64>,
    target_pseudo: &[usize],
    k: usize,
    cfg: &SamplingConfig,
    rng: &mut RandomSource,
) -> RiskData {
    let ns = source_x.nrows();
    let pool = ns + target_x.nrows();
    let row = |i: usize| {
        if i < ns {
            source_x.row(i)
        } else {
            target_x.row(i - ns)
        }
    };
    let label = |i: usize| {
        if i < ns {
            source_y[i]
        } else {
            target_pseudo[i - ns]
        }
    };
    let n_c = cfg.sample_count(ns);
    let mut x = Array2::zeros((n_c, source_x.ncols()));
    let mut targets = Array2::zeros((n_c, k));
    for r in 0..n_c {
        let a = rng.index(pool);
        let b = rng.index(pool);
        let theta = draw_mix_ratio(cfg, rng);
        let mut out = x.row_mut(r);
        out.assign(&row(a));
        out *= theta;
        out.scaled_add(1.0 - theta, &row(b));
        targets[[r, label(a)]] += theta;
        targets[[r, label(b)]] += 1.0 - theta;
    }
    RiskData::Soft { x, targets }
}

/// Source and target stacked, as the alignment term sees them.
struct AlignBatch {
    x: Array2<f64>,
    labels: Vec<usize>,
    domains: Vec<Domain>,
}

fn align_batch(
    source_x: &Array2<f64>,
    source_y: &[usize],
    target_x: &Array2<f64>,
    target_pseudo: &[usize],
    source_rows: &[usize],
    target_rows: &[usize],
) -> Result<AlignBatch> {
    let xs = source_x.select(Axis(0), source_rows);
    let xt = target_x.select(Axis(0), target_rows);
    let x = concatenate(Axis(0), &[xs.view(), xt.view()])
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let mut labels: Vec<usize> = source_rows.iter().map(|&i| source_y[i]).collect();
    labels.extend(target_rows.iter().map(|&i| target_pseudo[i]));
    let mut domains = vec![Domain::Source; source_rows.len()];
    domains.extend(std::iter::repeat_n(Domain::Target, target_rows.len()));
    Ok(AlignBatch { x, labels, domains })
}

struct StepOutcome {
    risk: f64,
    align: f64,
    skipped: Vec<usize>,
    numerical: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn step(
    params: &mut MlpParams,
    opt: &mut AdamState,
    risk_data: &RiskData,
    align: Option<(&AlignBatch, &LabelDistribution)>,
    cfg: &TrainConfig,
    measure: Dependence,
) -> Result<StepOutcome> {
    let (risk, mut grads) = risk_data.loss_and_grads(params)?;
    let mut out = StepOutcome {
        risk,
        align: 0.0,
        skipped: Vec::new(),
        numerical: Vec::new(),
    };
    if let Some((batch, p_t)) = align {
        let cache = params.forward(batch.x.view())?;
        let (report, fg) = alignment_loss_and_gradient(
            cache.features.view(),
            &batch.labels,
            &batch.domains,
            p_t,
            &cfg.etic,
            measure,
        )?;
        let ag = params.backward(&cache, None, Some(&fg), cfg.mu)?;
        grads.add_scaled(1.0, &ag);
        out.align = report.loss;
        for (j, reason) in &report.skipped {
            match reason {
                SkipReason::ZeroWeight => {}
                SkipReason::MissingDomain { .. } => out.skipped.push(*j),
                SkipReason::Numerical { .. } => {
                    out.skipped.push(*j);
                    out.numerical.push(*j);
                }
            }
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    opt.step(params, &grads);
    Ok(out)
}

fn chunks(order: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let parts = parts.max(1);
    (0..parts)
        .map(|p| {
            let lo = p * order.len() / parts;
            let hi = (p + 1) * order.len() / parts;
            order[lo..hi].to_vec()
        })
        .collect()
}

/// Warm start followed by `cfg.epochs` epochs of the configured variant.
pub fn train(task: &PdaTask, cfg: &TrainConfig) -> Result<(MlpParams, TrainReport)> {
    task.validate()?;
    cfg.validate()?;
    let k = task.num_classes;
    let source_x = task.source.features().clone();
    let source_y = task.source_labels()?.to_vec();
    // target labels are read only for the accuracy column
    let target_x = task.target.features().clone();
    let target_truth = task.target.labels();
    let p_s = empirical_label_distribution(&task.source)?;
    let variant = cfg.variant;
    let measure = if variant == Variant::Is2cHsic {
        Dependence::Hsic
    } else {
        Dependence::Etic
    };

    let mut params = warm_start(
        init_params(task, cfg)?,
        &task.source,
        cfg.warmup_epochs,
        cfg.adam,
    )?;
    let mut opt = AdamState::new(&params, cfg.adam);
    let mut p_prev = p_s.clone();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut wall = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let target_pseudo = params.predict(target_x.view())?;
        let shift = if cfg.estimate_label_shift {
            estimate_shift(
                &params,
                source_x.view(),
                &source_y,
                &target_pseudo,
                &p_s,
                &p_prev,
            )?
        } else {
            Shift {
                p_t: p_s.clone(),
                fallback: false,
            }
        };
        let p_t = shift.p_t;
        let mut rng = sampling_rng(cfg.seed, epoch);

        let risk_data = match variant {
            Variant::Is2c | Variant::SamplingOnly | Variant::Is2cHsic => {
                let ds = build_sampling_domain(&task.source, &p_t, &cfg.sampling, &mut rng)?
                    .into_dataset();
                RiskData::Hard {
                    y: ds.require_labels("sampling domain")?.to_vec(),
                    x: ds.features().clone(),
                    weights: None,
                }
            }
            Variant::SourceOnly | Variant::EticOnly => RiskData::Hard {
                x: source_x.clone(),
                y: source_y.clone(),
                weights: None,
            },
            Variant::WermEtic => RiskData::Hard {
                x: source_x.clone(),
                y: source_y.clone(),
                weights: Some(source_y.iter().map(|&j| p_t.get(j) / p_s.get(j)).collect()),
            },
            Variant::MixupEtic => mixup_domain(
                &source_x,
                &source_y,
                &target_x,
                &target_pseudo,
                k,
                &cfg.sampling,
                &mut rng,
            ),
        };
        let align_weights = if variant == Variant::MixupEtic {
            pseudo_label_marginal(&target_pseudo, k)?
        } else {
            p_t.clone()
        };
        let aligning = variant.aligns() && cfg.mu > 0.0;

        let (risk, align, skipped, numerical) = match cfg.batch_mode {
            BatchMode::Full => {
                let all_s: Vec<usize> = (0..source_x.nrows()).collect();
                let all_t: Vec<usize> = (0..target_x.nrows()).collect();
                let batch = if aligning {
                    Some(align_batch(
                        &source_x,
                        &source_y,
                        &target_x,
                        &target_pseudo,
                        &all_s,
                        &all_t,
                    )?)
                } else {
                    None
                };
                let o = step(
                    &mut params,
                    &mut opt,
                    &risk_data,
                    batch.as_ref().map(|b| (b, &align_weights)),
                    cfg,
                    measure,
                )?;
                (o.risk, o.align, o.skipped, o.numerical)
            }
            BatchMode::Minibatch { size } => {
                let mut brng = batch_rng(cfg.seed, epoch);
                let mut order: Vec<usize> = (0..risk_data.len()).collect();
                brng.shuffle(&mut order);
                let steps = risk_data.len().div_ceil(size);
                let risk_parts = chunks(&order, steps);
                let mut s_order: Vec<usize> = (0..source_x.nrows()).collect();
                let mut t_order: Vec<usize> = (0..target_x.nrows()).collect();
                brng.shuffle(&mut s_order);
                brng.shuffle(&mut t_order);
                let s_parts = chunks(&s_order, steps);
                let t_parts = chunks(&t_order, steps);
                let (mut risk, mut align) = (0.0, 0.0);
                let mut skipped = Vec::new();
                let mut numerical = Vec::new();
                for s in 0..steps {
                    let batch = if aligning {
                        Some(align_batch(
                            &source_x,
                            &source_y,
                            &target_x,
                            &target_pseudo,
                            &s_parts[s],
                            &t_parts[s],
                        )?)
                    } else {
                        None
                    };
                    let o = step(
                        &mut params,
                        &mut opt,
                        &risk_data.rows(&risk_parts[s]),
                        batch.as_ref().map(|b| (b, &align_weights)),
                        cfg,
                        measure,
                    )?;
                    risk += o.risk / steps as f64;
                    align += o.align / steps as f64;
                    skipped.extend(o.skipped);
                    numerical.extend(o.numerical);
                }
                skipped.sort_unstable();
                skipped.dedup();
                numerical.sort_unstable();
                numerical.dedup();
                (risk, align, skipped, numerical)
            }
        };

        let target_accuracy = match target_truth {
            Some(truth) => Some(accuracy(&params.predict(target_x.view())?, truth)),
            None => None,
        };
        records.push(EpochRecord {
            epoch,
            risk,
            align,
            total: risk + cfg.mu * align,
            p_t: p_t.probs().to_vec(),
            skipped,
            numerical_skips: numerical,
            bbse_fallback: shift.fallback,
            target_accuracy,
        });
        wall.push(started.elapsed().as_secs_f64());
        p_prev = p_t;
    }

    Ok((
        params,
        TrainReport {
            variant,
            mu: cfg.mu,
            epochs: records,
            wall_seconds: wall,
        },
    ))
}

/// Accuracy of `params` on a labelled dataset.
pub fn dataset_accuracy(params: &MlpParams, data: &FeatureDataset) -> Result<f64> {
    let labels = data.require_labels("accuracy")?;
    let probs = params.forward(data.features().view())?.probs;
    Ok(accuracy(&argmax_rows(&probs), labels))
}
