use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pda_core::eval::{
    balanced_prediction_error, bound_report, class_conditional_a_distance, conditional_error_gap,
    model_error, ADistanceReport, BoundReport, LipschitzSource,
};
use pda_core::model::{MlpParams, ModelDims, Tensor};
use pda_core::sampling::{build_sampling_domain, SamplingConfig};
use pda_core::synthetic::generate_gaussian_pda;
use pda_core::trainer::{train, TrainReport, Variant};
use pda_core::{empirical_label_distribution, LabelDistribution, PdaTask, RandomSource};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{FileFormat, LipschitzMode, RunConfig};
use crate::error::{CliError, CliResult};
use crate::features::write_features;
use crate::task::{load_task, sha256_hex, FileEntry, Manifest, MANIFEST};

pub const REPORT_FILE: &str = "report.csv";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const WALL_TIME_FILE: &str = "wall_time.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BOUND_FILE: &str = "bound_report.json";

const BOUND_STREAM: u64 = 7;

pub fn provenance(command: &str, cfg: &RunConfig) -> Value {
    json!({
        "tool": "pda",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "config": cfg.provenance(),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn generate(cfg: &RunConfig) -> CliResult<Manifest> {
    let gen = cfg
        .generate
        .as_ref()
        .ok_or_else(|| CliError::Config("generate section is required".into()))?;
    let task = generate_gaussian_pda(gen)?;
    ensure_dir(&cfg.task_dir)?;
    let ext = match cfg.feature_format {
        FileFormat::Binary => "bin",
        FileFormat::Csv => "csv",
    };
    let entry = |name: &str, data| -> CliResult<FileEntry> {
        let path = format!("{name}.{ext}");
        let bytes = write_features(&cfg.task_dir.join(&path), data)?;
        Ok(FileEntry {
            path,
            sha256: Some(sha256_hex(&bytes)),
        })
    };
    let manifest = Manifest {
        num_classes: task.num_classes,
        shared_classes: task.shared_classes.clone(),
        source: entry("source", &task.source)?,
        target: entry("target", &task.target)?,
        provenance: Some(provenance("generate", cfg)),
    };
    write_json(&cfg.task_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub provenance: Value,
    pub variant: Variant,
    pub dims: ModelDims,
    /// Target label distribution estimated in the last epoch.
    pub p_t: Vec<f64>,
    pub tensors: Vec<Tensor>,
}

impl Snapshot {
    pub fn load(path: &Path) -> CliResult<(Self, MlpParams)> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let snap: Snapshot = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: not a snapshot: {e}", path.display())))?;
        let params = MlpParams::from_tensors(&snap.tensors)
            .map_err(|e| CliError::Shape(format!("{}: {e}", path.display())))?;
        if params.dims() != snap.dims {
            return Err(CliError::Shape(format!(
                "{}: tensors disagree with recorded dims",
                path.display()
            )));
        }
        Ok((snap, params))
    }
}

pub fn train_cmd(cfg: &RunConfig) -> CliResult<TrainReport> {
    let (task, _) = load_task(&cfg.task_dir)?;
    let (params, report) = train(&task, &cfg.train)?;
    ensure_dir(&cfg.output_dir)?;
    let prov = provenance("train", cfg);
    let path = cfg.output_dir.join(REPORT_FILE);
    fs::write(&path, report_csv(&prov, &report)).map_err(CliError::io(&path))?;

    let mut wall = String::from("epoch,seconds\n");
    for (i, s) in report.wall_seconds.iter().enumerate() {
        writeln!(wall, "{},{s}", i + 1).expect("string write");
    }
    let path = cfg.output_dir.join(WALL_TIME_FILE);
    fs::write(&path, wall).map_err(CliError::io(&path))?;

    let p_t = report
        .epochs
        .last()
        .map(|e| e.p_t.clone())
        .unwrap_or_else(|| {
            empirical_label_distribution(&task.source)
                .map(|d| d.probs().to_vec())
                .unwrap_or_default()
        });
    let snap = Snapshot {
        provenance: prov,
        variant: report.variant,
        dims: params.dims(),
        p_t,
        tensors: params.to_tensors(),
    };
    write_json(&cfg.output_dir.join(SNAPSHOT_FILE), &snap)?;
    Ok(report)
}

/// Per-epoch CSV with the provenance as leading `#` lines.
pub fn report_csv(prov: &Value, report: &TrainReport) -> String {
    let mut out = String::new();
    writeln!(out, "# {}", serde_json::to_string(prov).expect("json")).expect("string write");
    out.push_str(
        "epoch,risk,align,total,target_accuracy,bbse_fallback,skipped,numerical_skips,p_t\n",
    );
    let join = |v: &[usize]| {
        v.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";")
    };
    for e in &report.epochs {
        let acc = e.target_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let p_t = e
            .p_t
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{},{},{},{acc},{},{},{},{p_t}",
            e.epoch,
            e.risk,
            e.align,
            e.total,
            e.bbse_fallback,
            join(&e.skipped),
            join(&e.numerical_skips)
        )
        .expect("string write");
    }
    out
}

fn check_dims(params: &MlpParams, task: &PdaTask) -> CliResult<()> {
    let dims = params.dims();
    if dims.input != task.source.dim() || dims.classes != task.num_classes {
        return Err(CliError::Shape(format!(
            "snapshot expects {} features and {} classes, task has {} and {}",
            dims.input,
            dims.classes,
            task.source.dim(),
            task.num_classes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub provenance: Value,
    pub source_accuracy: f64,
    pub target_accuracy: Option<f64>,
    /// Target misclassification rate.
    pub model_error: Option<f64>,
    pub delta_be: Option<f64>,
    pub delta_ce: Option<f64>,
    pub a_distance: Option<ADistanceReport>,
    pub bound: Option<BoundReport>,
}

pub fn evaluate(cfg: &RunConfig, snapshot: &Path, theta: Option<f64>) -> CliResult<Metrics> {
    let (task, manifest) = load_task(&cfg.task_dir)?;
    let (snap, params) = Snapshot::load(snapshot)?;
    check_dims(&params, &task)?;
    let k = task.num_classes;
    let source_labels = task.source_labels()?;
    let preds_s = params.predict(task.source.features().view())?;
    let preds_t = params.predict(task.target.features().view())?;
    let source_accuracy = 1.0 - model_error(&preds_s, source_labels, k)?;
    let mut metrics = Metrics {
        provenance: provenance("evaluate", cfg),
        source_accuracy,
        target_accuracy: None,
        model_error: None,
        delta_be: None,
        delta_ce: None,
        a_distance: None,
        bound: None,
    };
    if let Some(labels_t) = task.target.labels() {
        let err = model_error(&preds_t, labels_t, k)?;
        metrics.model_error = Some(err);
        metrics.target_accuracy = Some(1.0 - err);
        metrics.delta_be = Some(balanced_prediction_error(&preds_t, labels_t, k)?);
        let p_t = empirical_label_distribution(&task.target)?;
        metrics.delta_ce = Some(conditional_error_gap(
            &preds_s,
            source_labels,
            &preds_t,
            labels_t,
            &p_t,
            k,
        )?);
        let shared = manifest
            .shared_classes
            .clone()
            .unwrap_or_else(|| p_t.support());
        let fs = params.features(task.source.features().view())?;
        let ft = params.features(task.target.features().view())?;
        metrics.a_distance = Some(class_conditional_a_distance(
            fs.view(),
            source_labels,
            ft.view(),
            labels_t,
            &shared,
        )?);
    }
    if let Some(theta) = theta {
        metrics.bound = Some(bound_for(cfg, &task, &snap, &params, theta)?);
    }
    ensure_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

pub fn bound_cmd(cfg: &RunConfig, snapshot: &Path, theta: f64) -> CliResult<Value> {
    let (task, _) = load_task(&cfg.task_dir)?;
    let (snap, params) = Snapshot::load(snapshot)?;
    check_dims(&params, &task)?;
    let report = bound_for(cfg, &task, &snap, &params, theta)?;
    let out = json!({ "provenance": provenance("bound-report", cfg), "bound": report });
    ensure_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(BOUND_FILE), &out)?;
    Ok(out)
}

/// The sampling domain is drawn from the snapshot's own target estimate.
fn bound_for(
    cfg: &RunConfig,
    task: &PdaTask,
    snap: &Snapshot,
    params: &MlpParams,
    theta: f64,
) -> CliResult<BoundReport> {
    if task.target.labels().is_none() {
        return Err(CliError::MissingLabels(
            "bound report requires labeled target".into(),
        ));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(CliError::Config(format!(
            "theta must lie in [0, 1], got {theta}"
        )));
    }
    let p = LabelDistribution::new(snap.p_t.clone())
        .map_err(|e| CliError::Shape(format!("snapshot p_t: {e}")))?;
    let sampling = SamplingConfig {
        n_c: cfg.train.sampling.n_c,
        ..SamplingConfig::fixed(theta)
    };
    let mut rng = RandomSource::new(cfg.seed).fork(BOUND_STREAM);
    let domain = build_sampling_domain(&task.source, &p, &sampling, &mut rng)?;
    let lipschitz = match cfg.evaluate.lipschitz {
        LipschitzMode::Empirical => LipschitzSource::Empirical {
            num_pairs: cfg.evaluate.lipschitz_pairs,
        },
        LipschitzMode::Certified => LipschitzSource::Certified,
    };
    Ok(bound_report(
        params, task, &domain, theta, lipschitz, &mut rng,
    )?)
}

pub fn default_snapshot(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(SNAPSHOT_FILE)
}
