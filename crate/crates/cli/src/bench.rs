//! Per-iteration wall time of the two Sinkhorn formulations.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use pda_core::etic::{
    etic_per_class, iteration_op_count, reference_iteration_op_count, sinkhorn_scaling,
    tensor_sinkhorn_reference, Domain, EticConfig, EticWorkspace, ReferenceProblem,
};
use pda_core::RandomSource;
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Largest size at which values are cross-checked (the reference runs to convergence).
pub const CHECK_MAX_SIZE: usize = 64;
const DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub fast_iters: usize,
    pub reference_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeTiming {
    pub size: usize,
    pub fast_mean: f64,
    pub fast_std: f64,
    pub reference_mean: f64,
    pub reference_std: f64,
    pub value_rel_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<SizeTiming>,
    pub fast_slope: f64,
    pub reference_slope: f64,
}

impl BenchOptions {
    pub fn validate(&self) -> CliResult<()> {
        if self.sizes.is_empty() {
            return Err(CliError::Config("at least one size is required".into()));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config("sizes must be strictly ascending".into()));
        }
        if self.sizes[0] < 4 {
            return Err(CliError::Config("sizes must be at least 4".into()));
        }
        if self.repeats == 0 || self.fast_iters == 0 || self.reference_iters == 0 {
            return Err(CliError::Config(
                "repeats and iteration counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Random class of `n` points split evenly between domains.
pub fn instance(n: usize, seed: u64) -> (Array2<f64>, Vec<Domain>) {
    let mut rng = RandomSource::new(seed).fork(n as u64);
    let x = Array2::from_shape_fn((n, DIM), |_| rng.normal());
    let domains = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                Domain::Source
            } else {
                Domain::Target
            }
        })
        .collect();
    (x, domains)
}

pub fn run(opts: &BenchOptions) -> CliResult<BenchResult> {
    opts.validate()?;
    let mut rows = Vec::new();
    for &n in &opts.sizes {
        let (x, domains) = instance(n, opts.seed);
        let timed = |iters: usize| EticConfig {
            max_iters: iters,
            tol: 0.0,
            ..EticConfig::default()
        };

        let fast_cfg = timed(opts.fast_iters);
        let ws = EticWorkspace::new(x.view(), &domains, &fast_cfg)?;
        let mut fast = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let t = Instant::now();
            let s = sinkhorn_scaling(&ws.a, &ws.b, &ws.k1, &ws.k2, &fast_cfg)?;
            fast.push(t.elapsed().as_secs_f64() / s.iterations as f64);
        }

        let ref_cfg = timed(opts.reference_iters);
        let problem = ReferenceProblem::new(x.view(), &domains, &ref_cfg)?;
        let mut reference = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let t = Instant::now();
            let (iterations, _) = problem.cross_scaling(&ref_cfg)?;
            reference.push(t.elapsed().as_secs_f64() / iterations as f64);
        }

        let value_rel_diff = if n <= CHECK_MAX_SIZE {
            let cfg = EticConfig::default();
            let f = etic_per_class(x.view(), &domains, &cfg)?.value;
            let r = tensor_sinkhorn_reference(x.view(), &domains, &cfg)?.value;
            Some((f - r).abs() / r.abs().max(f64::MIN_POSITIVE))
        } else {
            None
        };
        let (fast_mean, fast_std) = mean_std(&fast);
        let (reference_mean, reference_std) = mean_std(&reference);
        rows.push(SizeTiming {
            size: n,
            fast_mean,
            fast_std,
            reference_mean,
            reference_std,
            value_rel_diff,
        });
    }
    let sizes: Vec<f64> = rows.iter().map(|r| r.size as f64).collect();
    let fast_slope = loglog_slope(
        &sizes,
        &rows.iter().map(|r| r.fast_mean).collect::<Vec<_>>(),
    );
    let reference_slope = loglog_slope(
        &sizes,
        &rows.iter().map(|r| r.reference_mean).collect::<Vec<_>>(),
    );
    Ok(BenchResult {
        rows,
        fast_slope,
        reference_slope,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Least-squares slope of `ln y` on `ln x`; NaN with fewer than two points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Timing table; the last row carries the fitted slopes in the mean columns.
pub fn to_csv(prov: &Value, opts: &BenchOptions, result: &BenchResult) -> String {
    let mut out = String::new();
    writeln!(out, "# {}", serde_json::to_string(prov).expect("json")).expect("write");
    writeln!(
        out,
        "# repeats={} fast_iters={} reference_iters={}",
        opts.repeats, opts.fast_iters, opts.reference_iters
    )
    .expect("write");
    out.push_str(
        "size,fast_mean_s,fast_std_s,reference_mean_s,reference_std_s,fast_ops_per_iter,reference_ops_per_iter,value_rel_diff\n",
    );
    for r in &result.rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{},{},{}",
            r.size,
            r.fast_mean,
            r.fast_std,
            r.reference_mean,
            r.reference_std,
            iteration_op_count(r.size),
            reference_iteration_op_count(r.size),
            r.value_rel_diff
                .map(|v| format!("{v:e}"))
                .unwrap_or_default()
        )
        .expect("write");
    }
    writeln!(
        out,
        "slope,{},,{},,,,",
        result.fast_slope, result.reference_slope
    )
    .expect("write");
    out
}
