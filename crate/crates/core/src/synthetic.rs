//! Controlled PDA tasks and the two-dimensional convexity study data.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureDataset, LabelDistribution, PdaTask};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Gaussian classes with label shift, conditional shift and outlier classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPdaConfig {
    pub num_classes: usize,
    pub num_target_classes: usize,
    pub feature_dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Distance between adjacent class means.
    pub class_separation: f64,
    /// Length of the per-class translation applied to target samples.
    pub conditional_shift: f64,
    /// Target proportions over the first `num_target_classes` classes; uniform when absent.
    #[serde(default)]
    pub target_proportions: Option<Vec<f64>>,
    /// Isotropic standard deviation of each class-conditional.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    pub seed: u64,
}

fn default_noise_std() -> f64 {
    1.0
}

impl GaussianPdaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.num_target_classes == 0 || self.num_target_classes > self.num_classes {
            return bad("num_target_classes must lie in [1, num_classes]");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2");
        }
        if self.n_source < self.num_classes {
            return bad("n_source must be at least num_classes");
        }
        if self.n_target == 0 {
            return bad("n_target must be positive");
        }
        if !(self.class_separation > 0.0) {
            return bad("class_separation must be positive");
        }
        if !(self.conditional_shift >= 0.0) {
            return bad("conditional_shift must be nonnegative");
        }
        if !(self.noise_std > 0.0) {
            return bad("noise_std must be positive");
        }
        if let Some(p) = &self.target_proportions {
            if p.len() != self.num_target_classes {
                return bad("target_proportions must have num_target_classes entries");
            }
            LabelDistribution::new(p.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Haar-distributed orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_rotation(d: usize, rng: &mut RandomSource) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, d));
    let mut i = 0;
    while i < d {
        let mut v: Array1<f64> = (0..d).map(|_| rng.normal()).collect();
        for j in 0..i {
            let qj = q.row(j);
            let proj = v.dot(&qj);
            v.scaled_add(-proj, &qj);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        q.row_mut(i).assign(&(v / norm));
        i += 1;
    }
    q
}

fn random_unit(d: usize, rng: &mut RandomSource) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Class means with adjacent distance `sep`: a regular simplex when
/// `d >= K`, otherwise a square grid in the first two coordinates.
fn class_means(k: usize, d: usize, sep: f64) -> Array2<f64> {
    let mut means = Array2::<f64>::zeros((k, d));
    if d >= k {
        let s = sep / std::f64::consts::SQRT_2;
        for j in 0..k {
            means[[j, j]] = s;
        }
    } else {
        let cols = (k as f64).sqrt().ceil() as usize;
        for j in 0..k {
            means[[j, 0]] = sep * (j % cols) as f64;
            means[[j, 1]] = sep * (j / cols) as f64;
        }
    }
    means
}

/// Generate a labeled source and a target restricted to the first
/// `num_target_classes` classes. Target labels are kept for evaluation.
pub fn generate_gaussian_pda(cfg: &GaussianPdaConfig) -> Result<PdaTask> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let kt = cfg.num_target_classes;
    let d = cfg.feature_dim;
    let mut rng = RandomSource::new(cfg.seed);

    let rotation = random_rotation(d, &mut rng);
    let means = class_means(k, d, cfg.class_separation).dot(&rotation.t());
    let shifts: Vec<Array1<f64>> = (0..k)
        .map(|_| random_unit(d, &mut rng) * cfg.conditional_shift)
        .collect();

    let draw = |class: usize, shifted: bool, rng: &mut RandomSource| -> Vec<f64> {
        (0..d)
            .map(|c| {
                let mut x = means[[class, c]] + cfg.noise_std * rng.normal();
                if shifted {
                    x += shifts[class][c];
                }
                x
            })
            .collect()
    };

    // balanced source, every class present
    let source_labels: Vec<usize> = (0..cfg.n_source).map(|i| i % k).collect();
    let mut src = Vec::with_capacity(cfg.n_source * d);
    for &l in &source_labels {
        src.extend(draw(l, false, &mut rng));
    }

    let proportions = match &cfg.target_proportions {
        Some(p) => p.clone(),
        None => vec![1.0 / kt as f64; kt],
    };
    let mut cumulative = Vec::with_capacity(kt);
    let mut acc = 0.0;
    for p in &proportions {
        acc += p;
        cumulative.push(acc);
    }
    let mut target_labels = Vec::with_capacity(cfg.n_target);
    let mut tgt = Vec::with_capacity(cfg.n_target * d);
    for _ in 0..cfg.n_target {
        let l = rng.categorical(&cumulative);
        target_labels.push(l);
        tgt.extend(draw(l, true, &mut rng));
    }

    let source = FeatureDataset::labeled(
        Array2::from_shape_vec((cfg.n_source, d), src).expect("shape"),
        source_labels,
        k,
    )?;
    let target = FeatureDataset::labeled(
        Array2::from_shape_vec((cfg.n_target, d), tgt).expect("shape"),
        target_labels,
        k,
    )?;
    Ok(PdaTask {
        source,
        target,
        num_classes: k,
        shared_classes: Some((0..kt).collect()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexStudyConfig {
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl ConvexStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.n < 4 {
            return Err(Error::Config("n must be at least 4".into()));
        }
        Ok(())
    }
}

/// Two-dimensional Gaussian points labeled by a seeded linear boundary.
#[derive(Debug, Clone)]
pub struct ConvexStudy {
    pub data: FeatureDataset,
    /// Boundary normal; label is `1` where `w . x + b > 0`.
    pub w: [f64; 2],
    pub b: f64,
}

impl ConvexStudy {
    pub fn label_of(&self, x: [f64; 2]) -> usize {
        usize::from(self.w[0] * x[0] + self.w[1] * x[1] + self.b > 0.0)
    }
}

pub fn generate_convex_study(cfg: &ConvexStudyConfig) -> Result<ConvexStudy> {
    cfg.validate()?;
    let mut rng = RandomSource::new(cfg.seed);
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let w = [angle.cos(), angle.sin()];
    // offset scales with sigma so both classes survive as sigma shrinks
    let b = cfg.sigma * rng.uniform_range(-0.25, 0.25);
    let mut xs = Vec::with_capacity(cfg.n * 2);
    let mut labels = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let x = [cfg.sigma * rng.normal(), cfg.sigma * rng.normal()];
        labels.push(usize::from(w[0] * x[0] + w[1] * x[1] + b > 0.0));
        xs.extend(x);
    }
    let data = FeatureDataset::labeled(
        Array2::from_shape_vec((cfg.n, 2), xs).expect("shape"),
        labels,
        2,
    )?;
    Ok(ConvexStudy { data, w, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::empirical_label_distribution;

    fn cfg() -> GaussianPdaConfig {
        GaussianPdaConfig {
            num_classes: 3,
            num_target_classes: 2,
            feature_dim: 4,
            n_source: 3000,
            n_target: 3000,
            class_separation: 4.0,
            conditional_shift: 0.0,
            target_proportions: None,
            noise_std: 1.0,
            seed: 11,
        }
    }

    fn class_mean(ds: &FeatureDataset, class: usize) -> Array1<f64> {
        let idx = &ds.class_indices().unwrap()[class];
        let mut m = Array1::<f64>::zeros(ds.dim());
        for &i in idx {
            m += &ds.row(i);
        }
        m / idx.len() as f64
    }

    #[test]
    fn target_restricted_to_shared_classes() {
        let t = generate_gaussian_pda(&cfg()).unwrap();
        t.validate().unwrap();
        assert!(t.target.labels().unwrap().iter().all(|&l| l < 2));
        assert_eq!(t.shared_classes, Some(vec![0, 1]));
    }

    #[test]
    fn zero_shift_keeps_class_means() {
        let t = generate_gaussian_pda(&cfg()).unwrap();
        let ms = class_mean(&t.source, 0);
        let mt = class_mean(&t.target, 0);
        let n_t = t.target.class_indices().unwrap()[0].len() as f64;
        let n_s = t.source.class_indices().unwrap()[0].len() as f64;
        let tol = 3.0 * (1.0 / n_t + 1.0 / n_s).sqrt();
        for c in 0..4 {
            assert!(
                (ms[c] - mt[c]).abs() <= tol,
                "coord {c}: {} vs {}",
                ms[c],
                mt[c]
            );
        }
    }

    #[test]
    fn shift_moves_target_mean() {
        let mut c = cfg();
        c.conditional_shift = 3.0;
        let t = generate_gaussian_pda(&c).unwrap();
        let diff = class_mean(&t.source, 1) - class_mean(&t.target, 1);
        assert!((diff.dot(&diff).sqrt() - 3.0).abs() < 0.3);
    }

    #[test]
    fn full_overlap_uniform_is_close_to_source() {
        let mut c = cfg();
        c.num_target_classes = 3;
        c.n_target = 1000;
        let t = generate_gaussian_pda(&c).unwrap();
        let ps = empirical_label_distribution(&t.source).unwrap();
        let pt = empirical_label_distribution(&t.target).unwrap();
        assert!(ps.l1_distance(&pt).unwrap() <= 0.1);
    }

    #[test]
    fn deterministic() {
        let a = generate_gaussian_pda(&cfg()).unwrap();
        let b = generate_gaussian_pda(&cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg();
        c.num_target_classes = 4;
        assert!(matches!(generate_gaussian_pda(&c), Err(Error::Config(_))));
        let mut c = cfg();
        c.feature_dim = 1;
        assert!(generate_gaussian_pda(&c).is_err());
        let mut c = cfg();
        c.n_source = 2;
        assert!(generate_gaussian_pda(&c).is_err());
    }

    #[test]
    fn convex_study_labels_match_boundary() {
        let s = generate_convex_study(&ConvexStudyConfig {
            sigma: 10.0,
            n: 200,
            seed: 5,
        })
        .unwrap();
        assert_eq!(s.data.len(), 200);
        assert_eq!(s.data.dim(), 2);
        let labels = s.data.labels().unwrap();
        for i in 0..200 {
            let r = s.data.row(i);
            assert_eq!(s.label_of([r[0], r[1]]), labels[i]);
        }
        assert!(labels.contains(&0) && labels.contains(&1));
    }

    #[test]
    fn convex_study_tiny_sigma() {
        let s = generate_convex_study(&ConvexStudyConfig {
            sigma: 1e-9,
            n: 200,
            seed: 5,
        })
        .unwrap();
        assert!(s.data.features().iter().all(|x| x.abs() < 1e-7));
        let labels = s.data.labels().unwrap();
        assert!(labels.contains(&0) && labels.contains(&1));
    }
}
