//! Synthetic weak-supervision benchmark with known ground truth.
//!
//! Each instance draws a class `y` and a latent difficulty `t ~ U[0, 1]`.
//! Features are `mu_y + (noise_base + noise_scale * t) * N(0, I)`. The LLM is
//! correct with probability `1/K + (1 - 1/K) * sigmoid(alpha - beta * t)`;
//! source `j` fires with probability `c_j` and is correct with probability
//! `a_j`. Wrong answers are uniform over the other classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassIndex, ClassSpace, Dataset, Instance, SourceLabelMatrix, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub source_accuracy: Vec<f64>,
    pub source_coverage: Vec<f64>,
    #[serde(default = "defaults::llm_alpha")]
    pub llm_alpha: f64,
    #[serde(default = "defaults::llm_beta")]
    pub llm_beta: f64,
    /// Norm of every class mean.
    #[serde(default = "defaults::class_separation")]
    pub class_separation: f64,
    #[serde(default = "defaults::noise_base")]
    pub noise_base: f64,
    #[serde(default = "defaults::noise_scale")]
    pub noise_scale: f64,
    /// Seeds the class means, so datasets drawn with different seeds share one geometry.
    #[serde(default)]
    pub layout_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

mod defaults {
    pub fn llm_alpha() -> f64 {
        3.0
    }
    pub fn llm_beta() -> f64 {
        5.0
    }
    pub fn class_separation() -> f64 {
        2.0
    }
    pub fn noise_base() -> f64 {
        0.5
    }
    pub fn noise_scale() -> f64 {
        1.5
    }
}

impl SynthConfig {
    /// Defaults for everything except the shape and the per-source profile.
    pub fn new(n: usize, k: usize, d: usize, source_accuracy: Vec<f64>, source_coverage: Vec<f64>) -> Self {
        Self {
            n,
            k,
            d,
            source_accuracy,
            source_coverage,
            llm_alpha: defaults::llm_alpha(),
            llm_beta: defaults::llm_beta(),
            class_separation: defaults::class_separation(),
            noise_base: defaults::noise_base(),
            noise_scale: defaults::noise_scale(),
            layout_seed: 0,
            labels: None,
        }
    }

    pub fn m(&self) -> usize {
        self.source_accuracy.len()
    }

    /// LLM accuracy at difficulty `t`, in `(1/K, 1]`.
    pub fn llm_accuracy(&self, t: f64) -> f64 {
        let chance = 1.0 / self.k as f64;
        let s = 1.0 / (1.0 + (-(self.llm_alpha - self.llm_beta * t)).exp());
        chance + (1.0 - chance) * s
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.source_accuracy.len() != self.source_coverage.len() {
            return bad(format!("{} source accuracies but {} coverages", self.source_accuracy.len(), self.source_coverage.len()));
        }
        let chance = 1.0 / self.k as f64;
        for (j, &a) in self.source_accuracy.iter().enumerate() {
            if !(a > chance && a <= 1.0) {
                return bad(format!("source {} accuracy {a} must lie in (1/K, 1] = ({chance}, 1]", j + 1));
            }
        }
        for (j, &c) in self.source_coverage.iter().enumerate() {
            if !(c > 0.0 && c <= 1.0) {
                return bad(format!("source {} coverage {c} must lie in (0, 1]", j + 1));
            }
        }
        let finite = [self.llm_alpha, self.llm_beta, self.class_separation, self.noise_base, self.noise_scale];
        if finite.iter().any(|v| !v.is_finite()) || self.noise_base < 0.0 || self.noise_scale < 0.0 {
            return bad("feature and llm profile parameters must be finite, noise non-negative".into());
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.k {
                return bad(format!("{} labels given for k={}", labels.len(), self.k));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Gold labels attached; tagged as a test split.
    pub dataset: Dataset,
    /// Per-instance probability that the LLM answer is wrong.
    pub llm_error_prob: Vec<f64>,
    pub difficulty: Vec<f64>,
}

fn class_means(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.layout_seed);
    (0..cfg.k)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * cfg.class_separation).collect()
        })
        .collect()
}

fn noisy_answer(rng: &mut ChaCha8Rng, gold: usize, k: usize, accuracy: f64) -> ClassIndex {
    let correct = rng.random::<f64>() < accuracy;
    let offset = rng.random_range(1..k);
    ClassIndex(if correct { gold } else { (gold + offset) % k })
}

/// Deterministic under `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let means = class_means(cfg);
    let space = match &cfg.labels {
        Some(labels) => ClassSpace::new(labels.clone())?,
        None => ClassSpace::numbered(cfg.k)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.m();

    let mut instances = Vec::with_capacity(cfg.n);
    let mut llm = Vec::with_capacity(cfg.n);
    let mut rows = Vec::with_capacity(cfg.n);
    let mut llm_error_prob = Vec::with_capacity(cfg.n);
    let mut difficulty = Vec::with_capacity(cfg.n);

    for i in 0..cfg.n {
        let y = rng.random_range(0..cfg.k);
        let t: f64 = rng.random();
        let sigma = cfg.noise_base + cfg.noise_scale * t;
        let features = means[y]
            .iter()
            .map(|&mu| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mu + sigma * z
            })
            .collect();
        let q = cfg.llm_accuracy(t);
        llm.push(Some(noisy_answer(&mut rng, y, cfg.k, q)));
        let row = (0..m)
            .map(|j| {
                let fired = rng.random::<f64>() < cfg.source_coverage[j];
                let answer = noisy_answer(&mut rng, y, cfg.k, cfg.source_accuracy[j]);
                fired.then_some(answer)
            })
            .collect();
        rows.push(row);
        instances.push(Instance { id: format!("syn{seed}-{i:07}"), features, text: None, entities: Vec::new(), gold: Some(ClassIndex(y)) });
        llm_error_prob.push(1.0 - q);
        difficulty.push(t);
    }

    let labels = SourceLabelMatrix::new(llm, rows, m)?;
    Ok(SyntheticData { dataset: Dataset::new(space, instances, labels, Split::Test)?, llm_error_prob, difficulty })
}
