//! Mini-batch AdamW minimization of the mean aggregated source loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::digest::config_digest;
use crate::error::{Error, Result};
use crate::harmonizer::{init_params, Architecture, HarmonizerParams, Scratch, DEFAULT_HIDDEN, PROB_CLIP};
use crate::pareto::{aggregate_gradient_into, aggregate_unchecked, AggregatorKind, AggregatorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub aggregator: AggregatorKind,
    /// Source weights `w_0..w_m`; equal weights when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub architecture: Architecture,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    /// Defaults to 1e-3 for the linear head and 1e-4 for the mlp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::adam_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// One epoch, one update per instance, in file order.
    #[serde(default)]
    pub single_pass: bool,
}

mod defaults {
    pub fn hidden() -> usize {
        super::DEFAULT_HIDDEN
    }
    pub fn weight_decay() -> f64 {
        1e-5
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn max_epochs() -> usize {
        50
    }
    pub fn patience() -> usize {
        5
    }
    pub fn adam_betas() -> (f64, f64) {
        (0.9, 0.999)
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
}

impl TrainConfig {
    pub fn new(aggregator: AggregatorKind, architecture: Architecture) -> Self {
        Self {
            aggregator,
            weights: None,
            architecture,
            hidden: defaults::hidden(),
            learning_rate: None,
            weight_decay: defaults::weight_decay(),
            batch_size: defaults::batch_size(),
            max_epochs: defaults::max_epochs(),
            patience: defaults::patience(),
            seed: 0,
            adam_betas: defaults::adam_betas(),
            adam_eps: defaults::adam_eps(),
            single_pass: false,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.architecture {
            Architecture::Linear => 1e-3,
            Architecture::Mlp => 1e-4,
        })
    }

    /// Aggregator over `m + 1` sources.
    pub fn spec(&self, m: usize) -> Result<AggregatorSpec> {
        match &self.weights {
            Some(w) if w.len() != m + 1 => {
                Err(Error::DimensionMismatch { context: "aggregator weights".into(), expected: m + 1, found: w.len() })
            }
            Some(w) => AggregatorSpec::new(self.aggregator, w.clone()),
            None => Ok(AggregatorSpec::equal(self.aggregator, m + 1)),
        }
    }

    pub fn digest(&self) -> Result<String> {
        config_digest(self)
    }

    fn validate(&self, n: usize) -> Result<()> {
        let lr = self.learning_rate();
        let (b1, b2) = self.adam_betas;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(lr.is_finite() && lr > 0.0) {
            return bad(format!("learning rate must be positive, got {lr}"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !self.single_pass && (self.batch_size == 0 || self.batch_size > n) {
            return bad(format!("batch size {} must lie in [1, n={n}]", self.batch_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean aggregated objective over the train split after each epoch.
    pub train_loss: Vec<f64>,
    /// Same on the dev split; empty without one.
    pub dev_loss: Vec<f64>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub params_digest: String,
    pub config_digest: String,
}

/// Reusable buffers for per-instance forward/backward passes.
struct Work {
    scratch: Scratch,
    losses: Vec<f64>,
    upstream: Vec<f64>,
}

impl Work {
    fn new(sources: usize) -> Self {
        Self { scratch: Scratch::default(), losses: vec![0.0; sources], upstream: vec![0.0; sources] }
    }

    /// Aggregated loss of instance `i`; leaves activations in `scratch`.
    fn objective(&mut self, params: &HarmonizerParams, data: &Dataset, spec: &AggregatorSpec, i: usize) -> f64 {
        params.forward_into(&data.instances()[i].features, &mut self.scratch);
        for (loss, answer) in self.losses.iter_mut().zip(data.row(i).answers()) {
            *loss = answer.map_or(0.0, |c| -self.scratch.probs[c.0].max(PROB_CLIP).ln());
        }
        aggregate_unchecked(spec, &self.losses)
    }

    /// Adds `d G(l_i) / d params` into `grad` and returns `G(l_i)`.
    fn accumulate(&mut self, params: &HarmonizerParams, data: &Dataset, spec: &AggregatorSpec, i: usize, grad: &mut [f64]) -> f64 {
        let value = self.objective(params, data, spec, i);
        aggregate_gradient_into(spec, &self.losses, &mut self.upstream);
        params.accumulate_gradient(&data.instances()[i].features, data.row(i), &self.upstream, &mut self.scratch, grad);
        value
    }
}

fn check_compatible(params: &HarmonizerParams, data: &Dataset, spec: &AggregatorSpec) -> Result<()> {
    let checks = [
        ("feature dimension", params.d(), data.d()),
        ("class count", params.k(), data.k()),
        ("aggregator weights", data.m() + 1, spec.len()),
    ];
    for (context, expected, found) in checks {
        if expected != found {
            return Err(Error::DimensionMismatch { context: context.into(), expected, found });
        }
    }
    Ok(())
}

/// Mean over instances of the aggregated loss vector.
pub fn evaluate_objective(params: &HarmonizerParams, data: &Dataset, spec: &AggregatorSpec) -> Result<f64> {
    check_compatible(params, data, spec)?;
    if data.n() == 0 {
        return Err(Error::EmptyInput("objective over an empty dataset"));
    }
    let mut work = Work::new(spec.len());
    let total: f64 = (0..data.n()).map(|i| work.objective(params, data, spec, i)).sum();
    Ok(total / data.n() as f64)
}

/// Mean aggregated loss over `batch` and its gradient with respect to the
/// parameters, summed in batch order.
pub fn batch_objective_gradient(
    params: &HarmonizerParams,
    data: &Dataset,
    spec: &AggregatorSpec,
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_compatible(params, data, spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch"));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.n()) {
        return Err(Error::InvalidConfig(format!("batch index {i} out of range for n={}", data.n())));
    }
    let mut work = Work::new(spec.len());
    let mut grad = vec![0.0; params.len()];
    let value = batch_step(&mut work, params, data, spec, batch, &mut grad);
    Ok((value, grad))
}

fn batch_step(work: &mut Work, params: &HarmonizerParams, data: &Dataset, spec: &AggregatorSpec, batch: &[usize], grad: &mut [f64]) -> f64 {
    grad.fill(0.0);
    let mut total = 0.0;
    for &i in batch {
        total += work.accumulate(params, data, spec, i, grad);
    }
    let scale = 1.0 / batch.len() as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    total * scale
}

struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    fn new(cfg: &TrainConfig, len: usize) -> Self {
        Self {
            lr: cfg.learning_rate(),
            weight_decay: cfg.weight_decay,
            beta1: cfg.adam_betas.0,
            beta2: cfg.adam_betas.1,
            eps: cfg.adam_eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *p -= self.lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Trains a harmonizer on a gold-free split. With a dev split, returns the
/// parameters of the epoch with the lowest dev objective and stops after
/// `patience` epochs without improvement.
pub fn train(train: &Dataset, dev: Option<&Dataset>, cfg: &TrainConfig) -> Result<(HarmonizerParams, TrainReport)> {
    if train.has_gold() {
        return Err(Error::GoldLeak);
    }
    if train.n() == 0 {
        return Err(Error::EmptyInput("training split"));
    }
    if train.labels().triggered_count() == 0 {
        return Err(Error::NothingTriggered);
    }
    cfg.validate(train.n())?;
    let spec = cfg.spec(train.m())?;
    let mut params = init_params(cfg.architecture, train.d(), train.k(), cfg.hidden, cfg.seed)?;
    if let Some(dev) = dev {
        check_compatible(&params, dev, &spec)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut optimizer = AdamW::new(cfg, params.len());
    let mut work = Work::new(spec.len());
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train.n()).collect();
    let (batch_size, max_epochs) = if cfg.single_pass { (1, 1) } else { (cfg.batch_size, cfg.max_epochs) };

    let mut train_loss = Vec::new();
    let mut dev_loss = Vec::new();
    let mut best: Option<(f64, usize, HarmonizerParams)> = None;

    for epoch in 1..=max_epochs {
        if !cfg.single_pass {
            order.shuffle(&mut rng);
        }
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let value = batch_step(&mut work, &params, train, &spec, batch, &mut grad);
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, batch: b + 1, value });
            }
            optimizer.update(params.values_mut(), &grad);
        }
        let objective = evaluate_objective(&params, train, &spec)?;
        if !objective.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0, value: objective });
        }
        train_loss.push(objective);
        log::debug!("epoch {epoch}: train objective {objective:.6}");

        let Some(dev) = dev else { continue };
        let dev_value = evaluate_objective(&params, dev, &spec)?;
        dev_loss.push(dev_value);
        match &best {
            Some((best_value, _, _)) if dev_value >= *best_value => {}
            _ => best = Some((dev_value, epoch, params.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch > cfg.patience {
            break;
        }
    }

    let epochs_run = train_loss.len();
    let (params, best_epoch) = match best {
        Some((_, epoch, best_params)) => (best_params, epoch),
        None => (params, epochs_run),
    };
    let report = TrainReport { epochs_run, train_loss, dev_loss, best_epoch, params_digest: params.digest(), config_digest: cfg.digest()? };
    Ok((params, report))
}
