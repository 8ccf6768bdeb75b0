//! Parametric harmonizers mapping a feature vector to a distribution over the
//! `K` answer classes, with analytic gradients of the per-source losses.
//!
//! Parameters live in one flat vector so optimizers can treat every
//! architecture the same way. Layouts (row-major):
//!
//! * linear: `W (K x D)`, `b (K)`
//! * mlp: `W1 (H x D)`, `b1 (H)`, `W2 (K x H)`, `b2 (K)` with a ReLU hidden layer

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ClassIndex, Instance, LabelRow};
use crate::error::{Error, Result};

/// Probabilities below this are clipped inside the log.
pub const PROB_CLIP: f64 = 1e-12;

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "lr" => Ok(Architecture::Linear),
            "mlp" => Ok(Architecture::Mlp),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Linear => "linear",
            Architecture::Mlp => "mlp",
        })
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidDataset(format!("not a probability vector: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDataset(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Max-subtracted softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: ClassIndex) -> f64 {
        self.0[class.0]
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn argmax(&self) -> ClassIndex {
        let mut best = 0;
        for (c, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = c;
            }
        }
        ClassIndex(best)
    }

    pub(crate) fn set(&mut self, class: ClassIndex, value: f64) {
        self.0[class.0] = value;
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(dist: &Simplex, label: ClassIndex) -> f64 {
    -dist.get(label).max(PROB_CLIP).ln()
}

/// Per-source losses `(l_0, ..., l_m)`; untriggered entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    pub values: Vec<f64>,
    pub triggered: Vec<bool>,
}

impl LossVector {
    pub fn from_dist(dist: &Simplex, row: LabelRow<'_>) -> Self {
        let mut values = Vec::with_capacity(row.len());
        let mut triggered = Vec::with_capacity(row.len());
        for answer in row.answers() {
            triggered.push(answer.is_some());
            values.push(answer.map_or(0.0, |c| cross_entropy(dist, c)));
        }
        Self { values, triggered }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizerParams {
    architecture: Architecture,
    d: usize,
    k: usize,
    hidden: usize,
    values: Vec<f64>,
}

impl HarmonizerParams {
    pub fn zeros(architecture: Architecture, d: usize, k: usize, hidden: usize) -> Result<Self> {
        if d == 0 || k < 2 || (architecture == Architecture::Mlp && hidden == 0) {
            return Err(Error::InvalidConfig(format!("invalid harmonizer shape d={d} k={k} hidden={hidden}")));
        }
        let hidden = if architecture == Architecture::Linear { 0 } else { hidden };
        let len = match architecture {
            Architecture::Linear => k * d + k,
            Architecture::Mlp => hidden * d + hidden + k * hidden + k,
        };
        Ok(Self { architecture, d, k, hidden, values: vec![0.0; len] })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Hidden width; 0 for the linear head.
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Named weight blocks in layout order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let (d, k, h) = (self.d, self.k, self.hidden);
        let v = &self.values;
        match self.architecture {
            Architecture::Linear => vec![("w", &v[..k * d]), ("b", &v[k * d..])],
            Architecture::Mlp => {
                let (w1, rest) = v.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
        }
    }

    /// SHA-256 over architecture, shape, and the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.architecture.to_string().as_bytes());
        for dim in [self.d, self.k, self.hidden] {
            hasher.update((dim as u64).to_le_bytes());
        }
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.d {
            return Err(Error::DimensionMismatch { context: "harmonizer input".into(), expected: self.d, found: features.len() });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("harmonizer input".into()));
        }
        Ok(())
    }

    /// Fills `scratch` with hidden activations (mlp) and class probabilities.
    pub(crate) fn forward_into(&self, x: &[f64], scratch: &mut Scratch) {
        let (d, k, h) = (self.d, self.k, self.hidden);
        scratch.probs.clear();
        match self.architecture {
            Architecture::Linear => {
                let (w, b) = self.values.split_at(k * d);
                for c in 0..k {
                    scratch.probs.push(b[c] + dot(&w[c * d..(c + 1) * d], x));
                }
            }
            Architecture::Mlp => {
                let (w1, rest) = self.values.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                scratch.hidden.clear();
                for u in 0..h {
                    let z = b1[u] + dot(&w1[u * d..(u + 1) * d], x);
                    scratch.hidden.push(z.max(0.0));
                }
                for c in 0..k {
                    scratch.probs.push(b2[c] + dot(&w2[c * h..(c + 1) * h], &scratch.hidden));
                }
            }
        }
        softmax_in_place(&mut scratch.probs);
    }

    /// Adds `sum_j upstream[j] * d l_j / d params` into `grad`, reusing the
    /// activations left in `scratch` by [`forward_into`](Self::forward_into).
    pub(crate) fn accumulate_gradient(&self, x: &[f64], row: LabelRow<'_>, upstream: &[f64], scratch: &mut Scratch, grad: &mut [f64]) {
        let (d, k, h) = (self.d, self.k, self.hidden);
        // d/dlogits of sum_j u_j * CE(softmax, label_j) = sum_j u_j (p - onehot(label_j)).
        scratch.dlogits.clear();
        scratch.dlogits.resize(k, 0.0);
        let mut mass = 0.0;
        for (j, answer) in row.answers().enumerate() {
            let Some(label) = answer else { continue };
            let u = upstream[j];
            if u == 0.0 || scratch.probs[label.0] < PROB_CLIP {
                // clipped region: loss is locally constant
                continue;
            }
            mass += u;
            scratch.dlogits[label.0] -= u;
        }
        for c in 0..k {
            scratch.dlogits[c] += mass * scratch.probs[c];
        }

        match self.architecture {
            Architecture::Linear => {
                let (gw, gb) = grad.split_at_mut(k * d);
                for c in 0..k {
                    let g = scratch.dlogits[c];
                    axpy(g, x, &mut gw[c * d..(c + 1) * d]);
                    gb[c] += g;
                }
            }
            Architecture::Mlp => {
                let w2 = &self.values[h * d + h..h * d + h + k * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(k * h);
                for c in 0..k {
                    let g = scratch.dlogits[c];
                    axpy(g, &scratch.hidden, &mut gw2[c * h..(c + 1) * h]);
                    gb2[c] += g;
                }
                for u in 0..h {
                    if scratch.hidden[u] <= 0.0 {
                        continue;
                    }
                    let mut dz = 0.0;
                    for c in 0..k {
                        dz += scratch.dlogits[c] * w2[c * h + u];
                    }
                    axpy(dz, x, &mut gw1[u * d..(u + 1) * d]);
                    gb1[u] += dz;
                }
            }
        }
    }
}

#[derive(Debug, Default, Clone)]
pub(crate) struct Scratch {
    hidden: Vec<f64>,
    pub(crate) probs: Vec<f64>,
    dlogits: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn forward(params: &HarmonizerParams, features: &[f64]) -> Result<Simplex> {
    params.check_features(features)?;
    let mut scratch = Scratch::default();
    params.forward_into(features, &mut scratch);
    Ok(Simplex(scratch.probs))
}

pub fn loss_vector(params: &HarmonizerParams, inst: &Instance, row: LabelRow<'_>) -> Result<LossVector> {
    let dist = forward(params, &inst.features)?;
    Ok(LossVector::from_dist(&dist, row))
}

/// Gradient of `sum_j upstream[j] * l_j` with respect to every parameter.
pub fn backward(params: &HarmonizerParams, inst: &Instance, row: LabelRow<'_>, upstream: &[f64]) -> Result<Vec<f64>> {
    params.check_features(&inst.features)?;
    if upstream.len() != row.len() {
        return Err(Error::DimensionMismatch { context: "upstream gradient".into(), expected: row.len(), found: upstream.len() });
    }
    let mut scratch = Scratch::default();
    let mut grad = vec![0.0; params.len()];
    params.forward_into(&inst.features, &mut scratch);
    params.accumulate_gradient(&inst.features, row, upstream, &mut scratch, &mut grad);
    Ok(grad)
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(architecture: Architecture, d: usize, k: usize, hidden: usize, seed: u64) -> Result<HarmonizerParams> {
    let mut params = HarmonizerParams::zeros(architecture, d, k, hidden)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = params.hidden;
    let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in slice {
            *w = rng.random_range(-limit..=limit);
        }
    };
    let v = &mut params.values;
    match architecture {
        Architecture::Linear => fill(&mut v[..k * d], d, k),
        Architecture::Mlp => {
            fill(&mut v[..h * d], d, h);
            fill(&mut v[h * d + h..h * d + h + k * h], h, k);
        }
    }
    Ok(params)
}

pub const MODEL_SCHEMA: &str = "polar-model-v1";

/// A trained harmonizer plus the metadata written to model checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: HarmonizerParams,
    pub class_labels: Vec<String>,
    pub train_config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    architecture: Architecture,
    d: usize,
    k: usize,
    h: usize,
    weights: BTreeMap<String, Vec<f64>>,
    class_labels: Vec<String>,
    train_config_digest: String,
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let p = &self.params;
        let checkpoint = Checkpoint {
            schema: MODEL_SCHEMA.into(),
            architecture: p.architecture,
            d: p.d,
            k: p.k,
            h: p.hidden,
            weights: p.blocks().into_iter().map(|(name, w)| (name.to_string(), w.to_vec())).collect(),
            class_labels: self.class_labels.clone(),
            train_config_digest: self.train_config_digest.clone(),
        };
        Ok(serde_json::to_string_pretty(&checkpoint)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.schema != MODEL_SCHEMA {
            return Err(Error::Malformed(format!("unsupported model schema {:?}", cp.schema)));
        }
        let mut params = HarmonizerParams::zeros(cp.architecture, cp.d, cp.k, cp.h)?;
        let names: Vec<&str> = params.blocks().iter().map(|(n, _)| *n).collect();
        let mut values = Vec::with_capacity(params.len());
        for name in names {
            let block = cp.weights.get(name).ok_or_else(|| Error::Malformed(format!("model is missing weight block {name:?}")))?;
            values.extend_from_slice(block);
        }
        if values.len() != params.len() {
            return Err(Error::DimensionMismatch { context: "model weights".into(), expected: params.len(), found: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model weights".into()));
        }
        if cp.class_labels.len() != cp.k {
            return Err(Error::Malformed(format!("{} class labels for k={}", cp.class_labels.len(), cp.k)));
        }
        params.values = values;
        Ok(Self { params, class_labels: cp.class_labels, train_config_digest: cp.train_config_digest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        out.write_all(self.to_json()?.as_bytes()).map_err(|e| Error::io(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        std::io::Read::read_to_string(&mut BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?), &mut text)
            .map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassIndex as C;

    fn row<'a>(llm: Option<ClassIndex>, sources: &'a [Option<ClassIndex>]) -> LabelRow<'a> {
        LabelRow { llm, sources }
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = HarmonizerParams::zeros(Architecture::Linear, 4, 3, 0).unwrap();
        let dist = forward(&p, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        for &q in dist.probs() {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = HarmonizerParams::zeros(Architecture::Mlp, 4, 3, 5).unwrap();
        assert_eq!(forward(&p, &[1.0; 4]).unwrap(), Simplex::uniform(3));
    }

    #[test]
    fn softmax_of_log_two() {
        // e^{ln 2} / (e^{ln 2} + 1) = 2/3
        let dist = Simplex::from_logits(&[2f64.ln(), 0.0]);
        assert!((dist.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((dist.probs()[1] - 1.0 / 3.0).abs() < 1e-15);

        let mut p = HarmonizerParams::zeros(Architecture::Linear, 1, 2, 0).unwrap();
        p.values_mut()[0] = 2f64.ln(); // W[0][0]
        let dist = forward(&p, &[1.0]).unwrap();
        assert!((dist.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = Simplex::from_logits(&[0.3, -1.2, 2.0]);
        let b = Simplex::from_logits(&[100.3, 98.8, 102.0]);
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
        let extreme = Simplex::from_logits(&[1e300, -1e300, 0.0]);
        assert_eq!(extreme.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = HarmonizerParams::zeros(Architecture::Linear, 2, 2, 0).unwrap();
        assert!(matches!(forward(&p, &[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(forward(&p, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cross_entropy_values() {
        let half = Simplex::new(vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&half, C(0)) - std::f64::consts::LN_2).abs() < 1e-15);
        let sure = Simplex::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&sure, C(0)), 0.0);
        assert!((cross_entropy(&sure, C(1)) - 1e-12f64.ln().abs()).abs() < 1e-9);
        let d = Simplex::new(vec![0.2, 0.8]).unwrap();
        assert!((cross_entropy(&d, C(1)) - 0.223_143_551_314_209_7).abs() < 1e-12);
    }

    #[test]
    fn loss_vector_respects_triggering() {
        let half = Simplex::uniform(2);
        let none = LossVector::from_dist(&half, row(None, &[None, None]));
        assert_eq!(none.values, vec![0.0; 3]);
        assert_eq!(none.triggered, vec![false; 3]);

        let lv = LossVector::from_dist(&half, row(Some(C(0)), &[Some(C(0)), Some(C(1)), None]));
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(lv.values, vec![ln2, ln2, ln2, 0.0]);
        assert_eq!(lv.triggered, vec![true, true, true, false]);

        let skew = Simplex::new(vec![0.9, 0.1]).unwrap();
        let lv = LossVector::from_dist(&skew, row(Some(C(0)), &[Some(C(1))]));
        assert!((lv.values[0] - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!((lv.values[1] - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = init_params(Architecture::Mlp, 3, 2, 4, 1).unwrap();
        let inst = Instance { id: "a".into(), features: vec![0.2, -0.4, 1.0], text: None, entities: vec![], gold: None };
        let g = backward(&p, &inst, row(Some(C(1)), &[Some(C(0))]), &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_source_logit_gradient_is_dist_minus_onehot() {
        // Linear model with x = [1]: dW equals dlogits.
        let mut p = HarmonizerParams::zeros(Architecture::Linear, 1, 3, 0).unwrap();
        p.values_mut()[..3].copy_from_slice(&[0.4, -0.1, 0.7]);
        let inst = Instance { id: "a".into(), features: vec![1.0], text: None, entities: vec![], gold: None };
        let dist = forward(&p, &inst.features).unwrap();
        let g = backward(&p, &inst, row(None, &[Some(C(2))]), &[0.0, 0.5]).unwrap();
        let mut total = 0.0;
        for c in 0..3 {
            let expected = 0.5 * (dist.probs()[c] - f64::from(c == 2));
            assert!((g[c] - expected).abs() < 1e-15);
            assert_eq!(g[3 + c], g[c]);
            total += g[c];
        }
        assert!(total.abs() < 1e-15);
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = init_params(Architecture::Mlp, 8, 2, 16, 7).unwrap();
        assert_eq!(a, init_params(Architecture::Mlp, 8, 2, 16, 7).unwrap());
        assert_ne!(a, init_params(Architecture::Mlp, 8, 2, 16, 8).unwrap());
        let blocks = a.blocks();
        assert!(blocks[1].1.iter().all(|&b| b == 0.0));
        assert!(blocks[3].1.iter().all(|&b| b == 0.0));

        let lin = init_params(Architecture::Linear, 8, 2, 0, 3).unwrap();
        let limit = (6.0f64 / 10.0).sqrt();
        assert!(lin.blocks()[0].1.iter().all(|w| w.abs() <= limit));
        assert!(lin.blocks()[1].1.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = init_params(Architecture::Mlp, 3, 2, 4, 9).unwrap();
        let model = Model { params, class_labels: vec!["no".into(), "yes".into()], train_config_digest: "abc".into() };
        let json = model.to_json().unwrap();
        assert!(json.contains("\"schema\": \"polar-model-v1\""));
        assert_eq!(Model::from_json(&json).unwrap(), model);
    }
}
