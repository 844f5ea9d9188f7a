//! Portable classifiers defined in the encoded feature space.
//!
//! Two families are supported: binary logistic regression and feed-forward
//! networks with relu/identity layers. A model file carries its own
//! [`PreprocessSpec`], so one artifact maps raw rows to probabilities.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{EncodedMatrix, FeatureSchema, PreprocessSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// Dense layer `y = act(W x + b)`, `W` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Vec<f64>,
    bias: Vec<f64>,
    inputs: usize,
    activation: Activation,
}

impl Layer {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let outputs = weights.len();
        if outputs == 0 {
            return Err(Error::Model("layer with no outputs".into()));
        }
        let inputs = weights[0].len();
        if inputs == 0 || weights.iter().any(|r| r.len() != inputs) {
            return Err(Error::Model("ragged or empty weight matrix".into()));
        }
        if bias.len() != outputs {
            return Err(Error::Model(format!(
                "bias has length {}, expected {outputs}",
                bias.len()
            )));
        }
        Ok(Layer {
            weights: weights.into_iter().flatten().collect(),
            bias,
            inputs,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn weight_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.inputs)
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weight_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Logistic { weights: Vec<f64>, bias: f64 },
    Mlp { layers: Vec<Layer> },
}

/// Which quantity of the target class is differentiated or attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreScale {
    #[default]
    Probability,
    Logit,
}

impl FromStr for ScoreScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" => Ok(ScoreScale::Probability),
            "logit" => Ok(ScoreScale::Logit),
            other => Err(Error::Param(format!("unknown score scale \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    kind: ModelKind,
    threshold: f64,
    preprocess: PreprocessSpec,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<LayerFile>>,
    #[serde(default = "default_threshold")]
    threshold: f64,
    preprocess: PreprocessSpec,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: String,
}

fn default_threshold() -> f64 {
    0.5
}

impl ModelSpec {
    pub fn logistic(weights: Vec<f64>, bias: f64, preprocess: PreprocessSpec) -> Result<Self> {
        Self::new(ModelKind::Logistic { weights, bias }, 0.5, preprocess)
    }

    pub fn mlp(layers: Vec<Layer>, preprocess: PreprocessSpec) -> Result<Self> {
        Self::new(ModelKind::Mlp { layers }, 0.5, preprocess)
    }

    pub fn new(kind: ModelKind, threshold: f64, preprocess: PreprocessSpec) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Model(format!("threshold {threshold} not in (0,1)")));
        }
        let d = preprocess.width();
        match &kind {
            ModelKind::Logistic { weights, bias } => {
                if weights.len() != d {
                    return Err(Error::Model(format!(
                        "logistic model has {} weights, encoded width is {d}",
                        weights.len()
                    )));
                }
                if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Model("non-finite parameter".into()));
                }
            }
            ModelKind::Mlp { layers } => {
                if layers.is_empty() {
                    return Err(Error::Model("mlp has no layers".into()));
                }
                let mut width = d;
                for (i, layer) in layers.iter().enumerate() {
                    if layer.inputs != width {
                        return Err(Error::Model(format!(
                            "layer {i} expects input {}, got {width}",
                            layer.inputs
                        )));
                    }
                    if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                        return Err(Error::Model(format!("layer {i} has a non-finite parameter")));
                    }
                    width = layer.outputs();
                }
            }
        }
        Ok(ModelSpec {
            kind,
            threshold,
            preprocess,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::parse("model JSON", e))?;
        let missing = |field: &str| Error::Model(format!("{} model missing \"{field}\"", file.kind));
        let kind = match file.kind.as_str() {
            "logistic" => ModelKind::Logistic {
                weights: file.weights.clone().ok_or_else(|| missing("weights"))?,
                bias: file.bias.ok_or_else(|| missing("bias"))?,
            },
            "mlp" => {
                let raw = file.layers.as_ref().ok_or_else(|| missing("layers"))?;
                let mut layers = Vec::with_capacity(raw.len());
                for (i, l) in raw.iter().enumerate() {
                    let act = Activation::parse(&l.act).ok_or_else(|| {
                        Error::Model(format!("layer {i}: unknown activation \"{}\"", l.act))
                    })?;
                    let layer = Layer::new(l.w.clone(), l.b.clone(), act)
                        .map_err(|e| Error::Model(format!("layer {i}: {e}")))?;
                    layers.push(layer);
                }
                ModelKind::Mlp { layers }
            }
            other => return Err(Error::Model(format!("unknown model kind \"{other}\""))),
        };
        ModelSpec::new(kind, file.threshold, file.preprocess)
    }

    pub fn to_json_string(&self) -> String {
        let (kind, weights, bias, layers) = match &self.kind {
            ModelKind::Logistic { weights, bias } => {
                ("logistic", Some(weights.clone()), Some(*bias), None)
            }
            ModelKind::Mlp { layers } => {
                let layers = layers
                    .iter()
                    .map(|l| LayerFile {
                        w: l.weight_rows().map(<[f64]>::to_vec).collect(),
                        b: l.bias.clone(),
                        act: l.activation.name().to_string(),
                    })
                    .collect();
                ("mlp", None, None, Some(layers))
            }
        };
        let file = ModelFile {
            kind: kind.to_string(),
            weights,
            bias,
            layers,
            threshold: self.threshold,
            preprocess: self.preprocess.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn preprocess(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    pub fn input_width(&self) -> usize {
        self.preprocess.width()
    }

    /// Number of logits produced by the network head.
    fn output_width(&self) -> usize {
        match &self.kind {
            ModelKind::Logistic { .. } => 1,
            ModelKind::Mlp { layers } => layers.last().unwrap().outputs(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.output_width() == 1
    }

    pub fn n_classes(&self) -> usize {
        match self.output_width() {
            1 => 2,
            c => c,
        }
    }

    /// Both built-in families are differentiable.
    pub fn is_differentiable(&self) -> bool {
        true
    }

    /// Verify that this model fits a schema: same features and class count.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        self.preprocess.check_schema(schema)?;
        if self.n_classes() != schema.label().classes.len() {
            return Err(Error::Model(format!(
                "model predicts {} classes, schema label has {}",
                self.n_classes(),
                schema.label().classes.len()
            )));
        }
        Ok(())
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match model width {}",
                x.len(),
                self.input_width()
            )));
        }
        Ok(())
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.n_classes() {
            return Err(Error::Param(format!(
                "target class {target} out of range for {} classes",
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// Raw logits of one encoded row.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            ModelKind::Logistic { weights, bias } => vec![dot(weights, x) + bias],
            ModelKind::Mlp { layers } => {
                let mut h = x.to_vec();
                for layer in layers {
                    h = layer.pre_activation(&h);
                    if layer.activation == Activation::Relu {
                        h.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                }
                h
            }
        }
    }

    fn probs_from_logits(&self, logits: &[f64]) -> Vec<f64> {
        if logits.len() == 1 {
            let p1 = sigmoid(logits[0]);
            vec![1.0 - p1, p1]
        } else {
            softmax(logits)
        }
    }

    fn label_from_probs(&self, probs: &[f64]) -> usize {
        if self.is_binary() {
            usize::from(probs[1] >= self.threshold)
        } else {
            argmax(probs)
        }
    }

    pub fn proba_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_row(x)?;
        Ok(self.probs_from_logits(&self.logits(x)))
    }

    pub fn label_row(&self, x: &[f64]) -> Result<usize> {
        self.proba_row(x).map(|p| self.label_from_probs(&p))
    }

    /// Target-class score on the given scale. On the logit scale a binary
    /// model reports the log-odds of the target class.
    pub fn score_row(&self, x: &[f64], target: usize, scale: ScoreScale) -> Result<f64> {
        self.check_row(x)?;
        self.check_target(target)?;
        let logits = self.logits(x);
        Ok(match (scale, logits.len()) {
            (ScoreScale::Probability, _) => self.probs_from_logits(&logits)[target],
            (ScoreScale::Logit, 1) if target == 1 => logits[0],
            (ScoreScale::Logit, 1) => -logits[0],
            (ScoreScale::Logit, _) => logits[target],
        })
    }

    pub fn predict_proba(&self, x: &EncodedMatrix) -> Result<ProbabilityBatch> {
        if x.width() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match model width {}",
                x.width(),
                self.input_width()
            )));
        }
        let classes = self.n_classes();
        let mut values = Vec::with_capacity(x.nrows() * classes);
        for row in x.rows() {
            values.extend(self.probs_from_logits(&self.logits(row)));
        }
        Ok(ProbabilityBatch { values, classes })
    }

    pub fn predict_label(&self, x: &EncodedMatrix) -> Result<Vec<usize>> {
        let probs = self.predict_proba(x)?;
        Ok(probs.rows().map(|p| self.label_from_probs(p)).collect())
    }

    /// Gradient of the target-class score with respect to the encoded input,
    /// by reverse accumulation. The relu subgradient at 0 is 0.
    pub fn gradient_score(&self, x: &[f64], target: usize, scale: ScoreScale) -> Result<Vec<f64>> {
        self.check_row(x)?;
        self.check_target(target)?;
        match &self.kind {
            ModelKind::Logistic { weights, bias } => {
                let z = dot(weights, x) + bias;
                let upstream = self.head_gradient(&[z], target, scale)[0];
                Ok(weights.iter().map(|w| upstream * w).collect())
            }
            ModelKind::Mlp { layers } => {
                let mut inputs = Vec::with_capacity(layers.len());
                let mut pres = Vec::with_capacity(layers.len());
                let mut h = x.to_vec();
                for layer in layers {
                    let pre = layer.pre_activation(&h);
                    inputs.push(h);
                    h = match layer.activation {
                        Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
                        Activation::Identity => pre.clone(),
                    };
                    pres.push(pre);
                }
                let mut grad = self.head_gradient(&h, target, scale);
                for (layer, pre) in layers.iter().zip(&pres).rev() {
                    if layer.activation == Activation::Relu {
                        for (g, p) in grad.iter_mut().zip(pre) {
                            if *p <= 0.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    let mut back = vec![0.0; layer.inputs];
                    for (w_row, g) in layer.weight_rows().zip(&grad) {
                        for (b, w) in back.iter_mut().zip(w_row) {
                            *b += g * w;
                        }
                    }
                    grad = back;
                }
                Ok(grad)
            }
        }
    }

    /// d score / d logits.
    fn head_gradient(&self, logits: &[f64], target: usize, scale: ScoreScale) -> Vec<f64> {
        if logits.len() == 1 {
            let sign = if target == 1 { 1.0 } else { -1.0 };
            match scale {
                ScoreScale::Logit => vec![sign],
                ScoreScale::Probability => {
                    let p = sigmoid(logits[0]);
                    vec![sign * p * (1.0 - p)]
                }
            }
        } else {
            match scale {
                ScoreScale::Logit => {
                    let mut g = vec![0.0; logits.len()];
                    g[target] = 1.0;
                    g
                }
                ScoreScale::Probability => {
                    let p = softmax(logits);
                    let pt = p[target];
                    p.iter()
                        .enumerate()
                        .map(|(k, &pk)| if k == target { pt * (1.0 - pk) } else { -pt * pk })
                        .collect()
                }
            }
        }
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelSpec::from_json_str(&text)
}

/// Row-major `n × C` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityBatch {
    values: Vec<f64>,
    classes: usize,
}

impl ProbabilityBatch {
    pub fn nrows(&self) -> usize {
        self.values.len() / self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.classes)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
