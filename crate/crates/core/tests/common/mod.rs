#![allow(dead_code)]

use std::sync::Arc;

use cfsparse_core::model::{Activation, Layer, ModelSpec};
use cfsparse_core::schema::{
    Cell, ColumnTransform, Feature, FeatureKind, FeatureSchema, InstanceSet, LabelSpec, PreprocessSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `p` features, each categorical (2–4 levels) with probability 1/3.
pub fn schema(rng: &mut ChaCha8Rng, p: usize, classes: usize) -> Arc<FeatureSchema> {
    let features = (0..p)
        .map(|j| {
            if rng.gen_bool(1.0 / 3.0) {
                let n = rng.gen_range(2..=4);
                Feature::categorical(format!("f{j}"), (0..n).map(|l| format!("l{l}")).collect::<Vec<_>>())
            } else {
                Feature::numeric(format!("f{j}"))
            }
        })
        .collect();
    let label = LabelSpec {
        name: "y".into(),
        classes: (0..classes).map(|c| format!("c{c}")).collect(),
    };
    Arc::new(FeatureSchema::new(features, label).unwrap())
}

pub fn prep(rng: &mut ChaCha8Rng, schema: &FeatureSchema) -> PreprocessSpec {
    let transforms = schema
        .features()
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Numeric => ColumnTransform::Numeric {
                name: f.name.clone(),
                mean: rng.gen_range(-1.0..1.0),
                std: rng.gen_range(0.5..2.0),
            },
            FeatureKind::Categorical { levels } => ColumnTransform::Categorical {
                name: f.name.clone(),
                levels: levels.clone(),
            },
        })
        .collect();
    PreprocessSpec::new(transforms).unwrap()
}

/// Numeric cells are rounded to 3 decimals so CSV round trips are exact.
pub fn row(rng: &mut ChaCha8Rng, schema: &FeatureSchema) -> Vec<Cell> {
    schema
        .features()
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Numeric => Cell::Numeric((normal(rng) * 2e3).round() / 1e3),
            FeatureKind::Categorical { levels } => Cell::Level(rng.gen_range(0..levels.len())),
        })
        .collect()
}

pub fn rows(rng: &mut ChaCha8Rng, schema: &Arc<FeatureSchema>, n: usize) -> InstanceSet {
    let rows = (0..n).map(|_| row(rng, schema)).collect();
    InstanceSet::new(Arc::clone(schema), rows).unwrap()
}

pub fn logistic(rng: &mut ChaCha8Rng, prep: PreprocessSpec) -> ModelSpec {
    let weights = (0..prep.width()).map(|_| normal(rng) * 1.5).collect();
    ModelSpec::logistic(weights, normal(rng) * 0.5, prep).unwrap()
}

pub fn mlp(rng: &mut ChaCha8Rng, prep: PreprocessSpec, classes: usize) -> ModelSpec {
    let outputs = if classes == 2 { 1 } else { classes };
    let mut widths = vec![prep.width()];
    widths.extend((0..rng.gen_range(1..=2)).map(|_| rng.gen_range(3..=8)));
    widths.push(outputs);
    let last = widths.len() - 2;
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let scale = 1.5 / (w[0] as f64).sqrt();
            let weights = (0..w[1]).map(|_| (0..w[0]).map(|_| normal(rng) * scale).collect()).collect();
            let bias = (0..w[1]).map(|_| normal(rng) * 0.3).collect();
            let act = if l == last { Activation::Identity } else { Activation::Relu };
            Layer::new(weights, bias, act).unwrap()
        })
        .collect();
    ModelSpec::mlp(layers, prep).unwrap()
}

/// A random schema with a logistic (binary) or MLP (2 or 3 classes) model.
pub fn problem(rng: &mut ChaCha8Rng, p: usize, use_logistic: bool) -> (Arc<FeatureSchema>, ModelSpec) {
    let classes = if use_logistic || rng.gen_bool(0.6) { 2 } else { 3 };
    let schema = schema(rng, p, classes);
    let prep = prep(rng, &schema);
    let model = if use_logistic { logistic(rng, prep) } else { mlp(rng, prep, classes) };
    (schema, model)
}
