#![allow(dead_code)]

use std::ffi::{OsStr, OsString};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use cfsparse_core::model::{Activation, Layer, ModelSpec};
use cfsparse_core::schema::{
    Cell, ColumnTransform, Feature, FeatureKind, FeatureSchema, InstanceSet, LabelSpec, PreprocessSpec,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

pub fn fixture(name: &str) -> PathBuf {
    fixture_dir().join(name)
}

pub fn cfsparse<S: AsRef<OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsparse"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Arguments that sparsify the shipped fixture into `dir/refined.csv` and
/// `dir/report.json`.
pub fn fixture_sparsify_args(dir: &Path) -> Vec<OsString> {
    let mut args: Vec<OsString> = vec!["sparsify".into()];
    for (flag, path) in [
        ("--schema", fixture("schema.json")),
        ("--data", fixture("factuals.csv")),
        ("--model", fixture("model.json")),
        ("--counterfactuals", fixture("counterfactuals.csv")),
        ("--out", dir.join("refined.csv")),
        ("--report", dir.join("report.json")),
    ] {
        args.push(flag.into());
        args.push(path.into());
    }
    args
}

/// A small mixed-type problem: two numerics and one three-level categorical.
pub struct Mixed {
    pub schema: PathBuf,
    pub model: PathBuf,
    pub data: PathBuf,
}

pub fn write_mixed(dir: &Path) -> Mixed {
    let schema = dir.join("schema.json");
    let model = dir.join("model.json");
    let data = dir.join("data.csv");
    fs::write(
        &schema,
        r#"{
  "features": [
    {"name": "age", "kind": "numeric"},
    {"name": "income", "kind": "numeric"},
    {"name": "color", "kind": "categorical", "levels": ["red", "green", "blue"]}
  ],
  "label": {"name": "approved", "classes": ["no", "yes"]}
}
"#,
    )
    .unwrap();
    fs::write(
        &model,
        r#"{
  "kind": "logistic",
  "weights": [0.8, 1.5, -0.5, 0.2, 0.9],
  "bias": -1.0,
  "preprocess": {"features": [
    {"kind": "numeric", "name": "age", "mean": 40.0, "std": 10.0},
    {"kind": "numeric", "name": "income", "mean": 50.0, "std": 20.0},
    {"kind": "categorical", "name": "color", "levels": ["red", "green", "blue"]}
  ]}
}
"#,
    )
    .unwrap();
    fs::write(
        &data,
        "age,income,color,approved\n\
         25,30,red,no\n\
         35,40,green,no\n\
         45,20,red,no\n\
         30,45,blue,no\n\
         60,90,blue,yes\n\
         28,35,red,no\n",
    )
    .unwrap();
    Mixed { schema, model, data }
}

/// Random schema with `p` features, each categorical with probability 1/3.
pub fn random_schema(rng: &mut ChaCha8Rng, p: usize, classes: usize) -> Arc<FeatureSchema> {
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

pub fn random_prep(rng: &mut ChaCha8Rng, schema: &FeatureSchema) -> PreprocessSpec {
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

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_row(rng: &mut ChaCha8Rng, schema: &FeatureSchema) -> Vec<Cell> {
    schema
        .features()
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Numeric => Cell::Numeric((normal(rng) * 2.0 * 1e3).round() / 1e3),
            FeatureKind::Categorical { levels } => Cell::Level(rng.gen_range(0..levels.len())),
        })
        .collect()
}

pub fn random_rows(rng: &mut ChaCha8Rng, schema: &Arc<FeatureSchema>, n: usize) -> InstanceSet {
    let rows = (0..n).map(|_| random_row(rng, schema)).collect();
    InstanceSet::new(Arc::clone(schema), rows).unwrap()
}

pub fn random_logistic(rng: &mut ChaCha8Rng, prep: PreprocessSpec) -> ModelSpec {
    let weights = (0..prep.width()).map(|_| normal(rng) * 1.5).collect();
    ModelSpec::logistic(weights, normal(rng) * 0.5, prep).unwrap()
}

/// Dense weights of a random network, kept so tests can recompute
/// pre-activations independently of the library.
#[derive(Debug, Clone)]
pub struct RawLayer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub relu: bool,
}

pub fn random_raw_mlp(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], outputs: usize) -> Vec<RawLayer> {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(outputs);
    widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let scale = 1.0 / (w[0] as f64).sqrt() * 1.5;
            RawLayer {
                w: (0..w[1]).map(|_| (0..w[0]).map(|_| normal(rng) * scale).collect()).collect(),
                b: (0..w[1]).map(|_| normal(rng) * 0.3).collect(),
                relu: l + 1 < widths.len() - 1 && rng.gen_bool(0.8),
            }
        })
        .collect()
}

pub fn mlp_from_raw(layers: &[RawLayer], prep: PreprocessSpec) -> ModelSpec {
    let layers = layers
        .iter()
        .map(|l| {
            let act = if l.relu { Activation::Relu } else { Activation::Identity };
            Layer::new(l.w.clone(), l.b.clone(), act).unwrap()
        })
        .collect();
    ModelSpec::mlp(layers, prep).unwrap()
}

pub fn random_mlp(rng: &mut ChaCha8Rng, prep: PreprocessSpec, classes: usize) -> ModelSpec {
    let hidden: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(3..=8)).collect();
    let outputs = if classes == 2 { 1 } else { classes };
    let raw = random_raw_mlp(rng, prep.width(), &hidden, outputs);
    mlp_from_raw(&raw, prep)
}

/// Pre-activations of every relu unit for input `x`.
pub fn relu_preactivations(layers: &[RawLayer], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut out = Vec::new();
    for layer in layers {
        let pre: Vec<f64> = layer
            .w
            .iter()
            .zip(&layer.b)
            .map(|(row, b)| row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect();
        if layer.relu {
            out.extend_from_slice(&pre);
            h = pre.iter().map(|v| v.max(0.0)).collect();
        } else {
            h = pre;
        }
    }
    out
}
