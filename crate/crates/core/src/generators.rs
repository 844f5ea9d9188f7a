//! Built-in counterfactual generators and import of external ones.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ScoreScale};
use crate::schema::{
    decode, diff_cells, load_table_with_meta, resolve_one_hot, Cell, ColumnTransform,
    EncodedMatrix, FeatureKind, FeatureSchema, InstanceSet, DEFAULT_NUMERIC_TOL,
};

/// λ is multiplied by `lambda_growth` at every checkpoint of this many
/// iterations at which the iterate is still invalid.
const LAMBDA_PERIOD: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Sum of absolute encoded differences.
    #[default]
    L1,
    /// Sum of squared encoded differences.
    L2,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Distance::L1),
            "l2" => Ok(Distance::L2),
            other => Err(Error::Param(format!("unknown distance \"{other}\""))),
        }
    }
}

impl Distance {
    fn value(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Distance::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        }
    }

    fn gradient(self, x: f64, origin: f64) -> f64 {
        let diff = x - origin;
        match self {
            Distance::L1 if diff > 0.0 => 1.0,
            Distance::L1 if diff < 0.0 => -1.0,
            Distance::L1 => 0.0,
            Distance::L2 => 2.0 * diff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Wachter,
    Diverse,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wachter" => Ok(GeneratorKind::Wachter),
            "diverse" => Ok(GeneratorKind::Diverse),
            other => Err(Error::Param(format!("unknown generator \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub target: usize,
    pub max_iters: usize,
    pub step_size: f64,
    pub lambda_init: f64,
    pub lambda_growth: f64,
    /// Extra probability required above the decision level before the
    /// validity hinge switches off.
    pub margin: f64,
    pub distance: Distance,
    pub k_per_instance: usize,
    pub seed: u64,
}

impl GeneratorParams {
    pub fn new(target: usize) -> Self {
        GeneratorParams {
            target,
            max_iters: 1000,
            step_size: 0.05,
            lambda_init: 0.1,
            lambda_growth: 2.0,
            margin: 0.0,
            distance: Distance::L1,
            k_per_instance: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Param("step_size must be > 0".into()));
        }
        if !(self.lambda_growth >= 1.0) {
            return Err(Error::Param("lambda_growth must be >= 1".into()));
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::Param("lambda_init must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Param("max_iters must be >= 1".into()));
        }
        if self.k_per_instance == 0 {
            return Err(Error::Param("k_per_instance must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::Param("margin must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenStatus {
    AlreadyValid,
    Valid,
    Invalid,
}

impl GenStatus {
    pub fn is_valid(self) -> bool {
        self != GenStatus::Invalid
    }
}

impl fmt::Display for GenStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenStatus::AlreadyValid => "already_valid",
            GenStatus::Valid => "valid",
            GenStatus::Invalid => "invalid",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub counterfactuals: InstanceSet,
    pub factual_index: Vec<usize>,
    pub status: Vec<GenStatus>,
}

impl Generated {
    pub fn valid_count(&self) -> usize {
        self.status.iter().filter(|s| s.is_valid()).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        self.counterfactuals.to_csv(&[
            ("_factual_index", self.factual_index.iter().map(usize::to_string).collect()),
            ("_valid", self.status.iter().map(|s| s.is_valid().to_string()).collect()),
        ])
    }
}

/// Result of the gradient search for one factual row.
#[derive(Debug, Clone, PartialEq)]
pub struct WachterOutcome {
    pub row: Vec<f64>,
    pub status: GenStatus,
    /// Distance at the first iterate where the hinge vanished and the label
    /// flipped, if any.
    pub first_valid_distance: Option<f64>,
    pub distance: f64,
}

fn categorical_groups(model: &ModelSpec) -> Vec<std::ops::Range<usize>> {
    let groups = model.preprocess().groups();
    model
        .preprocess()
        .transforms()
        .iter()
        .zip(groups.iter())
        .filter(|(t, _)| matches!(t, ColumnTransform::Categorical { .. }))
        .map(|(_, r)| r)
        .collect()
}

fn snap(row: &mut [f64], categorical: &[std::ops::Range<usize>]) {
    for range in categorical {
        let block = &mut row[range.clone()];
        let level = resolve_one_hot(block).map_or(0, |(l, _)| l);
        block.iter_mut().enumerate().for_each(|(k, v)| *v = if k == level { 1.0 } else { 0.0 });
    }
}

/// Probability the target class must exceed for the hinge to vanish.
fn hinge_level(model: &ModelSpec, target: usize, margin: f64) -> f64 {
    let level = match (model.is_binary(), target) {
        (true, 1) => model.threshold(),
        (true, _) => 1.0 - model.threshold(),
        (false, _) => 0.5,
    };
    level + margin
}

/// Gradient descent on `λ·max(0, level − p_target)² + dist(x, x′)` in encoded
/// space. The iterate is kept continuous; one-hot groups are snapped to their
/// argmax vertex before every evaluation. The closest valid snapped iterate is
/// returned, or the most probable one when none is valid.
pub fn wachter_row(model: &ModelSpec, x0: &[f64], params: &GeneratorParams) -> Result<WachterOutcome> {
    let target = params.target;
    let categorical = categorical_groups(model);
    if model.label_row(x0)? == target {
        return Ok(WachterOutcome {
            row: x0.to_vec(),
            status: GenStatus::AlreadyValid,
            first_valid_distance: None,
            distance: 0.0,
        });
    }
    let level = hinge_level(model, target, params.margin);
    let mut current = x0.to_vec();
    let mut eval = x0.to_vec();
    let mut lambda = params.lambda_init;
    let mut best_valid: Option<(f64, Vec<f64>)> = None;
    let mut best_invalid: (f64, Vec<f64>) = (f64::NEG_INFINITY, x0.to_vec());
    let mut first_valid_distance = None;

    for iter in 0..params.max_iters {
        eval.copy_from_slice(&current);
        snap(&mut eval, &categorical);
        let p = model.score_row(&eval, target, ScoreScale::Probability)?;
        let hinge = (level - p).max(0.0);
        let valid = hinge == 0.0 && model.label_row(&eval)? == target;
        let dist = params.distance.value(&eval, x0);
        if valid {
            first_valid_distance.get_or_insert(dist);
            if best_valid.as_ref().is_none_or(|(d, _)| dist < *d) {
                best_valid = Some((dist, eval.clone()));
            }
        } else if p > best_invalid.0 {
            best_invalid = (p, eval.clone());
        }
        if iter > 0 && iter % LAMBDA_PERIOD == 0 && !valid {
            lambda *= params.lambda_growth;
        }

        let scale = if hinge > 0.0 {
            -2.0 * lambda * hinge
        } else {
            0.0
        };
        let grad_p = if scale != 0.0 {
            model.gradient_score(&eval, target, ScoreScale::Probability)?
        } else {
            vec![0.0; eval.len()]
        };
        for k in 0..current.len() {
            let g = scale * grad_p[k] + params.distance.gradient(eval[k], x0[k]);
            current[k] -= params.step_size * g;
        }
    }

    Ok(match best_valid {
        Some((distance, row)) => WachterOutcome {
            row,
            status: GenStatus::Valid,
            first_valid_distance,
            distance,
        },
        None => {
            let distance = params.distance.value(&best_invalid.1, x0);
            WachterOutcome {
                row: best_invalid.1,
                status: GenStatus::Invalid,
                first_valid_distance,
                distance,
            }
        }
    })
}

fn checked_inputs(model: &ModelSpec, factuals: &InstanceSet, params: &GeneratorParams) -> Result<()> {
    params.validate()?;
    model.check_schema(factuals.schema())?;
    factuals.require_rows("factuals")?;
    if params.target >= model.n_classes() {
        return Err(Error::Param(format!("target class {} out of range", params.target)));
    }
    Ok(())
}

/// One counterfactual per factual by gradient search.
pub fn wachter_generate(
    model: &ModelSpec,
    factuals: &InstanceSet,
    params: &GeneratorParams,
) -> Result<Generated> {
    checked_inputs(model, factuals, params)?;
    if !model.is_differentiable() {
        return Err(Error::Model("wachter generator needs a differentiable model".into()));
    }
    let prep = model.preprocess();
    let outcomes: Vec<WachterOutcome> = factuals
        .rows()
        .par_iter()
        .map(|row| wachter_row(model, &prep.encode_row(row), params))
        .collect::<Result<_>>()?;

    let status: Vec<GenStatus> = outcomes.iter().map(|o| o.status).collect();
    let encoded = EncodedMatrix::from_rows(outcomes.into_iter().map(|o| o.row).collect(), prep.groups())?;
    let mut counterfactuals = decode(&encoded, prep, factuals.schema())?.instances;
    // pass-through rows keep their exact original cells
    let rows: Vec<Vec<Cell>> = counterfactuals
        .rows()
        .iter()
        .zip(factuals.rows())
        .zip(&status)
        .map(|((cf, f), s)| if *s == GenStatus::AlreadyValid { f.clone() } else { cf.clone() })
        .collect();
    counterfactuals = InstanceSet::new(Arc::clone(factuals.schema()), rows)?;
    Ok(Generated {
        counterfactuals,
        factual_index: (0..factuals.len()).collect(),
        status,
    })
}

#[derive(Clone, Copy)]
enum Sampler {
    Range(f64, f64),
    Levels(usize),
}

fn samplers(factuals: &InstanceSet) -> Vec<Sampler> {
    factuals
        .schema()
        .features()
        .iter()
        .enumerate()
        .map(|(j, f)| match &f.kind {
            FeatureKind::Numeric => {
                let (lo, hi) = factuals.rows().iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), r| match r[j] {
                        Cell::Numeric(v) => (lo.min(v), hi.max(v)),
                        Cell::Level(_) => (lo, hi),
                    },
                );
                Sampler::Range(lo, hi)
            }
            FeatureKind::Categorical { levels } => Sampler::Levels(levels.len()),
        })
        .collect()
}

struct Candidate {
    changed: usize,
    distance: f64,
    row: Vec<Cell>,
}

/// `k_per_instance` counterfactuals per factual by seeded random search over
/// feature subsets, preferring candidates that change fewer features.
pub fn diverse_generate(
    model: &ModelSpec,
    factuals: &InstanceSet,
    params: &GeneratorParams,
) -> Result<Generated> {
    checked_inputs(model, factuals, params)?;
    let prep = model.preprocess();
    let samplers = samplers(factuals);
    let p = factuals.schema().len();
    let k = params.k_per_instance;
    let is_target = |row: &[Cell]| -> Result<bool> {
        Ok(model.label_row(&prep.encode_row(row))? == params.target)
    };

    let per_row: Vec<Vec<(Vec<Cell>, GenStatus)>> = factuals
        .rows()
        .par_iter()
        .enumerate()
        .map(|(i, factual)| {
            if is_target(factual)? {
                return Ok(vec![(factual.clone(), GenStatus::AlreadyValid); k]);
            }
            let origin = prep.encode_row(factual);
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ i as u64);
            let mut found: Vec<Candidate> = Vec::new();
            for _ in 0..params.max_iters {
                let size = rng.gen_range(1..=p);
                let mut row = factual.clone();
                for j in index::sample(&mut rng, p, size).into_iter() {
                    row[j] = match samplers[j] {
                        Sampler::Range(lo, hi) if lo < hi => Cell::Numeric(rng.gen_range(lo..=hi)),
                        Sampler::Range(lo, _) => Cell::Numeric(lo),
                        Sampler::Levels(n) => Cell::Level(rng.gen_range(0..n)),
                    };
                }
                if !is_target(&row)? || found.iter().any(|c| c.row == row) {
                    continue;
                }
                let changed = diff_cells(factual, &row, DEFAULT_NUMERIC_TOL)
                    .into_iter()
                    .filter(|&b| b)
                    .count();
                let distance = Distance::L1.value(&prep.encode_row(&row), &origin);
                found.push(Candidate { changed, distance, row });
            }
            // stable sort keeps discovery order among exact ties
            found.sort_by(|a, b| a.changed.cmp(&b.changed).then(a.distance.total_cmp(&b.distance)));
            let mut out: Vec<(Vec<Cell>, GenStatus)> = found
                .into_iter()
                .take(k)
                .map(|c| (c.row, GenStatus::Valid))
                .collect();
            out.resize(k, (factual.clone(), GenStatus::Invalid));
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(factuals.len() * k);
    let mut factual_index = Vec::with_capacity(factuals.len() * k);
    let mut status = Vec::with_capacity(factuals.len() * k);
    for (i, group) in per_row.into_iter().enumerate() {
        for (row, s) in group {
            rows.push(row);
            factual_index.push(i);
            status.push(s);
        }
    }
    Ok(Generated {
        counterfactuals: InstanceSet::new(Arc::clone(factuals.schema()), rows)?,
        factual_index,
        status,
    })
}

pub fn generate(
    kind: GeneratorKind,
    model: &ModelSpec,
    factuals: &InstanceSet,
    params: &GeneratorParams,
) -> Result<Generated> {
    match kind {
        GeneratorKind::Wachter => wachter_generate(model, factuals, params),
        GeneratorKind::Diverse => diverse_generate(model, factuals, params),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Row `i` of the counterfactuals belongs to factual `i`.
    #[default]
    Aligned,
    /// A `_factual_index` column names the factual of every row.
    Indexed,
}

impl FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(Pairing::Aligned),
            "indexed" => Ok(Pairing::Indexed),
            other => Err(Error::Param(format!("unknown pairing \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Imported {
    pub counterfactuals: InstanceSet,
    pub factual_index: Option<Vec<usize>>,
}

/// Read externally generated counterfactuals.
pub fn import_external(
    path: impl AsRef<Path>,
    schema: &Arc<FeatureSchema>,
    pairing: Pairing,
    n_factuals: usize,
) -> Result<Imported> {
    let table = load_table_with_meta(path, schema, false)?;
    let factual_index = match pairing {
        Pairing::Aligned => None,
        Pairing::Indexed => {
            let raw = table
                .meta
                .get("_factual_index")
                .ok_or_else(|| Error::Table("indexed pairing needs a _factual_index column".into()))?;
            let index = parse_factual_index(raw, n_factuals)?;
            Some(index)
        }
    };
    Ok(Imported {
        counterfactuals: table.instances,
        factual_index,
    })
}

fn parse_factual_index(raw: &[String], n_factuals: usize) -> Result<Vec<usize>> {
    raw.iter()
        .enumerate()
        .map(|(row, v)| {
            let i: usize = v.parse().map_err(|_| Error::Cell {
                row: row + 1,
                feature: "_factual_index".into(),
                message: format!("\"{v}\" is not a row index"),
            })?;
            if i >= n_factuals {
                return Err(Error::Cell {
                    row: row + 1,
                    feature: "_factual_index".into(),
                    message: format!("factual {i} out of range for {n_factuals} factuals"),
                });
            }
            Ok(i)
        })
        .collect()
}
