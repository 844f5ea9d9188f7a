//! Feature schema, tabular instance sets, standardization / one-hot encoding
//! and feature-level change masks.
//!
//! Every numeric operation in the crate works on an [`EncodedMatrix`]; every
//! user-facing artifact (CSV, change counts, reports) works on an
//! [`InstanceSet`] in original space. The column order of both is fixed by the
//! [`FeatureSchema`].

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance, in original units, below which two numeric cells count
/// as unchanged.
pub const DEFAULT_NUMERIC_TOL: f64 = 1e-9;

/// Computed standard deviations below this are replaced by 1.
const DEGENERATE_STD: f64 = 1e-12;

/// Tolerance used by [`decode`] to decide whether a one-hot group is on-grid.
const ONE_HOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl Feature {
    pub fn numeric(name: impl Into<String>) -> Self {
        Feature {
            name: name.into(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        levels: impl IntoIterator<Item = S>,
    ) -> Self {
        Feature {
            name: name.into(),
            kind: FeatureKind::Categorical {
                levels: levels.into_iter().map(Into::into).collect(),
            },
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, FeatureKind::Numeric)
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical { levels } => Some(levels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub classes: Vec<String>,
}

/// Names, kinds and categorical levels of the original features plus the
/// label column. Feature order is the canonical column order everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct FeatureSchema {
    features: Vec<Feature>,
    label: LabelSpec,
}

#[derive(Deserialize)]
struct RawSchema {
    features: Vec<Feature>,
    label: LabelSpec,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        FeatureSchema::new(raw.features, raw.label)
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>, label: LabelSpec) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Schema("schema declares no features".into()));
        }
        let mut seen = HashSet::new();
        for feature in &features {
            if feature.name.is_empty() {
                return Err(Error::Schema("empty feature name".into()));
            }
            if feature.name.starts_with('_') {
                return Err(Error::Schema(format!(
                    "feature \"{}\": names starting with '_' are reserved",
                    feature.name
                )));
            }
            if !seen.insert(feature.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate feature name \"{}\"",
                    feature.name
                )));
            }
            if let FeatureKind::Categorical { levels } = &feature.kind {
                let distinct: HashSet<&str> = levels.iter().map(String::as_str).collect();
                if distinct.len() != levels.len() {
                    return Err(Error::Schema(format!(
                        "feature \"{}\": duplicate categorical level",
                        feature.name
                    )));
                }
                if levels.len() < 2 {
                    return Err(Error::Schema(format!(
                        "feature \"{}\": categorical feature has fewer than 2 levels",
                        feature.name
                    )));
                }
            }
        }
        if seen.contains(label.name.as_str()) {
            return Err(Error::Schema(format!(
                "label \"{}\" collides with a feature name",
                label.name
            )));
        }
        if label.classes.len() < 2 {
            return Err(Error::Schema(format!(
                "label \"{}\": fewer than 2 classes",
                label.name
            )));
        }
        let distinct: HashSet<&str> = label.classes.iter().map(String::as_str).collect();
        if distinct.len() != label.classes.len() {
            return Err(Error::Schema(format!(
                "label \"{}\": duplicate class name",
                label.name
            )));
        }
        Ok(FeatureSchema { features, label })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| match unwrap_schema_error(&e) {
            Some(msg) => Error::Schema(msg),
            None => Error::parse("schema JSON", e),
        })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn label(&self) -> &LabelSpec {
        &self.label
    }

    /// Number of original features `p`.
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Width of the encoded space.
    pub fn encoded_width(&self) -> usize {
        self.features
            .iter()
            .map(|f| f.levels().map_or(1, <[String]>::len))
            .sum()
    }

    /// Resolve a class given either its name or its index.
    pub fn class_index(&self, class: &str) -> Result<usize> {
        if let Some(i) = self.label.classes.iter().position(|c| c == class) {
            return Ok(i);
        }
        match class.parse::<usize>() {
            Ok(i) if i < self.label.classes.len() => Ok(i),
            _ => Err(Error::Param(format!(
                "unknown class \"{class}\" for label \"{}\"",
                self.label.name
            ))),
        }
    }
}

// serde wraps our own validation errors into its message; recover them so
// callers see the offending field rather than a generic parse error.
fn unwrap_schema_error(e: &serde_json::Error) -> Option<String> {
    let text = e.to_string();
    let start = text.find("schema: ")? + "schema: ".len();
    let end = text.rfind(" at line").unwrap_or(text.len());
    Some(text[start..end].to_string())
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<FeatureSchema> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FeatureSchema::from_json_str(&text)
}

/// One cell in original space. Categorical cells hold the level index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Numeric(f64),
    Level(usize),
}

/// Rows of original-space cells tied to a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    schema: Arc<FeatureSchema>,
    rows: Vec<Vec<Cell>>,
    labels: Option<Vec<usize>>,
}

impl InstanceSet {
    pub fn new(schema: Arc<FeatureSchema>, rows: Vec<Vec<Cell>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            check_row(&schema, i, row)?;
        }
        Ok(InstanceSet {
            schema,
            rows,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.rows.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                self.rows.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&c| c >= self.schema.label.classes.len()) {
            return Err(Error::Table(format!("label index {bad} out of range")));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        &self.rows[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// New set holding the given rows of `self`, in the given order.
    pub fn select(&self, indices: &[usize]) -> InstanceSet {
        InstanceSet {
            schema: Arc::clone(&self.schema),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn require_rows(&self, what: &str) -> Result<()> {
        if self.rows.is_empty() {
            Err(Error::Table(format!("{what}: no rows")))
        } else {
            Ok(())
        }
    }

    /// Format a cell the way it is written to CSV.
    pub fn format_cell(&self, feature: usize, cell: Cell) -> String {
        format_cell(&self.schema, feature, cell)
    }

    /// Render as CSV. `meta` columns are appended after the feature columns.
    pub fn to_csv(&self, meta: &[(&str, Vec<String>)]) -> Result<String> {
        let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header: Vec<&str> = self.schema.features.iter().map(|f| f.name.as_str()).collect();
        header.extend(meta.iter().map(|(name, _)| *name));
        writer
            .write_record(&header)
            .map_err(|e| Error::parse("CSV output", e))?;
        for (name, values) in meta {
            if values.len() != self.rows.len() {
                return Err(Error::Shape(format!(
                    "meta column {name} has {} values for {} rows",
                    values.len(),
                    self.rows.len()
                )));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            let mut record: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, &c)| format_cell(&self.schema, j, c))
                .collect();
            record.extend(meta.iter().map(|(_, values)| values[i].clone()));
            writer
                .write_record(&record)
                .map_err(|e| Error::parse("CSV output", e))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::parse("CSV output", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }
}

fn format_cell(schema: &FeatureSchema, feature: usize, cell: Cell) -> String {
    match (cell, &schema.features[feature].kind) {
        (Cell::Numeric(v), _) => format!("{v}"),
        (Cell::Level(l), FeatureKind::Categorical { levels }) => levels[l].clone(),
        (Cell::Level(l), FeatureKind::Numeric) => l.to_string(),
    }
}

fn check_row(schema: &FeatureSchema, i: usize, row: &[Cell]) -> Result<()> {
    if row.len() != schema.len() {
        return Err(Error::Shape(format!(
            "row {} has {} cells, schema has {} features",
            i + 1,
            row.len(),
            schema.len()
        )));
    }
    for (feature, cell) in schema.features.iter().zip(row) {
        let bad = match (&feature.kind, cell) {
            (FeatureKind::Numeric, Cell::Numeric(v)) if v.is_finite() => None,
            (FeatureKind::Numeric, Cell::Numeric(v)) => Some(format!("non-finite value {v}")),
            (FeatureKind::Categorical { levels }, Cell::Level(l)) if *l < levels.len() => None,
            (FeatureKind::Categorical { .. }, Cell::Level(l)) => {
                Some(format!("level index {l} out of range"))
            }
            (FeatureKind::Numeric, Cell::Level(_)) => Some("expected a number".into()),
            (FeatureKind::Categorical { .. }, Cell::Numeric(_)) => Some("expected a level".into()),
        };
        if let Some(message) = bad {
            return Err(Error::Cell {
                row: i + 1,
                feature: feature.name.clone(),
                message,
            });
        }
    }
    Ok(())
}

/// An instance set plus the raw values of any `_`-prefixed metadata columns.
#[derive(Debug, Clone)]
pub struct Table {
    pub instances: InstanceSet,
    pub meta: BTreeMap<String, Vec<String>>,
}

/// Read a data CSV. Columns whose name starts with `_` are metadata and are
/// returned untouched in [`Table::meta`].
pub fn read_table<R: Read>(
    reader: R,
    schema: &Arc<FeatureSchema>,
    expect_label: bool,
) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse("CSV header", e))?.clone();

    let mut feature_cols = vec![None; schema.len()];
    let mut label_col = None;
    let mut meta_cols = Vec::new();
    for (col, name) in header.iter().enumerate() {
        if let Some(j) = schema.position(name) {
            if feature_cols[j].replace(col).is_some() {
                return Err(Error::Table(format!("duplicate column \"{name}\"")));
            }
        } else if name == schema.label.name {
            label_col = Some(col);
        } else if name.starts_with('_') {
            meta_cols.push((name.to_string(), col));
        } else {
            return Err(Error::Table(format!("unknown column \"{name}\"")));
        }
    }
    if let Some(j) = feature_cols.iter().position(Option::is_none) {
        return Err(Error::Table(format!(
            "missing column \"{}\"",
            schema.features[j].name
        )));
    }
    if expect_label && label_col.is_none() {
        return Err(Error::Table(format!(
            "missing label column \"{}\"",
            schema.label.name
        )));
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut meta: BTreeMap<String, Vec<String>> =
        meta_cols.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
    for (i, record) in rdr.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| Error::parse(format!("CSV row {row_no}"), e))?;
        let mut row = Vec::with_capacity(schema.len());
        for (feature, col) in schema.features.iter().zip(&feature_cols) {
            let raw = record.get(col.unwrap()).unwrap_or("");
            row.push(parse_cell(feature, raw, row_no)?);
        }
        rows.push(row);
        if let Some(col) = label_col {
            let raw = record.get(col).unwrap_or("");
            let class = schema.label.classes.iter().position(|c| c == raw).ok_or_else(|| {
                Error::Cell {
                    row: row_no,
                    feature: schema.label.name.clone(),
                    message: format!("unknown class \"{raw}\""),
                }
            })?;
            labels.push(class);
        }
        for (name, col) in &meta_cols {
            meta.get_mut(name)
                .unwrap()
                .push(record.get(*col).unwrap_or("").to_string());
        }
    }

    let instances = InstanceSet {
        schema: Arc::clone(schema),
        rows,
        labels: label_col.map(|_| labels),
    };
    Ok(Table { instances, meta })
}

fn parse_cell(feature: &Feature, raw: &str, row: usize) -> Result<Cell> {
    let fail = |message: String| Error::Cell {
        row,
        feature: feature.name.clone(),
        message,
    };
    match &feature.kind {
        FeatureKind::Numeric => {
            let v: f64 = raw
                .parse()
                .map_err(|_| fail(format!("value \"{raw}\" is not a number")))?;
            if !v.is_finite() {
                return Err(fail(format!("value \"{raw}\" is not finite")));
            }
            Ok(Cell::Numeric(v))
        }
        FeatureKind::Categorical { levels } => levels
            .iter()
            .position(|l| l == raw)
            .map(Cell::Level)
            .ok_or_else(|| fail(format!("value \"{raw}\" is not a declared level"))),
    }
}

pub fn load_table_with_meta(
    path: impl AsRef<Path>,
    schema: &Arc<FeatureSchema>,
    expect_label: bool,
) -> Result<Table> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(file, schema, expect_label).map_err(|e| match e {
        Error::Parse { context, message } => Error::Parse {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn load_table(
    path: impl AsRef<Path>,
    schema: &Arc<FeatureSchema>,
    expect_label: bool,
) -> Result<InstanceSet> {
    load_table_with_meta(path, schema, expect_label).map(|t| t.instances)
}

/// Per-feature encoding parameters, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnTransform {
    Numeric { name: String, mean: f64, std: f64 },
    Categorical { name: String, levels: Vec<String> },
}

impl ColumnTransform {
    pub fn name(&self) -> &str {
        match self {
            ColumnTransform::Numeric { name, .. } | ColumnTransform::Categorical { name, .. } => {
                name
            }
        }
    }

    fn width(&self) -> usize {
        match self {
            ColumnTransform::Numeric { .. } => 1,
            ColumnTransform::Categorical { levels, .. } => levels.len(),
        }
    }
}

/// Standardization and one-hot parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPreprocess")]
pub struct PreprocessSpec {
    features: Vec<ColumnTransform>,
    /// Numeric features whose computed std fell back to 1.
    #[serde(skip)]
    degenerate: Vec<String>,
}

#[derive(Deserialize)]
struct RawPreprocess {
    features: Vec<ColumnTransform>,
}

impl TryFrom<RawPreprocess> for PreprocessSpec {
    type Error = Error;

    fn try_from(raw: RawPreprocess) -> Result<Self> {
        PreprocessSpec::new(raw.features)
    }
}

impl PreprocessSpec {
    pub fn new(features: Vec<ColumnTransform>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Schema("preprocess: no features".into()));
        }
        let mut seen = HashSet::new();
        for t in &features {
            if !seen.insert(t.name()) {
                return Err(Error::Schema(format!(
                    "preprocess: duplicate feature name \"{}\"",
                    t.name()
                )));
            }
            match t {
                ColumnTransform::Numeric { name, mean, std } => {
                    if !mean.is_finite() || !std.is_finite() || *std <= 0.0 {
                        return Err(Error::Schema(format!(
                            "preprocess: feature \"{name}\" needs finite mean and std > 0"
                        )));
                    }
                }
                ColumnTransform::Categorical { name, levels } => {
                    if levels.len() < 2 {
                        return Err(Error::Schema(format!(
                            "preprocess: feature \"{name}\" has fewer than 2 levels"
                        )));
                    }
                }
            }
        }
        Ok(PreprocessSpec {
            features,
            degenerate: Vec::new(),
        })
    }

    pub fn transforms(&self) -> &[ColumnTransform] {
        &self.features
    }

    /// Numeric features that were constant when fitted (std replaced by 1).
    pub fn degenerate(&self) -> &[String] {
        &self.degenerate
    }

    /// Encoded width `d`.
    pub fn width(&self) -> usize {
        self.features.iter().map(ColumnTransform::width).sum()
    }

    pub fn groups(&self) -> GroupMap {
        let mut start = 0;
        let ranges = self
            .features
            .iter()
            .map(|t| {
                let r = start..start + t.width();
                start = r.end;
                r
            })
            .collect();
        GroupMap { ranges }
    }

    /// Check that this spec encodes exactly the features of `schema`.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if self.features.len() != schema.len() {
            return Err(Error::Shape(format!(
                "schema mismatch: preprocess has {} features, schema has {}",
                self.features.len(),
                schema.len()
            )));
        }
        for (t, f) in self.features.iter().zip(schema.features()) {
            let ok = match (t, &f.kind) {
                (ColumnTransform::Numeric { name, .. }, FeatureKind::Numeric) => name == &f.name,
                (
                    ColumnTransform::Categorical { name, levels },
                    FeatureKind::Categorical { levels: schema_levels },
                ) => name == &f.name && levels == schema_levels,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "schema mismatch at feature \"{}\"",
                    f.name
                )));
            }
        }
        Ok(())
    }

    /// Encode a single original-space row into `out` (length `d`).
    pub fn encode_row_into(&self, row: &[Cell], out: &mut [f64]) {
        let mut col = 0;
        for (t, cell) in self.features.iter().zip(row) {
            match (t, *cell) {
                (ColumnTransform::Numeric { mean, std, .. }, Cell::Numeric(v)) => {
                    out[col] = (v - mean) / std;
                    col += 1;
                }
                (ColumnTransform::Categorical { levels, .. }, Cell::Level(l)) => {
                    for k in 0..levels.len() {
                        out[col + k] = if k == l { 1.0 } else { 0.0 };
                    }
                    col += levels.len();
                }
                _ => unreachable!("cell kind checked against schema"),
            }
        }
    }

    pub fn encode_row(&self, row: &[Cell]) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.encode_row_into(row, &mut out);
        out
    }
}

/// Fit per-feature means/population stds and one-hot groups.
pub fn fit_preprocess(data: &InstanceSet) -> Result<PreprocessSpec> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Table(format!(
            "fitting preprocessing needs at least 2 rows, got {n}"
        )));
    }
    let mut degenerate = Vec::new();
    let features = data
        .schema
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| match &f.kind {
            FeatureKind::Numeric => {
                let values = data.rows.iter().map(|r| match r[j] {
                    Cell::Numeric(v) => v,
                    Cell::Level(_) => unreachable!(),
                });
                let mean = values.clone().sum::<f64>() / n as f64;
                let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let mut std = var.sqrt();
                if std < DEGENERATE_STD {
                    std = 1.0;
                    degenerate.push(f.name.clone());
                }
                ColumnTransform::Numeric {
                    name: f.name.clone(),
                    mean,
                    std,
                }
            }
            FeatureKind::Categorical { levels } => ColumnTransform::Categorical {
                name: f.name.clone(),
                levels: levels.clone(),
            },
        })
        .collect();
    let mut spec = PreprocessSpec::new(features)?;
    spec.degenerate = degenerate;
    Ok(spec)
}

/// Partition of encoded columns into contiguous original-feature groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMap {
    ranges: Vec<Range<usize>>,
}

impl GroupMap {
    pub fn from_widths(widths: &[usize]) -> Self {
        let mut start = 0;
        let ranges = widths
            .iter()
            .map(|&w| {
                let r = start..start + w;
                start = r.end;
                r
            })
            .collect();
        GroupMap { ranges }
    }

    /// Number of groups `p`.
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn group(&self, j: usize) -> Range<usize> {
        self.ranges[j].clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.ranges.iter().cloned()
    }

    /// For each encoded column, the index of its original feature.
    pub fn column_map(&self) -> Vec<usize> {
        self.ranges
            .iter()
            .enumerate()
            .flat_map(|(j, r)| r.clone().map(move |_| j))
            .collect()
    }
}

/// Dense row-major `n × d` matrix of encoded rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    values: Vec<f64>,
    n: usize,
    groups: GroupMap,
}

impl EncodedMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, groups: GroupMap) -> Result<Self> {
        let d = groups.width();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape(format!(
                "encoded row has width {}, expected {d}",
                bad.len()
            )));
        }
        Ok(EncodedMatrix {
            n: rows.len(),
            values: rows.into_iter().flatten().collect(),
            groups,
        })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.groups.width()
    }

    pub fn groups(&self) -> &GroupMap {
        &self.groups
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.width();
        &mut self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.width().max(1)).take(self.n)
    }

    pub fn column_map(&self) -> Vec<usize> {
        self.groups.column_map()
    }
}

pub fn encode(data: &InstanceSet, prep: &PreprocessSpec) -> Result<EncodedMatrix> {
    prep.check_schema(&data.schema)?;
    let d = prep.width();
    let mut values = vec![0.0; data.len() * d];
    for (row, out) in data.rows.iter().zip(values.chunks_mut(d.max(1))) {
        prep.encode_row_into(row, out);
    }
    Ok(EncodedMatrix {
        values,
        n: data.len(),
        groups: prep.groups(),
    })
}

/// A one-hot group that was not a clean vertex and was resolved by argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffGrid {
    pub row: usize,
    pub feature: usize,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub instances: InstanceSet,
    pub off_grid: Vec<OffGrid>,
}

pub fn decode(
    m: &EncodedMatrix,
    prep: &PreprocessSpec,
    schema: &Arc<FeatureSchema>,
) -> Result<Decoded> {
    prep.check_schema(schema)?;
    if m.width() != prep.width() {
        return Err(Error::Shape(format!(
            "encoded width {} does not match preprocess width {}",
            m.width(),
            prep.width()
        )));
    }
    let groups = prep.groups();
    let mut off_grid = Vec::new();
    let mut rows = Vec::with_capacity(m.nrows());
    for (i, enc) in m.rows().enumerate() {
        let mut row = Vec::with_capacity(schema.len());
        for (j, (t, range)) in prep.features.iter().zip(groups.iter()).enumerate() {
            let block = &enc[range];
            match t {
                ColumnTransform::Numeric { mean, std, .. } => {
                    let v = block[0] * std + mean;
                    if !v.is_finite() {
                        return Err(Error::Cell {
                            row: i + 1,
                            feature: t.name().to_string(),
                            message: "decoded value is not finite".into(),
                        });
                    }
                    row.push(Cell::Numeric(v));
                }
                ColumnTransform::Categorical { .. } => {
                    let (level, on_grid) = resolve_one_hot(block).ok_or_else(|| {
                        Error::Undecodable {
                            row: i + 1,
                            feature: t.name().to_string(),
                        }
                    })?;
                    if !on_grid {
                        off_grid.push(OffGrid { row: i, feature: j });
                    }
                    row.push(Cell::Level(level));
                }
            }
        }
        rows.push(row);
    }
    Ok(Decoded {
        instances: InstanceSet {
            schema: Arc::clone(schema),
            rows,
            labels: None,
        },
        off_grid,
    })
}

/// Argmax level (lowest index on ties) and whether the block was a clean
/// one-hot vertex. `None` when no entry is positive.
pub(crate) fn resolve_one_hot(block: &[f64]) -> Option<(usize, bool)> {
    let mut best = 0;
    for (k, &v) in block.iter().enumerate() {
        if v > block[best] {
            best = k;
        }
    }
    if !(block[best] > 0.0) {
        return None;
    }
    let sum: f64 = block.iter().sum();
    let clean = (sum - 1.0).abs() <= ONE_HOT_TOL
        && block
            .iter()
            .all(|&v| v.abs() <= ONE_HOT_TOL || (v - 1.0).abs() <= ONE_HOT_TOL);
    Some((best, clean))
}

/// Per-cell record of which original features differ between aligned rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask {
    mask: Vec<Vec<bool>>,
    per_row: Vec<usize>,
    total: usize,
}

impl ChangeMask {
    pub fn from_rows(mask: Vec<Vec<bool>>) -> Self {
        let per_row: Vec<usize> = mask.iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
        let total = per_row.iter().sum();
        ChangeMask {
            mask,
            per_row,
            total,
        }
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.mask[i]
    }

    pub fn per_row_counts(&self) -> &[usize] {
        &self.per_row
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn nrows(&self) -> usize {
        self.mask.len()
    }

    pub fn ncols(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }
}

/// Which features differ between two rows of the same schema.
pub fn diff_cells(a: &[Cell], b: &[Cell], numeric_tol: f64) -> Vec<bool> {
    a.iter()
        .zip(b)
        .map(|(x, y)| match (x, y) {
            (Cell::Numeric(u), Cell::Numeric(v)) => (u - v).abs() > numeric_tol,
            (Cell::Level(u), Cell::Level(v)) => u != v,
            _ => true,
        })
        .collect()
}

pub fn diff_features(a: &InstanceSet, b: &InstanceSet, numeric_tol: f64) -> Result<ChangeMask> {
    if a.schema != b.schema {
        return Err(Error::Shape("instance sets use different schemas".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "instance sets have {} and {} rows",
            a.len(),
            b.len()
        )));
    }
    Ok(ChangeMask::from_rows(
        a.rows
            .iter()
            .zip(&b.rows)
            .map(|(x, y)| diff_cells(x, y, numeric_tol))
            .collect(),
    ))
}
