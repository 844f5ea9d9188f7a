//! Sparsity and validity reports for a refinement run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::composer::{RefinementResult, RowStatus};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::schema::{diff_cells, ChangeMask, InstanceSet};

/// Names of the policies a run used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyNames {
    pub matcher: String,
    pub attributor: String,
    pub mode: String,
}

impl PolicyNames {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.matcher, self.attributor, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub factual: usize,
    pub counterfactual: usize,
    pub status: RowStatus,
    pub edits: usize,
    pub changed_before: usize,
    pub changed_after: usize,
    pub valid_before: bool,
    pub valid_after: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub policy: PolicyNames,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    pub seed: u64,
    pub target: String,
    pub features: Vec<String>,
    pub changed_before: usize,
    pub changed_after: usize,
    pub reduction_pct: f64,
    pub validity_before: f64,
    pub validity_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<u64>,
    pub rows: Vec<RowRecord>,
}

/// `100 · (before − after) / before`, or 0 when nothing changed before.
pub fn reduction_pct(changed_before: usize, changed_after: usize) -> f64 {
    if changed_before == 0 {
        0.0
    } else {
        100.0 * (changed_before as f64 - changed_after as f64) / changed_before as f64
    }
}

impl Report {
    pub fn to_json_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("report JSON", e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Reduction recomputed from the per-row records.
    pub fn reduction_from_rows(&self) -> f64 {
        let before = self.rows.iter().map(|r| r.changed_before).sum();
        let after = self.rows.iter().map(|r| r.changed_after).sum();
        reduction_pct(before, after)
    }
}

/// Before/after change masks, one row per matched pair. Fallback rows keep
/// their full original diff in the after mask.
pub fn change_masks(
    factuals: &InstanceSet,
    counterfactuals: &InstanceSet,
    refined: &RefinementResult,
    numeric_tol: f64,
) -> Result<(ChangeMask, ChangeMask)> {
    if refined.refined.len() != refined.pairs.len() {
        return Err(Error::Shape("refined rows do not match pairs".into()));
    }
    let mut before = Vec::with_capacity(refined.pairs.len());
    let mut after = Vec::with_capacity(refined.pairs.len());
    for (k, &(i, j)) in refined.pairs.iter().enumerate() {
        if i >= factuals.len() || j >= counterfactuals.len() {
            return Err(Error::Shape(format!("pair ({i}, {j}) out of range")));
        }
        let b = diff_cells(factuals.row(i), counterfactuals.row(j), numeric_tol);
        let a = if refined.status[k] == RowStatus::FallbackOriginalCf {
            b.clone()
        } else {
            diff_cells(factuals.row(i), refined.refined.row(k), numeric_tol)
        };
        before.push(b);
        after.push(a);
    }
    Ok((ChangeMask::from_rows(before), ChangeMask::from_rows(after)))
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub policy: PolicyNames,
    pub target: usize,
    pub seed: u64,
    pub numeric_tol: f64,
    pub runtime_ms: Option<u64>,
}

/// Aggregate edit counts and validity, re-evaluating the model on both the
/// original and the refined counterfactuals.
pub fn sparsity_report(
    factuals: &InstanceSet,
    counterfactuals: &InstanceSet,
    refined: &RefinementResult,
    model: &ModelSpec,
    options: &ReportOptions,
) -> Result<Report> {
    if factuals.schema() != counterfactuals.schema() || factuals.schema() != refined.refined.schema() {
        return Err(Error::Shape("misaligned inputs: schemas differ".into()));
    }
    model.check_schema(factuals.schema())?;
    let (before, after) = change_masks(factuals, counterfactuals, refined, options.numeric_tol)?;
    let prep = model.preprocess();
    let is_target = |row: &[_]| -> Result<bool> {
        Ok(model.label_row(&prep.encode_row(row))? == options.target)
    };
    let mut rows = Vec::with_capacity(refined.pairs.len());
    for (k, &(i, j)) in refined.pairs.iter().enumerate() {
        rows.push(RowRecord {
            factual: i,
            counterfactual: j,
            status: refined.status[k],
            edits: refined.edits[k],
            changed_before: before.per_row_counts()[k],
            changed_after: after.per_row_counts()[k],
            valid_before: is_target(counterfactuals.row(j))?,
            valid_after: is_target(refined.refined.row(k))?,
        });
    }
    let n = rows.len().max(1) as f64;
    let rate = |f: fn(&RowRecord) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(Report {
        policy: options.policy.clone(),
        allocation: refined.allocation.map(|a| a.name().to_string()),
        budget: refined.budget,
        seed: options.seed,
        target: factuals.schema().label().classes[options.target].clone(),
        features: factuals.schema().feature_names(),
        changed_before: before.total(),
        changed_after: after.total(),
        reduction_pct: reduction_pct(before.total(), after.total()),
        validity_before: rate(|r| r.valid_before),
        validity_after: rate(|r| r.valid_after),
        runtime_ms: options.runtime_ms,
        rows,
    })
}
