//! Composition of refined counterfactuals from attributions.
//!
//! Starting from each factual, the features that differ from the matched
//! counterfactual are copied over one at a time in descending Shapley order,
//! stopping at the first state the model assigns to the target class.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attributor::{hybrid, AttributionTable};
use crate::error::{Error, Result};
use crate::matcher::Matching;
use crate::model::ModelSpec;
use crate::schema::{diff_cells, Cell, ChangeMask, GroupMap, InstanceSet, DEFAULT_NUMERIC_TOL};

/// Copy one original feature of the matched counterfactual into the working
/// copy of the factual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub pair: usize,
    pub feature: usize,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    RefinedValid,
    FallbackOriginalCf,
    InvalidPartial,
    AlreadyValid,
}

impl RowStatus {
    pub fn name(self) -> &'static str {
        match self {
            RowStatus::RefinedValid => "refined_valid",
            RowStatus::FallbackOriginalCf => "fallback_original_cf",
            RowStatus::InvalidPartial => "invalid_partial",
            RowStatus::AlreadyValid => "already_valid",
        }
    }
}

impl fmt::Display for RowStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComposeMode {
    SparsestValid,
    Budget,
}

impl ComposeMode {
    pub fn name(self) -> &'static str {
        match self {
            ComposeMode::SparsestValid => "sparsest-valid",
            ComposeMode::Budget => "budget",
        }
    }
}

impl fmt::Display for ComposeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComposeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsest-valid" => Ok(ComposeMode::SparsestValid),
            "budget" => Ok(ComposeMode::Budget),
            other => Err(Error::Param(format!("unknown mode \"{other}\""))),
        }
    }
}

/// How a budget is shared between pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// One budget for all pairs, spent on the most promising pairs first.
    #[default]
    GlobalGreedy,
    /// Every pair may use up to the budget on its own.
    PerPairCap,
}

impl Allocation {
    pub fn name(self) -> &'static str {
        match self {
            Allocation::GlobalGreedy => "global_greedy",
            Allocation::PerPairCap => "per_pair_cap",
        }
    }
}

impl FromStr for Allocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_greedy" | "global-greedy" => Ok(Allocation::GlobalGreedy),
            "per_pair_cap" | "per-pair-cap" => Ok(Allocation::PerPairCap),
            other => Err(Error::Param(format!("unknown allocation \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComposeOptions {
    pub target: usize,
    pub numeric_tol: f64,
}

impl ComposeOptions {
    pub fn new(target: usize) -> Self {
        ComposeOptions {
            target,
            numeric_tol: DEFAULT_NUMERIC_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    /// One refined row per matched pair, in matching order.
    pub refined: InstanceSet,
    pub pairs: Vec<(usize, usize)>,
    pub status: Vec<RowStatus>,
    pub edits: Vec<usize>,
    pub total_edits: usize,
    pub mode: ComposeMode,
    pub budget: Option<usize>,
    pub allocation: Option<Allocation>,
}

impl RefinementResult {
    /// CSV with `_factual_index`, `_status` and `_edits` appended.
    pub fn to_csv(&self) -> Result<String> {
        self.refined.to_csv(&[
            ("_factual_index", self.pairs.iter().map(|p| p.0.to_string()).collect()),
            ("_status", self.status.iter().map(|s| s.name().to_string()).collect()),
            ("_edits", self.edits.iter().map(usize::to_string).collect()),
        ])
    }
}

/// Per-pair change masks between each factual and its matched counterfactual.
pub fn pair_diffs(
    matching: &Matching,
    factuals: &InstanceSet,
    counterfactuals: &InstanceSet,
    numeric_tol: f64,
) -> ChangeMask {
    ChangeMask::from_rows(
        matching
            .pairs
            .iter()
            .map(|&(i, j)| diff_cells(factuals.row(i), counterfactuals.row(j), numeric_tol))
            .collect(),
    )
}

/// Actions over differing features, by φ descending, ties by
/// `(pair, feature)` ascending. Row `k` of `diffs` belongs to `tables[k]`.
pub fn rank_actions(tables: &[AttributionTable], diffs: &ChangeMask) -> Vec<Action> {
    let mut actions: Vec<Action> = tables
        .iter()
        .enumerate()
        .flat_map(|(pair, table)| {
            table
                .phi
                .iter()
                .enumerate()
                .filter(move |&(feature, _)| diffs.row(pair)[feature])
                .map(move |(feature, &phi)| Action { pair, feature, phi })
        })
        .collect();
    actions.sort_by(|a, b| {
        b.phi
            .total_cmp(&a.phi)
            .then(a.pair.cmp(&b.pair))
            .then(a.feature.cmp(&b.feature))
    });
    actions
}

struct PairOutcome {
    row: Vec<Cell>,
    status: RowStatus,
    edits: usize,
}

struct Context<'a> {
    model: &'a ModelSpec,
    factuals: &'a InstanceSet,
    counterfactuals: &'a InstanceSet,
    pairs: &'a [(usize, usize)],
    target: usize,
}

impl Context<'_> {
    fn is_target(&self, row: &[Cell]) -> bool {
        let enc = self.model.preprocess().encode_row(row);
        self.model.label_row(&enc).expect("model checked against schema") == self.target
    }

    /// Apply `actions` (this pair's, already ordered) until valid, at most
    /// `cap` of them when a cap is given.
    fn refine(&self, pair: usize, actions: &[Action], cap: Option<usize>) -> PairOutcome {
        let (i, j) = self.pairs[pair];
        let factual = self.factuals.row(i);
        let cf = self.counterfactuals.row(j);
        if self.is_target(factual) {
            return PairOutcome {
                row: factual.to_vec(),
                status: RowStatus::AlreadyValid,
                edits: 0,
            };
        }
        let mut state = factual.to_vec();
        if cap == Some(0) {
            return PairOutcome {
                row: state,
                status: RowStatus::InvalidPartial,
                edits: 0,
            };
        }
        let mut edits = 0;
        for action in actions {
            if Some(edits) == cap {
                return PairOutcome {
                    row: state,
                    status: RowStatus::InvalidPartial,
                    edits,
                };
            }
            state[action.feature] = cf[action.feature];
            edits += 1;
            if self.is_target(&state) {
                return PairOutcome {
                    row: state,
                    status: RowStatus::RefinedValid,
                    edits,
                };
            }
        }
        if self.is_target(cf) {
            PairOutcome {
                row: cf.to_vec(),
                status: RowStatus::FallbackOriginalCf,
                edits,
            }
        } else {
            PairOutcome {
                row: state,
                status: RowStatus::InvalidPartial,
                edits,
            }
        }
    }
}

fn prepare<'a>(
    model: &'a ModelSpec,
    matching: &'a Matching,
    factuals: &'a InstanceSet,
    counterfactuals: &'a InstanceSet,
    tables: &[AttributionTable],
    options: &ComposeOptions,
) -> Result<(Context<'a>, Vec<Vec<Action>>)> {
    model.check_schema(factuals.schema())?;
    if factuals.schema() != counterfactuals.schema() {
        return Err(Error::Shape("factuals and counterfactuals use different schemas".into()));
    }
    if options.target >= model.n_classes() {
        return Err(Error::Param(format!("target class {} out of range", options.target)));
    }
    if tables.len() != matching.pairs.len() {
        return Err(Error::Shape(format!(
            "{} attribution tables for {} pairs",
            tables.len(),
            matching.pairs.len()
        )));
    }
    for (t, &(i, j)) in tables.iter().zip(&matching.pairs) {
        if t.factual != i || t.counterfactual != j {
            return Err(Error::Shape(format!(
                "attribution table for ({}, {}) does not match pair ({i}, {j})",
                t.factual, t.counterfactual
            )));
        }
        if i >= factuals.len() || j >= counterfactuals.len() {
            return Err(Error::Matching(format!("pair ({i}, {j}) out of range")));
        }
        if t.phi.len() != factuals.schema().len() {
            return Err(Error::Shape("attribution width differs from schema".into()));
        }
    }
    let diffs = pair_diffs(matching, factuals, counterfactuals, options.numeric_tol);
    let mut per_pair = vec![Vec::new(); matching.pairs.len()];
    for action in rank_actions(tables, &diffs) {
        per_pair[action.pair].push(action);
    }
    let ctx = Context {
        model,
        factuals,
        counterfactuals,
        pairs: &matching.pairs,
        target: options.target,
    };
    Ok((ctx, per_pair))
}

fn assemble(
    ctx: &Context<'_>,
    outcomes: Vec<PairOutcome>,
    mode: ComposeMode,
    budget: Option<usize>,
    allocation: Option<Allocation>,
) -> RefinementResult {
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut status = Vec::with_capacity(outcomes.len());
    let mut edits = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        rows.push(o.row);
        status.push(o.status);
        edits.push(o.edits);
    }
    let refined = InstanceSet::new(Arc::clone(ctx.factuals.schema()), rows)
        .expect("refined cells come from validated rows");
    RefinementResult {
        refined,
        pairs: ctx.pairs.to_vec(),
        total_edits: edits.iter().sum(),
        status,
        edits,
        mode,
        budget,
        allocation,
    }
}

pub fn compose_sparsest_valid(
    model: &ModelSpec,
    matching: &Matching,
    factuals: &InstanceSet,
    counterfactuals: &InstanceSet,
    tables: &[AttributionTable],
    options: &ComposeOptions,
) -> Result<RefinementResult> {
    let (ctx, per_pair) = prepare(model, matching, factuals, counterfactuals, tables, options)?;
    let outcomes: Vec<PairOutcome> = per_pair
        .par_iter()
        .enumerate()
        .map(|(k, actions)| ctx.refine(k, actions, None))
        .collect();
    Ok(assemble(&ctx, outcomes, ComposeMode::SparsestValid, None, None))
}

#[allow(clippy::too_many_arguments)]
pub fn compose_budget(
    model: &ModelSpec,
    matching: &Matching,
    factuals: &InstanceSet,
    counterfactuals: &InstanceSet,
    tables: &[AttributionTable],
    budget: usize,
    allocation: Allocation,
    options: &ComposeOptions,
) -> Result<RefinementResult> {
    let (ctx, per_pair) = prepare(model, matching, factuals, counterfactuals, tables, options)?;
    let outcomes = match allocation {
        Allocation::PerPairCap => per_pair
            .par_iter()
            .enumerate()
            .map(|(k, actions)| ctx.refine(k, actions, Some(budget)))
            .collect(),
        Allocation::GlobalGreedy => {
            let best = |k: usize| per_pair[k].first().map_or(f64::NEG_INFINITY, |a| a.phi);
            let order: Vec<usize> = (0..per_pair.len())
                .sorted_by(|&a, &b| best(b).total_cmp(&best(a)).then(a.cmp(&b)))
                .collect();
            let mut remaining = budget;
            let mut slots: Vec<Option<PairOutcome>> = (0..per_pair.len()).map(|_| None).collect();
            for k in order {
                let outcome = ctx.refine(k, &per_pair[k], Some(remaining));
                remaining -= outcome.edits;
                slots[k] = Some(outcome);
            }
            slots.into_iter().map(|o| o.expect("every pair visited")).collect()
        }
    };
    Ok(assemble(
        &ctx,
        outcomes,
        ComposeMode::Budget,
        Some(budget),
        Some(allocation),
    ))
}

/// Smallest feature subset whose swap makes `x` predict `target`: by size,
/// then lexicographically. Brute force, for testing the greedy composer.
pub fn exhaustive_sparsest(
    model: &ModelSpec,
    x: &[f64],
    c: &[f64],
    groups: &GroupMap,
    target: usize,
) -> Result<Option<Vec<usize>>> {
    let p = groups.len();
    if p > 12 {
        return Err(Error::ExactLimit {
            features: p,
            limit: 12,
        });
    }
    for size in 0..=p {
        for subset in (0..p).combinations(size) {
            let mut mask = vec![false; p];
            subset.iter().for_each(|&j| mask[j] = true);
            if model.label_row(&hybrid(x, c, &mask, groups))? == target {
                return Ok(Some(subset));
            }
        }
    }
    Ok(None)
}
