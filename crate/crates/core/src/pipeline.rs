//! End-to-end sparsification: match → attribute → compose → report.

use crate::attributor::{attribute_all, AttributionConfig, AttributionTable, AttributorPolicy};
use crate::composer::{compose_budget, compose_sparsest_valid, Allocation, ComposeMode, ComposeOptions, RefinementResult};
use crate::error::{Error, Result};
use crate::matcher::{cost_matrix, match_with, MatcherPolicy, Matching};
use crate::model::{ModelSpec, ScoreScale};
use crate::report::{change_masks, sparsity_report, PolicyNames, Report, ReportOptions};
use crate::schema::{encode, ChangeMask, InstanceSet, DEFAULT_NUMERIC_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct SparsifyConfig {
    pub matcher: MatcherPolicy,
    pub attributor: AttributorPolicy,
    pub samples: usize,
    pub scale: ScoreScale,
    pub mode: ComposeMode,
    pub budget: Option<usize>,
    pub allocation: Allocation,
    pub target: usize,
    pub seed: u64,
    pub numeric_tol: f64,
    pub exact_limit: usize,
}

impl SparsifyConfig {
    pub fn new(target: usize) -> Self {
        SparsifyConfig {
            matcher: MatcherPolicy::Index,
            attributor: AttributorPolicy::ShapleyExact,
            samples: crate::attributor::DEFAULT_SAMPLES,
            scale: ScoreScale::Probability,
            mode: ComposeMode::SparsestValid,
            budget: None,
            allocation: Allocation::GlobalGreedy,
            target,
            seed: 0,
            numeric_tol: DEFAULT_NUMERIC_TOL,
            exact_limit: crate::attributor::DEFAULT_EXACT_LIMIT,
        }
    }

    pub fn policy_names(&self) -> PolicyNames {
        PolicyNames {
            matcher: self.matcher.name().to_string(),
            attributor: self.attributor.name().to_string(),
            mode: self.mode.name().to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparsifyOutput {
    pub matching: Matching,
    pub attributions: Vec<AttributionTable>,
    pub refinement: RefinementResult,
    pub report: Report,
    pub before: ChangeMask,
    pub after: ChangeMask,
}

pub fn sparsify(
    model: &ModelSpec,
    factuals: &InstanceSet,
    counterfactuals: &InstanceSet,
    external_index: Option<&[usize]>,
    config: &SparsifyConfig,
) -> Result<SparsifyOutput> {
    factuals.require_rows("factuals")?;
    counterfactuals.require_rows("counterfactuals")?;
    model.check_schema(factuals.schema())?;
    if config.mode == ComposeMode::Budget && config.budget.is_none() {
        return Err(Error::Param("budget mode needs a budget".into()));
    }
    if config.attributor == AttributorPolicy::ShapleySample && config.samples == 0 {
        return Err(Error::Param("shapley-sample needs at least 1 permutation".into()));
    }
    let prep = model.preprocess();
    let f = encode(factuals, prep)?;
    let c = encode(counterfactuals, prep)?;
    let cost = cost_matrix(&f, &c)?;
    let matching = match_with(config.matcher, &cost, external_index)?;
    let attribution = AttributionConfig {
        policy: config.attributor,
        target: config.target,
        scale: config.scale,
        samples: config.samples,
        seed: config.seed,
        exact_limit: config.exact_limit,
    };
    let attributions = attribute_all(model, &matching, &f, &c, &attribution)?;
    let options = ComposeOptions {
        target: config.target,
        numeric_tol: config.numeric_tol,
    };
    let refinement = match config.mode {
        ComposeMode::SparsestValid => {
            compose_sparsest_valid(model, &matching, factuals, counterfactuals, &attributions, &options)?
        }
        ComposeMode::Budget => compose_budget(
            model,
            &matching,
            factuals,
            counterfactuals,
            &attributions,
            config.budget.unwrap_or(0),
            config.allocation,
            &options,
        )?,
    };
    let report = sparsity_report(
        factuals,
        counterfactuals,
        &refinement,
        model,
        &ReportOptions {
            policy: config.policy_names(),
            target: config.target,
            seed: config.seed,
            numeric_tol: config.numeric_tol,
            runtime_ms: None,
        },
    )?;
    let (before, after) = change_masks(factuals, counterfactuals, &refinement, config.numeric_tol)?;
    Ok(SparsifyOutput {
        matching,
        attributions,
        refinement,
        report,
        before,
        after,
    })
}
