mod common;

use cfsparse_core::attributor::AttributorPolicy;
use cfsparse_core::composer::{exhaustive_sparsest, Allocation, ComposeMode, RowStatus};
use cfsparse_core::pipeline::{sparsify, SparsifyConfig};
use cfsparse_core::report::reduction_pct;
use cfsparse_core::schema::{diff_cells, Cell, DEFAULT_NUMERIC_TOL};
use proptest::prelude::*;

use common::*;

fn config(mode: ComposeMode, budget: Option<usize>, allocation: Allocation, sampled: bool) -> SparsifyConfig {
    let mut config = SparsifyConfig::new(1);
    config.mode = mode;
    config.budget = budget;
    config.allocation = allocation;
    if sampled {
        config.attributor = AttributorPolicy::ShapleySample;
        config.samples = 24;
    }
    config
}

fn modes() -> impl Strategy<Value = (ComposeMode, Option<usize>, Allocation)> {
    prop_oneof![
        Just((ComposeMode::SparsestValid, None, Allocation::GlobalGreedy)),
        (0usize..12).prop_map(|q| (ComposeMode::Budget, Some(q), Allocation::GlobalGreedy)),
        (0usize..5).prop_map(|q| (ComposeMode::Budget, Some(q), Allocation::PerPairCap)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Every refined cell comes from the factual or its counterfactual, the
    /// refined diff is a subset of the original one, and statuses agree with
    /// a fresh evaluation of the model.
    #[test]
    fn refined_rows_are_hybrids(
        seed in any::<u64>(),
        p in 1usize..7,
        n in 1usize..6,
        use_logistic in any::<bool>(),
        (mode, budget, allocation) in modes(),
        sampled in any::<bool>(),
    ) {
        let mut rng = rng(seed);
        let (schema, model) = problem(&mut rng, p, use_logistic);
        let f = rows(&mut rng, &schema, n);
        let c = rows(&mut rng, &schema, n);
        let out = sparsify(&model, &f, &c, None, &config(mode, budget, allocation, sampled)).unwrap();
        let r = &out.refinement;
        let prep = model.preprocess();
        for (k, &(i, j)) in r.pairs.iter().enumerate() {
            let (x, cf, refined) = (f.row(i), c.row(j), r.refined.row(k));
            let before = diff_cells(x, cf, DEFAULT_NUMERIC_TOL);
            let after = diff_cells(x, refined, DEFAULT_NUMERIC_TOL);
            for q in 0..p {
                prop_assert!(refined[q] == x[q] || refined[q] == cf[q]);
                prop_assert!(!after[q] || before[q]);
            }
            let hits = model.label_row(&prep.encode_row(refined)).unwrap() == 1;
            let edits = after.iter().filter(|d| **d).count();
            match r.status[k] {
                RowStatus::RefinedValid => {
                    prop_assert!(hits);
                    prop_assert_eq!(r.edits[k], edits);
                }
                RowStatus::AlreadyValid => {
                    prop_assert!(hits);
                    prop_assert_eq!(edits, 0);
                }
                RowStatus::InvalidPartial => {
                    prop_assert!(!hits);
                    prop_assert_eq!(r.edits[k], edits);
                }
                RowStatus::FallbackOriginalCf => prop_assert_eq!(refined, cf),
            }
        }
        prop_assert_eq!(r.total_edits, r.edits.iter().sum::<usize>());
        match (mode, allocation) {
            (ComposeMode::Budget, Allocation::GlobalGreedy) => prop_assert!(r.total_edits <= budget.unwrap()),
            (ComposeMode::Budget, Allocation::PerPairCap) => prop_assert!(r.edits.iter().all(|&e| e <= budget.unwrap())),
            _ => {}
        }
        let report = &out.report;
        prop_assert_eq!(report.changed_before, out.before.total());
        prop_assert_eq!(report.changed_after, out.after.total());
        prop_assert_eq!(report.reduction_pct, reduction_pct(report.changed_before, report.changed_after));
    }

    /// Greedy composition can only match or exceed the smallest valid subset.
    #[test]
    fn sparsest_valid_never_beats_brute_force(seed in any::<u64>(), p in 1usize..7, use_logistic in any::<bool>()) {
        let mut rng = rng(seed);
        let (schema, model) = problem(&mut rng, p, use_logistic);
        let f = rows(&mut rng, &schema, 4);
        let c = rows(&mut rng, &schema, 4);
        let out = sparsify(&model, &f, &c, None, &config(ComposeMode::SparsestValid, None, Allocation::GlobalGreedy, false)).unwrap();
        let prep = model.preprocess();
        let groups = prep.groups();
        for (k, &(i, j)) in out.refinement.pairs.iter().enumerate() {
            let x = prep.encode_row(f.row(i));
            let cf = prep.encode_row(c.row(j));
            let best = exhaustive_sparsest(&model, &x, &cf, &groups, 1).unwrap();
            match out.refinement.status[k] {
                RowStatus::RefinedValid | RowStatus::AlreadyValid => {
                    prop_assert!(out.refinement.edits[k] >= best.unwrap().len());
                }
                // the original counterfactual is kept only when it is valid
                RowStatus::FallbackOriginalCf => prop_assert_eq!(model.label_row(&cf).unwrap(), 1),
                // without a budget a row stays invalid only when the full
                // swap misses too; a non-monotone model may still have a
                // valid subset that no attribution-ordered prefix reaches
                RowStatus::InvalidPartial => prop_assert_ne!(model.label_row(&cf).unwrap(), 1),
            }
        }
    }
}

/// A worked budget example on an additive logit: weights 3, 2, 1 over three
/// standardized features, bias −5.5, factual all 0, counterfactual all 1.
/// Swapping features 0 and 1 reaches 5 − 5.5 < 0, so the smallest valid edit
/// uses all three.
#[test]
fn budget_example_spends_in_attribution_order() {
    use cfsparse_core::model::ModelSpec;
    use cfsparse_core::schema::{ColumnTransform, Feature, FeatureSchema, InstanceSet, LabelSpec, PreprocessSpec};
    use std::sync::Arc;

    let names = ["a", "b", "c"];
    let schema = Arc::new(
        FeatureSchema::new(
            names.iter().map(|n| Feature::numeric(*n)).collect(),
            LabelSpec { name: "y".into(), classes: vec!["0".into(), "1".into()] },
        )
        .unwrap(),
    );
    let prep = PreprocessSpec::new(
        names
            .iter()
            .map(|n| ColumnTransform::Numeric { name: n.to_string(), mean: 0.0, std: 1.0 })
            .collect(),
    )
    .unwrap();
    let model = ModelSpec::logistic(vec![3.0, 2.0, 1.0], -5.5, prep).unwrap();
    let row = |v: f64| vec![Cell::Numeric(v); 3];
    let f = InstanceSet::new(Arc::clone(&schema), vec![row(0.0)]).unwrap();
    let c = InstanceSet::new(Arc::clone(&schema), vec![row(1.0)]).unwrap();
    let mut cfg = config(ComposeMode::Budget, Some(2), Allocation::GlobalGreedy, false);
    cfg.scale = cfsparse_core::model::ScoreScale::Logit;

    let out = sparsify(&model, &f, &c, None, &cfg).unwrap();
    assert_eq!(out.refinement.status, vec![RowStatus::InvalidPartial]);
    assert_eq!(out.refinement.refined.row(0), &[Cell::Numeric(1.0), Cell::Numeric(1.0), Cell::Numeric(0.0)]);

    cfg.budget = Some(3);
    let out = sparsify(&model, &f, &c, None, &cfg).unwrap();
    assert_eq!(out.refinement.status, vec![RowStatus::RefinedValid]);
    assert_eq!(out.refinement.total_edits, 3);
    assert_eq!(out.report.reduction_pct, 0.0);
}
