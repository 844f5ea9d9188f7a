//! Regenerates the synthetic end-to-end fixture under
//! `tests/fixtures/synthetic/`.
//!
//! Two 6-d unit-covariance Gaussians whose means differ by a decreasing
//! amount per feature; the logistic model is the exact discriminant of that
//! pair, expressed over standardized inputs. Factuals are class-0 draws the
//! model places in class 0, and the counterfactuals come from the Wachter
//! generator with the l2 distance.
//!
//! Run with `cargo run -p cfsparse --example make_fixture [out_dir]`.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use cfsparse_core::generators::{wachter_generate, Distance, GeneratorParams};
use cfsparse_core::model::ModelSpec;
use cfsparse_core::schema::{
    fit_preprocess, load_table, Cell, ColumnTransform, Feature, FeatureSchema, InstanceSet, LabelSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 20_240_601;
const SHIFT: [f64; 6] = [2.5, 1.2, 0.5, 0.25, 0.1, 0.05];
const TRAIN_PER_CLASS: usize = 500;
const FACTUALS: usize = 200;

fn draw(rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            ((m + z) * 1e4).round() / 1e4
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic"));
    fs::create_dir_all(&out)?;

    let names: Vec<String> = (1..=SHIFT.len()).map(|j| format!("x{j}")).collect();
    let schema = Arc::new(FeatureSchema::new(
        names.iter().map(Feature::numeric).collect(),
        LabelSpec { name: "y".into(), classes: vec!["0".into(), "1".into()] },
    )?);
    let mu0 = vec![0.0; SHIFT.len()];
    let mu1 = SHIFT.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    let mut train = Vec::with_capacity(2 * TRAIN_PER_CLASS);
    for _ in 0..TRAIN_PER_CLASS {
        train.push(draw(&mut rng, &mu0));
        train.push(draw(&mut rng, &mu1));
    }
    let to_cells = |rows: &[Vec<f64>]| -> Vec<Vec<Cell>> {
        rows.iter().map(|r| r.iter().map(|&v| Cell::Numeric(v)).collect()).collect()
    };
    let prep = fit_preprocess(&InstanceSet::new(Arc::clone(&schema), to_cells(&train))?)?;

    // Raw-space discriminant w = Σ⁻¹(μ1 − μ0), b = −w·(μ0 + μ1)/2, then
    // folded through x = mean + std·z.
    let mut weights = Vec::with_capacity(SHIFT.len());
    let mut bias: f64 = -SHIFT.iter().map(|w| w * w / 2.0).sum::<f64>();
    for (w, t) in SHIFT.iter().zip(prep.transforms()) {
        let ColumnTransform::Numeric { mean, std, .. } = t else { unreachable!() };
        weights.push(w * std);
        bias += w * mean;
    }
    let model = ModelSpec::logistic(weights, bias, prep.clone())?;

    let mut factuals = Vec::with_capacity(FACTUALS);
    while factuals.len() < FACTUALS {
        let row = draw(&mut rng, &mu0);
        let cells: Vec<Cell> = row.iter().map(|&v| Cell::Numeric(v)).collect();
        if model.label_row(&prep.encode_row(&cells))? == 0 {
            factuals.push(cells);
        }
    }
    let factuals = InstanceSet::new(Arc::clone(&schema), factuals)?;

    fs::write(out.join("schema.json"), serde_json::to_string_pretty(&*schema)? + "\n")?;
    fs::write(out.join("model.json"), model.to_json_string())?;
    fs::write(out.join("factuals.csv"), factuals.to_csv(&[])?)?;

    // Generate from the file as written so the fixture is self-consistent.
    let factuals = load_table(out.join("factuals.csv"), &schema, false)?;
    let mut params = GeneratorParams::new(1);
    params.distance = Distance::L2;
    params.margin = 0.1;
    params.seed = SEED;
    let generated = wachter_generate(&model, &factuals, &params)?;
    fs::write(out.join("counterfactuals.csv"), generated.to_csv()?)?;
    println!(
        "wrote {} factuals, {}/{} valid counterfactuals to {}",
        factuals.len(),
        generated.valid_count(),
        generated.status.len(),
        out.display()
    );
    Ok(())
}
