//! `cfsparse`: generate counterfactuals, sparsify them, compare runs.
//!
//! Exit codes: 0 success, 2 invalid input or flags, 1 internal failure
//! (including failure to write an output file).

mod config;

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use cfsparse_core::attributor::attributions_to_json;
use cfsparse_core::generators::{generate, import_external, GeneratorKind, GeneratorParams, Pairing};
use cfsparse_core::model::{load_model, ModelSpec};
use cfsparse_core::pipeline::{sparsify, SparsifyConfig};
use cfsparse_core::report::Report;
use cfsparse_core::schema::{load_schema, load_table, FeatureSchema};
use cfsparse_core::viz::{comparison_svg, heatmap_svg};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "cfsparse",
    version,
    about = "Sparsify counterfactual explanations for tabular classifiers"
)]
struct Cli {
    /// Seed for every random choice [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it [default: available cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON run configuration; flags given on the command line take precedence
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate counterfactuals for every factual row
    Generate(GenerateArgs),
    /// Match, attribute and compose sparser counterfactuals
    Sparsify(SparsifyArgs),
    /// Draw a comparison chart from several report files
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    /// Feature schema JSON
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Factual rows CSV
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model JSON (carries its own preprocessing)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Target class, by name or index [default: 1]
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Generator: wachter | diverse
    #[arg(long)]
    generator: Option<String>,
    /// Counterfactual CSV to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Counterfactuals per factual [default: 1]
    #[arg(long)]
    k: Option<usize>,
    /// Gradient steps (wachter) or samples per row (diverse) [default: 1000]
    #[arg(long)]
    max_iters: Option<usize>,
    /// Gradient step size [default: 0.05]
    #[arg(long)]
    step_size: Option<f64>,
    /// Initial weight of the validity term [default: 0.1]
    #[arg(long)]
    lambda_init: Option<f64>,
    /// Factor applied to the validity weight while invalid [default: 2.0]
    #[arg(long)]
    lambda_growth: Option<f64>,
    /// Probability margin above the decision level, in [0, 0.5) [default: 0]
    #[arg(long)]
    margin: Option<f64>,
    /// Distance in encoded space: l1 | l2 [default: l1]
    #[arg(long)]
    distance: Option<String>,
}

#[derive(Args, Debug)]
struct SparsifyArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Counterfactual CSV to refine
    #[arg(long)]
    counterfactuals: Option<PathBuf>,
    /// How counterfactual rows map to factuals: aligned | indexed [default: aligned]
    #[arg(long)]
    pairing: Option<String>,
    /// Matching policy: index | nearest | ot [default: index]
    #[arg(long)]
    matcher: Option<String>,
    /// Attribution policy: shapley-exact | shapley-sample [default: shapley-exact]
    #[arg(long)]
    attributor: Option<String>,
    /// Permutations for shapley-sample [default: 1000]
    #[arg(long)]
    samples: Option<usize>,
    /// Largest feature count enumerated exactly [default: 12]
    #[arg(long)]
    exact_limit: Option<usize>,
    /// Score attributed: probability | logit [default: probability]
    #[arg(long)]
    scale: Option<String>,
    /// Composition: sparsest-valid | budget [default: sparsest-valid]
    #[arg(long)]
    mode: Option<String>,
    /// Edit budget for budget mode
    #[arg(long)]
    budget: Option<usize>,
    /// Budget sharing: global_greedy | per_pair_cap [default: global_greedy]
    #[arg(long)]
    allocation: Option<String>,
    /// Refined counterfactual CSV to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report JSON to write
    #[arg(long)]
    report: Option<PathBuf>,
    /// Optional before/after heatmap SVG
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Optional matching JSON
    #[arg(long)]
    save_matching: Option<PathBuf>,
    /// Optional attribution JSON
    #[arg(long)]
    save_attributions: Option<PathBuf>,
    /// Record wall-clock runtime in the report (makes it non-reproducible)
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report JSON files, drawn in the given order
    reports: Vec<PathBuf>,
    /// Comparison SVG to write
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Input(String),
    Internal(String),
}

impl<E: Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn required<T>(value: Option<T>, flag: &str) -> Outcome<T> {
    value.ok_or_else(|| Failure::Input(format!("missing required --{flag}")))
}

fn parse_or<T: FromStr>(value: Option<String>, default: T) -> Outcome<T>
where
    T::Err: Display,
{
    match value {
        Some(s) => s.parse().map_err(|e: T::Err| Failure::Input(e.to_string())),
        None => Ok(default),
    }
}

fn write_output(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents)
        .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))
}

struct Loaded {
    schema: Arc<FeatureSchema>,
    model: ModelSpec,
    target: usize,
}

fn load_inputs(inputs: &Inputs, config: &mut RunConfig) -> Outcome<(Loaded, PathBuf)> {
    let schema_path = required(inputs.schema.clone().or(config.schema.take()), "schema")?;
    let data_path = required(inputs.data.clone().or(config.data.take()), "data")?;
    let model_path = required(inputs.model.clone().or(config.model.take()), "model")?;
    let schema = Arc::new(load_schema(&schema_path)?);
    let model = load_model(&model_path)?;
    model.check_schema(&schema)?;
    let target = inputs
        .target
        .clone()
        .or(config.target.take().map(|t| t.into_string()))
        .unwrap_or_else(|| "1".into());
    let target = schema.class_index(&target)?;
    Ok((Loaded { schema, model, target }, data_path))
}

fn cmd_generate(args: GenerateArgs, seed: Option<u64>, mut config: RunConfig) -> Outcome {
    let (loaded, data_path) = load_inputs(&args.inputs, &mut config)?;
    let kind = required(args.generator.or(config.generator), "generator")?;
    if kind == "none" {
        return Err(Failure::Input("generate needs --generator wachter or diverse".into()));
    }
    let kind: GeneratorKind = kind.parse()?;
    let out = required(args.out.or(config.out), "out")?;
    let factuals = load_table(&data_path, &loaded.schema, false)?;
    factuals.require_rows("factuals")?;

    let defaults = GeneratorParams::new(loaded.target);
    let params = GeneratorParams {
        target: loaded.target,
        max_iters: args.max_iters.or(config.max_iters).unwrap_or(defaults.max_iters),
        step_size: args.step_size.or(config.step_size).unwrap_or(defaults.step_size),
        lambda_init: args.lambda_init.or(config.lambda_init).unwrap_or(defaults.lambda_init),
        lambda_growth: args
            .lambda_growth
            .or(config.lambda_growth)
            .unwrap_or(defaults.lambda_growth),
        margin: args.margin.or(config.margin).unwrap_or(defaults.margin),
        distance: parse_or(args.distance.or(config.distance), defaults.distance)?,
        k_per_instance: args.k.or(config.k).unwrap_or(defaults.k_per_instance),
        seed: seed.or(config.seed).unwrap_or(0),
    };
    params.validate()?;
    let generated = generate(kind, &loaded.model, &factuals, &params)?;
    write_output(&out, &generated.to_csv()?)?;
    let rows = generated.status.len();
    let valid = generated.valid_count();
    println!(
        "generated={rows} valid={valid} validity={:.4}",
        valid as f64 / rows.max(1) as f64
    );
    Ok(())
}

fn cmd_sparsify(args: SparsifyArgs, seed: Option<u64>, mut config: RunConfig) -> Outcome {
    let started = Instant::now();
    let (loaded, data_path) = load_inputs(&args.inputs, &mut config)?;
    let cf_path = required(args.counterfactuals.or(config.counterfactuals), "counterfactuals")?;
    let out = required(args.out.or(config.out), "out")?;
    let report_path = required(args.report.or(config.report), "report")?;
    let heatmap = args.heatmap.or(config.heatmap);
    let save_matching = args.save_matching.or(config.save_matching);
    let save_attributions = args.save_attributions.or(config.save_attributions);
    let timing = args.timing || config.timing.unwrap_or(false);

    let defaults = SparsifyConfig::new(loaded.target);
    let run = SparsifyConfig {
        matcher: parse_or(args.matcher.or(config.matcher), defaults.matcher)?,
        attributor: parse_or(args.attributor.or(config.attributor), defaults.attributor)?,
        samples: args.samples.or(config.samples).unwrap_or(defaults.samples),
        scale: parse_or(args.scale.or(config.scale), defaults.scale)?,
        mode: parse_or(args.mode.or(config.mode), defaults.mode)?,
        budget: args.budget.or(config.budget),
        allocation: parse_or(args.allocation.or(config.allocation), defaults.allocation)?,
        seed: seed.or(config.seed).unwrap_or(0),
        exact_limit: args.exact_limit.or(config.exact_limit).unwrap_or(defaults.exact_limit),
        ..defaults
    };
    let pairing: Pairing = parse_or(args.pairing.or(config.pairing), Pairing::Aligned)?;

    let factuals = load_table(&data_path, &loaded.schema, false)?;
    let imported = import_external(&cf_path, &loaded.schema, pairing, factuals.len())?;
    let mut output = sparsify(
        &loaded.model,
        &factuals,
        &imported.counterfactuals,
        imported.factual_index.as_deref(),
        &run,
    )?;
    if timing {
        output.report.runtime_ms = Some(started.elapsed().as_millis() as u64);
    }

    write_output(&out, &output.refinement.to_csv()?)?;
    write_output(&report_path, &output.report.to_json_string())?;
    if let Some(path) = heatmap {
        let svg = heatmap_svg(
            &output.before,
            &output.after,
            &output.report.features,
            output.report.reduction_pct,
        )?;
        write_output(&path, &svg)?;
    }
    if let Some(path) = save_matching {
        write_output(&path, &output.matching.to_json_string())?;
    }
    if let Some(path) = save_attributions {
        let json = attributions_to_json(&output.attributions, &loaded.schema.feature_names());
        write_output(&path, &json)?;
    }
    println!(
        "reduction={:.2}% validity={:.4}",
        output.report.reduction_pct, output.report.validity_after
    );
    Ok(())
}

fn cmd_report(args: ReportArgs, config: RunConfig) -> Outcome {
    let paths = if args.reports.is_empty() {
        config.reports.unwrap_or_default()
    } else {
        args.reports
    };
    if paths.is_empty() {
        return Err(Failure::Input("report needs at least one report file".into()));
    }
    let out = required(args.out.or(config.out), "out")?;
    let reports = paths.iter().map(Report::load).collect::<Result<Vec<_>, _>>()?;
    write_output(&out, &comparison_svg(&reports)?)?;
    println!("reports={} chart={}", reports.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Input)?,
        None => RunConfig::default(),
    };
    let threads = cli.threads.or(config.threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Internal(format!("thread pool: {e}")))?;
    let seed = cli.seed;
    pool.install(move || match cli.command {
        Command::Generate(args) => cmd_generate(args, seed, config),
        Command::Sparsify(args) => cmd_sparsify(args, seed, config),
        Command::Report(args) => cmd_report(args, config),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(message)) => {
            eprintln!("cfsparse: error: {message}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(message)) => {
            eprintln!("cfsparse: internal error: {message}");
            ExitCode::from(1)
        }
    }
}
