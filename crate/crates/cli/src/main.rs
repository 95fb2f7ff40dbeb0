//! `dpglm` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use dpglm::data::{self, ClipPolicy};
use dpglm::diagnostics::{ecdf, gelman_rubin, ks_score, split_gelman_rubin, DiagnosticsReport, ParameterDiagnostics};
use dpglm::experiment::{run_experiment_to, ExperimentConfig};
use dpglm::inference::{read_chain_csv, run_chains, write_chain_csv, InitStrategy, MCMCConfig, PriorConfig};
use dpglm::oracles::{sensitivity_search, verify, VerifyBudget};
use dpglm::privacy::{
    calibrate_sigma, delta_of, release, sensitivity_for, sensitivity_general_m, NoisyRelease, PrivacyParams, Real17,
};
use dpglm::sstats::{aggregate, layout, Block, Model};
use dpglm::{ErrorKind, Execution};

#[derive(Parser)]
#[command(name = "dpglm", version, about = "Differentially private Bayesian GLMs from noisy summary statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Compute, perturb and publish the summary statistics of a CSV file.
    Release(ReleaseArgs),
    /// Sample the noise-aware posterior from a release file.
    Infer(InferArgs),
    /// R-hat and KS scores for chain files.
    Diagnose(DiagnoseArgs),
    /// Sensitivity of the statistic vector.
    Sensitivity(SensitivityArgs),
    /// Minimal Gaussian noise for a privacy budget.
    Calibrate(CalibrateArgs),
    /// Check closed forms against Monte Carlo and search oracles.
    Verify(VerifyArgs),
    /// Run a full private vs non-private experiment.
    RunExperiment(ExperimentArgs),
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct SynthArgs {
    #[arg(long, default_value = "logistic")]
    model: Model,
    /// Number of records.
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated coefficients.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    /// Row-major feature covariance, comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    covariance: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file whose keys override these flags.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ReleaseArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long, default_value = "logistic")]
    model: Model,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    rx: f64,
    /// Response bound; defaults to 5 for Poisson.
    #[arg(long)]
    ry: Option<f64>,
    #[arg(long, default_value_t = 2)]
    order: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `scale-clip` or `filter`; defaults to scale-clip for logistic and
    /// filter for Poisson.
    #[arg(long)]
    policy: Option<ClipPolicy>,
    /// Standardize feature columns before clipping.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    standardize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct InferArgs {
    /// Release JSON; the only data input.
    #[arg(long)]
    release: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Defaults to 30,000 (logistic) or 50,000 (Poisson).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    burn_in: f64,
    /// Defaults to 0.02 (logistic) or 0.01 (Poisson).
    #[arg(long)]
    proposal_sd: Option<f64>,
    /// Tune the proposal during burn-in.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    adapt: bool,
    /// `prior` or `moment`.
    #[arg(long, default_value = "moment", value_parser = parse_init)]
    init: InitStrategy,
    /// Upper bound on |theta|^2; required for logistic.
    #[arg(long)]
    s_max: Option<f64>,
    #[arg(long, action = ArgAction::SetTrue)]
    sequential: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct DiagnoseArgs {
    /// Chain CSV written by `infer`.
    #[arg(long)]
    chains: Option<PathBuf>,
    /// Chain CSV of a non-private run to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Recorded in the report.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split each chain in halves before computing R-hat.
    #[arg(long, action = ArgAction::SetTrue)]
    split: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct SensitivityArgs {
    #[arg(long, default_value = "logistic")]
    model: Model,
    #[arg(long, default_value_t = 1.0)]
    rx: f64,
    #[arg(long, default_value_t = 1.0)]
    ry: f64,
    #[arg(long, default_value_t = 2)]
    order: u32,
    /// Relative noise per block in layout order, comma-separated.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    /// Also run the numerical maximizer.
    #[arg(long, action = ArgAction::SetTrue)]
    search: bool,
    #[arg(long, default_value_t = 10_000)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct CalibrateArgs {
    /// Sensitivity; computed from model, bounds and order when absent.
    #[arg(long)]
    sensitivity: Option<f64>,
    #[arg(long, default_value = "logistic")]
    model: Model,
    #[arg(long, default_value_t = 1.0)]
    rx: f64,
    #[arg(long, default_value_t = 1.0)]
    ry: f64,
    #[arg(long, default_value_t = 2)]
    order: u32,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smaller sample and restart budgets.
    #[arg(long, action = ArgAction::SetTrue)]
    quick: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, default_value = "logistic")]
    model: Model,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated privacy levels.
    #[arg(long, value_delimiter = ',')]
    epsilon: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    rx: Option<f64>,
    #[arg(long)]
    ry: Option<f64>,
    #[arg(long)]
    order: Option<u32>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "experiment-out")]
    out: PathBuf,
    /// Experiment TOML; its keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, action = ArgAction::SetTrue)]
    print_config: bool,
}

fn parse_init(s: &str) -> std::result::Result<InitStrategy, String> {
    match s {
        "prior" => Ok(InitStrategy::Prior),
        "moment" => Ok(InitStrategy::Moment),
        other => Err(format!("unknown init strategy `{other}` (expected prior or moment)")),
    }
}

enum CliError {
    Usage(String),
    Lib(dpglm::Error),
    /// Finished, but a numerical check did not hold.
    Failed(String),
}

impl From<dpglm::Error> for CliError {
    fn from(e: dpglm::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn read_config(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Values from the config file replace the corresponding flags.
fn with_config<T: Serialize + DeserializeOwned>(args: T, config: Option<PathBuf>) -> CliResult<T> {
    let Some(path) = config else {
        return Ok(args);
    };
    let mut v = serde_json::to_value(&args)?;
    merge(&mut v, read_config(&path)?);
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn emit(out: &Option<PathBuf>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = with_config(args, config)?;
    let defaults = ExperimentConfig::default_for(a.model);
    let theta = a.theta.unwrap_or(defaults.true_theta);
    let d = theta.len();
    let cov = a.covariance.unwrap_or_else(|| {
        if d == defaults.d {
            defaults.covariance
        } else {
            (0..d * d).map(|k| if k % (d + 1) == 0 { 0.25 } else { 0.0 }).collect()
        }
    });
    if cov.len() != d * d {
        return usage(format!("--covariance needs {} values for d = {d}", d * d));
    }
    let rows: Vec<Vec<f64>> = cov.chunks(d).map(<[f64]>::to_vec).collect();
    let sigma = dpglm::moments::CovMatrix::from_rows(&rows)?;
    let ds = data::synth(a.model, a.n.unwrap_or(defaults.n), &theta, &sigma, a.seed)?;
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    emit(&a.out, &String::from_utf8_lossy(&buf))
}

fn default_ry(model: Model, ry: Option<f64>) -> f64 {
    ry.unwrap_or(match model {
        Model::Logistic => 1.0,
        Model::Poisson => 5.0,
    })
}

fn cmd_release(args: ReleaseArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = with_config(args, config)?;
    let path = required(a.data, "data")?;
    let epsilon = required(a.epsilon, "epsilon")?;
    let ry = default_ry(a.model, a.ry);
    let raw = if a.standardize {
        data::load_csv(&path, &a.target, a.model).map_err(|e| e.at("ingest"))?
    } else {
        let table = data::read_csv_raw(fs::File::open(&path)?).map_err(|e| e.at("ingest"))?;
        raw_dataset(table, &a.target, a.model).map_err(|e| e.at("ingest"))?
    };
    let policy = a.policy.unwrap_or(match a.model {
        Model::Logistic => ClipPolicy::ScaleClip,
        Model::Poisson => ClipPolicy::Filter,
    });
    let bound_y = (a.model == Model::Poisson).then_some(ry);
    let ds = data::preprocess(&raw, policy, a.rx, bound_y).map_err(|e| e.at("preprocess"))?;
    let lay = layout(a.model, ds.dim(), a.order).map_err(|e| e.at("aggregate"))?;
    let s = aggregate(&ds.x, &ds.y, &lay).map_err(|e| e.at("aggregate"))?;
    let params = PrivacyParams::calibrated(&lay, epsilon, a.delta, a.rx, ry, None).map_err(|e| e.at("calibrate"))?;
    let rel = release(&s, &lay, ds.len(), &params, a.seed).map_err(|e| e.at("release"))?;
    eprintln!(
        "released {} statistics of {} records, sensitivity {:.6}, noise sd {:.6}",
        lay.len(),
        ds.len(),
        rel.sensitivity,
        rel.noise_sd[0]
    );
    emit(&a.out, &rel.to_json()?)
}

/// Features taken as they are, with targets mapped to the model's domain.
fn raw_dataset(table: data::RawTable, target: &str, model: Model) -> dpglm::Result<data::Dataset> {
    let t = table
        .header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| dpglm::Error::MissingTarget(target.to_string()))?;
    let x: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| r.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, &v)| v).collect())
        .collect();
    let mut ds = data::dataset_from_table(table, target, model)?;
    ds.x = x;
    Ok(ds)
}

fn cmd_infer(args: InferArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = with_config(args, config)?;
    let path = required(a.release, "release")?;
    let rel = NoisyRelease::from_json(&fs::read_to_string(&path)?)?;
    let model = rel.layout.model;
    let s_max = match (model, a.s_max) {
        (_, Some(s)) => s,
        (Model::Poisson, None) => 1.0,
        (Model::Logistic, None) => return usage("--s-max is required for logistic inference"),
    };
    let prior = PriorConfig::default_for(model, rel.layout.d, s_max);
    let base = match model {
        Model::Logistic => MCMCConfig::default(),
        Model::Poisson => MCMCConfig::poisson_default(),
    };
    let mcmc = MCMCConfig {
        n_chains: a.chains,
        n_iters: a.iters.unwrap_or(base.n_iters),
        burn_in_fraction: a.burn_in,
        proposal_sd: a.proposal_sd.unwrap_or(base.proposal_sd),
        seed: a.seed,
        execution: if a.sequential { Execution::Sequential } else { Execution::default() },
        adapt: a.adapt,
        init: a.init,
    };
    let chains = run_chains(&rel, &prior, &mcmc).map_err(|e| e.at("infer"))?;
    for c in &chains {
        eprintln!("chain {}: acceptance {:.3}", c.chain, c.acceptance_rate);
    }
    let mut buf = Vec::new();
    write_chain_csv(&chains, &mut buf)?;
    emit(&a.out, &String::from_utf8_lossy(&buf))
}

fn cmd_diagnose(args: DiagnoseArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = with_config(args, config)?;
    let path = required(a.chains, "chains")?;
    let chains = read_chain_csv(fs::File::open(&path)?)?;
    let baseline = match &a.baseline {
        Some(p) => Some(read_chain_csv(fs::File::open(p)?)?),
        None => None,
    };
    let names = chains[0].parameter_names.clone();
    if let Some(b) = &baseline {
        if b[0].parameter_names != names {
            return usage("baseline chains have different parameters");
        }
    }
    let mut per_parameter = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j)).collect();
        let r_hat = if a.split { split_gelman_rubin(&cols)? } else { gelman_rubin(&cols)? };
        let ks = match &baseline {
            Some(b) => {
                let other: Vec<f64> = b.iter().flat_map(|c| c.column(j)).collect();
                let mine: Vec<f64> = cols.concat();
                Some(Real17(ks_score(&ecdf(&mine)?, &ecdf(&other)?)))
            }
            None => None,
        };
        per_parameter.push(ParameterDiagnostics {
            name: name.clone(),
            r_hat: Real17(r_hat),
            ks_vs_baseline: ks,
        });
    }
    let report = DiagnosticsReport {
        per_parameter,
        epsilon: Real17(a.epsilon.unwrap_or(f64::NAN)),
        seed: a.seed,
    };
    emit(&a.out, &report.to_json()?)
}

#[derive(Serialize)]
struct SensitivityReport {
    model: Model,
    order: u32,
    r_x: Real17,
    r_y: Real17,
    sensitivity: Real17,
    #[serde(skip_serializing_if = "Option::is_none")]
    argmin: Option<Real17>,
    #[serde(skip_serializing_if = "Option::is_none")]
    search: Option<SearchReport>,
}

#[derive(Serialize)]
struct SearchReport {
    value: Real17,
    restarts: usize,
    seed: u64,
    x: Vec<Real17>,
    y: Real17,
    x_prime: Vec<Real17>,
    y_prime: Real17,
}

fn reals(v: &[f64]) -> Vec<Real17> {
    v.iter().copied().map(Real17).collect()
}

/// Per-block noise for the layout; `ratios` in block order, default equal.
fn block_sigmas(blocks: &[Block], ratios: Option<&[f64]>) -> CliResult<std::collections::BTreeMap<Block, f64>> {
    match ratios {
        None => Ok(blocks.iter().map(|&b| (b, 1.0)).collect()),
        Some(r) if r.len() == blocks.len() => Ok(blocks.iter().copied().zip(r.iter().copied()).collect()),
        Some(r) => usage(format!("--sigma needs {} values, got {}", blocks.len(), r.len())),
    }
}

fn layout_sensitivity(model: Model, rx: f64, ry: f64, order: u32, ratios: Option<&[f64]>) -> CliResult<(f64, Option<f64>)> {
    if order <= 2 {
        let lay = layout(model, 1, order)?;
        let sigma_blocks = block_sigmas(&lay.blocks, ratios)?;
        let p = PrivacyParams {
            epsilon: 1.0,
            delta: 1e-5,
            r_x: rx,
            r_y: ry,
            sigma_blocks,
        };
        return Ok((sensitivity_for(&lay, &p)?, None));
    }
    if model != Model::Logistic {
        return usage(format!("order {order} is only available for the logistic model"));
    }
    let weights = ratios.map(|r| r.iter().map(|s| (r[0] / s).powi(2)).collect::<Vec<_>>());
    let g = sensitivity_general_m(rx, order, weights.as_deref())?;
    Ok((g.delta, Some(g.argmin)))
}

fn cmd_sensitivity(args: SensitivityArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = with_config(args, config)?;
    let (delta, argmin) = layout_sensitivity(a.model, a.rx, a.ry, a.order, a.sigma.as_deref())?;
    let search = if a.search {
        if a.order > 2 {
            return usage("--search supports orders 1 and 2");
        }
        let lay = layout(a.model, 3, a.order)?;
        let sigmas = block_sigmas(&lay.blocks, a.sigma.as_deref())?;
        let r = sensitivity_search(&lay, a.rx, a.ry, &sigmas, a.restarts, a.seed)?;
        Some(SearchReport {
            value: Real17(r.value),
            restarts: a.restarts,
            seed: a.seed,
            x: reals(&r.x),
            y: Real17(r.y),
            x_prime: reals(&r.x_prime),
            y_prime: Real17(r.y_prime),
        })
    } else {
        None
    };
    let report = SensitivityReport {
        model: a.model,
        order: a.order,
        r_x: Real17(a.rx),
        r_y: Real17(a.ry),
        sensitivity: Real17(delta),
        argmin: argmin.map(Real17),
        search,
    };
    emit(&a.out, &to_json(&report)?)
}

#[derive(Serialize)]
struct CalibrationReport {
    sensitivity: Real17,
    epsilon: Real17,
    delta: Real17,
    sigma: Real17,
    delta_achieved: Real17,
}

fn cmd_calibrate(args: CalibrateArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = with_config(args, config)?;
    let epsilon = required(a.epsilon, "epsilon")?;
    let sens = match a.sensitivity {
        Some(s) => s,
        None => layout_sensitivity(a.model, a.rx, a.ry, a.order, None)?.0,
    };
    let sigma = calibrate_sigma(sens, epsilon, a.delta)?;
    let report = CalibrationReport {
        sensitivity: Real17(sens),
        epsilon: Real17(epsilon),
        delta: Real17(a.delta),
        sigma: Real17(sigma),
        delta_achieved: Real17(delta_of(epsilon, sigma, sens)),
    };
    emit(&a.out, &to_json(&report)?)
}

fn cmd_verify(args: VerifyArgs) -> CliResult<()> {
    let config = args.config.clone();
    let a = with_config(args, config)?;
    let budget = if a.quick { VerifyBudget::quick() } else { VerifyBudget::full() };
    let report = verify(a.seed, budget)?;
    for c in &report.checks {
        eprintln!("{} {}", if c.pass { "PASS" } else { "FAIL" }, c.name);
    }
    emit(&a.out, &report.to_json()?)?;
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::Failed("some verification checks failed".into()))
    }
}

fn experiment_config(a: &ExperimentArgs) -> CliResult<ExperimentConfig> {
    let file = a.config.as_deref().map(read_config).transpose()?;
    let model = match file.as_ref().and_then(|f| f.get("model")) {
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| CliError::Usage(format!("config model: {e}")))?,
        None => a.model,
    };
    let mut v = serde_json::to_value(ExperimentConfig::default_for(model))?;
    let mut flags = Map::new();
    let mut put = |k: &str, val: Option<Value>| {
        if let Some(val) = val {
            flags.insert(k.to_string(), val);
        }
    };
    put("seed", a.seed.map(Value::from));
    put("epsilons", a.epsilon.clone().map(Value::from));
    put("delta", a.delta.map(Value::from));
    put("r_x", a.rx.map(Value::from));
    put("r_y", a.ry.map(Value::from));
    put("m", a.order.map(Value::from));
    put("repeats", a.repeats.map(Value::from));
    if let Some(it) = a.iters {
        flags.insert("mcmc".into(), serde_json::json!({ "n_iters": it }));
    }
    merge(&mut v, Value::Object(flags));
    if let Some(f) = file {
        merge(&mut v, f);
    }
    let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.validate().map_err(|e| CliError::Usage(format!("config: {e}")))?;
    Ok(cfg)
}

fn cmd_experiment(a: ExperimentArgs) -> CliResult<()> {
    let cfg = experiment_config(&a)?;
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let report = run_experiment_to(&cfg, &a.out)?;
    for i in 0..cfg.epsilons.len() {
        eprintln!("epsilon {}: mean KS {:.4}", cfg.epsilons[i], report.mean_ks(i));
    }
    eprintln!("max R-hat {:.4}; outputs in {}", report.max_r_hat(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Release(a) => cmd_release(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::RunExperiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
