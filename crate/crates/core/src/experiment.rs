//! End-to-end experiment runner: data, release, private and baseline
//! inference, and KS / R-hat summaries written as JSON and CSV.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, ClipPolicy, Dataset};
use crate::diagnostics::{ecdf, gelman_rubin, ks_score, pooled, DiagnosticsReport, ParameterDiagnostics};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::inference::{run_chains, ChainOutput, InitStrategy, MCMCConfig, PriorConfig};
use crate::moments::CovMatrix;
use crate::privacy::{release, NoisyRelease, PrivacyParams, Real17};
use crate::sstats::{aggregate, layout, Model};

/// CSV input in place of synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: Model,
    pub d: usize,
    pub m: u32,
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub r_x: f64,
    pub r_y: f64,
    /// Number of synthetic records before preprocessing.
    pub n: usize,
    pub true_theta: Vec<f64>,
    /// Row-major `d x d` covariance of the synthetic features.
    pub covariance: Vec<f64>,
    pub clip_policy: ClipPolicy,
    pub repeats: usize,
    pub mcmc: MCMCConfig,
    /// Overrides the model's default prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
    /// Radius cap of the `theta` prior; defaults to `3 |true_theta|^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    #[serde(default = "default_baseline_sigma")]
    pub baseline_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
    pub seed: u64,
    /// Scheduling of the `(epsilon, repeat)` cells.
    #[serde(default)]
    pub execution: Execution,
}

fn default_baseline_sigma() -> f64 {
    1e-12
}

/// Burn-in adaptation and moment-based starts; a fixed isotropic step mixes
/// too slowly on these posteriors, whose latent scales differ tenfold.
fn tuned(mcmc: MCMCConfig) -> MCMCConfig {
    MCMCConfig {
        adapt: true,
        init: InitStrategy::Moment,
        ..mcmc
    }
}

const DEFAULT_COVARIANCE: [f64; 9] = [0.25, 0.06, -0.04, 0.06, 0.20, 0.05, -0.04, 0.05, 0.30];

impl ExperimentConfig {
    /// Synthetic logistic protocol: 1000 records, 30,000 iterations,
    /// 20 repeats.
    pub fn logistic_default() -> Self {
        ExperimentConfig {
            model: Model::Logistic,
            d: 3,
            m: 2,
            epsilons: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.1],
            delta: 1e-5,
            r_x: 1.0,
            r_y: 1.0,
            n: 1000,
            true_theta: vec![-0.9, -0.5, 0.3],
            covariance: DEFAULT_COVARIANCE.to_vec(),
            clip_policy: ClipPolicy::ScaleClip,
            repeats: 20,
            mcmc: tuned(MCMCConfig::default()),
            prior: None,
            s_max: None,
            baseline_sigma: default_baseline_sigma(),
            csv: None,
            seed: 0,
            execution: Execution::default(),
        }
    }

    /// Synthetic Poisson protocol: 500 records filtered to the unit ball,
    /// counts capped at 5, 50,000 iterations at step 0.01, 5 repeats.
    pub fn poisson_default() -> Self {
        ExperimentConfig {
            model: Model::Poisson,
            r_y: 5.0,
            n: 500,
            true_theta: vec![0.3, -0.6, 0.8],
            clip_policy: ClipPolicy::Filter,
            repeats: 5,
            mcmc: tuned(MCMCConfig::poisson_default()),
            ..ExperimentConfig::logistic_default()
        }
    }

    pub fn default_for(model: Model) -> Self {
        match model {
            Model::Logistic => Self::logistic_default(),
            Model::Poisson => Self::poisson_default(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if self.m != 2 {
            return Err(Error::Unsupported(format!(
                "experiments need the second-order approximation, got m = {}",
                self.m
            )));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidArgument("epsilons must be a non-empty list of positive values".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be positive".into()));
        }
        if self.csv.is_none() {
            if self.true_theta.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: self.true_theta.len(),
                });
            }
            if self.covariance.len() != d * d {
                return Err(Error::DimensionMismatch {
                    expected: d * d,
                    got: self.covariance.len(),
                });
            }
            if self.n == 0 {
                return Err(Error::EmptyDataset);
            }
        }
        if !(self.baseline_sigma > 0.0) {
            return Err(Error::InvalidArgument("baseline sigma must be positive".into()));
        }
        self.mcmc.validate()
    }

    fn covariance_matrix(&self) -> Result<CovMatrix> {
        let rows: Vec<Vec<f64>> = self.covariance.chunks(self.d).map(<[f64]>::to_vec).collect();
        CovMatrix::from_rows(&rows)
    }

    fn prior_config(&self) -> Result<PriorConfig> {
        if let Some(p) = &self.prior {
            p.validate()?;
            if p.model != self.model || p.d != self.d {
                return Err(Error::InvalidArgument("prior model or dimension disagrees with the experiment".into()));
            }
            return Ok(p.clone());
        }
        let s_max = match (self.s_max, &self.csv) {
            (Some(s), _) => s,
            (None, None) => 3.0 * self.true_theta.iter().map(|t| t * t).sum::<f64>(),
            (None, Some(_)) => {
                return Err(Error::InvalidArgument("CSV experiments need an explicit s_max".into()));
            }
        };
        let p = PriorConfig::default_for(self.model, self.d, s_max);
        p.validate()?;
        Ok(p)
    }
}

/// Builds the preprocessed dataset an experiment runs on.
pub fn prepare_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let raw = match &config.csv {
        Some(src) => data::load_csv(&src.path, &src.target, config.model).map_err(|e| e.at("ingest"))?,
        None => {
            let sigma = config.covariance_matrix().map_err(|e| e.at("synth"))?;
            data::synth(config.model, config.n, &config.true_theta, &sigma, derive_seed(config.seed, &[0]))
                .map_err(|e| e.at("synth"))?
        }
    };
    if raw.dim() != config.d {
        return Err(Error::DimensionMismatch {
            expected: config.d,
            got: raw.dim(),
        }
        .at("ingest"));
    }
    let r_y = (config.model == Model::Poisson).then_some(config.r_y);
    data::preprocess(&raw, config.clip_policy, config.r_x, r_y).map_err(|e| e.at("preprocess"))
}

/// Posterior summaries of one inference run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub chains: Vec<ChainOutput>,
    pub report: DiagnosticsReport,
    pub means: Vec<f64>,
    pub acceptance: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub epsilon_index: usize,
    pub repeat: usize,
    pub epsilon: f64,
    pub release: NoisyRelease,
    pub private: RunSummary,
    pub baseline: RunSummary,
    /// KS distance per `theta` coordinate.
    pub ks: Vec<f64>,
}

impl CellResult {
    pub fn tag(&self) -> String {
        format!("eps{}_rep{}", self.epsilon_index, self.repeat)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub n_records: usize,
    pub cells: Vec<CellResult>,
}

/// Indices of reported parameters: `theta` and the upper triangle of `Sigma`.
fn reported(d: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..d {
        for j in i..d {
            idx.push(d + i * d + j);
        }
    }
    idx
}

fn summarize(chains: Vec<ChainOutput>, d: usize, epsilon: f64, seed: u64, ks: Option<&[f64]>) -> Result<RunSummary> {
    let names = &chains[0].parameter_names;
    let mut per_parameter = Vec::new();
    for j in reported(d) {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j)).collect();
        per_parameter.push(ParameterDiagnostics {
            name: names[j].clone(),
            r_hat: Real17(gelman_rubin(&cols)?),
            ks_vs_baseline: ks.and_then(|k| k.get(j)).map(|&v| Real17(v)),
        });
    }
    let width = names.len();
    let means = (0..width)
        .map(|j| chains.iter().map(|c| c.mean(j)).sum::<f64>() / chains.len() as f64)
        .collect();
    let acceptance = chains.iter().map(|c| c.acceptance_rate).collect();
    Ok(RunSummary {
        report: DiagnosticsReport {
            per_parameter,
            epsilon: Real17(epsilon),
            seed,
        },
        chains,
        means,
        acceptance,
    })
}

fn theta_ks(private: &[ChainOutput], baseline: &[ChainOutput], d: usize) -> Result<Vec<f64>> {
    (0..d)
        .map(|j| {
            let a: Vec<Vec<f64>> = private.iter().map(|c| c.column(j)).collect();
            let b: Vec<Vec<f64>> = baseline.iter().map(|c| c.column(j)).collect();
            Ok(ks_score(&ecdf(&pooled(&a))?, &ecdf(&pooled(&b))?))
        })
        .collect()
}

fn run_cell(
    config: &ExperimentConfig,
    dataset: &Dataset,
    s: &[f64],
    prior: &PriorConfig,
    i: usize,
    r: usize,
) -> Result<CellResult> {
    let lay = layout(config.model, config.d, config.m)?;
    let epsilon = config.epsilons[i];
    let (ii, rr) = (i as u64, r as u64);
    let params = PrivacyParams::calibrated(&lay, epsilon, config.delta, config.r_x, config.r_y, None)
        .map_err(|e| e.at("calibrate"))?;
    let noisy = release(s, &lay, dataset.len(), &params, derive_seed(config.seed, &[1, ii, rr]))
        .map_err(|e| e.at("release"))?;
    let base_params = PrivacyParams::with_sigma(&lay, epsilon, config.delta, config.r_x, config.r_y, config.baseline_sigma)
        .map_err(|e| e.at("calibrate"))?;
    let clean = release(s, &lay, dataset.len(), &base_params, derive_seed(config.seed, &[4, ii, rr]))
        .map_err(|e| e.at("release"))?;

    let private_seed = derive_seed(config.seed, &[2, ii, rr]);
    let baseline_seed = derive_seed(config.seed, &[3, ii, rr]);
    let mcmc = |seed| MCMCConfig {
        seed,
        ..config.mcmc.clone()
    };
    let private_chains = run_chains(&noisy, prior, &mcmc(private_seed)).map_err(|e| e.at("infer"))?;
    let baseline_chains = run_chains(&clean, prior, &mcmc(baseline_seed)).map_err(|e| e.at("infer"))?;

    let ks = theta_ks(&private_chains, &baseline_chains, config.d).map_err(|e| e.at("diagnose"))?;
    let private = summarize(private_chains, config.d, epsilon, private_seed, Some(&ks)).map_err(|e| e.at("diagnose"))?;
    let baseline = summarize(baseline_chains, config.d, epsilon, baseline_seed, None).map_err(|e| e.at("diagnose"))?;
    Ok(CellResult {
        epsilon_index: i,
        repeat: r,
        epsilon,
        release: noisy,
        private,
        baseline,
        ks,
    })
}

/// Runs every `(epsilon, repeat)` cell. The dataset is built once; cells get
/// independent noise and chain seeds derived from `config.seed`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate().map_err(|e| e.at("config"))?;
    let prior = config.prior_config().map_err(|e| e.at("config"))?;
    let dataset = prepare_dataset(config)?;
    let lay = layout(config.model, config.d, config.m).map_err(|e| e.at("aggregate"))?;
    let s = aggregate(&dataset.x, &dataset.y, &lay).map_err(|e| e.at("aggregate"))?;
    let n_cells = config.epsilons.len() * config.repeats;
    let cells = config
        .execution
        .map(n_cells, |k| run_cell(config, &dataset, &s, &prior, k / config.repeats, k % config.repeats))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        config: config.clone(),
        n_records: dataset.len(),
        cells,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsilonRow {
    pub epsilon: Real17,
    /// `[repeat][coordinate]`.
    pub ks_per_repeat: Vec<Vec<Real17>>,
    pub mean_ks_per_coordinate: Vec<Real17>,
    pub mean_ks: Real17,
    pub max_r_hat: Real17,
    pub max_r_hat_baseline: Real17,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub model: Model,
    pub seed: u64,
    pub n_records: usize,
    pub true_theta: Vec<Real17>,
    pub ks_table: Vec<EpsilonRow>,
    /// Baseline posterior mean of `theta`, averaged over cells.
    pub baseline_theta_mean: Vec<Real17>,
    pub max_r_hat: Real17,
    pub cells: Vec<String>,
}

fn reals(v: &[f64]) -> Vec<Real17> {
    v.iter().copied().map(Real17).collect()
}

fn max_r_hat(report: &DiagnosticsReport) -> f64 {
    report.per_parameter.iter().map(|p| p.r_hat.0).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Serialize)]
struct CellDocument<'a> {
    epsilon: Real17,
    repeat: usize,
    private: &'a DiagnosticsReport,
    baseline: &'a DiagnosticsReport,
    private_acceptance: Vec<Real17>,
    baseline_acceptance: Vec<Real17>,
    private_mean: Vec<Real17>,
    baseline_mean: Vec<Real17>,
}

const CDF_GRID: usize = 101;

impl ExperimentReport {
    /// Rows of cells at epsilon index `i`, in repeat order.
    pub fn cells_at(&self, i: usize) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(move |c| c.epsilon_index == i)
    }

    pub fn mean_ks(&self, i: usize) -> f64 {
        let (sum, n) = self
            .cells_at(i)
            .flat_map(|c| c.ks.iter())
            .fold((0.0, 0usize), |(s, n), &k| (s + k, n + 1));
        sum / n as f64
    }

    /// Largest R-hat over every reported parameter of every run.
    pub fn max_r_hat(&self) -> f64 {
        self.cells
            .iter()
            .flat_map(|c| [max_r_hat(&c.private.report), max_r_hat(&c.baseline.report)])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn baseline_theta_mean(&self) -> Vec<f64> {
        let d = self.config.d;
        let n = self.cells.len() as f64;
        (0..d)
            .map(|j| self.cells.iter().map(|c| c.baseline.means[j]).sum::<f64>() / n)
            .collect()
    }

    pub fn summary(&self) -> ExperimentSummary {
        let ks_table = (0..self.config.epsilons.len())
            .map(|i| {
                let rows: Vec<&CellResult> = self.cells_at(i).collect();
                let d = self.config.d;
                let per_coord: Vec<f64> = (0..d)
                    .map(|j| rows.iter().map(|c| c.ks[j]).sum::<f64>() / rows.len() as f64)
                    .collect();
                EpsilonRow {
                    epsilon: Real17(self.config.epsilons[i]),
                    ks_per_repeat: rows.iter().map(|c| reals(&c.ks)).collect(),
                    mean_ks_per_coordinate: reals(&per_coord),
                    mean_ks: Real17(self.mean_ks(i)),
                    max_r_hat: Real17(rows.iter().map(|c| max_r_hat(&c.private.report)).fold(f64::NEG_INFINITY, f64::max)),
                    max_r_hat_baseline: Real17(
                        rows.iter().map(|c| max_r_hat(&c.baseline.report)).fold(f64::NEG_INFINITY, f64::max),
                    ),
                }
            })
            .collect();
        ExperimentSummary {
            model: self.config.model,
            seed: self.config.seed,
            n_records: self.n_records,
            true_theta: reals(&self.config.true_theta),
            ks_table,
            baseline_theta_mean: reals(&self.baseline_theta_mean()),
            max_r_hat: Real17(self.max_r_hat()),
            cells: self.cells.iter().map(CellResult::tag).collect(),
        }
    }

    /// ECDFs of each `theta` coordinate on a shared grid per cell, with
    /// columns `epsilon,repeat,parameter,source,x,cdf`.
    pub fn cdf_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epsilon", "repeat", "parameter", "source", "x", "cdf"])?;
        for c in &self.cells {
            for j in 0..self.config.d {
                let name = &c.private.chains[0].parameter_names[j];
                let runs = [("private", &c.private), ("baseline", &c.baseline)];
                let samples: Vec<Vec<f64>> = runs
                    .iter()
                    .map(|(_, run)| pooled(&run.chains.iter().map(|ch| ch.column(j)).collect::<Vec<_>>()))
                    .collect();
                let lo = samples.iter().flatten().copied().fold(f64::INFINITY, f64::min);
                let hi = samples.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                for ((source, _), sample) in runs.iter().zip(&samples) {
                    let f = ecdf(sample)?;
                    for g in 0..CDF_GRID {
                        let x = lo + (hi - lo) * g as f64 / (CDF_GRID - 1) as f64;
                        w.write_record([
                            format!("{:.16e}", c.epsilon),
                            c.repeat.to_string(),
                            name.clone(),
                            source.to_string(),
                            format!("{x:.16e}"),
                            format!("{:.16e}", f.eval(x)),
                        ])?;
                    }
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidData(e.to_string()))
    }

    /// Writes `summary.json`, `cdf.csv` and per-cell diagnostics and release
    /// JSON under `dir/cells/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let cells_dir = dir.join("cells");
        fs::create_dir_all(&cells_dir)?;
        for c in &self.cells {
            let doc = CellDocument {
                epsilon: Real17(c.epsilon),
                repeat: c.repeat,
                private: &c.private.report,
                baseline: &c.baseline.report,
                private_acceptance: reals(&c.private.acceptance),
                baseline_acceptance: reals(&c.baseline.acceptance),
                private_mean: reals(&c.private.means),
                baseline_mean: reals(&c.baseline.means),
            };
            fs::write(
                cells_dir.join(format!("{}_diagnostics.json", c.tag())),
                serde_json::to_string_pretty(&doc)? + "\n",
            )?;
            fs::write(cells_dir.join(format!("{}_release.json", c.tag())), c.release.to_json()?)?;
        }
        fs::write(dir.join("cdf.csv"), self.cdf_csv()?)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary())? + "\n")?;
        Ok(())
    }
}

/// [`run_experiment`] followed by [`ExperimentReport::write`].
pub fn run_experiment_to(config: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    let report = run_experiment(config)?;
    report.write(dir).map_err(|e| e.at("write"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(model: Model) -> ExperimentConfig {
        let mut c = ExperimentConfig::default_for(model);
        c.epsilons = vec![0.1, 1.1];
        c.repeats = 2;
        c.n = 300;
        c.mcmc.n_chains = 2;
        c.mcmc.n_iters = 400;
        c
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        for m in [Model::Logistic, Model::Poisson] {
            let c = ExperimentConfig::default_for(m);
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
        let l = ExperimentConfig::logistic_default();
        assert_eq!((l.n, l.mcmc.n_iters, l.repeats, l.delta), (1000, 30_000, 20, 1e-5));
        let p = ExperimentConfig::poisson_default();
        assert_eq!((p.mcmc.n_iters, p.mcmc.burn_in(), p.mcmc.proposal_sd, p.repeats), (50_000, 25_000, 0.01, 5));
    }

    #[test]
    fn bookkeeping() {
        let r = run_experiment(&small(Model::Logistic)).unwrap();
        assert_eq!(r.cells.len(), 4);
        let s = r.summary();
        assert_eq!(s.ks_table.len(), 2);
        assert!(s.ks_table.iter().all(|row| row.ks_per_repeat.len() == 2));
        for c in &r.cells {
            assert_eq!(c.private.chains.len(), 2);
            assert_eq!(c.baseline.chains.len(), 2);
            assert_eq!(c.private.report.per_parameter.len(), 3 + 6);
            assert!(c.ks.iter().all(|k| (0.0..=1.0).contains(k)));
        }
    }

    #[test]
    fn errors_carry_stage() {
        let mut c = small(Model::Logistic);
        c.covariance = vec![1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        match run_experiment(&c) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "synth"),
            other => panic!("{other:?}"),
        }
        let mut c = small(Model::Poisson);
        c.r_x = 1e-6;
        match run_experiment(&c) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "preprocess"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn written_files_are_deterministic() {
        let mut c = small(Model::Poisson);
        c.repeats = 1;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment_to(&c, a.path()).unwrap();
        c.execution = Execution::Sequential;
        run_experiment_to(&c, b.path()).unwrap();
        for f in ["summary.json", "cdf.csv", "cells/eps1_rep0_diagnostics.json", "cells/eps0_rep0_release.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
