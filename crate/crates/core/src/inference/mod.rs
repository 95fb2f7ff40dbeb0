//! Noise-aware posterior sampling of `(theta, Sigma)` by random-walk
//! Metropolis-Hastings on unconstrained latents.

mod priors;

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approx::NoiseAwareLikelihood;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::privacy::NoisyRelease;
use crate::sstats::Block;

pub use priors::{
    chi_square_log_density, draw_inverse_wishart, draw_lkj_cholesky, draw_prior,
    half_normal_log_density, inverse_wishart_log_density, latent_len, lkj_log_density,
    lkj_log_normalizer, ln_multivariate_gamma, log_prior, standard_normal_log_density, transform,
    LatentVector, PriorConfig, SigmaPrior, ThetaPrior, TruncationRule,
};

/// Log density on an unconstrained space, sampled by [`run_chains_with`].
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;

    /// `-inf` marks a rejected region.
    fn log_density(&self, x: &[f64]) -> f64;

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;

    /// Quantities recorded for a kept iteration.
    fn outputs(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn output_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("x_{i}")).collect()
    }
}

/// Posterior of `(theta, Sigma)` given a release.
/// Starting points of the chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Every latent drawn from the prior.
    #[default]
    Prior,
    /// `theta` latents from the prior; `Sigma` near the moment estimate
    /// read off the released second-order block.
    Moment,
}

#[derive(Debug, Clone)]
pub struct PosteriorTarget {
    likelihood: NoiseAwareLikelihood,
    prior: PriorConfig,
    sigma_start: Option<DMatrix<f64>>,
}

/// Spread of the Cholesky latents around the moment estimate.
const INIT_JITTER: f64 = 0.1;

/// `T2 / N` from a release with multipliers removed, symmetrized and with
/// eigenvalues floored at `1e-3` of the largest. `None` if the estimate has
/// no positive eigenvalue.
pub fn moment_sigma_estimate(release: &NoisyRelease) -> Option<DMatrix<f64>> {
    let d = release.layout.d;
    let n = release.n_records as f64;
    let mut s = DMatrix::<f64>::zeros(d, d);
    for (e, z) in release.layout.entries.iter().zip(&release.z) {
        if e.block != Block::T2 {
            continue;
        }
        let idx: Vec<usize> = e
            .index
            .exponents()
            .iter()
            .enumerate()
            .flat_map(|(i, &k)| std::iter::repeat_n(i, k as usize))
            .collect();
        let v = z / (n * e.multiplier);
        s[(idx[0], idx[1])] = v;
        s[(idx[1], idx[0])] = v;
    }
    let eig = s.symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0 && top.is_finite()) {
        return None;
    }
    let floored = eig.eigenvalues.map(|v| v.max(1e-3 * top));
    let m = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    ((&m + m.transpose()) * 0.5).cholesky().map(|c| c.l())
}

impl PosteriorTarget {
    pub fn new(release: &NoisyRelease, prior: &PriorConfig) -> Result<Self> {
        prior.validate()?;
        if prior.model != release.layout.model || prior.d != release.layout.d {
            return Err(Error::InvalidArgument(format!(
                "prior is for {} with d = {}, release is {} with d = {}",
                prior.model, prior.d, release.layout.model, release.layout.d
            )));
        }
        if release.layout.m != 2 {
            return Err(Error::Unsupported(
                "posterior inference needs an order-2 layout".into(),
            ));
        }
        Ok(PosteriorTarget {
            likelihood: NoiseAwareLikelihood::new(release)?,
            prior: prior.clone(),
            sigma_start: None,
        })
    }

    pub fn with_init(mut self, release: &NoisyRelease, init: InitStrategy) -> Self {
        self.sigma_start = match init {
            InitStrategy::Prior => None,
            InitStrategy::Moment => moment_sigma_estimate(release),
        };
        self
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub fn evaluate(&self, latents: &LatentVector) -> f64 {
        let lp = match log_prior(latents, &self.prior) {
            Ok(v) => v,
            Err(_) => return f64::NEG_INFINITY,
        };
        let (theta, sigma) = match transform(latents, &self.prior) {
            Ok(v) => v,
            Err(_) => return f64::NEG_INFINITY,
        };
        match self.likelihood.loglik(&theta, &sigma) {
            Ok(ll) if (lp + ll).is_finite() => lp + ll,
            _ => f64::NEG_INFINITY,
        }
    }
}

impl LogTarget for PosteriorTarget {
    fn dim(&self) -> usize {
        latent_len(self.prior.d)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        match LatentVector::from_slice(self.prior.d, x) {
            Ok(l) => self.evaluate(&l),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let draw = draw_prior(&self.prior, rng)?;
        let Some(l) = &self.sigma_start else {
            return Ok(draw.to_vec());
        };
        let mut start = LatentVector::from_factor(draw.p, draw.log_rho, l);
        for c in &mut start.chol {
            let n: f64 = StandardNormal.sample(rng);
            *c += INIT_JITTER * n;
        }
        Ok(start.to_vec())
    }

    fn outputs(&self, x: &[f64]) -> Vec<f64> {
        let d = self.prior.d;
        let l = LatentVector::from_slice(d, x).expect("latent length");
        let (mut theta, sigma) = transform(&l, &self.prior).expect("kept state is valid");
        theta.extend(sigma.to_row_major());
        theta
    }

    fn output_names(&self) -> Vec<String> {
        parameter_names(self.prior.d)
    }
}

/// `theta_1..theta_d, sigma_11..sigma_dd`.
pub fn parameter_names(d: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=d).map(|i| format!("theta_{i}")).collect();
    for i in 1..=d {
        for j in 1..=d {
            names.push(format!("sigma_{i}{j}"));
        }
    }
    names
}

/// Log posterior of a latent vector; failures map to `-inf`.
pub fn log_target(latents: &LatentVector, release: &NoisyRelease, prior: &PriorConfig) -> f64 {
    match PosteriorTarget::new(release, prior) {
        Ok(t) => t.evaluate(latents),
        Err(_) => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub log_target: f64,
    pub proposed: u64,
    pub accepted: u64,
}

impl ChainState {
    pub fn new<T: LogTarget + ?Sized>(target: &T, x: Vec<f64>) -> Self {
        let log_target = target.log_density(&x);
        ChainState {
            x,
            log_target,
            proposed: 0,
            accepted: 0,
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// One random-walk proposal with isotropic Gaussian steps.
pub fn mh_step<T: LogTarget + ?Sized, R: Rng + ?Sized>(
    state: ChainState,
    target: &T,
    proposal_sd: f64,
    rng: &mut R,
) -> ChainState {
    let proposal: Vec<f64> = state
        .x
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            v + proposal_sd * n
        })
        .collect();
    let lt = target.log_density(&proposal);
    let u: f64 = rng.random();
    let accept = lt.is_finite() && (lt >= state.log_target || u.ln() < lt - state.log_target);
    if accept {
        ChainState {
            x: proposal,
            log_target: lt,
            proposed: state.proposed + 1,
            accepted: state.accepted + 1,
        }
    } else {
        ChainState {
            proposed: state.proposed + 1,
            ..state
        }
    }
}

/// Random-walk step `x + scale * L xi` with `xi ~ N(0, I)` and `L` lower
/// triangular; returns the new state and the acceptance probability.
pub fn mh_step_correlated<T: LogTarget + ?Sized, R: Rng + ?Sized>(
    state: ChainState,
    target: &T,
    scale: f64,
    factor: &DMatrix<f64>,
    rng: &mut R,
) -> (ChainState, f64) {
    let n = state.x.len();
    let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let proposal: Vec<f64> = (0..n)
        .map(|i| state.x[i] + scale * (0..=i).map(|j| factor[(i, j)] * xi[j]).sum::<f64>())
        .collect();
    let lt = target.log_density(&proposal);
    let alpha = if lt.is_finite() {
        (lt - state.log_target).min(0.0).exp()
    } else {
        0.0
    };
    let u: f64 = rng.random();
    let next = if u < alpha {
        ChainState {
            x: proposal,
            log_target: lt,
            proposed: state.proposed + 1,
            accepted: state.accepted + 1,
        }
    } else {
        ChainState {
            proposed: state.proposed + 1,
            ..state
        }
    };
    (next, alpha)
}

const TARGET_ACCEPTANCE: f64 = 0.234;
/// Burn-in fractions at which the proposal covariance is re-estimated.
const ADAPT_WINDOWS: [f64; 4] = [0.1, 0.25, 0.5, 0.8];

/// Burn-in tuning: the step scale follows a Robbins-Monro recursion on the
/// acceptance probability, and the shape is the sample covariance of the
/// latest window.
struct Adapter {
    scale: f64,
    factor: DMatrix<f64>,
    since_reset: usize,
    window: Vec<Vec<f64>>,
    ends: Vec<usize>,
}

impl Adapter {
    fn new(dim: usize, initial_scale: f64, burn: usize) -> Self {
        Adapter {
            scale: initial_scale,
            factor: DMatrix::identity(dim, dim),
            since_reset: 0,
            window: Vec::new(),
            ends: ADAPT_WINDOWS.iter().map(|f| (f * burn as f64) as usize).collect(),
        }
    }

    fn update(&mut self, it: usize, x: &[f64], alpha: f64) {
        self.since_reset += 1;
        let rate = (self.since_reset as f64).powf(-0.6);
        self.scale *= (rate * (alpha - TARGET_ACCEPTANCE)).exp();
        self.window.push(x.to_vec());
        if self.ends.contains(&(it + 1)) {
            if let Some(l) = window_factor(&self.window) {
                self.factor = l;
                self.scale = 2.38 / (x.len() as f64).sqrt();
                self.since_reset = 0;
            }
            self.window.clear();
        }
    }
}

fn window_factor(window: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let n = window.len();
    let dim = window.first()?.len();
    if n < 2 * dim {
        return None;
    }
    let mean: Vec<f64> = (0..dim).map(|j| window.iter().map(|w| w[j]).sum::<f64>() / n as f64).collect();
    let mut c = DMatrix::zeros(dim, dim);
    for w in window {
        for i in 0..dim {
            for j in 0..=i {
                c[(i, j)] += (w[i] - mean[i]) * (w[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    let avg: f64 = c.diagonal().mean();
    if !(avg > 0.0 && avg.is_finite()) {
        return None;
    }
    for i in 0..dim {
        for j in 0..i {
            c[(j, i)] = c[(i, j)];
        }
        c[(i, i)] += 1e-8 * avg;
    }
    c.cholesky().map(|ch| ch.l())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCMCConfig {
    pub n_chains: usize,
    pub n_iters: usize,
    pub burn_in_fraction: f64,
    pub proposal_sd: f64,
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
    /// Tune a full-covariance proposal during burn-in, then freeze it.
    #[serde(default)]
    pub adapt: bool,
    #[serde(default)]
    pub init: InitStrategy,
}

impl Default for MCMCConfig {
    fn default() -> Self {
        MCMCConfig {
            n_chains: 4,
            n_iters: 30_000,
            burn_in_fraction: 0.5,
            proposal_sd: 0.02,
            seed: 0,
            execution: Execution::default(),
            adapt: false,
            init: InitStrategy::Prior,
        }
    }
}

impl MCMCConfig {
    /// Poisson protocol: 50,000 iterations, half burn-in, step 0.01.
    pub fn poisson_default() -> Self {
        MCMCConfig {
            n_iters: 50_000,
            proposal_sd: 0.01,
            ..MCMCConfig::default()
        }
    }

    pub fn burn_in(&self) -> usize {
        (self.n_iters as f64 * self.burn_in_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::InvalidArgument("need at least one chain".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::InvalidArgument(format!(
                "burn-in fraction must lie in [0, 1), got {}",
                self.burn_in_fraction
            )));
        }
        if !(self.proposal_sd > 0.0 && self.proposal_sd.is_finite()) {
            return Err(Error::InvalidArgument("proposal sd must be positive".into()));
        }
        if self.n_iters <= self.burn_in() {
            return Err(Error::InvalidArgument("no iterations left after burn-in".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub chain: usize,
    /// Absolute iteration number of the first kept sample.
    pub first_iter: usize,
    /// One row per kept iteration.
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub log_target_trace: Vec<f64>,
    pub parameter_names: Vec<String>,
}

impl ChainOutput {
    /// Kept draws of parameter `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|row| row[j]).collect()
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.samples.iter().map(|row| row[j]).sum::<f64>() / self.samples.len() as f64
    }
}

const MAX_INIT_TRIES: usize = 1000;

fn run_one<T: LogTarget + ?Sized>(target: &T, config: &MCMCConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(chain as u64));
    let mut state = None;
    for _ in 0..MAX_INIT_TRIES {
        let x = target.initial_point(&mut rng)?;
        let s = ChainState::new(target, x);
        if s.log_target.is_finite() {
            state = Some(s);
            break;
        }
    }
    let mut state = state.ok_or_else(|| {
        Error::ChainsStuck(format!(
            "chain {chain}: no finite starting point in {MAX_INIT_TRIES} prior draws"
        ))
    })?;
    let burn = config.burn_in();
    let mut samples = Vec::with_capacity(config.n_iters - burn);
    let mut trace = Vec::with_capacity(config.n_iters - burn);
    let mut adapter = config
        .adapt
        .then(|| Adapter::new(target.dim(), config.proposal_sd, burn));
    for it in 0..config.n_iters {
        state = match adapter.as_mut() {
            None => mh_step(state, target, config.proposal_sd, &mut rng),
            Some(a) => {
                let (next, alpha) = mh_step_correlated(state, target, a.scale, &a.factor, &mut rng);
                if it < burn {
                    a.update(it, &next.x, alpha);
                }
                next
            }
        };
        if it >= burn {
            samples.push(target.outputs(&state.x));
            trace.push(state.log_target);
        }
    }
    Ok(ChainOutput {
        chain,
        first_iter: burn,
        samples,
        acceptance_rate: state.acceptance_rate(),
        log_target_trace: trace,
        parameter_names: target.output_names(),
    })
}

/// Runs independent chains; chain `c` is seeded with `seed + c`.
pub fn run_chains_with<T: LogTarget + ?Sized>(target: &T, config: &MCMCConfig) -> Result<Vec<ChainOutput>> {
    config.validate()?;
    let outputs: Vec<ChainOutput> = config
        .execution
        .map(config.n_chains, |c| run_one(target, config, c))
        .into_iter()
        .collect::<Result<_>>()?;
    if outputs.iter().all(|o| o.acceptance_rate == 0.0) {
        let detail = outputs
            .iter()
            .map(|o| {
                format!(
                    "chain {} stuck at log target {}",
                    o.chain,
                    o.log_target_trace.last().copied().unwrap_or(f64::NAN)
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::ChainsStuck(detail));
    }
    Ok(outputs)
}

pub fn run_chains(release: &NoisyRelease, prior: &PriorConfig, config: &MCMCConfig) -> Result<Vec<ChainOutput>> {
    let target = PosteriorTarget::new(release, prior)?.with_init(release, config.init);
    run_chains_with(&target, config)
}

/// Writes `chain, iter, <parameters>, log_target` rows.
pub fn write_chain_csv<W: Write>(outputs: &[ChainOutput], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names = outputs
        .first()
        .map(|o| o.parameter_names.clone())
        .unwrap_or_default();
    let mut header = vec!["chain".to_string(), "iter".to_string()];
    header.extend(names);
    header.push("log_target".into());
    w.write_record(&header)?;
    for o in outputs {
        for (k, (row, lt)) in o.samples.iter().zip(&o.log_target_trace).enumerate() {
            let mut rec = vec![o.chain.to_string(), (o.first_iter + k).to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.16e}")));
            rec.push(format!("{lt:.16e}"));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a chain CSV back into per-chain outputs.
pub fn read_chain_csv<R: std::io::Read>(reader: R) -> Result<Vec<ChainOutput>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.len() < 3 || header[0] != "chain" || header[1] != "iter" || header.last().map(String::as_str) != Some("log_target") {
        return Err(Error::InvalidData("chain CSV header must be chain, iter, .., log_target".into()));
    }
    let names = header[2..header.len() - 1].to_vec();
    let mut outputs: Vec<ChainOutput> = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|_| Error::NonNumeric {
                row: row + 1,
                column: header[i].clone(),
                value: rec[i].to_string(),
            })
        };
        let chain = num(0)? as usize;
        let iter = num(1)? as usize;
        let values = (2..header.len() - 1).map(num).collect::<Result<Vec<_>>>()?;
        let lt = num(header.len() - 1)?;
        if outputs.last().map(|o| o.chain) != Some(chain) {
            outputs.push(ChainOutput {
                chain,
                first_iter: iter,
                samples: Vec::new(),
                acceptance_rate: f64::NAN,
                log_target_trace: Vec::new(),
                parameter_names: names.clone(),
            });
        }
        let o = outputs.last_mut().expect("pushed above");
        o.samples.push(values);
        o.log_target_trace.push(lt);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::marginal_loglik;
    use crate::diagnostics::{gelman_rubin, pooled};
    use crate::moments::CovMatrix;
    use crate::privacy::{release, PrivacyParams};
    use crate::sstats::{layout, Model};
    use approx::assert_relative_eq;

    struct Gauss2;
    impl LogTarget for Gauss2 {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            -0.5 * (x[0] * x[0] + x[1] * x[1])
        }
        fn initial_point(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
            Ok((0..2).map(|_| StandardNormal.sample(rng)).collect())
        }
    }

    struct Flat;
    impl LogTarget for Flat {
        fn dim(&self) -> usize {
            3
        }
        fn log_density(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn initial_point(&self, _: &mut ChaCha8Rng) -> Result<Vec<f64>> {
            Ok(vec![0.0; 3])
        }
    }

    struct Nowhere;
    impl LogTarget for Nowhere {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            if x[0] == 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        fn initial_point(&self, _: &mut ChaCha8Rng) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    fn cfg(n_chains: usize, n_iters: usize, sd: f64) -> MCMCConfig {
        MCMCConfig {
            n_chains,
            n_iters,
            burn_in_fraction: 0.5,
            proposal_sd: sd,
            seed: 11,
            execution: Execution::Sequential,
            ..MCMCConfig::default()
        }
    }

    #[test]
    fn gaussian_smoke_test() {
        let mut c = cfg(1, 200_000, 1.5);
        c.burn_in_fraction = 0.0;
        c.n_iters = 100_000;
        let out = run_chains_with(&Gauss2, &c).unwrap();
        for j in 0..2 {
            let col = out[0].column(j);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(m.abs() < 0.05, "{m}");
            assert!((v - 1.0).abs() < 0.1, "{v}");
        }
    }

    /// Independent coordinates with standard deviations 0.01 and 1.
    struct Stretched;
    impl LogTarget for Stretched {
        fn dim(&self) -> usize {
            2
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            -0.5 * ((x[0] / 0.01).powi(2) + x[1] * x[1])
        }
        fn initial_point(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
            Ok((0..2).map(|_| 0.01 * Distribution::<f64>::sample(&StandardNormal, rng)).collect())
        }
    }

    #[test]
    fn adaptation_recovers_scales() {
        let mut c = cfg(4, 20_000, 0.005);
        let fixed = run_chains_with(&Stretched, &c).unwrap();
        c.adapt = true;
        let tuned = run_chains_with(&Stretched, &c).unwrap();
        let sd = |o: &[ChainOutput], j: usize| {
            let col = pooled(&o.iter().map(|ch| ch.column(j)).collect::<Vec<_>>());
            let m = col.iter().sum::<f64>() / col.len() as f64;
            (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt()
        };
        assert!((sd(&tuned, 0) - 0.01).abs() < 0.001);
        assert!((sd(&tuned, 1) - 1.0).abs() < 0.1, "{}", sd(&tuned, 1));
        let r_fixed = gelman_rubin(&fixed.iter().map(|ch| ch.column(1)).collect::<Vec<_>>()).unwrap();
        let r_tuned = gelman_rubin(&tuned.iter().map(|ch| ch.column(1)).collect::<Vec<_>>()).unwrap();
        assert!(r_tuned < 1.02 && r_tuned < r_fixed, "{r_tuned} {r_fixed}");
        for o in &tuned {
            assert!(o.acceptance_rate > 0.1 && o.acceptance_rate < 0.5);
        }
    }

    #[test]
    fn moment_estimate_matches_second_moments() {
        let lay = layout(Model::Logistic, 2, 2).unwrap();
        let xs = vec![vec![0.5, 0.1], vec![-0.2, 0.4], vec![0.3, -0.3]];
        let ys = vec![1.0, -1.0, 1.0];
        let s = crate::sstats::aggregate(&xs, &ys, &lay).unwrap();
        let p = PrivacyParams::with_sigma(&lay, 1.0, 1e-5, 1.0, 1.0, 1e-12).unwrap();
        let rel = release(&s, &lay, 3, &p, 0).unwrap();
        let l = moment_sigma_estimate(&rel).unwrap();
        let est = &l * l.transpose();
        for i in 0..2 {
            for j in 0..2 {
                let want = xs.iter().map(|x| x[i] * x[j]).sum::<f64>() / 3.0;
                assert!((est[(i, j)] - want).abs() < 1e-9, "{i}{j}");
            }
        }
        let target = PosteriorTarget::new(&rel, &PriorConfig::default_for(Model::Logistic, 2, 2.0))
            .unwrap()
            .with_init(&rel, InitStrategy::Moment);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(target.log_density(&target.initial_point(&mut rng).unwrap()).is_finite());
    }

    #[test]
    fn flat_target_accepts_everything() {
        let out = run_chains_with(&Flat, &cfg(2, 500, 3.0)).unwrap();
        assert!(out.iter().all(|o| o.acceptance_rate == 1.0));
    }

    #[test]
    fn stuck_chains_are_reported() {
        assert!(matches!(
            run_chains_with(&Nowhere, &cfg(2, 50, 1.0)),
            Err(Error::ChainsStuck(_))
        ));
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let a = run_chains_with(&Gauss2, &cfg(3, 300, 0.8)).unwrap();
        let b = run_chains_with(&Gauss2, &cfg(3, 300, 0.8)).unwrap();
        let mut p = cfg(3, 300, 0.8);
        p.execution = Execution::Parallel;
        let c = run_chains_with(&Gauss2, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_ne!(a[0].samples, a[1].samples);
    }

    #[test]
    fn acceptance_decreases_with_step() {
        let rate = |sd: f64| -> f64 {
            (0..4)
                .map(|s| {
                    let mut c = cfg(1, 4000, sd);
                    c.seed = s;
                    run_chains_with(&Gauss2, &c).unwrap()[0].acceptance_rate
                })
                .sum::<f64>()
                / 4.0
        };
        let (a, b, c) = (rate(0.3), rate(1.0), rate(3.0));
        assert!(a >= b && b >= c, "{a} {b} {c}");
        assert!(rate(1e-6) > 0.999);
    }

    fn toy() -> (NoisyRelease, PriorConfig) {
        let lay = layout(Model::Logistic, 1, 2).unwrap();
        let p = PrivacyParams::with_sigma(&lay, 1.0, 1e-5, 1.0, 0.0, 0.5).unwrap();
        let r = release(&[-1.5, 4.0], &lay, 20, &p, 2).unwrap();
        (r, PriorConfig::default_for(Model::Logistic, 1, 2.0))
    }

    #[test]
    fn log_target_is_prior_plus_likelihood() {
        let (r, prior) = toy();
        let l = LatentVector {
            p: vec![-0.7],
            log_rho: -0.4,
            chol: vec![-0.3],
        };
        let (theta, sigma) = transform(&l, &prior).unwrap();
        // hand assembly for d = 1
        let s = (-0.6f64).exp();
        assert_relative_eq!(sigma.get(0, 0), s, max_relative = 1e-15);
        assert_relative_eq!(theta[0], -(-0.4f64).exp().sqrt(), max_relative = 1e-15);
        let rho = (-0.4f64).exp();
        let tau = s.sqrt();
        let prior_hand = standard_normal_log_density(-0.7)
            + chi_square_log_density(rho, 1.0)
            - 0.4
            + half_normal_log_density(tau, 2.5)
            - (2.0 * tau).ln()
            + (2.0 * (-0.3f64).exp()).ln()
            - 0.3;
        assert_relative_eq!(log_prior(&l, &prior).unwrap(), prior_hand, max_relative = 1e-13);
        let ll = marginal_loglik(&r, &theta, &sigma).unwrap();
        assert_relative_eq!(log_target(&l, &r, &prior), prior_hand + ll, max_relative = 1e-13);
    }

    #[test]
    fn prior_only_change_shifts_by_prior_difference() {
        let (r, prior) = toy();
        let a = LatentVector {
            p: vec![0.5],
            log_rho: 0.1,
            chol: vec![0.2],
        };
        let b = LatentVector {
            p: vec![1.5],
            ..a.clone()
        };
        let dt = log_target(&a, &r, &prior) - log_target(&b, &r, &prior);
        let dp = log_prior(&a, &prior).unwrap() - log_prior(&b, &prior).unwrap();
        assert_relative_eq!(dt, dp, max_relative = 1e-10);
    }

    #[test]
    fn chain_shapes_and_csv() {
        let lay = layout(Model::Logistic, 2, 2).unwrap();
        let p = PrivacyParams::with_sigma(&lay, 1.0, 1e-5, 1.0, 0.0, 1.0).unwrap();
        let r = release(&[1.0, -2.0, 30.0, 25.0, 3.0], &lay, 100, &p, 2).unwrap();
        let prior = PriorConfig::default_for(Model::Logistic, 2, 3.0);
        let out = run_chains(&r, &prior, &cfg(1, 10, 0.05)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].samples.len(), 5);
        assert_eq!(out[0].samples[0].len(), 2 + 4);
        let mut buf = Vec::new();
        write_chain_csv(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("chain,iter,theta_1,theta_2,sigma_11,sigma_12,sigma_21,sigma_22,log_target\n"));
        assert_eq!(text.lines().count(), 6);
        let back = read_chain_csv(&buf[..]).unwrap();
        assert_eq!(back[0].samples, out[0].samples);
        for row in &out[0].samples {
            let s = CovMatrix::from_rows(&[row[2..4].to_vec(), row[4..6].to_vec()]).unwrap();
            assert!(s.matrix().clone().cholesky().is_some());
        }
    }
}
