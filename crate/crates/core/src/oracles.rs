//! Brute-force cross-checks of the closed forms: Monte Carlo Gaussian
//! moments, exact-link statistic moments, a randomized sensitivity search
//! and a Monte Carlo estimate of the analytic Gaussian `delta`.
//!
//! Monte Carlo work is split into fixed-size chunks with derived seeds and
//! folded in chunk order, so estimates do not depend on the execution mode.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approx::normal_approx;
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::moments::{gaussian_moment, CovMatrix, ExponentIndex};
use crate::privacy::{
    delta_of, sensitivity_general_m, sensitivity_for, PrivacyParams, Real17,
};
use crate::sstats::{layout, statistic, Block, Model, StatisticLayout};

const CHUNK: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }

    fn std_error(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }
}

fn chunk_sizes(n: usize) -> Vec<usize> {
    let mut out = vec![CHUNK; n / CHUNK];
    if n % CHUNK > 0 {
        out.push(n % CHUNK);
    }
    out
}

/// `A` with `A A^T = Sigma`: Cholesky, or an eigen square root when the
/// matrix is only semidefinite.
pub fn gaussian_factor(sigma: &CovMatrix) -> Result<DMatrix<f64>> {
    if let Some(c) = sigma.matrix().clone().cholesky() {
        return Ok(c.l());
    }
    let eig = sigma.matrix().clone().symmetric_eigen();
    let sq = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let a = &eig.eigenvectors * sq;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCovariance("could not factor Sigma".into()));
    }
    Ok(a)
}

fn draw_x<R: Rng>(a: &DMatrix<f64>, z: &mut [f64], x: &mut [f64], rng: &mut R) {
    let d = z.len();
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = (0..d).map(|j| a[(i, j)] * z[j]).sum();
    }
}

/// Monte Carlo estimate of `E[prod_j x_j^(k_j)]`, `x ~ N(0, Sigma)`.
pub fn mc_moment(index: &ExponentIndex, sigma: &CovMatrix, n: usize, seed: u64) -> Result<MCEstimate> {
    mc_moment_with(index, sigma, n, seed, Execution::default())
}

pub fn mc_moment_with(
    index: &ExponentIndex,
    sigma: &CovMatrix,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<MCEstimate> {
    if index.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: sigma.dim(),
            got: index.dim(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let a = gaussian_factor(sigma)?;
    let d = sigma.dim();
    let sizes = chunk_sizes(n);
    let parts = exec.map(sizes.len(), |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
        let mut z = vec![0.0; d];
        let mut x = vec![0.0; d];
        let mut m = Moments::default();
        for _ in 0..sizes[c] {
            draw_x(&a, &mut z, &mut x, &mut rng);
            m.push(index.eval(&x));
        }
        m
    });
    let m = parts.into_iter().fold(Moments::default(), Moments::merge);
    Ok(MCEstimate {
        value: m.mean,
        std_error: m.std_error(),
        n_samples: n,
        seed,
    })
}

/// Exact `E[y^a | x]` given the linear predictor `t`.
pub fn exact_y_moment(model: Model, power: u32, t: f64) -> f64 {
    match model {
        Model::Logistic => {
            if power % 2 == 0 {
                1.0
            } else {
                -(0.5 * t).tanh()
            }
        }
        Model::Poisson => {
            let mu = softplus(t);
            match power {
                0 => 1.0,
                1 => mu,
                2 => mu * mu + mu,
                _ => f64::NAN,
            }
        }
    }
}

pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Monte Carlo `(mu_s, Sigma_s)` with exact links.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMomentEstimate {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mu_se: DVector<f64>,
    /// Standard error of the raw second moment behind each covariance entry.
    pub cov_se: DMatrix<f64>,
    pub n_samples: usize,
}

/// Per-record statistic mean and covariance under the exact model, averaging
/// the conditional `y` moments over Monte Carlo draws of `x`.
pub fn mc_link_moments(
    theta: &[f64],
    sigma: &CovMatrix,
    layout: &StatisticLayout,
    n: usize,
    seed: u64,
) -> Result<LinkMomentEstimate> {
    mc_link_moments_with(theta, sigma, layout, n, seed, Execution::default())
}

pub fn mc_link_moments_with(
    theta: &[f64],
    sigma: &CovMatrix,
    layout: &StatisticLayout,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<LinkMomentEstimate> {
    let d = layout.d;
    if theta.len() != d || sigma.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: theta.len(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let a = gaussian_factor(sigma)?;
    let k = layout.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let sizes = chunk_sizes(n);
    let parts = exec.map(sizes.len(), |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
        let mut z = vec![0.0; d];
        let mut x = vec![0.0; d];
        let mut mean = vec![Moments::default(); k];
        let mut second = vec![Moments::default(); pairs.len()];
        let mut mono = vec![0.0; k];
        for _ in 0..sizes[c] {
            draw_x(&a, &mut z, &mut x, &mut rng);
            let t: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
            let ys = [
                exact_y_moment(layout.model, 0, t),
                exact_y_moment(layout.model, 1, t),
                exact_y_moment(layout.model, 2, t),
            ];
            for (e, entry) in layout.entries.iter().enumerate() {
                mono[e] = entry.multiplier * entry.index.eval(&x);
                mean[e].push(mono[e] * ys[entry.y_power as usize]);
            }
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let a = (layout.entries[i].y_power + layout.entries[j].y_power) as usize;
                second[p].push(mono[i] * mono[j] * ys[a]);
            }
        }
        (mean, second)
    });
    let mut mean = vec![Moments::default(); k];
    let mut second = vec![Moments::default(); pairs.len()];
    for (m, s) in parts {
        for (acc, v) in mean.iter_mut().zip(m) {
            *acc = acc.merge(v);
        }
        for (acc, v) in second.iter_mut().zip(s) {
            *acc = acc.merge(v);
        }
    }
    let mu = DVector::from_iterator(k, mean.iter().map(|m| m.mean));
    let mu_se = DVector::from_iterator(k, mean.iter().map(|m| m.std_error()));
    let mut cov = DMatrix::zeros(k, k);
    let mut cov_se = DMatrix::zeros(k, k);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let v = second[p].mean - mu[i] * mu[j];
        cov[(i, j)] = v;
        cov[(j, i)] = v;
        cov_se[(i, j)] = second[p].std_error();
        cov_se[(j, i)] = second[p].std_error();
    }
    Ok(LinkMomentEstimate {
        mu,
        cov,
        mu_se,
        cov_se,
        n_samples: n,
    })
}

/// Best pair of records found by [`sensitivity_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub value: f64,
    pub x: Vec<f64>,
    pub y: f64,
    pub x_prime: Vec<f64>,
    pub y_prime: f64,
}

struct Objective<'a> {
    layout: &'a StatisticLayout,
    weights: Vec<f64>,
}

impl Objective<'_> {
    fn value(&self, x: &[f64], y: f64, xp: &[f64], yp: f64) -> f64 {
        let a = statistic(x, y, self.layout).expect("dimension checked");
        let b = statistic(xp, yp, self.layout).expect("dimension checked");
        a.iter()
            .zip(&b)
            .zip(&self.weights)
            .map(|((u, v), w)| (w * (u - v)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn project(x: &mut [f64], r: f64) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > r {
        for v in x.iter_mut() {
            *v *= r / n;
        }
    }
}

fn random_point<R: Rng>(d: usize, r: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let radius = if rng.random::<bool>() {
        r
    } else {
        r * rng.random::<f64>().powf(1.0 / d as f64)
    };
    for a in v.iter_mut() {
        *a *= radius / n;
    }
    v
}

/// Randomized search for the largest noise-weighted statistic distance
/// between two records. The weights are `sigma_ref / sigma_block`, with the
/// first layout block as reference. The result is a lower bound on the true
/// sensitivity.
pub fn sensitivity_search(
    layout: &StatisticLayout,
    r_x: f64,
    r_y: f64,
    sigma_blocks: &std::collections::BTreeMap<Block, f64>,
    n_restarts: usize,
    seed: u64,
) -> Result<SearchResult> {
    sensitivity_search_with(layout, r_x, r_y, sigma_blocks, n_restarts, seed, Execution::default())
}

pub fn sensitivity_search_with(
    layout: &StatisticLayout,
    r_x: f64,
    r_y: f64,
    sigma_blocks: &std::collections::BTreeMap<Block, f64>,
    n_restarts: usize,
    seed: u64,
    exec: Execution,
) -> Result<SearchResult> {
    if n_restarts == 0 {
        return Err(Error::InvalidArgument("need at least one restart".into()));
    }
    if !(r_x > 0.0) || !(r_y >= 0.0) {
        return Err(Error::InvalidArgument("bounds must be positive".into()));
    }
    let reference = *sigma_blocks
        .get(&layout.blocks[0])
        .ok_or_else(|| Error::BlockMismatch(format!("no sigma for block {}", layout.blocks[0])))?;
    let weights = layout
        .entries
        .iter()
        .map(|e| {
            sigma_blocks
                .get(&e.block)
                .map(|s| reference / s)
                .ok_or_else(|| Error::BlockMismatch(format!("no sigma for block {}", e.block)))
        })
        .collect::<Result<Vec<_>>>()?;
    let obj = Objective { layout, weights };
    let d = layout.d;
    let logistic = layout.model == Model::Logistic;
    let results = exec.map(n_restarts, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64]));
        let mut x = random_point(d, r_x, &mut rng);
        let mut xp = random_point(d, r_x, &mut rng);
        let (mut y, mut yp) = if logistic {
            (
                if rng.random::<bool>() { 1.0 } else { -1.0 },
                if rng.random::<bool>() { 1.0 } else { -1.0 },
            )
        } else {
            let pick = |rng: &mut ChaCha8Rng| match rng.random_range(0..3) {
                0 => 0.0,
                1 => r_y,
                _ => r_y * rng.random::<f64>(),
            };
            (pick(&mut rng), pick(&mut rng))
        };
        let mut best = obj.value(&x, y, &xp, yp);
        let mut step = 0.25 * r_x;
        for _ in 0..20 {
            let mut improved = false;
            for c in 0..2 * d {
                for dir in [step, -step] {
                    let (mut nx, mut nxp) = (x.clone(), xp.clone());
                    if c < d {
                        nx[c] += dir;
                        project(&mut nx, r_x);
                    } else {
                        nxp[c - d] += dir;
                        project(&mut nxp, r_x);
                    }
                    let v = obj.value(&nx, y, &nxp, yp);
                    if v > best {
                        best = v;
                        x = nx;
                        xp = nxp;
                        improved = true;
                        break;
                    }
                }
            }
            let flips: Vec<(f64, f64, bool)> = if logistic {
                vec![(-y, yp, false), (y, -yp, false), (-y, -yp, false), (y, yp, true), (-y, yp, true)]
            } else {
                let ys = step / r_x * r_y;
                vec![
                    ((y + ys).min(r_y), yp, false),
                    ((y - ys).max(0.0), yp, false),
                    (y, (yp + ys).min(r_y), false),
                    (y, (yp - ys).max(0.0), false),
                    (yp, y, false),
                    (y, yp, true),
                ]
            };
            for (ny, nyp, negate) in flips {
                let nxp: Vec<f64> = if negate { xp.iter().map(|v| -v).collect() } else { xp.clone() };
                let v = obj.value(&x, ny, &nxp, nyp);
                if v > best {
                    best = v;
                    y = ny;
                    yp = nyp;
                    xp = nxp;
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        SearchResult {
            value: best,
            x,
            y,
            x_prime: xp,
            y_prime: yp,
        }
    });
    Ok(results
        .into_iter()
        .reduce(|a, b| if b.value > a.value { b } else { a })
        .expect("at least one restart"))
}

/// Monte Carlo `delta` of the Gaussian mechanism: `E[max(0, 1 - e^(eps - L))]`
/// for the privacy loss `L ~ N(D^2 / 2 s^2, D^2 / s^2)`.
pub fn mc_delta(epsilon: f64, sigma: f64, delta_sens: f64, n: usize, seed: u64) -> Result<MCEstimate> {
    mc_delta_with(epsilon, sigma, delta_sens, n, seed, Execution::default())
}

pub fn mc_delta_with(
    epsilon: f64,
    sigma: f64,
    delta_sens: f64,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<MCEstimate> {
    if !(epsilon > 0.0 && sigma > 0.0 && delta_sens > 0.0) || n == 0 {
        return Err(Error::InvalidArgument("mc_delta needs positive arguments".into()));
    }
    let ratio = delta_sens / sigma;
    let mean = 0.5 * ratio * ratio;
    let sizes = chunk_sizes(n);
    let parts = exec.map(sizes.len(), |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
        let mut m = Moments::default();
        for _ in 0..sizes[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            let l = mean + ratio * z;
            m.push((1.0 - (epsilon - l).exp()).max(0.0));
        }
        m
    });
    let m = parts.into_iter().fold(Moments::default(), Moments::merge);
    Ok(MCEstimate {
        value: m.mean,
        std_error: m.std_error(),
        n_samples: n,
        seed,
    })
}

/// One line of a verification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub closed_form: Real17,
    pub oracle: Real17,
    pub tolerance: Real17,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, closed_form: f64, oracle: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            closed_form: Real17(closed_form),
            oracle: Real17(oracle),
            tolerance: Real17(tolerance),
            pass: (closed_form - oracle).abs() <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub seed: u64,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Sample sizes for [`verify`]; `quick` is meant for smoke runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyBudget {
    pub mc_samples: usize,
    pub restarts: usize,
}

impl VerifyBudget {
    pub fn full() -> Self {
        VerifyBudget {
            mc_samples: 1_000_000,
            restarts: 10_000,
        }
    }

    pub fn quick() -> Self {
        VerifyBudget {
            mc_samples: 100_000,
            restarts: 500,
        }
    }
}

/// Runs every closed form against its oracle.
pub fn verify(seed: u64, budget: VerifyBudget) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let sigma = CovMatrix::from_rows(&[
        vec![1.2, 0.3, -0.2],
        vec![0.3, 0.9, 0.25],
        vec![-0.2, 0.25, 1.1],
    ])?;
    for (name, k) in [
        ("moment x1^2 x2^2", vec![2, 2, 0]),
        ("moment x1^2 x2 x3", vec![2, 1, 1]),
        ("moment x1^4 x3^2", vec![4, 0, 2]),
        ("moment x1 x2 x3", vec![1, 1, 1]),
    ] {
        let idx = ExponentIndex::new(k)?;
        let exact = gaussian_moment(&idx, &sigma)?;
        let mc = mc_moment(&idx, &sigma, budget.mc_samples, derive_seed(seed, &[1]))?;
        checks.push(Check::new(name, exact, mc.value, 4.0 * mc.std_error));
    }

    let d = 3;
    for (model, r_y) in [(Model::Logistic, 0.0), (Model::Poisson, 1.0), (Model::Poisson, 5.0)] {
        let lay = layout(model, d, 2)?;
        let params = PrivacyParams::with_sigma(&lay, 1.0, 1e-5, 1.0, r_y, 1.0)?;
        let closed = sensitivity_for(&lay, &params)?;
        let found = sensitivity_search(&lay, 1.0, r_y, &params.sigma_blocks, budget.restarts, derive_seed(seed, &[2]))?;
        let mut c = Check::new(
            format!("sensitivity {model} R_y={r_y}"),
            closed,
            found.value,
            0.01 * closed,
        );
        c.pass = found.value >= 0.99 * closed && found.value <= closed + 1e-9;
        checks.push(c);
    }

    let g = sensitivity_general_m(1.0, 6, None)?;
    checks.push(Check::new("general m=6 squared sensitivity", 12.72, g.delta * g.delta, 0.05));
    checks.push(Check::new("general m=6 minimizer", -0.67, g.argmin, 0.01));

    let sens = 4.5f64.sqrt();
    for (eps, s) in [(0.5, 3.0), (1.0, 1.0), (1.1, 2.0), (2.0, 1.5)] {
        let exact = delta_of(eps, s, sens);
        let mc = mc_delta(eps, s, sens, budget.mc_samples, derive_seed(seed, &[3]))?;
        checks.push(Check::new(
            format!("delta eps={eps} sigma={s}"),
            exact,
            mc.value,
            3.0 * mc.std_error,
        ));
    }

    let theta = [0.3, -0.2, 0.25];
    let small = CovMatrix::from_rows(&[
        vec![0.25, 0.05, -0.03],
        vec![0.05, 0.2, 0.02],
        vec![-0.03, 0.02, 0.3],
    ])?;
    for model in [Model::Logistic, Model::Poisson] {
        let lay = layout(model, d, 2)?;
        let approx = normal_approx(&theta, &small, &lay)?;
        let mc = mc_link_moments(&theta, &small, &lay, budget.mc_samples, derive_seed(seed, &[4]))?;
        let mu_gap = (&approx.mu - &mc.mu).amax();
        let cov_gap = (&approx.cov - &mc.cov).amax();
        checks.push(Check::new(format!("{model} mean max gap"), 0.0, mu_gap, 0.01));
        checks.push(Check::new(format!("{model} covariance max gap"), 0.0, cov_gap, 0.05));
    }
    Ok(VerifyReport { checks, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn moment_oracle_examples() {
        let idx = ExponentIndex::new(vec![2, 2]).unwrap();
        let e = mc_moment(&idx, &CovMatrix::identity(2), 400_000, 1).unwrap();
        assert!((e.value - 1.0).abs() < 4.0 * e.std_error);
        let odd = ExponentIndex::new(vec![1, 2]).unwrap();
        let e = mc_moment(&odd, &CovMatrix::identity(2), 200_000, 2).unwrap();
        assert!(e.value.abs() < 4.0 * e.std_error);
    }

    #[test]
    fn chunked_estimates_ignore_execution_mode() {
        let idx = ExponentIndex::new(vec![2, 1, 1]).unwrap();
        let s = CovMatrix::identity(3);
        let a = mc_moment_with(&idx, &s, 100_003, 9, Execution::Sequential).unwrap();
        let b = mc_moment_with(&idx, &s, 100_003, 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn link_oracle_theta_zero() {
        let lay = layout(Model::Poisson, 2, 2).unwrap();
        let s = CovMatrix::identity(2);
        let e = mc_link_moments(&[0.0, 0.0], &s, &lay, 100_000, 3).unwrap();
        // y x1^2 entry is log 2 * E[x1^2]
        let i = 7;
        assert_eq!(lay.entries[i].y_power, 1);
        assert_eq!(lay.entries[i].index.exponents(), &[2, 0]);
        assert!((e.mu[i] - std::f64::consts::LN_2).abs() < 4.0 * e.mu_se[i]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_relative_eq!(softplus(0.0), std::f64::consts::LN_2);
        assert_relative_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn forced_equal_records_give_zero() {
        let lay = layout(Model::Logistic, 3, 2).unwrap();
        let obj = Objective {
            layout: &lay,
            weights: vec![1.0; lay.len()],
        };
        let x = [0.3, -0.2, 0.5];
        assert_eq!(obj.value(&x, 1.0, &x, 1.0), 0.0);
    }

    #[test]
    fn search_stays_below_closed_form() {
        let lay = layout(Model::Logistic, 2, 2).unwrap();
        let p = PrivacyParams::with_sigma(&lay, 1.0, 1e-5, 1.0, 0.0, 1.0).unwrap();
        let r = sensitivity_search(&lay, 1.0, 0.0, &p.sigma_blocks, 200, 5).unwrap();
        assert!(r.value <= 4.5f64.sqrt() + 1e-9);
        assert!(r.value >= 0.99 * 4.5f64.sqrt());
    }

    #[test]
    fn delta_oracle_examples() {
        let e = mc_delta(25.0, 1.0, 1.0, 100_000, 4).unwrap();
        assert!(e.value <= e.std_error.max(1e-300));
        let exact = delta_of(1.0, 1.0, 1.0);
        let e = mc_delta(1.0, 1.0, 1.0, 1_000_000, 5).unwrap();
        assert!((e.value - exact).abs() < 3.0 * e.std_error);
    }
}
