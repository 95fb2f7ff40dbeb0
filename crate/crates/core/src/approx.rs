//! Normal approximation `s ~ N(N mu_s, N Sigma_s)` of the summary statistics
//! and the marginal likelihood of a noisy release.
//!
//! Every mean entry is `mult * E[x^k Y_a(x^T theta)]` and every covariance
//! entry is `mult_e mult_f (E[x^(k_e + k_f) Y_(a_e + a_f)] - E[x^k_e Y_a_e] E[x^k_f Y_a_f])`,
//! where `Y_a(t)` is a truncated Taylor polynomial for `E[y^a | x]`:
//!
//! * logistic, `y in {-1, 1}`: `Y_even = 1`, `Y_odd = -t/2 + t^3/24`;
//! * Poisson: `Y_0 = 1`, `Y_1 = softplus`, `Y_2 = softplus^2 + softplus`.
//!
//! Parity splits fall out of the Gaussian moments: odd total degrees vanish.

use std::collections::HashMap;
use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moments::{
    compositions, multinomial_coefficient, multinomial_expand, pack, poly_expectation, CovMatrix,
    ExponentIndex, MomentCache, Polynomial, DEFAULT_POWER_CAP, DEGREE_CAP,
};
use crate::privacy::NoisyRelease;
use crate::sstats::{Model, StatisticLayout};

/// Truncated Taylor polynomial `sum_p c_p t^p` in the linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkTaylor {
    coefficients: Vec<(u32, f64)>,
}

impl LinkTaylor {
    pub fn new(mut coefficients: Vec<(u32, f64)>) -> Result<Self> {
        coefficients.sort_by_key(|&(p, _)| p);
        if coefficients.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("repeated Taylor power".into()));
        }
        if let Some(&(p, _)) = coefficients.iter().find(|&&(p, _)| p > DEFAULT_POWER_CAP) {
            return Err(Error::PowerAboveCap {
                power: p,
                cap: DEFAULT_POWER_CAP,
            });
        }
        Ok(LinkTaylor { coefficients })
    }

    pub fn coefficients(&self) -> &[(u32, f64)] {
        &self.coefficients
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.coefficients
            .iter()
            .map(|&(p, c)| c * t.powi(p as i32))
            .sum()
    }

    pub fn degree(&self) -> u32 {
        self.coefficients.last().map_or(0, |&(p, _)| p)
    }

    /// Term-wise sum.
    pub fn add(&self, other: &LinkTaylor) -> Result<LinkTaylor> {
        let mut merged: Vec<(u32, f64)> = self.coefficients.clone();
        for &(p, c) in &other.coefficients {
            match merged.iter_mut().find(|(q, _)| *q == p) {
                Some((_, v)) => *v += c,
                None => merged.push((p, c)),
            }
        }
        LinkTaylor::new(merged)
    }

    /// The polynomial `sum_p c_p (x^T theta)^p` in `x`.
    pub fn polynomial(&self, theta: &[f64]) -> Result<Polynomial> {
        let mut out = Polynomial::zero(theta.len());
        for &(p, c) in &self.coefficients {
            out = out.add(&multinomial_expand(theta, p)?.scale(c))?;
        }
        Ok(out)
    }
}

/// `(1 - e^t) / (1 + e^t) ~ -t/2 + t^3/24`.
pub fn taylor_logistic_link() -> LinkTaylor {
    LinkTaylor {
        coefficients: vec![(1, -0.5), (3, 1.0 / 24.0)],
    }
}

/// `log(1 + e^t) ~ log 2 + t/2 + t^2/8 - t^4/192`.
pub fn taylor_softplus() -> LinkTaylor {
    LinkTaylor {
        coefficients: vec![(0, LN_2), (1, 0.5), (2, 0.125), (4, -1.0 / 192.0)],
    }
}

/// `log^2(1 + e^t) ~ log^2 2 + t log 2 + t^2 (1 + log 2)/4 + t^3/8`.
pub fn taylor_softplus_sq() -> LinkTaylor {
    LinkTaylor {
        coefficients: vec![
            (0, LN_2 * LN_2),
            (1, LN_2),
            (2, (1.0 + LN_2) / 4.0),
            (3, 0.125),
        ],
    }
}

/// Taylor polynomial for `E[y^power | x]` under `model`.
pub fn y_moment(model: Model, power: u32) -> Result<LinkTaylor> {
    match (model, power) {
        (Model::Logistic, p) if p % 2 == 0 => LinkTaylor::new(vec![(0, 1.0)]),
        (Model::Logistic, _) => Ok(taylor_logistic_link()),
        (Model::Poisson, 0) => LinkTaylor::new(vec![(0, 1.0)]),
        (Model::Poisson, 1) => Ok(taylor_softplus()),
        (Model::Poisson, 2) => taylor_softplus_sq().add(&taylor_softplus()),
        (Model::Poisson, p) => Err(Error::Unsupported(format!(
            "no Poisson y-moment of order {p}"
        ))),
    }
}

/// Per-record mean and covariance of the statistic vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalApprox {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct Term {
    slot: usize,
    weight: usize,
    coef: f64,
}

/// Expectations needed by a layout, compiled into sums of
/// `coef * theta^j * E[x^(k + j)]` so that evaluating a new `(theta, Sigma)`
/// only computes the distinct Gaussian moments and `theta` monomials once.
#[derive(Debug, Clone)]
pub struct ApproxPlan {
    layout: StatisticLayout,
    moment_keys: Vec<u64>,
    theta_monomials: Vec<Vec<u32>>,
    targets: Vec<Vec<Term>>,
    mean_targets: Vec<usize>,
    cov_targets: Vec<usize>,
}

struct PlanBuilder {
    d: usize,
    model: Model,
    moment_slots: HashMap<u64, usize>,
    moment_keys: Vec<u64>,
    weight_slots: HashMap<Vec<u32>, usize>,
    theta_monomials: Vec<Vec<u32>>,
    target_slots: HashMap<(Vec<u32>, u32), usize>,
    targets: Vec<Vec<Term>>,
}

impl PlanBuilder {
    fn target(&mut self, k: &[u32], a: u32) -> Result<usize> {
        if let Some(&i) = self.target_slots.get(&(k.to_vec(), a)) {
            return Ok(i);
        }
        let y = y_moment(self.model, a)?;
        let base: u32 = k.iter().sum();
        if base + y.degree() > DEGREE_CAP {
            return Err(Error::DegreeAboveCap {
                degree: base + y.degree(),
                cap: DEGREE_CAP,
            });
        }
        let mut terms = Vec::new();
        for &(p, c) in y.coefficients() {
            if (base + p) % 2 == 1 {
                continue;
            }
            for j in compositions(self.d, p) {
                let exps: Vec<u32> = k.iter().zip(&j).map(|(a, b)| a + b).collect();
                let key = pack(&exps)?;
                let next = self.moment_keys.len();
                let slot = *self.moment_slots.entry(key).or_insert(next);
                if slot == next {
                    self.moment_keys.push(key);
                }
                let next = self.theta_monomials.len();
                let weight = *self.weight_slots.entry(j.clone()).or_insert(next);
                if weight == next {
                    self.theta_monomials.push(j.clone());
                }
                terms.push(Term {
                    slot,
                    weight,
                    coef: c * multinomial_coefficient(&j) as f64,
                });
            }
        }
        let i = self.targets.len();
        self.targets.push(terms);
        self.target_slots.insert((k.to_vec(), a), i);
        Ok(i)
    }
}

impl ApproxPlan {
    pub fn new(layout: &StatisticLayout) -> Result<Self> {
        let mut b = PlanBuilder {
            d: layout.d,
            model: layout.model,
            moment_slots: HashMap::new(),
            moment_keys: Vec::new(),
            weight_slots: HashMap::new(),
            theta_monomials: Vec::new(),
            target_slots: HashMap::new(),
            targets: Vec::new(),
        };
        let n = layout.len();
        let mut mean_targets = Vec::with_capacity(n);
        for e in &layout.entries {
            mean_targets.push(b.target(e.index.exponents(), e.y_power)?);
        }
        let mut cov_targets = Vec::with_capacity(n * (n + 1) / 2);
        for (i, e) in layout.entries.iter().enumerate() {
            for f in &layout.entries[i..] {
                let k: Vec<u32> = e
                    .index
                    .exponents()
                    .iter()
                    .zip(f.index.exponents())
                    .map(|(a, b)| a + b)
                    .collect();
                cov_targets.push(b.target(&k, e.y_power + f.y_power)?);
            }
        }
        Ok(ApproxPlan {
            layout: layout.clone(),
            moment_keys: b.moment_keys,
            theta_monomials: b.theta_monomials,
            targets: b.targets,
            mean_targets,
            cov_targets,
        })
    }

    pub fn layout(&self) -> &StatisticLayout {
        &self.layout
    }

    pub fn evaluate(&self, theta: &[f64], sigma: &CovMatrix) -> Result<NormalApprox> {
        let d = self.layout.d;
        if theta.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: theta.len(),
            });
        }
        if sigma.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sigma.dim(),
            });
        }
        let mut cache = MomentCache::new(sigma)?;
        let moments: Vec<f64> = self
            .moment_keys
            .iter()
            .map(|&k| cache.moment_packed(k))
            .collect();
        let weights: Vec<f64> = self
            .theta_monomials
            .iter()
            .map(|j| {
                j.iter()
                    .zip(theta)
                    .map(|(&k, &t)| t.powi(k as i32))
                    .product()
            })
            .collect();
        let values: Vec<f64> = self
            .targets
            .iter()
            .map(|terms| {
                terms
                    .iter()
                    .map(|t| t.coef * weights[t.weight] * moments[t.slot])
                    .sum()
            })
            .collect();
        let n = self.layout.len();
        let raw_mu: Vec<f64> = self.mean_targets.iter().map(|&t| values[t]).collect();
        let mult: Vec<f64> = self.layout.entries.iter().map(|e| e.multiplier).collect();
        let mu = DVector::from_iterator(n, raw_mu.iter().zip(&mult).map(|(v, m)| v * m));
        let mut cov = DMatrix::zeros(n, n);
        let mut pos = 0;
        for i in 0..n {
            for j in i..n {
                let v = mult[i] * mult[j] * (values[self.cov_targets[pos]] - raw_mu[i] * raw_mu[j]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
                pos += 1;
            }
        }
        Ok(NormalApprox { mu, cov })
    }
}

fn require_model(layout: &StatisticLayout, model: Model) -> Result<()> {
    if layout.model != model {
        return Err(Error::InvalidArgument(format!(
            "layout is for {}, expected {model}",
            layout.model
        )));
    }
    Ok(())
}

pub fn normal_approx(theta: &[f64], sigma: &CovMatrix, layout: &StatisticLayout) -> Result<NormalApprox> {
    ApproxPlan::new(layout)?.evaluate(theta, sigma)
}

pub fn mu_s_logistic(theta: &[f64], sigma: &CovMatrix, layout: &StatisticLayout) -> Result<DVector<f64>> {
    require_model(layout, Model::Logistic)?;
    Ok(normal_approx(theta, sigma, layout)?.mu)
}

pub fn sigma_s_logistic(theta: &[f64], sigma: &CovMatrix, layout: &StatisticLayout) -> Result<DMatrix<f64>> {
    require_model(layout, Model::Logistic)?;
    Ok(normal_approx(theta, sigma, layout)?.cov)
}

pub fn mu_s_poisson(theta: &[f64], sigma: &CovMatrix, layout: &StatisticLayout) -> Result<DVector<f64>> {
    require_model(layout, Model::Poisson)?;
    Ok(normal_approx(theta, sigma, layout)?.mu)
}

pub fn sigma_s_poisson(theta: &[f64], sigma: &CovMatrix, layout: &StatisticLayout) -> Result<DMatrix<f64>> {
    require_model(layout, Model::Poisson)?;
    Ok(normal_approx(theta, sigma, layout)?.cov)
}

/// Slow path: builds each integrand as an explicit polynomial and integrates
/// it term by term. Used to cross-check [`ApproxPlan`].
pub fn normal_approx_reference(
    theta: &[f64],
    sigma: &CovMatrix,
    layout: &StatisticLayout,
) -> Result<NormalApprox> {
    let d = layout.d;
    if theta.len() != d || sigma.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if theta.len() != d { theta.len() } else { sigma.dim() },
        });
    }
    let n = layout.len();
    let integrand = |k: &ExponentIndex, a: u32, c: f64| -> Result<Polynomial> {
        Polynomial::monomial(k.clone(), c).mul(&y_moment(layout.model, a)?.polynomial(theta)?)
    };
    let mut raw = Vec::with_capacity(n);
    for e in &layout.entries {
        raw.push(poly_expectation(&integrand(&e.index, e.y_power, 1.0)?, sigma)?);
    }
    let mu = DVector::from_iterator(n, layout.entries.iter().zip(&raw).map(|(e, v)| e.multiplier * v));
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (e, f) = (&layout.entries[i], &layout.entries[j]);
            let k = e.index.add(&f.index)?;
            let m = e.multiplier * f.multiplier;
            let second = poly_expectation(&integrand(&k, e.y_power + f.y_power, m)?, sigma)?;
            let v = second - m * raw[i] * raw[j];
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(NormalApprox { mu, cov })
}

/// Jitter levels relative to the mean diagonal, tried in order.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// `log N(z | mean, cov)`, adding diagonal jitter when the factorization fails.
pub fn gaussian_logpdf(z: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = z.len();
    if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: mean.len(),
        });
    }
    if cov.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::IndefiniteApproximation);
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let scale = sym.diagonal().mean().abs();
    let r = z - mean;
    for &level in &JITTER_LADDER {
        let mut c = sym.clone();
        if level > 0.0 {
            for i in 0..n {
                c[(i, i)] += level * scale;
            }
        }
        if let Some(chol) = c.cholesky() {
            let l = chol.l();
            let w = match l.solve_lower_triangular(&r) {
                Some(w) => w,
                None => continue,
            };
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let out = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + w.norm_squared());
            if out.is_finite() {
                return Ok(out);
            }
        }
    }
    Err(Error::IndefiniteApproximation)
}

/// Marginal likelihood `N(z | N mu_s, N Sigma_s + D_noise)` with the latent
/// statistic integrated out. Holds a compiled plan for repeated evaluation.
#[derive(Debug, Clone)]
pub struct NoiseAwareLikelihood {
    plan: ApproxPlan,
    z: DVector<f64>,
    noise_var: DVector<f64>,
    n_records: f64,
}

impl NoiseAwareLikelihood {
    pub fn new(release: &NoisyRelease) -> Result<Self> {
        let n = release.layout.len();
        if release.z.len() != n || release.noise_sd.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: release.z.len(),
            });
        }
        Ok(NoiseAwareLikelihood {
            plan: ApproxPlan::new(&release.layout)?,
            z: DVector::from_column_slice(&release.z),
            noise_var: DVector::from_iterator(n, release.noise_sd.iter().map(|s| s * s)),
            n_records: release.n_records as f64,
        })
    }

    pub fn layout(&self) -> &StatisticLayout {
        self.plan.layout()
    }

    pub fn loglik(&self, theta: &[f64], sigma: &CovMatrix) -> Result<f64> {
        let approx = self.plan.evaluate(theta, sigma)?;
        let mean = approx.mu * self.n_records;
        let mut cov = approx.cov * self.n_records;
        for i in 0..cov.nrows() {
            cov[(i, i)] += self.noise_var[i];
        }
        gaussian_logpdf(&self.z, &mean, &cov)
    }
}

pub fn marginal_loglik(release: &NoisyRelease, theta: &[f64], sigma: &CovMatrix) -> Result<f64> {
    NoiseAwareLikelihood::new(release)?.loglik(theta, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::{release, PrivacyParams};
    use crate::sstats::layout;
    use approx::assert_relative_eq;

    fn sigma3() -> CovMatrix {
        CovMatrix::from_rows(&[
            vec![0.30, 0.05, -0.04],
            vec![0.05, 0.25, 0.03],
            vec![-0.04, 0.03, 0.20],
        ])
        .unwrap()
    }

    #[test]
    fn taylor_coefficients() {
        let l = taylor_logistic_link();
        assert_eq!(l.coefficients(), &[(1, -0.5), (3, 1.0 / 24.0)]);
        assert_eq!(l.eval(0.0), 0.0);
        let exact = (1.0 - 1f64.exp()) / (1.0 + 1f64.exp());
        assert!((l.eval(1.0) - exact).abs() < 0.005);
        assert_relative_eq!(l.eval(1.0), -0.458_333_333_333_333_3, max_relative = 1e-15);
        let s = taylor_softplus();
        assert_eq!(s.eval(0.0), LN_2);
        assert!((s.eval(1.0) - (1.0 + 1f64.exp()).ln()).abs() < 0.01);
        let s2 = taylor_softplus_sq();
        assert_eq!(s2.eval(0.0), LN_2 * LN_2);
        assert!((s2.eval(0.5) - (1.0 + 0.5f64.exp()).ln().powi(2)).abs() < 0.02);
        assert!(LinkTaylor::new(vec![(5, 1.0)]).is_err());
        assert!(LinkTaylor::new(vec![(1, 1.0), (1, 2.0)]).is_err());
    }

    #[test]
    fn logistic_theta_zero() {
        let lay = layout(Model::Logistic, 3, 2).unwrap();
        let s = sigma3();
        let a = normal_approx(&[0.0; 3], &s, &lay).unwrap();
        for i in 0..3 {
            assert_eq!(a.mu[i], 0.0);
            assert_relative_eq!(a.mu[3 + i], s.get(i, i), max_relative = 1e-15);
        }
        assert_relative_eq!(a.mu[6], 2f64.sqrt() * s.get(0, 1), max_relative = 1e-15);
        for i in 0..3 {
            for j in 3..9 {
                assert_eq!(a.cov[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn scalar_examples() {
        let lay = layout(Model::Logistic, 1, 2).unwrap();
        let one = CovMatrix::identity(1);
        let mu = mu_s_logistic(&[0.5], &one, &lay).unwrap();
        assert_relative_eq!(mu[0], -0.234375, max_relative = 1e-15);
        let c = sigma_s_logistic(&[0.0], &one, &lay).unwrap();
        assert_relative_eq!(c[(1, 1)], 2.0, max_relative = 1e-15);
        assert_relative_eq!(c[(0, 0)], 1.0, max_relative = 1e-15);
        assert_eq!(c[(0, 1)], 0.0);

        let lp = layout(Model::Poisson, 1, 2).unwrap();
        let mu = mu_s_poisson(&[0.4], &one, &lp).unwrap();
        // blocks t1, t2, y_t1, y_t2
        assert_relative_eq!(mu[2], 0.2, max_relative = 1e-15);
        let c = sigma_s_poisson(&[0.0], &one, &lp).unwrap();
        assert_relative_eq!(c[(2, 2)], LN_2 * LN_2 + LN_2, max_relative = 1e-14);
        let mu0 = mu_s_poisson(&[0.0], &one, &lp).unwrap();
        assert_relative_eq!(mu0[3], LN_2, max_relative = 1e-15);
        assert_eq!(mu0[2], 0.0);
        assert!(mu_s_poisson(&[0.0], &one, &lay).is_err());
        assert!(mu_s_logistic(&[0.0, 1.0], &one, &lay).is_err());
    }

    #[test]
    fn plan_matches_reference() {
        let theta = [0.4, -0.3, 0.2];
        for model in [Model::Logistic, Model::Poisson] {
            for m in [1, 2] {
                let lay = layout(model, 3, m).unwrap();
                let a = normal_approx(&theta, &sigma3(), &lay).unwrap();
                let b = normal_approx_reference(&theta, &sigma3(), &lay).unwrap();
                for (x, y) in a.mu.iter().zip(b.mu.iter()) {
                    assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
                }
                for (x, y) in a.cov.iter().zip(b.cov.iter()) {
                    assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
                }
                assert_eq!(a.cov, a.cov.transpose());
            }
        }
    }

    #[test]
    fn poisson_theta_zero_parity() {
        let lay = layout(Model::Poisson, 3, 2).unwrap();
        let a = normal_approx(&[0.0; 3], &sigma3(), &lay).unwrap();
        for (i, e) in lay.entries.iter().enumerate() {
            for (j, f) in lay.entries.iter().enumerate() {
                if (e.index.degree() + f.index.degree()) % 2 == 1 {
                    assert_eq!(a.cov[(i, j)], 0.0);
                }
            }
        }
    }

    fn small_release(sd: f64, n: usize) -> NoisyRelease {
        let lay = layout(Model::Logistic, 1, 2).unwrap();
        let p = PrivacyParams::with_sigma(&lay, 1.0, 1e-5, 1.0, 0.0, sd).unwrap();
        release(&[0.5, 3.0], &lay, n, &p, 3).unwrap()
    }

    #[test]
    fn swamped_by_noise() {
        // the surviving cross term z * N * (mu_a - mu_b) / sigma^2 decays like 1 / sigma
        let gap = |sd: f64| {
            let r = small_release(sd, 10);
            let a = marginal_loglik(&r, &[0.3], &CovMatrix::identity(1)).unwrap();
            let b = marginal_loglik(&r, &[-0.8], &CovMatrix::from_rows(&[vec![0.4]]).unwrap()).unwrap();
            (a - b).abs()
        };
        let (g6, g7, g8) = (gap(1e6), gap(1e7), gap(1e8));
        assert!(g6 < 1e-4 && g7 < 1e-6 && g8 < 1e-7, "{g6} {g7} {g8}");
        assert!(g7 < g6 && g8 < g7);
    }

    #[test]
    fn exact_mean_gives_normalizer() {
        let mut r = small_release(0.5, 10);
        let s = CovMatrix::from_rows(&[vec![0.7]]).unwrap();
        let a = normal_approx(&[0.2], &s, &r.layout).unwrap();
        r.z = (a.mu.clone() * 10.0).iter().copied().collect();
        let mut cov = a.cov * 10.0;
        for i in 0..2 {
            cov[(i, i)] += 0.25;
        }
        let want = -0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln());
        assert_relative_eq!(marginal_loglik(&r, &[0.2], &s).unwrap(), want, max_relative = 1e-12);
    }

    #[test]
    fn indefinite_is_reported() {
        let z = DVector::from_vec(vec![0.0, 0.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            gaussian_logpdf(&z, &z, &cov),
            Err(Error::IndefiniteApproximation)
        ));
    }
}
