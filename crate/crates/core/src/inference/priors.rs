//! Priors over `(theta, Sigma)` and their representation on unconstrained
//! latents.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::moments::CovMatrix;
use crate::sstats::Model;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How the squared norm latent `rho` is clamped against `s_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationRule {
    /// `|theta|^2 = min(rho, s_max)`: `s_max` is an upper bound.
    #[default]
    Min,
    /// `|theta|^2 = max(rho, s_max)`, the literal alternative reading.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaPrior {
    /// `theta = sqrt(clamp(rho)) p / |p|`, `p ~ N(0, I)`, `rho ~ chi2(d)`.
    TruncatedChiSquare,
    /// `theta = p ~ N(0, I)`; `log_rho` is an auxiliary `N(0, 1)` latent.
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SigmaPrior {
    /// `Sigma = diag(tau) Omega diag(tau)`, `Omega ~ LKJ(eta)`,
    /// `tau_i ~ HalfNormal(scale_sd)`.
    ScaledLkj { eta: f64, scale_sd: f64 },
    /// `Sigma ~ IW(nu, psi)`, `psi` given row-major.
    InverseWishart { nu: f64, psi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub model: Model,
    pub d: usize,
    pub s_max: f64,
    pub theta_prior: ThetaPrior,
    pub sigma_prior: SigmaPrior,
    #[serde(default)]
    pub truncation: TruncationRule,
}

impl PriorConfig {
    /// Logistic: truncated chi-square with scaled LKJ(2, 2.5).
    /// Poisson: standard normal on `theta` with IW(d + 2, I).
    pub fn default_for(model: Model, d: usize, s_max: f64) -> Self {
        match model {
            Model::Logistic => PriorConfig {
                model,
                d,
                s_max,
                theta_prior: ThetaPrior::TruncatedChiSquare,
                sigma_prior: SigmaPrior::ScaledLkj {
                    eta: 2.0,
                    scale_sd: 2.5,
                },
                truncation: TruncationRule::Min,
            },
            Model::Poisson => PriorConfig {
                model,
                d,
                s_max,
                theta_prior: ThetaPrior::StandardNormal,
                sigma_prior: SigmaPrior::InverseWishart {
                    nu: d as f64 + 2.0,
                    psi: CovMatrix::identity(d).to_row_major(),
                },
                truncation: TruncationRule::Min,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "s_max must be positive, got {}",
                self.s_max
            )));
        }
        match &self.sigma_prior {
            SigmaPrior::ScaledLkj { eta, scale_sd } => {
                if !(*eta > 0.0 && *scale_sd > 0.0) {
                    return Err(Error::InvalidArgument(
                        "LKJ eta and scale sd must be positive".into(),
                    ));
                }
            }
            SigmaPrior::InverseWishart { nu, psi } => {
                if !(*nu > d as f64 - 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "inverse-Wishart nu must exceed d - 1, got {nu}"
                    )));
                }
                if psi.len() != d * d {
                    return Err(Error::DimensionMismatch {
                        expected: d * d,
                        got: psi.len(),
                    });
                }
                let m = CovMatrix::new(DMatrix::from_row_slice(d, d, psi))?;
                if m.matrix().clone().cholesky().is_none() {
                    return Err(Error::InvalidCovariance("psi must be positive definite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Unconstrained coordinates of `(theta, Sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub p: Vec<f64>,
    pub log_rho: f64,
    /// Lower triangle of the Cholesky factor, row-major, diagonal on the
    /// log scale.
    pub chol: Vec<f64>,
}

pub fn latent_len(d: usize) -> usize {
    d + 1 + d * (d + 1) / 2
}

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.p.clone();
        v.push(self.log_rho);
        v.extend_from_slice(&self.chol);
        v
    }

    pub fn from_slice(d: usize, x: &[f64]) -> Result<Self> {
        if x.len() != latent_len(d) {
            return Err(Error::DimensionMismatch {
                expected: latent_len(d),
                got: x.len(),
            });
        }
        Ok(LatentVector {
            p: x[..d].to_vec(),
            log_rho: x[d],
            chol: x[d + 1..].to_vec(),
        })
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut l = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in 0..=i {
                l[(i, j)] = if i == j { self.chol[k].exp() } else { self.chol[k] };
                k += 1;
            }
        }
        l
    }

    pub(super) fn from_factor(p: Vec<f64>, log_rho: f64, l: &DMatrix<f64>) -> Self {
        let d = l.nrows();
        let mut chol = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                chol.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
            }
        }
        LatentVector { p, log_rho, chol }
    }
}

fn check_latents(latents: &LatentVector, prior: &PriorConfig) -> Result<()> {
    let d = prior.d;
    if latents.p.len() != d || latents.chol.len() != d * (d + 1) / 2 {
        return Err(Error::DimensionMismatch {
            expected: latent_len(d),
            got: latents.p.len() + 1 + latents.chol.len(),
        });
    }
    if latents.to_vec().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("latents must be finite".into()));
    }
    Ok(())
}

/// `(theta, Sigma)` for a latent vector.
pub fn transform(latents: &LatentVector, prior: &PriorConfig) -> Result<(Vec<f64>, CovMatrix)> {
    check_latents(latents, prior)?;
    let theta = match prior.theta_prior {
        ThetaPrior::StandardNormal => latents.p.clone(),
        ThetaPrior::TruncatedChiSquare => {
            let norm = latents.p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidArgument("direction latent p is zero".into()));
            }
            let rho = latents.log_rho.exp();
            let sq = match prior.truncation {
                TruncationRule::Min => rho.min(prior.s_max),
                TruncationRule::Max => rho.max(prior.s_max),
            };
            let scale = sq.sqrt() / norm;
            latents.p.iter().map(|v| v * scale).collect()
        }
    };
    let l = latents.cholesky_factor();
    if l.iter().any(|v| !v.is_finite()) || l.diagonal().iter().any(|&v| v == 0.0) {
        return Err(Error::InvalidCovariance("factor latents out of range".into()));
    }
    Ok((theta, CovMatrix::from_factor(&l)))
}

pub fn standard_normal_log_density(x: f64) -> f64 {
    -0.5 * (x * x + LN_2PI)
}

pub fn chi_square_log_density(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    (0.5 * k - 1.0) * x.ln() - 0.5 * x - 0.5 * k * std::f64::consts::LN_2 - ln_gamma(0.5 * k)
}

pub fn half_normal_log_density(x: f64, sd: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    std::f64::consts::LN_2 - 0.5 * LN_2PI - sd.ln() - x * x / (2.0 * sd * sd)
}

/// `ln Gamma_d(a)`.
pub fn ln_multivariate_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=d).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Normalized LKJ(eta) log density of a correlation matrix.
pub fn lkj_log_density(omega: &DMatrix<f64>, eta: f64) -> Result<f64> {
    let d = omega.nrows();
    let chol = omega
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidCovariance("correlation matrix not positive definite".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((eta - 1.0) * log_det - lkj_log_normalizer(d, eta))
}

/// Log of `int det(Omega)^(eta - 1) dOmega` over `d x d` correlation matrices.
pub fn lkj_log_normalizer(d: usize, eta: f64) -> f64 {
    let mut acc = 0.0;
    for k in 1..d {
        let dk = (d - k) as f64;
        acc += (2.0 * eta - 2.0 + dk) * dk * std::f64::consts::LN_2;
        let b = eta + (dk - 1.0) / 2.0;
        acc += dk * ln_beta(b, b);
    }
    acc
}

/// Inverse-Wishart log density.
pub fn inverse_wishart_log_density(sigma: &CovMatrix, nu: f64, psi: &DMatrix<f64>) -> Result<f64> {
    let d = sigma.dim();
    let df = d as f64;
    let chol = sigma
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidCovariance("Sigma not positive definite".into()))?;
    let log_det_sigma = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let psi_chol = psi
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidCovariance("psi not positive definite".into()))?;
    let log_det_psi = 2.0 * psi_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = (chol.inverse() * psi).trace();
    Ok(0.5 * nu * log_det_psi
        - 0.5 * nu * df * std::f64::consts::LN_2
        - ln_multivariate_gamma(d, 0.5 * nu)
        - 0.5 * (nu + df + 1.0) * log_det_sigma
        - 0.5 * trace)
}

/// Log prior density of the latent vector, including every change of
/// variables down to the unconstrained coordinates.
pub fn log_prior(latents: &LatentVector, prior: &PriorConfig) -> Result<f64> {
    let (_, sigma) = transform(latents, prior)?;
    let d = prior.d;
    let mut lp: f64 = latents.p.iter().map(|&v| standard_normal_log_density(v)).sum();
    lp += match prior.theta_prior {
        ThetaPrior::TruncatedChiSquare => {
            chi_square_log_density(latents.log_rho.exp(), d as f64) + latents.log_rho
        }
        ThetaPrior::StandardNormal => standard_normal_log_density(latents.log_rho),
    };
    let l = latents.cholesky_factor();
    let mut log_jac = d as f64 * std::f64::consts::LN_2;
    for i in 0..d {
        let lii = l[(i, i)];
        log_jac += (d - i) as f64 * lii.ln() + lii.ln();
    }
    let sigma_lp = match &prior.sigma_prior {
        SigmaPrior::ScaledLkj { eta, scale_sd } => {
            let tau: Vec<f64> = (0..d).map(|i| sigma.get(i, i).sqrt()).collect();
            let omega = DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    1.0
                } else {
                    sigma.get(i, j) / (tau[i] * tau[j])
                }
            });
            let mut v = lkj_log_density(&omega, *eta)?;
            v += tau.iter().map(|&t| half_normal_log_density(t, *scale_sd)).sum::<f64>();
            v -= d as f64 * std::f64::consts::LN_2
                + d as f64 * tau.iter().map(|t| t.ln()).sum::<f64>();
            v
        }
        SigmaPrior::InverseWishart { nu, psi } => {
            inverse_wishart_log_density(&sigma, *nu, &DMatrix::from_row_slice(d, d, psi))?
        }
    };
    let out = lp + sigma_lp + log_jac;
    if out.is_nan() {
        return Err(Error::InvalidArgument("log prior is NaN".into()));
    }
    Ok(out)
}

/// Cholesky factor of an LKJ(eta) correlation matrix, drawn through
/// canonical partial correlations.
pub fn draw_lkj_cholesky<R: Rng + ?Sized>(d: usize, eta: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let mut z = DMatrix::zeros(d, d);
    for c in 0..d.saturating_sub(1) {
        let alpha = eta + (d as f64 - 2.0 - c as f64) / 2.0;
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for r in c + 1..d {
            z[(r, c)] = 2.0 * beta.sample(rng) - 1.0;
        }
    }
    let mut l = DMatrix::zeros(d, d);
    for i in 0..d {
        let mut rem: f64 = 1.0;
        for j in 0..i {
            l[(i, j)] = z[(i, j)] * rem.sqrt();
            rem -= l[(i, j)] * l[(i, j)];
        }
        l[(i, i)] = rem.max(0.0).sqrt();
    }
    Ok(l)
}

/// `Sigma ~ IW(nu, psi)` through the Bartlett decomposition of its inverse.
pub fn draw_inverse_wishart<R: Rng + ?Sized>(nu: f64, psi: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = psi.nrows();
    let psi_inv = psi
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidCovariance("psi not invertible".into()))?;
    let a = psi_inv
        .cholesky()
        .ok_or_else(|| Error::InvalidCovariance("psi not positive definite".into()))?
        .l();
    let mut b = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        b[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            b[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let ab = a * b;
    let w = &ab * ab.transpose();
    w.try_inverse()
        .ok_or_else(|| Error::InvalidCovariance("Wishart draw not invertible".into()))
}

/// A latent vector drawn from the prior.
pub fn draw_prior<R: Rng + ?Sized>(prior: &PriorConfig, rng: &mut R) -> Result<LatentVector> {
    let d = prior.d;
    let p: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let log_rho = match prior.theta_prior {
        ThetaPrior::TruncatedChiSquare => {
            let chi = ChiSquared::new(d as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            chi.sample(rng).ln()
        }
        ThetaPrior::StandardNormal => StandardNormal.sample(rng),
    };
    let l = match &prior.sigma_prior {
        SigmaPrior::ScaledLkj { eta, scale_sd } => {
            let lo = draw_lkj_cholesky(d, *eta, rng)?;
            let tau: Vec<f64> = (0..d)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(rng);
                    (n * scale_sd).abs()
                })
                .collect();
            DMatrix::from_fn(d, d, |i, j| tau[i] * lo[(i, j)])
        }
        SigmaPrior::InverseWishart { nu, psi } => {
            let s = draw_inverse_wishart(*nu, &DMatrix::from_row_slice(d, d, psi), rng)?;
            let s = (&s + s.transpose()) * 0.5;
            s.cholesky()
                .ok_or_else(|| Error::InvalidCovariance("IW draw not positive definite".into()))?
                .l()
        }
    };
    Ok(LatentVector::from_factor(p, log_rho, &l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latents(d: usize) -> LatentVector {
        LatentVector {
            p: (0..d).map(|i| 0.3 + i as f64 * 0.2).collect(),
            log_rho: 0.1,
            chol: vec![0.0; d * (d + 1) / 2],
        }
    }

    #[test]
    fn transform_examples() {
        let prior = PriorConfig::default_for(Model::Logistic, 3, 2.0);
        let mut l = latents(3);
        let (theta, sigma) = transform(&l, &prior).unwrap();
        let n2: f64 = theta.iter().map(|v| v * v).sum();
        assert_relative_eq!(n2, 0.1f64.exp(), max_relative = 1e-14);
        assert_eq!(sigma.matrix(), &DMatrix::identity(3, 3));
        l.log_rho = 2.0;
        let (theta, _) = transform(&l, &prior).unwrap();
        let n2: f64 = theta.iter().map(|v| v * v).sum();
        assert_relative_eq!(n2, 2.0, max_relative = 1e-14);
        let max = PriorConfig {
            truncation: TruncationRule::Max,
            ..prior.clone()
        };
        l.log_rho = 0.1;
        let (theta, _) = transform(&l, &max).unwrap();
        let n2: f64 = theta.iter().map(|v| v * v).sum();
        assert_relative_eq!(n2, 2.0, max_relative = 1e-14);
        l.p = vec![0.0; 3];
        assert!(transform(&l, &prior).is_err());
    }

    #[test]
    fn p_shift_changes_prior_by_half() {
        let prior = PriorConfig::default_for(Model::Logistic, 2, 2.0);
        let mut l = latents(2);
        l.p = vec![0.0, 1e-3];
        let mut a = latents(2);
        a.p = vec![1.0, 0.0];
        let mut b = latents(2);
        b.p = vec![2.0, 0.0];
        assert!(log_prior(&l, &prior).is_ok());
        let da = log_prior(&a, &prior).unwrap();
        let db = log_prior(&b, &prior).unwrap();
        assert_relative_eq!(da - db, 1.5, max_relative = 1e-12);
        let mut c = latents(2);
        c.p = vec![0.0, 1.0];
        let mut e = latents(2);
        e.p = vec![1.0, 1.0];
        assert_relative_eq!(log_prior(&c, &prior).unwrap() - log_prior(&e, &prior).unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn inverse_wishart_identity_closed_form() {
        for d in 1..=4 {
            let nu = d as f64 + 2.0;
            let v = inverse_wishart_log_density(&CovMatrix::identity(d), nu, &DMatrix::identity(d, d)).unwrap();
            let df = d as f64;
            let mut lgd = df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln();
            for j in 1..=d {
                lgd += ln_gamma(nu / 2.0 + (1.0 - j as f64) / 2.0);
            }
            let want = -nu * df / 2.0 * std::f64::consts::LN_2 - lgd - df / 2.0;
            assert_relative_eq!(v, want, max_relative = 1e-13);
        }
    }

    #[test]
    fn inverse_wishart_1d_is_inverse_gamma() {
        let (nu, psi, x): (f64, f64, f64) = (4.0, 1.7, 0.6);
        let v = inverse_wishart_log_density(
            &CovMatrix::from_rows(&[vec![x]]).unwrap(),
            nu,
            &DMatrix::from_element(1, 1, psi),
        )
        .unwrap();
        let (a, b) = (nu / 2.0, psi / 2.0);
        let want = a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x;
        assert_relative_eq!(v, want, max_relative = 1e-13);
    }

    #[test]
    fn lkj_two_by_two() {
        let om = |r: f64| DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]);
        let a = lkj_log_density(&om(0.0), 2.0).unwrap();
        let b = lkj_log_density(&om(0.5), 2.0).unwrap();
        assert_relative_eq!(a - b, 1f64.ln() - 0.75f64.ln(), max_relative = 1e-13);
        // (1 - r^2) integrates to 4/3 over (-1, 1)
        assert_relative_eq!(a, -(4.0f64 / 3.0).ln(), max_relative = 1e-13);
    }

    #[test]
    fn chi_square_density_integrates() {
        let k = 3.0;
        let h = 1e-3;
        let total: f64 = (1..40_000).map(|i| chi_square_log_density(i as f64 * h, k).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn prior_draws_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in [Model::Logistic, Model::Poisson] {
            let prior = PriorConfig::default_for(model, 3, 3.0);
            prior.validate().unwrap();
            for _ in 0..50 {
                let l = draw_prior(&prior, &mut rng).unwrap();
                let (_, s) = transform(&l, &prior).unwrap();
                assert!(s.matrix().clone().cholesky().is_some());
                assert!(log_prior(&l, &prior).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn lkj_draw_has_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = draw_lkj_cholesky(4, 2.0, &mut rng).unwrap();
        let om = &l * l.transpose();
        for i in 0..4 {
            assert_relative_eq!(om[(i, i)], 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn latent_round_trip() {
        let l = latents(3);
        let back = LatentVector::from_slice(3, &l.to_vec()).unwrap();
        assert_eq!(back, l);
        assert!(LatentVector::from_slice(3, &[0.0; 4]).is_err());
    }
}
