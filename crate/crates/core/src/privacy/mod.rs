//! Sensitivity of the joint statistic release, analytic Gaussian mechanism
//! calibration, and the noisy release itself.
//!
//! A release with per-block noise `sigma_b` is analysed as a unit Gaussian
//! mechanism with the reference block's noise `sigma_ref` after rescaling
//! every block by `sigma_ref / sigma_b`. The closed-form sensitivities
//! below are the sensitivities of that rescaled statistic.

mod release_io;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::sstats::{Block, Model, StatisticLayout};

pub use release_io::{ReleaseDocument, Real17};

/// Standard normal CDF through the complementary error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be positive and finite, got {v}"
        )));
    }
    Ok(())
}

/// Logistic `[y t1(x), t2(x)]` with noise `sigma1` on the linear block and
/// `sigma2` on the quadratic block, references noise `sigma1`.
pub fn sensitivity_logistic(r: f64, sigma1: f64, sigma2: f64) -> Result<f64> {
    require_positive("R", r)?;
    require_positive("sigma1", sigma1)?;
    require_positive("sigma2", sigma2)?;
    let ratio = sigma1 * sigma1 / (sigma2 * sigma2);
    Ok((1.0 / (2.0 * ratio) + 2.0 * r * r + 2.0 * ratio * r.powi(4)).sqrt())
}

/// Poisson `[t1, t2, y t1, y t2]` with noise `sigmas[0..4]`, references
/// noise `sigmas[0]`.
pub fn sensitivity_poisson(r_x: f64, r_y: f64, sigmas: [f64; 4]) -> Result<f64> {
    require_positive("R_x", r_x)?;
    if !(r_y >= 0.0 && r_y.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "R_y must be non-negative, got {r_y}"
        )));
    }
    for (i, s) in sigmas.iter().enumerate() {
        require_positive(&format!("sigma{}", i + 1), *s)?;
    }
    let s1 = sigmas[0] * sigmas[0];
    let c2 = s1 / (sigmas[1] * sigmas[1]);
    let c3 = s1 / (sigmas[2] * sigmas[2]) * r_y * r_y;
    let c4 = s1 / (sigmas[3] * sigmas[3]) * r_y * r_y;
    let c = c2 + c4;
    if c == 0.0 {
        return Err(Error::InvalidArgument("c2 + c4 vanishes".into()));
    }
    Ok((2.0 * c * r_x * r_x + c3 + 1.0) / (2.0 * c).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralSensitivity {
    pub delta: f64,
    /// Inner product `<x, x'>` at which the bound is attained.
    pub argmin: f64,
}

/// Sensitivity of `[t_1(x), .., t_m(x)]`.
///
/// `weights[i-1]` scales the squared contribution of `t_i`
/// (`sigma_ref^2 / sigma_i^2`); `None` means equal noise on every block.
/// The bound `sum_i w_i (2 R^(2i) - 2 t^i)` is maximised over
/// `t in [-R^2, R^2]` by a grid scan refined with golden-section search.
pub fn sensitivity_general_m(
    r: f64,
    m: u32,
    weights: Option<&[f64]>,
) -> Result<GeneralSensitivity> {
    require_positive("R", r)?;
    if m == 0 {
        return Err(Error::InvalidArgument("order m must be at least 1".into()));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == m as usize => w.to_vec(),
        Some(w) => {
            return Err(Error::DimensionMismatch {
                expected: m as usize,
                got: w.len(),
            })
        }
        None => vec![1.0; m as usize],
    };
    if w.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("block weights must be positive".into()));
    }
    let poly = |t: f64| -> f64 {
        w.iter()
            .enumerate()
            .map(|(i, wi)| wi * t.powi(i as i32 + 1))
            .sum()
    };
    let lo = -r * r;
    let hi = r * r;
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let mut best_t = lo;
    let mut best_v = poly(lo);
    for k in 1..=n {
        let t = if k == n { hi } else { lo + k as f64 * h };
        let v = poly(t);
        if v < best_v {
            best_v = v;
            best_t = t;
        }
    }
    let (a, b) = ((best_t - h).max(lo), (best_t + h).min(hi));
    let refined = golden_section_min(&poly, a, b, 1e-13);
    if poly(refined) < best_v {
        best_t = refined;
        best_v = poly(refined);
    }
    let top: f64 = w
        .iter()
        .enumerate()
        .map(|(i, wi)| wi * 2.0 * r.powi(2 * (i as i32 + 1)))
        .sum();
    Ok(GeneralSensitivity {
        delta: (top - 2.0 * best_v).sqrt(),
        argmin: best_t,
    })
}

fn golden_section_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Smallest `delta` for which the Gaussian mechanism with noise `sigma` and
/// sensitivity `delta_sens` is `(epsilon, delta)`-DP.
pub fn delta_of(epsilon: f64, sigma: f64, delta_sens: f64) -> f64 {
    let a = delta_sens / (2.0 * sigma);
    let b = epsilon * sigma / delta_sens;
    std_normal_cdf(a - b) - epsilon.exp() * std_normal_cdf(-a - b)
}

/// Minimal noise `sigma` with `delta_of(epsilon, sigma, delta_sens) <= delta`,
/// by bracketing and bisection.
pub fn calibrate_sigma(delta_sens: f64, epsilon: f64, delta: f64) -> Result<f64> {
    require_positive("sensitivity", delta_sens)?;
    require_positive("epsilon", epsilon)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let ok = |s: f64| delta_of(epsilon, s, delta_sens) <= delta;
    let mut hi = delta_sens;
    let mut lo = delta_sens;
    for _ in 0..2000 {
        if ok(hi) {
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..2000 {
        if !ok(lo) {
            break;
        }
        hi = lo;
        lo *= 0.5;
    }
    if !ok(hi) || ok(lo) {
        return Err(Error::NoConvergence(0));
    }
    const MAX_ITERS: usize = 200;
    for _ in 0..MAX_ITERS {
        if hi - lo <= 1e-15 * hi {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(hi);
        }
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::NoConvergence(MAX_ITERS))
}

/// Privacy parameters and the per-block noise of one release.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub r_x: f64,
    /// Response bound; only meaningful for Poisson.
    pub r_y: f64,
    pub sigma_blocks: BTreeMap<Block, f64>,
}

impl PrivacyParams {
    /// Calibrates the noise for `layout`. `ratios` fixes the relative noise
    /// of the blocks (missing means equal noise everywhere); the common scale
    /// is the minimal one meeting `(epsilon, delta)`.
    pub fn calibrated(
        layout: &StatisticLayout,
        epsilon: f64,
        delta: f64,
        r_x: f64,
        r_y: f64,
        ratios: Option<&BTreeMap<Block, f64>>,
    ) -> Result<Self> {
        let unit: BTreeMap<Block, f64> = match ratios {
            Some(r) => layout
                .blocks
                .iter()
                .map(|b| {
                    r.get(b)
                        .copied()
                        .ok_or_else(|| Error::BlockMismatch(format!("no ratio for block {b}")))
                        .map(|v| (*b, v))
                })
                .collect::<Result<_>>()?,
            None => layout.blocks.iter().map(|&b| (b, 1.0)).collect(),
        };
        let probe = PrivacyParams {
            epsilon,
            delta,
            r_x,
            r_y,
            sigma_blocks: unit.clone(),
        };
        probe.validate(layout)?;
        let sens = sensitivity_for(layout, &probe)?;
        let reference = unit[&layout.blocks[0]];
        let sigma_ref = calibrate_sigma(sens, epsilon, delta)?;
        let sigma_blocks = unit
            .into_iter()
            .map(|(b, v)| (b, sigma_ref * v / reference))
            .collect();
        Ok(PrivacyParams {
            sigma_blocks,
            ..probe
        })
    }

    /// Same noise `sigma` on every block, without calibration.
    pub fn with_sigma(
        layout: &StatisticLayout,
        epsilon: f64,
        delta: f64,
        r_x: f64,
        r_y: f64,
        sigma: f64,
    ) -> Result<Self> {
        let p = PrivacyParams {
            epsilon,
            delta,
            r_x,
            r_y,
            sigma_blocks: layout.blocks.iter().map(|&b| (b, sigma)).collect(),
        };
        p.validate(layout)?;
        Ok(p)
    }

    pub fn validate(&self, layout: &StatisticLayout) -> Result<()> {
        require_positive("epsilon", self.epsilon)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        require_positive("R_x", self.r_x)?;
        match layout.model {
            Model::Poisson => require_positive("R_y", self.r_y)?,
            Model::Logistic => {
                if !(self.r_y >= 0.0 && self.r_y.is_finite()) {
                    return Err(Error::InvalidArgument("R_y must be non-negative".into()));
                }
            }
        }
        for b in &layout.blocks {
            match self.sigma_blocks.get(b) {
                Some(&s) => require_positive(&format!("sigma[{b}]"), s)?,
                None => return Err(Error::BlockMismatch(format!("no sigma for block {b}"))),
            }
        }
        if let Some(extra) = self
            .sigma_blocks
            .keys()
            .find(|b| !layout.blocks.contains(b))
        {
            return Err(Error::BlockMismatch(format!(
                "sigma given for block {extra} which is not in the layout"
            )));
        }
        Ok(())
    }
}

/// Sensitivity of the rescaled statistic for the layout's model and order.
pub fn sensitivity_for(layout: &StatisticLayout, params: &PrivacyParams) -> Result<f64> {
    let s = |b: Block| {
        params
            .sigma_blocks
            .get(&b)
            .copied()
            .ok_or_else(|| Error::BlockMismatch(format!("no sigma for block {b}")))
    };
    match (layout.model, layout.m) {
        (Model::Logistic, 1) => Ok(2.0 * params.r_x),
        (Model::Logistic, 2) => sensitivity_logistic(params.r_x, s(Block::YT1)?, s(Block::T2)?),
        (Model::Poisson, 1) => {
            let ratio = s(Block::T1)? / s(Block::YT1)?;
            Ok(2.0 * params.r_x * (1.0 + params.r_y * params.r_y * ratio * ratio).sqrt())
        }
        (Model::Poisson, 2) => sensitivity_poisson(
            params.r_x,
            params.r_y,
            [s(Block::T1)?, s(Block::T2)?, s(Block::YT1)?, s(Block::YT2)?],
        ),
        (model, m) => Err(Error::Unsupported(format!(
            "no sensitivity for model {model} with order {m}"
        ))),
    }
}

/// Perturbed statistics plus every piece of public metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyRelease {
    pub z: Vec<f64>,
    pub layout: StatisticLayout,
    pub n_records: usize,
    pub noise_sd: Vec<f64>,
    pub sensitivity: f64,
    pub params: PrivacyParams,
    pub seed: u64,
}

impl NoisyRelease {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReleaseDocument::from_release(self))? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ReleaseDocument = serde_json::from_str(s)?;
        doc.into_release()
    }
}

/// `z = s + noise`, with independent Gaussian noise of the block's standard
/// deviation on every entry. Deterministic given `seed`.
pub fn release(
    s: &[f64],
    layout: &StatisticLayout,
    n_records: usize,
    params: &PrivacyParams,
    seed: u64,
) -> Result<NoisyRelease> {
    if s.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            expected: layout.len(),
            got: s.len(),
        });
    }
    if n_records == 0 {
        return Err(Error::EmptyDataset);
    }
    params.validate(layout)?;
    let sensitivity = sensitivity_for(layout, params)?;
    let noise_sd: Vec<f64> = layout
        .entries
        .iter()
        .map(|e| params.sigma_blocks[&e.block])
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z = s
        .iter()
        .zip(&noise_sd)
        .map(|(&v, &sd)| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + sd * n
        })
        .collect();
    Ok(NoisyRelease {
        z,
        layout: layout.clone(),
        n_records,
        noise_sd,
        sensitivity,
        params: params.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sstats::layout;
    use approx::assert_relative_eq;

    #[test]
    fn logistic_sensitivity_examples() {
        assert_relative_eq!(sensitivity_logistic(1.0, 0.7, 0.7).unwrap(), 4.5f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(sensitivity_logistic(1.0, 1.0, 2f64.sqrt()).unwrap(), 2.0, max_relative = 1e-15);
        let a = sensitivity_logistic(0.8, 1.3, 2.1).unwrap();
        let b = sensitivity_logistic(0.8, 1.3 * 7.0, 2.1 * 7.0).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-14);
        assert!(sensitivity_logistic(0.0, 1.0, 1.0).is_err());
        assert!(sensitivity_logistic(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn poisson_sensitivity_examples() {
        for ry in [0.5, 1.0, 5.0] {
            let d = sensitivity_poisson(1.0, ry, [2.0; 4]).unwrap();
            assert_relative_eq!(d, (4.5 * (1.0 + ry * ry)).sqrt(), max_relative = 1e-14);
        }
        let d0 = sensitivity_poisson(1.0, 0.0, [1.0; 4]).unwrap();
        assert_relative_eq!(d0, 3.0 / 2f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(d0, 4.5f64.sqrt(), max_relative = 1e-15);
        assert!(sensitivity_poisson(1.0, -1.0, [1.0; 4]).is_err());
    }

    #[test]
    fn general_m_examples() {
        for r in [0.5, 1.0, 2.0] {
            let g = sensitivity_general_m(r, 1, None).unwrap();
            assert_eq!(g.delta, 2.0 * r);
            assert_eq!(g.argmin, -r * r);
        }
        let g2 = sensitivity_general_m(1.0, 2, None).unwrap();
        assert_relative_eq!(g2.delta, 4.5f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(g2.argmin, -0.5, epsilon = 1e-9);
        let g6 = sensitivity_general_m(1.0, 6, None).unwrap();
        assert!((g6.delta.powi(2) - 12.72).abs() < 0.05, "{g6:?}");
        assert!((g6.argmin + 0.67).abs() < 0.01, "{g6:?}");
    }

    #[test]
    fn general_m_weighted_matches_closed_form() {
        for (s1, s2) in [(1.0, 1.0), (1.0, 1.3), (2.0, 1.5)] {
            let c = (s1 * s1) / (s2 * s2);
            let g = sensitivity_general_m(1.0, 2, Some(&[1.0, c])).unwrap();
            assert_relative_eq!(g.delta, sensitivity_logistic(1.0, s1, s2).unwrap(), max_relative = 1e-9);
        }
    }

    #[test]
    fn delta_of_behaviour() {
        assert!(delta_of(1.0, 1e6, 1e-3).abs() < 1e-300 || delta_of(1.0, 1e6, 1e-3) == 0.0);
        let a = delta_of(0.7, 1.9, 2.3);
        let b = delta_of(0.7, 1.9 * 4.0, 2.3 * 4.0);
        assert_eq!(a, b);
        let mut prev = f64::INFINITY;
        for k in 1..50 {
            let v = delta_of(1.0, 0.2 * k as f64, 1.0);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn calibration_round_trip() {
        for &(eps, delta) in &[(0.1, 1e-5), (1.1, 1e-5), (3.0, 1e-3), (0.5, 1e-6)] {
            let sens = 4.5f64.sqrt();
            let s = calibrate_sigma(sens, eps, delta).unwrap();
            let got = delta_of(eps, s, sens);
            assert!(got <= delta && got > delta * (1.0 - 1e-5), "{eps} {delta} {got}");
            assert!(delta_of(eps, s * (1.0 - 1e-6), sens) > delta);
            let s2 = calibrate_sigma(2.0 * sens, eps, delta).unwrap();
            assert_relative_eq!(s2, 2.0 * s, max_relative = 1e-9);
        }
        assert!(calibrate_sigma(1.0, 1.0, 1.5).is_err());
        assert!(calibrate_sigma(0.0, 1.0, 1e-5).is_err());
    }

    #[test]
    fn release_determinism_and_small_noise() {
        let l = layout(Model::Logistic, 2, 2).unwrap();
        let s = vec![1.0, -2.0, 3.0, 4.0, 0.5];
        let p = PrivacyParams::calibrated(&l, 1.0, 1e-5, 1.0, 0.0, None).unwrap();
        let a = release(&s, &l, 10, &p, 7).unwrap();
        let b = release(&s, &l, 10, &p, 7).unwrap();
        assert_eq!(a.z, b.z);
        let c = release(&s, &l, 10, &p, 8).unwrap();
        assert_ne!(a.z, c.z);
        let tiny = PrivacyParams::with_sigma(&l, 1.0, 1e-5, 1.0, 0.0, 1e-12).unwrap();
        let r = release(&s, &l, 10, &tiny, 1).unwrap();
        for (zi, si) in r.z.iter().zip(&s) {
            assert!((zi - si).abs() < 1e-10);
        }
        assert_relative_eq!(r.sensitivity, 4.5f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn release_rejects_block_mismatch() {
        let l = layout(Model::Poisson, 2, 2).unwrap();
        let mut p = PrivacyParams::with_sigma(&l, 1.0, 1e-5, 1.0, 5.0, 1.0).unwrap();
        p.sigma_blocks.remove(&Block::YT2);
        let s = vec![0.0; l.len()];
        assert!(matches!(release(&s, &l, 5, &p, 0), Err(Error::BlockMismatch(_))));
        let l1 = layout(Model::Logistic, 2, 2).unwrap();
        let p1 = PrivacyParams::with_sigma(&l, 1.0, 1e-5, 1.0, 5.0, 1.0).unwrap();
        assert!(release(&vec![0.0; l1.len()], &l1, 5, &p1, 0).is_err());
    }

    #[test]
    fn calibrated_ratios_scale_blocks() {
        let l = layout(Model::Logistic, 3, 2).unwrap();
        let ratios: BTreeMap<Block, f64> = [(Block::YT1, 1.0), (Block::T2, 2f64.sqrt())].into();
        let p = PrivacyParams::calibrated(&l, 1.0, 1e-5, 1.0, 0.0, Some(&ratios)).unwrap();
        let s1 = p.sigma_blocks[&Block::YT1];
        let s2 = p.sigma_blocks[&Block::T2];
        assert_relative_eq!(s2 / s1, 2f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(s1, calibrate_sigma(2.0, 1.0, 1e-5).unwrap(), max_relative = 1e-14);
    }
}
