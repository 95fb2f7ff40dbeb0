//! Gelman-Rubin convergence statistic, empirical CDFs and
//! Kolmogorov-Smirnov distances between posteriors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::Real17;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64], m: f64) -> f64 {
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Classic potential scale reduction `sqrt(((n - 1)/n W + B/n) / W)`.
///
/// Degenerate cases: `B = 0` gives `sqrt((n - 1)/n)`; `W = 0` gives `1` when
/// `B = 0` as well and `inf` otherwise.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if n < 2 {
        return Err(Error::InvalidArgument("each chain needs at least 2 samples".into()));
    }
    if let Some(c) = chains.iter().find(|c| c.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: c.len(),
        });
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, &m)| sample_var(c, m))
        .sum::<f64>()
        / chains.len() as f64;
    let b = nf * sample_var(&means, mean(&means));
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// Gelman-Rubin on chains split into halves.
pub fn split_gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    let mut halves = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        halves.push(c[..h].to_vec());
        halves.push(c[c.len() - h..].to_vec());
    }
    gelman_rubin(&halves)
}

/// Right-continuous empirical CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("ECDF of an empty sample".into()));
        }
        if samples.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("ECDF sample contains NaN".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Ecdf { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }

    /// `#{v <= t} / n`.
    pub fn eval(&self, t: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= t) as f64 / self.len() as f64
    }

    /// `#{v < t} / n`, the left limit at `t`.
    pub fn eval_left(&self, t: f64) -> f64 {
        self.sorted.partition_point(|&v| v < t) as f64 / self.len() as f64
    }
}

pub fn ecdf(samples: &[f64]) -> Result<Ecdf> {
    Ecdf::new(samples)
}

/// `sup_t |F(t) - G(t)|`, evaluated at every jump of either function from
/// both sides.
pub fn ks_score(f: &Ecdf, g: &Ecdf) -> f64 {
    let mut best: f64 = 0.0;
    for &t in f.sorted.iter().chain(&g.sorted) {
        best = best
            .max((f.eval(t) - g.eval(t)).abs())
            .max((f.eval_left(t) - g.eval_left(t)).abs());
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub r_hat: Real17,
    pub ks_vs_baseline: Option<Real17>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub per_parameter: Vec<ParameterDiagnostics>,
    pub epsilon: Real17,
    pub seed: u64,
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Concatenated draws of one parameter across chains.
pub fn pooled(chains: &[Vec<f64>]) -> Vec<f64> {
    chains.iter().flatten().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn identical_chains() {
        let c: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let r = gelman_rubin(&[c.clone(), c.clone(), c]).unwrap();
        assert!((r - (9.0f64 / 10.0).sqrt()).abs() < 1e-15);
        assert_eq!(gelman_rubin(&[vec![1.0; 5], vec![1.0; 5]]).unwrap(), 1.0);
        assert!(gelman_rubin(&[vec![1.0; 5], vec![2.0; 5]]).unwrap().is_infinite());
        assert!(gelman_rubin(&[vec![1.0, 2.0]]).is_err());
        assert!(gelman_rubin(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn same_distribution_and_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..10_000).map(|_| n.sample(&mut rng)).collect()).collect();
        assert!(gelman_rubin(&chains).unwrap() < 1.05);
        assert!(split_gelman_rubin(&chains).unwrap() < 1.05);
        let a: Vec<f64> = (0..1000).map(|_| n.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..1000).map(|_| 10.0 + n.sample(&mut rng)).collect();
        assert!(gelman_rubin(&[a, b]).unwrap() > 1.1);
    }

    #[test]
    fn affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 1.0).unwrap();
        let chains: Vec<Vec<f64>> = (0..3).map(|k| (0..200).map(|_| k as f64 * 0.1 + n.sample(&mut rng)).collect()).collect();
        let moved: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|v| 4.0 * v - 7.0).collect()).collect();
        let (a, b) = (gelman_rubin(&chains).unwrap(), gelman_rubin(&moved).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ecdf_examples() {
        let e = ecdf(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(e.eval(2.0), 2.0 / 3.0);
        assert_eq!(e.eval(0.0), 0.0);
        assert_eq!(e.eval(5.0), 1.0);
        let s = ecdf(&[4.0]).unwrap();
        assert_eq!(s.eval(3.999), 0.0);
        assert_eq!(s.eval(4.0), 1.0);
        assert!(ecdf(&[]).is_err());
    }

    #[test]
    fn ks_examples() {
        let f = ecdf(&[0.0, 1.0]).unwrap();
        let g = ecdf(&[0.5]).unwrap();
        assert_eq!(ks_score(&f, &g), 0.5);
        assert_eq!(ks_score(&f, &f), 0.0);
        let h = ecdf(&[5.0, 6.0]).unwrap();
        assert_eq!(ks_score(&f, &h), 1.0);
        assert_eq!(ks_score(&g, &f), ks_score(&f, &g));
    }
}
