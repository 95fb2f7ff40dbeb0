//! Sequential against rayon-parallel execution on the three hot loops.
//! Outputs are identical in both modes; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpglm::inference::{run_chains, MCMCConfig, PriorConfig};
use dpglm::moments::{CovMatrix, ExponentIndex};
use dpglm::oracles::{mc_link_moments_with, mc_moment_with};
use dpglm::privacy::{release, PrivacyParams};
use dpglm::sstats::{aggregate, layout, Model};
use dpglm::Execution;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn sigma() -> CovMatrix {
    CovMatrix::from_rows(&[vec![0.25, 0.05, -0.03], vec![0.05, 0.2, 0.02], vec![-0.03, 0.02, 0.3]]).unwrap()
}

fn monte_carlo(c: &mut Criterion) {
    let s = sigma();
    let idx = ExponentIndex::new(vec![2, 2, 2]).unwrap();
    let lay = layout(Model::Logistic, 3, 2).unwrap();
    let theta = [0.3, -0.2, 0.25];
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    for mode in MODES {
        g.bench_with_input(BenchmarkId::new("moment", format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| mc_moment_with(&idx, &s, 200_000, 1, m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("link_moments", format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| mc_link_moments_with(&theta, &s, &lay, 50_000, 1, m).unwrap())
        });
    }
    g.finish();
}

fn chains(c: &mut Criterion) {
    let lay = layout(Model::Logistic, 3, 2).unwrap();
    let xs: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let t = i as f64 * 0.37;
            vec![0.5 * t.sin(), 0.4 * t.cos(), 0.3 * (2.0 * t).sin()]
        })
        .collect();
    let ys: Vec<f64> = (0..200).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
    let s = aggregate(&xs, &ys, &lay).unwrap();
    let params = PrivacyParams::calibrated(&lay, 1.0, 1e-5, 1.0, 1.0, None).unwrap();
    let rel = release(&s, &lay, xs.len(), &params, 3).unwrap();
    let prior = PriorConfig::default_for(Model::Logistic, 3, 3.0);
    let mut g = c.benchmark_group("chains");
    g.sample_size(10);
    for mode in MODES {
        let config = MCMCConfig {
            n_chains: 4,
            n_iters: 1_000,
            execution: mode,
            ..MCMCConfig::default()
        };
        g.bench_with_input(BenchmarkId::new("run_chains", format!("{mode:?}")), &config, |b, cfg| {
            b.iter(|| run_chains(&rel, &prior, cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, monte_carlo, chains);
criterion_main!(benches);
