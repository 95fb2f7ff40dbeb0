//! Polynomial summary statistics `t(x, y)` and their layouts.
//!
//! Each released entry is `multiplier * y^p * x^k`, where the multiplier is
//! the square root of the multinomial coefficient of `k`. With these
//! multipliers the degree-`m` block satisfies
//! `|t_m(x) - t_m(x')|^2 = |x|^(2m) + |x'|^(2m) - 2 <x, x'>^m`.
//!
//! Within a block, entries are ordered by support size and then by
//! descending exponent tuple, so the quadratic block reads
//! `x1^2, .., xd^2, sqrt2 x1x2, sqrt2 x1x3, ..`. The constant statistic is
//! not part of any layout; the record count travels as metadata.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{compositions, multinomial_coefficient, ExponentIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Logistic,
    Poisson,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Logistic => "logistic",
            Model::Poisson => "poisson",
        })
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Model::Logistic),
            "poisson" => Ok(Model::Poisson),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

/// Noise block of a released statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    #[serde(rename = "t1")]
    T1,
    #[serde(rename = "t2")]
    T2,
    #[serde(rename = "y_t1")]
    YT1,
    #[serde(rename = "y_t2")]
    YT2,
}

impl Block {
    pub fn label(self) -> &'static str {
        match self {
            Block::T1 => "t1",
            Block::T2 => "t2",
            Block::YT1 => "y_t1",
            Block::YT2 => "y_t2",
        }
    }

    pub fn degree(self) -> u32 {
        match self {
            Block::T1 | Block::YT1 => 1,
            Block::T2 | Block::YT2 => 2,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t1" => Ok(Block::T1),
            "t2" => Ok(Block::T2),
            "y_t1" => Ok(Block::YT1),
            "y_t2" => Ok(Block::YT2),
            other => Err(Error::InvalidArgument(format!("unknown block `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatisticEntry {
    pub index: ExponentIndex,
    pub y_power: u32,
    pub multiplier: f64,
    pub block: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatisticLayout {
    pub model: Model,
    pub d: usize,
    pub m: u32,
    pub entries: Vec<StatisticEntry>,
    pub blocks: Vec<Block>,
}

impl StatisticLayout {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry positions belonging to `block`, in layout order.
    pub fn block_range(&self, block: Block) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.block == block)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `sqrt(multinomial(|k|; k))`.
pub fn multiplier(index: &ExponentIndex) -> f64 {
    (multinomial_coefficient(index.exponents()) as f64).sqrt()
}

/// All degree-`degree` monomials in `d` variables in block order.
pub fn monomials(d: usize, degree: u32) -> Vec<ExponentIndex> {
    let mut all: Vec<ExponentIndex> = compositions(d, degree)
        .into_iter()
        .map(|e| ExponentIndex::new(e).expect("d >= 1"))
        .collect();
    // compositions are already in descending lexicographic order
    all.sort_by_key(|e| e.support_size());
    all
}

pub fn layout(model: Model, d: usize, m: u32) -> Result<StatisticLayout> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let blocks: Vec<(Block, u32)> = match (model, m) {
        (Model::Logistic, 1) => vec![(Block::YT1, 1)],
        (Model::Logistic, 2) => vec![(Block::YT1, 1), (Block::T2, 0)],
        (Model::Poisson, 1) => vec![(Block::T1, 0), (Block::YT1, 1)],
        (Model::Poisson, 2) => vec![
            (Block::T1, 0),
            (Block::T2, 0),
            (Block::YT1, 1),
            (Block::YT2, 1),
        ],
        (model, m) => {
            return Err(Error::Unsupported(format!(
                "no layout for model {model} with order {m}"
            )))
        }
    };
    let mut entries = Vec::new();
    for &(block, y_power) in &blocks {
        for index in monomials(d, block.degree()) {
            entries.push(StatisticEntry {
                multiplier: multiplier(&index),
                index,
                y_power,
                block,
            });
        }
    }
    Ok(StatisticLayout {
        model,
        d,
        m,
        entries,
        blocks: blocks.into_iter().map(|(b, _)| b).collect(),
    })
}

/// `t_m(x)`: every degree-`m` monomial of `x` with its multiplier.
pub fn degree_block(x: &[f64], m: u32) -> Vec<f64> {
    monomials(x.len(), m)
        .iter()
        .map(|k| multiplier(k) * k.eval(x))
        .collect()
}

/// Per-record statistic vector.
pub fn statistic(x: &[f64], y: f64, layout: &StatisticLayout) -> Result<Vec<f64>> {
    if x.len() != layout.d {
        return Err(Error::DimensionMismatch {
            expected: layout.d,
            got: x.len(),
        });
    }
    Ok(layout
        .entries
        .iter()
        .map(|e| e.multiplier * y.powi(e.y_power as i32) * e.index.eval(x))
        .collect())
}

/// Left-to-right sum of the per-record statistics.
pub fn aggregate(xs: &[Vec<f64>], ys: &[f64], layout: &StatisticLayout) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let mut s = vec![0.0; layout.len()];
    for (x, &y) in xs.iter().zip(ys) {
        for (acc, v) in s.iter_mut().zip(statistic(x, y, layout)?) {
            *acc += v;
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn norm2(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn logistic_d4_layout_order() {
        let l = layout(Model::Logistic, 4, 2).unwrap();
        assert_eq!(l.len(), 14);
        let exps: Vec<Vec<u32>> = l.entries.iter().map(|e| e.index.exponents().to_vec()).collect();
        assert_eq!(exps[0], vec![1, 0, 0, 0]);
        assert_eq!(exps[3], vec![0, 0, 0, 1]);
        assert_eq!(exps[4], vec![2, 0, 0, 0]);
        assert_eq!(exps[7], vec![0, 0, 0, 2]);
        assert_eq!(exps[8], vec![1, 1, 0, 0]);
        assert_eq!(exps[9], vec![1, 0, 1, 0]);
        assert_eq!(exps[13], vec![0, 0, 1, 1]);
        assert!(l.entries[..4].iter().all(|e| e.y_power == 1 && e.block == Block::YT1));
        assert!(l.entries[4..].iter().all(|e| e.y_power == 0 && e.block == Block::T2));
    }

    #[test]
    fn layout_counts() {
        assert_eq!(layout(Model::Logistic, 1, 2).unwrap().len(), 2);
        let p = layout(Model::Poisson, 3, 2).unwrap();
        assert_eq!(p.len(), 18);
        let sizes: Vec<usize> = p.blocks.iter().map(|&b| p.block_range(b).len()).collect();
        assert_eq!(sizes, vec![3, 6, 3, 6]);
        for d in 1..6 {
            assert_eq!(layout(Model::Logistic, d, 2).unwrap().len(), d + d * (d + 1) / 2);
            assert_eq!(layout(Model::Poisson, d, 2).unwrap().len(), 2 * (d + d * (d + 1) / 2));
        }
        assert!(matches!(layout(Model::Logistic, 3, 3), Err(Error::Unsupported(_))));
        assert!(layout(Model::Poisson, 0, 2).is_err());
    }

    #[test]
    fn multipliers() {
        let m = |e: Vec<u32>| multiplier(&ExponentIndex::new(e).unwrap());
        assert_eq!(m(vec![2, 0, 0]), 1.0);
        assert_relative_eq!(m(vec![1, 1, 0]), 2f64.sqrt());
        assert_relative_eq!(m(vec![1, 1, 1]), 6f64.sqrt());
    }

    #[test]
    fn statistic_examples() {
        let l = layout(Model::Logistic, 2, 2).unwrap();
        let t = statistic(&[1.0, 0.0], -1.0, &l).unwrap();
        assert_eq!(t, vec![-1.0, 0.0, 1.0, 0.0, 0.0]);
        let z = statistic(&[0.0, 0.0], 3.0, &l).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let a = statistic(&[0.3, -0.7], 1.0, &l).unwrap();
        let b = statistic(&[0.3, -0.7], -1.0, &l).unwrap();
        assert_eq!(a[2..], b[2..]);
        assert!(statistic(&[1.0], 1.0, &l).is_err());
    }

    #[test]
    fn aggregate_basics() {
        let l = layout(Model::Poisson, 2, 2).unwrap();
        let x = vec![0.2, -0.5];
        let single = aggregate(&[x.clone()], &[3.0], &l).unwrap();
        assert_eq!(single, statistic(&x, 3.0, &l).unwrap());
        let double = aggregate(&[x.clone(), x.clone()], &[3.0, 3.0], &l).unwrap();
        for (a, b) in double.iter().zip(&single) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(matches!(aggregate(&[], &[], &l), Err(Error::EmptyDataset)));
    }

    proptest! {
        #[test]
        fn degree_block_norm_identity(
            x in prop::collection::vec(-1.0f64..1.0, 1..5),
            xp_seed in prop::collection::vec(-1.0f64..1.0, 5),
            m in 1u32..=4,
        ) {
            let xp: Vec<f64> = xp_seed[..x.len()].to_vec();
            let a = degree_block(&x, m);
            let b = degree_block(&xp, m);
            prop_assert!((norm2(&a) - norm2(&x).powi(m as i32)).abs() < 1e-10);
            let diff: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum();
            let dot: f64 = x.iter().zip(&xp).map(|(u, v)| u * v).sum();
            let want = norm2(&x).powi(m as i32) + norm2(&xp).powi(m as i32) - 2.0 * dot.powi(m as i32);
            prop_assert!((diff - want).abs() < 1e-10);
        }

        #[test]
        fn layout_is_pure(d in 1usize..6, m in 1u32..=2, poisson in any::<bool>()) {
            let model = if poisson { Model::Poisson } else { Model::Logistic };
            prop_assert_eq!(layout(model, d, m).unwrap(), layout(model, d, m).unwrap());
        }
    }
}
