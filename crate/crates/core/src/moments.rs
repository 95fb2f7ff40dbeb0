//! Exact moments of zero-mean multivariate Gaussians.
//!
//! Even moments are sums over perfect pairings of the monomial's slots of
//! products of covariance entries (Isserlis/Wick). [`MomentCache`] evaluates
//! them by grouping the pairings on the partner of the first slot, which
//! turns the enumeration into a memoized recursion over smaller moments:
//!
//! ```text
//! E[x^k] = sum_j k'_j * Sigma_ij * E[x^(k' - e_j)],   k' = k - e_i
//! ```
//!
//! where `i` is the first coordinate with a non-zero exponent. The explicit
//! enumeration in [`pair_partitions`] / [`moment_by_partitions`] is kept as an
//! independent route for checking.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasherDefault, Hasher};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest ambient dimension handled by the packed moment keys.
pub const MAX_DIM: usize = 16;
/// Largest total degree evaluated exactly.
pub const DEGREE_CAP: u32 = 8;
/// Default cap on the power passed to [`multinomial_expand`].
pub const DEFAULT_POWER_CAP: u32 = 4;

/// Multi-index of non-negative exponents over the `d` input coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExponentIndex(Vec<u32>);

impl ExponentIndex {
    pub fn new(exponents: Vec<u32>) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::InvalidArgument(
                "exponent index needs at least one coordinate".into(),
            ));
        }
        Ok(ExponentIndex(exponents))
    }

    pub fn zeros(d: usize) -> Self {
        ExponentIndex(vec![0; d.max(1)])
    }

    /// The index of the single coordinate `x_j`.
    pub fn unit(d: usize, j: usize) -> Self {
        let mut e = vec![0; d];
        e[j] = 1;
        ExponentIndex(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    /// Number of coordinates with a non-zero exponent.
    pub fn support_size(&self) -> usize {
        self.0.iter().filter(|&&k| k > 0).count()
    }

    /// Product of the two monomials.
    pub fn add(&self, other: &ExponentIndex) -> Result<ExponentIndex> {
        check_dim(self.dim(), other.dim())?;
        Ok(ExponentIndex(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Coordinate label of every slot, e.g. `(2,1,0)` gives `[0, 0, 1]`.
    pub fn slots(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(j, &k)| std::iter::repeat_n(j, k as usize))
            .collect()
    }

    /// Evaluates the monomial `prod_j x_j^(k_j)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .fold(1.0, |acc, (&k, &xj)| acc * xj.powi(k as i32))
    }

    pub(crate) fn pack(&self) -> Result<u64> {
        pack(&self.0)
    }
}

/// Packs exponents into 4-bit nibbles. Adding two packed keys multiplies the
/// monomials as long as no single exponent exceeds 15.
pub(crate) fn pack(exponents: &[u32]) -> Result<u64> {
    if exponents.len() > MAX_DIM {
        return Err(Error::DimensionTooLarge(exponents.len()));
    }
    let mut key = 0u64;
    for (j, &k) in exponents.iter().enumerate() {
        if k > 15 {
            return Err(Error::DegreeAboveCap {
                degree: k,
                cap: DEGREE_CAP,
            });
        }
        key |= (k as u64) << (4 * j);
    }
    Ok(key)
}

#[inline]
pub(crate) fn nibble(key: u64, j: usize) -> u64 {
    (key >> (4 * j)) & 0xf
}

pub(crate) fn packed_degree(key: u64) -> u32 {
    (0..MAX_DIM).map(|j| nibble(key, j) as u32).sum()
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Symmetric positive semidefinite `d x d` covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    m: DMatrix<f64>,
}

impl CovMatrix {
    /// Validates symmetry (1e-12 relative) and positive semidefiniteness
    /// (eigenvalues >= -1e-10 times the spectral norm). The stored matrix is
    /// the symmetrized input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidCovariance(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite entry".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidCovariance(format!(
                "asymmetry {asym:e} exceeds tolerance"
            )));
        }
        let sym = (&m + m.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigenvalues();
        let spectral = eig.amax();
        let min = eig.min();
        if min < -1e-10 * spectral {
            return Err(Error::InvalidCovariance(format!(
                "not positive semidefinite (min eigenvalue {min:e})"
            )));
        }
        Ok(CovMatrix { m: sym })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        for r in rows {
            check_dim(d, r.len())?;
        }
        CovMatrix::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn identity(d: usize) -> Self {
        CovMatrix {
            m: DMatrix::identity(d, d),
        }
    }

    /// `L L^T` for a square factor; positive semidefinite by construction.
    pub fn from_factor(l: &DMatrix<f64>) -> Self {
        let m = l * l.transpose();
        CovMatrix {
            m: (&m + m.transpose()) * 0.5,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        CovMatrix::new(&self.m * c)
    }

    /// Relabels coordinates: entry `(i, j)` of the result is `(perm[i], perm[j])`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dim(self.dim(), perm.len())?;
        let d = self.dim();
        Ok(CovMatrix {
            m: DMatrix::from_fn(d, d, |i, j| self.m[(perm[i], perm[j])]),
        })
    }

    /// Row-major flattening of all `d^2` entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| self.m[(i, j)])
            .collect()
    }
}

/// All perfect pairings of the slots, as pairs of slot positions.
///
/// The enumeration pairs the first unpaired slot with each later unpaired
/// slot in turn and recurses, so the output order is deterministic.
pub fn pair_partitions(slots: &[usize]) -> Result<Vec<Vec<(usize, usize)>>> {
    if slots.is_empty() || slots.len() % 2 == 1 {
        return Err(Error::OddSlotCount(slots.len()));
    }
    let mut out = Vec::new();
    let mut remaining: Vec<usize> = (0..slots.len()).collect();
    let mut current = Vec::with_capacity(slots.len() / 2);
    enumerate_pairings(&mut remaining, &mut current, &mut out);
    Ok(out)
}

fn enumerate_pairings(
    remaining: &mut Vec<usize>,
    current: &mut Vec<(usize, usize)>,
    out: &mut Vec<Vec<(usize, usize)>>,
) {
    if remaining.is_empty() {
        out.push(current.clone());
        return;
    }
    let first = remaining[0];
    for k in 1..remaining.len() {
        let partner = remaining[k];
        let mut rest: Vec<usize> = remaining
            .iter()
            .enumerate()
            .filter(|&(idx, _)| idx != 0 && idx != k)
            .map(|(_, &s)| s)
            .collect();
        current.push((first, partner));
        enumerate_pairings(&mut rest, current, out);
        current.pop();
    }
}

/// `(2k-1)!!`, the number of perfect pairings of `2k` slots.
pub fn pairing_count(k: u32) -> u64 {
    (1..=k as u64).map(|i| 2 * i - 1).product()
}

/// Moment by explicit enumeration of every pairing. Exponential in the
/// degree; used as the independent route against [`gaussian_moment`].
pub fn moment_by_partitions(index: &ExponentIndex, sigma: &CovMatrix) -> Result<f64> {
    check_dim(sigma.dim(), index.dim())?;
    let slots = index.slots();
    if slots.is_empty() {
        return Ok(1.0);
    }
    if slots.len() % 2 == 1 {
        return Ok(0.0);
    }
    let pairings = pair_partitions(&slots)?;
    Ok(pairings
        .iter()
        .map(|p| {
            p.iter()
                .map(|&(a, b)| sigma.get(slots[a], slots[b]))
                .product::<f64>()
        })
        .sum())
}

#[derive(Default)]
pub(crate) struct KeyHasher(u64);

impl Hasher for KeyHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0.rotate_left(8) ^ b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
    }

    fn write_u64(&mut self, v: u64) {
        let mut z = v.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        self.0 = z ^ (z >> 31);
    }
}

pub(crate) type KeyMap<V> = HashMap<u64, V, BuildHasherDefault<KeyHasher>>;

/// Memoized Gaussian moments for one covariance matrix.
///
/// The cache lives for a single evaluation context and is never shared.
pub struct MomentCache<'a> {
    sigma: &'a CovMatrix,
    memo: KeyMap<f64>,
}

impl<'a> MomentCache<'a> {
    pub fn new(sigma: &'a CovMatrix) -> Result<Self> {
        if sigma.dim() > MAX_DIM {
            return Err(Error::DimensionTooLarge(sigma.dim()));
        }
        Ok(MomentCache {
            sigma,
            memo: KeyMap::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    pub fn moment(&mut self, index: &ExponentIndex) -> Result<f64> {
        check_dim(self.dim(), index.dim())?;
        let degree = index.degree();
        if degree > DEGREE_CAP {
            return Err(Error::DegreeAboveCap {
                degree,
                cap: DEGREE_CAP,
            });
        }
        Ok(self.moment_packed(index.pack()?))
    }

    /// Moment of a packed index; the caller guarantees the degree cap.
    pub(crate) fn moment_packed(&mut self, key: u64) -> f64 {
        if key == 0 {
            return 1.0;
        }
        if packed_degree(key) % 2 == 1 {
            return 0.0;
        }
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let d = self.dim();
        let i = (0..d).find(|&j| nibble(key, j) > 0).expect("non-zero key");
        let rest = key - (1 << (4 * i));
        let mut acc = 0.0;
        for j in 0..d {
            let kj = nibble(rest, j);
            if kj == 0 {
                continue;
            }
            let sub = self.moment_packed(rest - (1 << (4 * j)));
            acc += kj as f64 * self.sigma.get(i, j) * sub;
        }
        self.memo.insert(key, acc);
        acc
    }

    pub fn len(&self) -> usize {
        self.memo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memo.is_empty()
    }
}

/// `E[prod_j x_j^(k_j)]` for `x ~ N(0, sigma)`.
pub fn gaussian_moment(index: &ExponentIndex, sigma: &CovMatrix) -> Result<f64> {
    MomentCache::new(sigma)?.moment(index)
}

/// Exact multinomial coefficient `n! / prod(k_j!)` where `n = sum(k_j)`.
pub fn multinomial_coefficient(exponents: &[u32]) -> u64 {
    let mut total = 0u64;
    let mut coef = 1u64;
    for &k in exponents {
        for i in 1..=k as u64 {
            total += 1;
            // coef * total / i stays integral at every step
            coef = coef * total / i;
        }
    }
    coef
}

/// All exponent vectors of length `d` summing to `total`, in descending
/// lexicographic order.
pub fn compositions(d: usize, total: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; d];
    fill_compositions(0, total, &mut cur, &mut out);
    out
}

fn fill_compositions(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k;
        fill_compositions(pos + 1, left - k, cur, out);
    }
    cur[pos] = 0;
}

/// Polynomial in `x` stored as merged, non-zero terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: BTreeMap<ExponentIndex, f64>,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Polynomial {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(dim);
        p.add_term(ExponentIndex::zeros(dim), c);
        p
    }

    pub fn monomial(index: ExponentIndex, coefficient: f64) -> Self {
        let mut p = Polynomial::zero(index.dim());
        p.add_term(index, coefficient);
        p
    }

    pub fn from_terms<I>(dim: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, ExponentIndex)>,
    {
        let mut p = Polynomial::zero(dim);
        for (c, idx) in terms {
            check_dim(dim, idx.dim())?;
            p.add_term(idx, c);
        }
        Ok(p)
    }

    fn add_term(&mut self, index: ExponentIndex, c: f64) {
        match self.terms.entry(index) {
            Entry::Vacant(v) => {
                if c != 0.0 {
                    v.insert(c);
                }
            }
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&ExponentIndex, f64)> {
        self.terms.iter().map(|(k, &v)| (k, v))
    }

    pub fn coefficient(&self, index: &ExponentIndex) -> f64 {
        self.terms.get(index).copied().unwrap_or(0.0)
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|k| k.degree()).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial> {
        check_dim(self.dim, other.dim)?;
        let mut out = self.clone();
        for (k, v) in other.terms() {
            out.add_term(k.clone(), v);
        }
        Ok(out)
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial> {
        check_dim(self.dim, other.dim)?;
        let mut out = Polynomial::zero(self.dim);
        for (a, ca) in self.terms() {
            for (b, cb) in other.terms() {
                out.add_term(a.add(b)?, ca * cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.dim);
        for (k, v) in self.terms() {
            out.add_term(k.clone(), v * c);
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms().map(|(k, c)| c * k.eval(x)).sum()
    }
}

/// `(x^T theta)^power` expanded by the multinomial theorem.
pub fn multinomial_expand(theta: &[f64], power: u32) -> Result<Polynomial> {
    multinomial_expand_capped(theta, power, DEFAULT_POWER_CAP)
}

pub fn multinomial_expand_capped(theta: &[f64], power: u32, cap: u32) -> Result<Polynomial> {
    if power > cap {
        return Err(Error::PowerAboveCap { power, cap });
    }
    if theta.is_empty() {
        return Err(Error::InvalidArgument("theta must be non-empty".into()));
    }
    let d = theta.len();
    let terms = compositions(d, power).into_iter().map(|e| {
        let coef = multinomial_coefficient(&e) as f64
            * e.iter()
                .zip(theta)
                .map(|(&k, &t)| t.powi(k as i32))
                .product::<f64>();
        (coef, ExponentIndex(e))
    });
    Polynomial::from_terms(d, terms)
}

/// `E[poly(x)]` for `x ~ N(0, sigma)`, by linearity over the terms.
pub fn poly_expectation(poly: &Polynomial, sigma: &CovMatrix) -> Result<f64> {
    check_dim(sigma.dim(), poly.dim())?;
    let mut cache = MomentCache::new(sigma)?;
    poly_expectation_cached(poly, &mut cache)
}

pub fn poly_expectation_cached(poly: &Polynomial, cache: &mut MomentCache<'_>) -> Result<f64> {
    check_dim(cache.dim(), poly.dim())?;
    let mut acc = 0.0;
    for (k, c) in poly.terms() {
        acc += c * cache.moment(k)?;
    }
    Ok(acc)
}
