//! The Markovian representation `(alpha, T)` of a phase-type distribution.

use std::fmt;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseSubgen};

/// Tolerance on the simplex and row-sum constraints.
pub const VALIDATION_TOLERANCE: f64 = 1e-12;

/// Raw moments `m_1, m_2, ...` (entry `i` holds the `(i+1)`-th moment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MomentVector(pub Vec<f64>);

impl MomentVector {
    pub fn new(values: Vec<f64>) -> Self {
        MomentVector(values)
    }

    /// Moments of the distribution scaled in time by `c`: `m_k c^k`.
    pub fn scaled(&self, c: f64) -> MomentVector {
        let mut f = 1.0;
        MomentVector(
            self.0
                .iter()
                .map(|m| {
                    f *= c;
                    m * f
                })
                .collect(),
        )
    }

    /// Squared coefficient of variation `m_2 / m_1^2 - 1`.
    pub fn scv(&self) -> Option<f64> {
        (self.0.len() >= 2).then(|| self.0[1] / (self.0[0] * self.0[0]) - 1.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for MomentVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for MomentVector {
    fn from(v: Vec<f64>) -> Self {
        MomentVector(v)
    }
}

/// A broken invariant of a Markovian representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFinite { what: &'static str, index: usize },
    NegativeAlpha { index: usize, value: f64 },
    AlphaSum { excess: f64 },
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    NonNegativeDiagonal { index: usize, value: f64 },
    PositiveRowSum { row: usize, excess: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFinite { what, index } => write!(f, "non-finite {what} entry {index}"),
            Violation::NegativeAlpha { index, value } => {
                write!(f, "alpha[{index}] = {value:e} is negative")
            }
            Violation::AlphaSum { excess } => write!(f, "alpha sums to 1 {excess:+e}"),
            Violation::NegativeOffDiagonal { row, col, value } => {
                write!(f, "T[{row}][{col}] = {value:e} is negative")
            }
            Violation::NonNegativeDiagonal { index, value } => {
                write!(f, "T[{index}][{index}] = {value:e} is not negative")
            }
            Violation::PositiveRowSum { row, excess } => {
                write!(f, "row {row} of T sums to {excess:e} > 0")
            }
        }
    }
}

/// Initial probability vector and subgenerator of an absorbing CTMC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PhDocument", try_from = "PhDocument")]
pub struct MarkovianPH {
    alpha: DVector<f64>,
    t: DMatrix<f64>,
}

/// Serialized form: `{"n": .., "alpha": [..], "T": [[..], ..]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhDocument {
    pub n: usize,
    pub alpha: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
}

impl From<MarkovianPH> for PhDocument {
    fn from(ph: MarkovianPH) -> Self {
        PhDocument {
            n: ph.n(),
            alpha: ph.alpha.iter().cloned().collect(),
            t: ph.t.row_iter().map(|r| r.iter().cloned().collect()).collect(),
        }
    }
}

impl TryFrom<PhDocument> for MarkovianPH {
    type Error = Error;
    fn try_from(d: PhDocument) -> Result<Self> {
        if d.alpha.len() != d.n {
            return Err(Error::Dimension(format!(
                "n = {} but alpha has {} entries",
                d.n,
                d.alpha.len()
            )));
        }
        MarkovianPH::from_rows(&d.alpha, &d.t)
    }
}

impl MarkovianPH {
    /// Builds a representation after checking only the dimensions. Use
    /// [`MarkovianPH::validate`] for the probabilistic constraints.
    pub fn new(alpha: DVector<f64>, t: DMatrix<f64>) -> Result<Self> {
        let n = alpha.len();
        if n == 0 {
            return Err(Error::Dimension("a PH needs at least one phase".into()));
        }
        if t.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "alpha has {n} entries but T is {}x{}",
                t.nrows(),
                t.ncols()
            )));
        }
        Ok(MarkovianPH { alpha, t })
    }

    pub fn from_rows(alpha: &[f64], rows: &[Vec<f64>]) -> Result<Self> {
        let n = alpha.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("T must be {n}x{n} to match alpha")));
        }
        let t = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        MarkovianPH::new(DVector::from_column_slice(alpha), t)
    }

    /// Exponential distribution with the given rate.
    pub fn exponential(rate: f64) -> Self {
        MarkovianPH {
            alpha: DVector::from_element(1, 1.0),
            t: DMatrix::from_element(1, 1, -rate),
        }
    }

    /// Erlang distribution with `k` phases of rate `rate` each.
    pub fn erlang(k: usize, rate: f64) -> Self {
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = -rate;
            if i + 1 < k {
                t[(i, i + 1)] = rate;
            }
        }
        let mut alpha = DVector::zeros(k);
        alpha[0] = 1.0;
        MarkovianPH { alpha, t }
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// Exit-rate vector `t = -T 1`.
    pub fn exit_vector(&self) -> DVector<f64> {
        -self.t.column_sum()
    }

    /// Every violated invariant; empty iff the representation is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.n();
        for (i, &a) in self.alpha.iter().enumerate() {
            if !a.is_finite() {
                out.push(Violation::NonFinite {
                    what: "alpha",
                    index: i,
                });
            } else if a < -VALIDATION_TOLERANCE {
                out.push(Violation::NegativeAlpha { index: i, value: a });
            }
        }
        let excess = self.alpha.sum() - 1.0;
        if excess.abs() > VALIDATION_TOLERANCE {
            out.push(Violation::AlphaSum { excess });
        }
        for i in 0..n {
            let diag = self.t[(i, i)];
            let mut row_sum = 0.0;
            let mut finite = true;
            for j in 0..n {
                let v = self.t[(i, j)];
                if !v.is_finite() {
                    out.push(Violation::NonFinite {
                        what: "T",
                        index: i * n + j,
                    });
                    finite = false;
                    continue;
                }
                row_sum += v;
                if j != i && v < -VALIDATION_TOLERANCE {
                    out.push(Violation::NegativeOffDiagonal {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            if finite && diag >= 0.0 {
                out.push(Violation::NonNegativeDiagonal { index: i, value: diag });
            }
            if finite && row_sum > VALIDATION_TOLERANCE * diag.abs().max(1.0) {
                out.push(Violation::PositiveRowSum {
                    row: i,
                    excess: row_sum,
                });
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// First `l` raw moments, `m_k = k! alpha (-T)^{-k} 1`, from `l`
    /// sequential solves on one factorization of `-T`.
    pub fn moments(&self, l: usize) -> Result<MomentVector> {
        let sub = DenseSubgen::factored(&self.t)?;
        let us = linalg::moment_vectors(&sub, l)?;
        Ok(MomentVector(linalg::moments_from_vectors(self.alpha.as_slice(), &us)))
    }

    pub fn mean(&self) -> Result<f64> {
        Ok(self.moments(1)?[0])
    }

    /// `alpha e^{Tx} 1`, the survival function.
    pub fn survival(&self, x: f64) -> f64 {
        let sub = DenseSubgen::new(&self.t);
        let ones = vec![1.0; self.n()];
        linalg::expm_bilinear(&sub, self.alpha.as_slice(), &ones, x)
    }

    /// `1 - alpha e^{Tx} 1`.
    pub fn cdf(&self, x: f64) -> f64 {
        (1.0 - self.survival(x)).clamp(0.0, 1.0)
    }

    /// `alpha e^{Tx} (-T 1)`.
    pub fn pdf(&self, x: f64) -> f64 {
        let sub = DenseSubgen::new(&self.t);
        let exit = self.exit_vector();
        linalg::expm_bilinear(&sub, self.alpha.as_slice(), exit.as_slice(), x).max(0.0)
    }

    /// Densities at `x_0 + k h` for `k = 0..count`, stepping the row vector
    /// `alpha e^{Tx}` forward by `e^{Th}` instead of restarting every point.
    pub fn pdf_grid(&self, x0: f64, h: f64, count: usize) -> Vec<f64> {
        let sub = DenseSubgen::new(&self.t);
        let exit = self.exit_vector();
        let mut row = linalg::expm_left_action(&sub, self.alpha.as_slice(), x0);
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            if k > 0 {
                row = linalg::expm_left_action(&sub, &row, h);
            }
            out.push(linalg::dot(&row, exit.as_slice()).max(0.0));
        }
        out
    }

    /// Smallest `x` with `cdf(x) >= p`, by bisection.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("quantile level {p} outside [0, 1)")));
        }
        let mean = self.mean()?;
        let mut hi = mean.max(f64::MIN_POSITIVE);
        while self.cdf(hi) < p {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::InvalidArgument("quantile search diverged".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }

    /// The same distribution rescaled in time so its mean is `target_mean`.
    pub fn normalize_mean(&self, target_mean: f64) -> Result<MarkovianPH> {
        if !(target_mean > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target mean must be positive, got {target_mean}"
            )));
        }
        let m1 = self.mean()?;
        Ok(self.time_scaled(target_mean / m1))
    }

    /// Distribution of `c X`: `T` divided by `c`.
    pub fn time_scaled(&self, c: f64) -> MarkovianPH {
        MarkovianPH {
            alpha: self.alpha.clone(),
            t: &self.t / c,
        }
    }

    /// Absorption-time sampler over this representation.
    pub fn sampler(&self) -> AbsorptionSampler {
        AbsorptionSampler::new(self)
    }

    /// `count` absorption times of the CTMC.
    pub fn sample_absorption<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        let sampler = self.sampler();
        (0..count).map(|_| sampler.sample(rng)).collect()
    }
}

/// Precomputed jump tables for simulating absorption times.
#[derive(Debug, Clone)]
pub struct AbsorptionSampler {
    initial: Vec<f64>,
    exit_rates: Vec<f64>,
    /// Cumulative jump probabilities per phase; target `n` means absorption.
    jumps: Vec<Vec<(f64, usize)>>,
}

impl AbsorptionSampler {
    pub fn new(ph: &MarkovianPH) -> Self {
        let n = ph.n();
        let mut initial = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &a in ph.alpha.iter() {
            acc += a.max(0.0);
            initial.push(acc);
        }
        let mut exit_rates = Vec::with_capacity(n);
        let mut jumps = Vec::with_capacity(n);
        for i in 0..n {
            let rate = -ph.t[(i, i)];
            exit_rates.push(rate);
            let mut table = Vec::new();
            let mut cum = 0.0;
            for j in 0..n {
                let v = ph.t[(i, j)];
                if j != i && v > 0.0 {
                    cum += v / rate;
                    table.push((cum, j));
                }
            }
            table.push((f64::INFINITY, n));
            jumps.push(table);
        }
        AbsorptionSampler {
            initial,
            exit_rates,
            jumps,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n = self.exit_rates.len();
        let total = *self.initial.last().unwrap_or(&1.0);
        let u: f64 = rng.random::<f64>() * total;
        let mut phase = self.initial.iter().position(|&c| u < c).unwrap_or(n - 1);
        let mut time = 0.0;
        loop {
            let e: f64 = Exp1.sample(rng);
            time += e / self.exit_rates[phase];
            let v: f64 = rng.random();
            let next = self.jumps[phase]
                .iter()
                .find(|(c, _)| v < *c)
                .map(|&(_, j)| j)
                .unwrap_or(n);
            if next == n {
                return time;
            }
            phase = next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ph(alpha: &[f64], rows: &[&[f64]]) -> MarkovianPH {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        MarkovianPH::from_rows(alpha, &rows).unwrap()
    }

    #[test]
    fn exponential_is_valid() {
        assert!(ph(&[1.0], &[&[-1.0]]).validate().is_empty());
    }

    #[test]
    fn alpha_sum_violation_reports_excess() {
        let v = ph(&[0.5, 0.6], &[&[-1.0, 0.0], &[0.0, -1.0]]).validate();
        assert_eq!(v.len(), 1);
        match v[0] {
            Violation::AlphaSum { excess } => assert_relative_eq!(excess, 0.1, epsilon = 1e-12),
            ref other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn row_sum_violation_reports_row_and_excess() {
        let v = ph(&[1.0, 0.0], &[&[-1.0, 2.0], &[0.0, -1.0]]).validate();
        assert_eq!(v, vec![Violation::PositiveRowSum { row: 0, excess: 1.0 }]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let t = DMatrix::from_element(2, 2, -1.0);
        assert!(MarkovianPH::new(DVector::from_element(3, 1.0 / 3.0), t).is_err());
    }

    #[test]
    fn exponential_moments() {
        let m = MarkovianPH::exponential(1.0).moments(5).unwrap();
        for (a, b) in m.iter().zip([1.0, 2.0, 6.0, 24.0, 120.0]) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn erlang_two_moments() {
        let m = MarkovianPH::erlang(2, 2.0).moments(2).unwrap();
        assert_relative_eq!(m[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(m[1], 1.5, max_relative = 1e-14);
    }

    #[test]
    fn singular_subgenerator_is_an_error() {
        // Closed two-state loop: row sums are zero, T is singular.
        let p = ph(&[1.0, 0.0], &[&[-1.0, 1.0], &[1.0, -1.0]]);
        assert!(matches!(p.moments(2), Err(Error::Singular { .. })));
    }

    #[test]
    fn cdf_closed_forms() {
        let e = MarkovianPH::exponential(1.0);
        assert_eq!(e.cdf(0.0), 0.0);
        assert_relative_eq!(e.cdf(2f64.ln()), 0.5, epsilon = 1e-12);
        let erl = MarkovianPH::erlang(2, 1.0);
        assert_relative_eq!(erl.cdf(2.0), 1.0 - 3.0 * (-2.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn pdf_closed_forms() {
        assert_relative_eq!(MarkovianPH::exponential(1.0).pdf(0.0), 1.0, epsilon = 1e-14);
        assert_relative_eq!(
            MarkovianPH::exponential(3.0).pdf(1.0),
            3.0 * (-3.0f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn pdf_grid_matches_pointwise() {
        let p = ph(&[0.3, 0.7], &[&[-2.0, 1.0], &[0.5, -1.0]]);
        let grid = p.pdf_grid(0.0, 0.1, 30);
        for (k, g) in grid.iter().enumerate() {
            assert_relative_eq!(*g, p.pdf(0.1 * k as f64), epsilon = 1e-11);
        }
    }

    #[test]
    fn normalize_mean_cases() {
        let e = MarkovianPH::exponential(2.0).normalize_mean(1.0).unwrap();
        assert_relative_eq!(e.t()[(0, 0)], -1.0, epsilon = 1e-15);

        let unit = MarkovianPH::erlang(3, 3.0);
        assert_eq!(unit.normalize_mean(1.0).unwrap(), unit);

        let erl = MarkovianPH::erlang(3, 1.0).normalize_mean(1.0).unwrap();
        assert_relative_eq!(erl.t()[(0, 0)], -3.0, epsilon = 1e-14);
        let m = erl.moments(2).unwrap();
        assert_relative_eq!(m[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(m[1], 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let e = MarkovianPH::exponential(1.0);
        assert_relative_eq!(e.quantile(0.5).unwrap(), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = MarkovianPH::erlang(3, 2.0);
        let a = p.sample_absorption(&mut ChaCha8Rng::seed_from_u64(11), 100);
        let b = p.sample_absorption(&mut ChaCha8Rng::seed_from_u64(11), 100);
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x >= 0.0));
    }
}
