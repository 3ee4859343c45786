//! Random test distributions for benchmarking the fitter.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::derive_seed;
use crate::ph::{MarkovianPH, MomentVector};
use crate::reparam::{coxian_markovian, hypererlang_markovian, Family, GeneralParams};

pub const DEFAULT_SIZE_RANGE: (usize, usize) = (1, 200);
pub const DEFAULT_MOMENT_COUNT: usize = 20;
/// `gamma` for general PHs, and rates for Coxian and Hyper-Erlang, are drawn from here.
pub const RATE_RANGE: (f64, f64) = (0.1, 10.0);

/// What to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub family: Family,
    #[serde(default = "default_size_range")]
    pub size_range: (usize, usize),
    pub count: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_moment_count")]
    pub moment_count: usize,
}

fn default_size_range() -> (usize, usize) {
    DEFAULT_SIZE_RANGE
}

fn default_seed() -> u64 {
    crate::optimizer::DEFAULT_SEED
}

fn default_moment_count() -> usize {
    DEFAULT_MOMENT_COUNT
}

impl SampleSpec {
    pub fn new(family: Family, count: usize, seed: u64) -> Self {
        SampleSpec {
            family,
            size_range: DEFAULT_SIZE_RANGE,
            count,
            seed,
            moment_count: DEFAULT_MOMENT_COUNT,
        }
    }

    pub fn with_size_range(mut self, lo: usize, hi: usize) -> Self {
        self.size_range = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "size range [{lo}, {hi}] is empty or contains 0"
            )));
        }
        if self.count == 0 {
            return Err(Error::InvalidConfig("count must be at least 1".into()));
        }
        if self.moment_count == 0 {
            return Err(Error::InvalidConfig("moment_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// One generated distribution with its moment signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub family: Family,
    pub ph: MarkovianPH,
    pub moments: MomentVector,
}

fn rate<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(RATE_RANGE.0..=RATE_RANGE.1)
}

/// Uniform draw from the open interval `(0, 1)`.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Uniform point in the interior of the probability simplex.
pub fn uniform_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = e.iter().sum();
        if s > 0.0 && e.iter().all(|&v| v > 0.0) {
            return e.into_iter().map(|v| v / s).collect();
        }
    }
}

/// Uniform composition of `n` into `k` positive parts.
pub fn uniform_composition<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    assert!(k >= 1 && k <= n, "cannot split {n} into {k} positive parts");
    let mut cuts: Vec<usize> = index::sample(rng, n - 1, k - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut parts = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(n)) {
        parts.push(c - prev);
        prev = c;
    }
    parts
}

/// Dense PH with uniform initial vector, some off-diagonal rates zeroed.
/// Returns the number of zeroed entries alongside the distribution.
pub fn sample_general_counted<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (MarkovianPH, usize) {
    assert!(n >= 1);
    let alpha = uniform_simplex(n, rng);
    let gamma: Vec<f64> = (0..n).map(|_| rate(rng)).collect();
    let z = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
    let a: Vec<f64> = alpha.iter().map(|p| p.ln()).collect();
    let ph = GeneralParams::new(a, gamma, z)
        .expect("dimensions are consistent")
        .to_markovian();
    let off = n * n - n;
    let zeros = rng.random_range(0..=off);
    let mut t = ph.t().clone();
    for idx in index::sample(rng, off.max(1), zeros.min(off)) {
        let (i, r) = (idx / (n - 1), idx % (n - 1));
        let j = if r >= i { r + 1 } else { r };
        t[(i, j)] = 0.0;
    }
    (
        MarkovianPH::new(nalgebra::DVector::from_vec(alpha), t).expect("square"),
        zeros,
    )
}

pub fn sample_general<R: Rng + ?Sized>(n: usize, rng: &mut R) -> MarkovianPH {
    sample_general_counted(n, rng).0
}

/// Coxian with rates uniform in [`RATE_RANGE`] and continuation probabilities uniform in `(0, 1)`.
pub fn sample_coxian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> MarkovianPH {
    assert!(n >= 1);
    let lambda: Vec<f64> = (0..n).map(|_| rate(rng)).collect();
    let p: Vec<f64> = (0..n - 1).map(|_| open_unit(rng)).collect();
    coxian_markovian(&lambda, &p)
}

/// Hyper-Erlang with `k` uniform on `1..=max(1, n/2)` branches and uniform block composition.
pub fn sample_hypererlang<R: Rng + ?Sized>(n: usize, rng: &mut R) -> MarkovianPH {
    let (omega, lambda, blocks) = sample_hypererlang_parts(n, rng);
    hypererlang_markovian(&omega, &lambda, &blocks)
}

/// Weights, rates and block sizes of a random Hyper-Erlang.
pub fn sample_hypererlang_parts<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    assert!(n >= 1);
    let k = rng.random_range(1..=(n / 2).max(1));
    let blocks = uniform_composition(n, k, rng);
    let raw: Vec<f64> = (0..k).map(|_| open_unit(rng)).collect();
    let s: f64 = raw.iter().sum();
    let omega = raw.into_iter().map(|w| w / s).collect();
    let lambda = (0..k).map(|_| rate(rng)).collect();
    (omega, lambda, blocks)
}

pub fn sample<R: Rng + ?Sized>(family: Family, n: usize, rng: &mut R) -> MarkovianPH {
    match family {
        Family::General => sample_general(n, rng),
        Family::Coxian => sample_coxian(n, rng),
        Family::HyperErlang => sample_hypererlang(n, rng),
    }
}

/// Instance `index` of the test set described by `spec`.
pub fn generate_instance(spec: &SampleSpec, index: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let n = rng.random_range(spec.size_range.0..=spec.size_range.1);
    let ph = sample(spec.family, n, &mut rng).normalize_mean(1.0)?;
    let moments = ph.moments(spec.moment_count)?;
    if moments.iter().any(|m| !m.is_finite() || *m <= 0.0) {
        return Err(Error::InvalidTarget(format!(
            "instance {index} has a non-finite moment signature"
        )));
    }
    Ok(Instance {
        id: format!("{}-{index:05}", spec.family),
        family: spec.family,
        ph,
        moments,
    })
}

/// Mean-normalized distributions with their moment signatures, deterministic per seed.
pub fn generate_testset(spec: &SampleSpec) -> Result<Vec<Instance>> {
    spec.validate()?;
    (0..spec.count)
        .into_par_iter()
        .map(|i| generate_instance(spec, i))
        .collect()
}
