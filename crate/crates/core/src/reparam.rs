//! Unconstrained parameterizations of the general, Coxian and Hyper-Erlang
//! PH families, their differentiable maps onto Markovian form and
//! right-inverses on the interior.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ph::MarkovianPH;

/// Rate parameters closer to zero than this are rejected.
pub const GAMMA_MIN: f64 = 1e-30;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Branch-stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// PH family selected for fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    General,
    Coxian,
    HyperErlang,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::General => "general",
            Family::Coxian => "coxian",
            Family::HyperErlang => "hyper-erlang",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Family::General),
            "coxian" => Ok(Family::Coxian),
            "hyper-erlang" | "hypererlang" => Ok(Family::HyperErlang),
            other => Err(Error::InvalidArgument(format!(
                "unknown structure '{other}' (expected general, coxian or hyper-erlang)"
            ))),
        }
    }
}

/// Family plus its size: the shape of an unconstrained parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Structure {
    General { n: usize },
    Coxian { n: usize },
    HyperErlang { blocks: Vec<usize> },
}

impl Structure {
    pub fn family(&self) -> Family {
        match self {
            Structure::General { .. } => Family::General,
            Structure::Coxian { .. } => Family::Coxian,
            Structure::HyperErlang { .. } => Family::HyperErlang,
        }
    }

    /// Number of phases of the mapped PH.
    pub fn phases(&self) -> usize {
        match self {
            Structure::General { n } | Structure::Coxian { n } => *n,
            Structure::HyperErlang { blocks } => blocks.iter().sum(),
        }
    }

    /// Length of the flattened parameter vector.
    pub fn dim(&self) -> usize {
        match self {
            Structure::General { n } => 2 * n + n * n,
            Structure::Coxian { n } => 2 * n - 1,
            Structure::HyperErlang { blocks } => 2 * blocks.len(),
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            Structure::General { n } | Structure::Coxian { n } if *n == 0 => {
                Err(Error::InvalidConfig("phase count must be at least 1".into()))
            }
            Structure::HyperErlang { blocks } if blocks.is_empty() || blocks.contains(&0) => Err(Error::InvalidConfig(
                "hyper-erlang blocks must be nonempty and positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Default Hyper-Erlang block sets for the sizes used in the reference
    /// experiments.
    pub fn default_blocks(n: usize) -> Option<Vec<usize>> {
        match n {
            20 => Some(vec![3, 4, 6, 7]),
            50 => Some(vec![3, 4, 6, 7, 8, 10, 12]),
            100 => Some(vec![3, 4, 6, 7, 8, 10, 10, 10, 10, 12, 20]),
            _ => None,
        }
    }

    /// Rebuilds typed parameters from a flat vector of length [`Structure::dim`].
    pub fn unflatten(&self, flat: &[f64]) -> Params {
        debug_assert_eq!(flat.len(), self.dim());
        match self {
            Structure::General { n } => {
                let n = *n;
                Params::General(GeneralParams {
                    a: flat[..n].to_vec(),
                    gamma: flat[n..2 * n].to_vec(),
                    z: DMatrix::from_row_slice(n, n, &flat[2 * n..]),
                })
            }
            Structure::Coxian { n } => Params::Coxian(CoxianParams {
                gamma: flat[..*n].to_vec(),
                u: flat[*n..].to_vec(),
            }),
            Structure::HyperErlang { blocks } => {
                let k = blocks.len();
                Params::HyperErlang(HyperErlangParams {
                    beta: flat[..k].to_vec(),
                    delta: flat[k..].to_vec(),
                    blocks: blocks.clone(),
                })
            }
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Structure::General { n } => write!(f, "general(n={n})"),
            Structure::Coxian { n } => write!(f, "coxian(n={n})"),
            Structure::HyperErlang { blocks } => write!(f, "hyper-erlang(blocks={blocks:?})"),
        }
    }
}

fn check_rates(name: &str, v: &[f64]) -> Result<()> {
    for (i, g) in v.iter().enumerate() {
        if !(g.abs() >= GAMMA_MIN) || !g.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name}[{i}] = {g:e} must be finite with magnitude at least {GAMMA_MIN:e}"
            )));
        }
    }
    Ok(())
}

/// General parameterization `(a, gamma, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralParams {
    pub a: Vec<f64>,
    pub gamma: Vec<f64>,
    pub z: DMatrix<f64>,
}

impl GeneralParams {
    pub fn new(a: Vec<f64>, gamma: Vec<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = a.len();
        if n == 0 || gamma.len() != n || z.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "general params need a, gamma of length n and n x n Z (n = {n})"
            )));
        }
        check_rates("gamma", &gamma)?;
        Ok(GeneralParams { a, gamma, z })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// Row-wise softmax of `Z`.
    pub fn row_softmax(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut s = DMatrix::zeros(n, n);
        let mut row = vec![0.0; n];
        for i in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = self.z[(i, j)];
            }
            for (j, v) in softmax(&row).into_iter().enumerate() {
                s[(i, j)] = v;
            }
        }
        s
    }

    /// `alpha = softmax(a)`, `T = diag(gamma^2) [S - (I + S o I)]` with
    /// `S` the row softmax of `Z`.
    pub fn to_markovian(&self) -> MarkovianPH {
        let n = self.n();
        let s = self.row_softmax();
        let mut t = DMatrix::zeros(n, n);
        for i in 0..n {
            let g2 = self.gamma[i] * self.gamma[i];
            for j in 0..n {
                t[(i, j)] = if i == j { -g2 } else { g2 * s[(i, j)] };
            }
        }
        MarkovianPH::new(DVector::from_vec(softmax(&self.a)), t).expect("dimensions checked at construction")
    }

    /// Right-inverse on the interior: every `alpha_i > 0`, every
    /// off-diagonal `T_ij > 0` and every row sum `< 0`.
    pub fn from_markovian(ph: &MarkovianPH) -> Result<Self> {
        let n = ph.n();
        let (alpha, t) = (ph.alpha(), ph.t());
        for (i, &a) in alpha.iter().enumerate() {
            if !(a > 0.0) {
                return Err(Error::NotInterior(format!("alpha[{i}] = {a:e}")));
            }
        }
        let a: Vec<f64> = alpha.iter().map(|v| v.ln()).collect();
        let mut gamma = Vec::with_capacity(n);
        let mut z = DMatrix::zeros(n, n);
        for i in 0..n {
            let rate = -t[(i, i)];
            if !(rate > 0.0) {
                return Err(Error::NotInterior(format!("T[{i}][{i}] = {:e}", t[(i, i)])));
            }
            gamma.push(rate.sqrt());
            let mut off = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let v = t[(i, j)];
                if !(v > 0.0) {
                    return Err(Error::NotInterior(format!("T[{i}][{j}] = {v:e}")));
                }
                let e = v / rate;
                off += e;
                z[(i, j)] = e.ln();
            }
            // Self mass of the row softmax: the scaled exit rate.
            let self_mass = -t.row(i).sum() / rate;
            if !(self_mass > 0.0) {
                return Err(Error::NotInterior(format!(
                    "row {i} of T has zero exit rate (off-diagonal mass {off})"
                )));
            }
            z[(i, i)] = self_mass.ln();
        }
        GeneralParams::new(a, gamma, z)
    }
}

/// Coxian parameterization `(gamma, u)`: rates `gamma^2`, continuation
/// probabilities `sigmoid(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxianParams {
    pub gamma: Vec<f64>,
    pub u: Vec<f64>,
}

impl CoxianParams {
    pub fn new(gamma: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() || u.len() + 1 != gamma.len() {
            return Err(Error::Dimension(format!(
                "coxian params need n rates and n-1 logits, got {} and {}",
                gamma.len(),
                u.len()
            )));
        }
        check_rates("gamma", &gamma)?;
        Ok(CoxianParams { gamma, u })
    }

    pub fn n(&self) -> usize {
        self.gamma.len()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| g * g).collect()
    }

    pub fn continuation(&self) -> Vec<f64> {
        self.u.iter().map(|&u| sigmoid(u)).collect()
    }

    pub fn to_markovian(&self) -> MarkovianPH {
        coxian_markovian(&self.rates(), &self.continuation())
    }

    /// Right-inverse: `gamma = sqrt(lambda)`, `u = logit(p)`.
    pub fn from_markovian(lambda: &[f64], p: &[f64]) -> Result<Self> {
        if lambda.is_empty() || p.len() + 1 != lambda.len() {
            return Err(Error::Dimension(format!(
                "coxian needs n rates and n-1 probabilities, got {} and {}",
                lambda.len(),
                p.len()
            )));
        }
        for (i, &l) in lambda.iter().enumerate() {
            if !(l > 0.0) {
                return Err(Error::NotInterior(format!("lambda[{i}] = {l:e}")));
            }
        }
        for (i, &pi) in p.iter().enumerate() {
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::NotInterior(format!("p[{i}] = {pi}")));
            }
        }
        CoxianParams::new(
            lambda.iter().map(|l| l.sqrt()).collect(),
            p.iter().map(|&pi| logit(pi)).collect(),
        )
    }
}

/// Markovian Coxian: `alpha = e_1`, `T_ii = -lambda_i`, `T_{i,i+1} = p_i lambda_i`.
pub fn coxian_markovian(lambda: &[f64], p: &[f64]) -> MarkovianPH {
    let n = lambda.len();
    let mut t = DMatrix::zeros(n, n);
    for i in 0..n {
        t[(i, i)] = -lambda[i];
        if i + 1 < n {
            t[(i, i + 1)] = p[i] * lambda[i];
        }
    }
    let mut alpha = DVector::zeros(n);
    alpha[0] = 1.0;
    MarkovianPH::new(alpha, t).expect("square by construction")
}

/// Hyper-Erlang parameterization `(beta, delta)` over fixed block sizes:
/// branch weights `softmax(beta)`, branch rates `delta^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperErlangParams {
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub blocks: Vec<usize>,
}

impl HyperErlangParams {
    pub fn new(beta: Vec<f64>, delta: Vec<f64>, blocks: Vec<usize>) -> Result<Self> {
        let k = blocks.len();
        if k == 0 || beta.len() != k || delta.len() != k {
            return Err(Error::Dimension(format!(
                "hyper-erlang params need k = {k} weights and rates, got {} and {}",
                beta.len(),
                delta.len()
            )));
        }
        if blocks.contains(&0) {
            return Err(Error::InvalidArgument("block sizes must be positive".into()));
        }
        check_rates("delta", &delta)?;
        Ok(HyperErlangParams { beta, delta, blocks })
    }

    pub fn n(&self) -> usize {
        self.blocks.iter().sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.beta)
    }

    pub fn rates(&self) -> Vec<f64> {
        self.delta.iter().map(|d| d * d).collect()
    }

    pub fn to_markovian(&self) -> MarkovianPH {
        hypererlang_markovian(&self.weights(), &self.rates(), &self.blocks)
    }

    /// Right-inverse: `beta = log(omega)`, `delta = sqrt(lambda)`.
    pub fn from_markovian(omega: &[f64], lambda: &[f64], blocks: &[usize]) -> Result<Self> {
        if omega.len() != blocks.len() || lambda.len() != blocks.len() {
            return Err(Error::Dimension(
                "omega, lambda and blocks must have equal length".into(),
            ));
        }
        for (i, &w) in omega.iter().enumerate() {
            if !(w > 0.0) {
                return Err(Error::NotInterior(format!("omega[{i}] = {w:e}")));
            }
        }
        for (i, &l) in lambda.iter().enumerate() {
            if !(l > 0.0) {
                return Err(Error::NotInterior(format!("lambda[{i}] = {l:e}")));
            }
        }
        HyperErlangParams::new(
            omega.iter().map(|w| w.ln()).collect(),
            lambda.iter().map(|l| l.sqrt()).collect(),
            blocks.to_vec(),
        )
    }
}

/// Block-head phase indices `0, d_1, d_1 + d_2, ...`.
pub fn block_heads(blocks: &[usize]) -> Vec<usize> {
    let mut heads = Vec::with_capacity(blocks.len());
    let mut pos = 0;
    for &d in blocks {
        heads.push(pos);
        pos += d;
    }
    heads
}

/// Markovian Hyper-Erlang: weight `omega_j` on the head of block `j`, which is
/// an Erlang chain of `d_j` phases with rate `lambda_j`.
pub fn hypererlang_markovian(omega: &[f64], lambda: &[f64], blocks: &[usize]) -> MarkovianPH {
    let n: usize = blocks.iter().sum();
    let mut t = DMatrix::zeros(n, n);
    let mut alpha = DVector::zeros(n);
    for (j, &head) in block_heads(blocks).iter().enumerate() {
        alpha[head] = omega[j];
        for i in head..head + blocks[j] {
            t[(i, i)] = -lambda[j];
            if i + 1 < head + blocks[j] {
                t[(i, i + 1)] = lambda[j];
            }
        }
    }
    MarkovianPH::new(alpha, t).expect("square by construction")
}

/// Parameters of any of the three families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsDocument", try_from = "ParamsDocument")]
pub enum Params {
    General(GeneralParams),
    Coxian(CoxianParams),
    HyperErlang(HyperErlangParams),
}

impl Params {
    pub fn structure(&self) -> Structure {
        match self {
            Params::General(p) => Structure::General { n: p.n() },
            Params::Coxian(p) => Structure::Coxian { n: p.n() },
            Params::HyperErlang(p) => Structure::HyperErlang {
                blocks: p.blocks.clone(),
            },
        }
    }

    pub fn to_markovian(&self) -> MarkovianPH {
        match self {
            Params::General(p) => p.to_markovian(),
            Params::Coxian(p) => p.to_markovian(),
            Params::HyperErlang(p) => p.to_markovian(),
        }
    }

    /// Flat vector in the layout used by [`Structure::unflatten`].
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Params::General(p) => {
                let n = p.n();
                let mut v = Vec::with_capacity(2 * n + n * n);
                v.extend_from_slice(&p.a);
                v.extend_from_slice(&p.gamma);
                for i in 0..n {
                    for j in 0..n {
                        v.push(p.z[(i, j)]);
                    }
                }
                v
            }
            Params::Coxian(p) => p.gamma.iter().chain(&p.u).cloned().collect(),
            Params::HyperErlang(p) => p.beta.iter().chain(&p.delta).cloned().collect(),
        }
    }
}

/// Serialized form of [`Params`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "kebab-case")]
pub enum ParamsDocument {
    General {
        a: Vec<f64>,
        gamma: Vec<f64>,
        #[serde(rename = "Z")]
        z: Vec<Vec<f64>>,
    },
    Coxian {
        gamma: Vec<f64>,
        u: Vec<f64>,
    },
    HyperErlang {
        beta: Vec<f64>,
        delta: Vec<f64>,
        blocks: Vec<usize>,
    },
}

impl From<Params> for ParamsDocument {
    fn from(p: Params) -> Self {
        match p {
            Params::General(g) => ParamsDocument::General {
                z: (0..g.n()).map(|i| g.z.row(i).iter().cloned().collect()).collect(),
                a: g.a,
                gamma: g.gamma,
            },
            Params::Coxian(c) => ParamsDocument::Coxian { gamma: c.gamma, u: c.u },
            Params::HyperErlang(h) => ParamsDocument::HyperErlang {
                beta: h.beta,
                delta: h.delta,
                blocks: h.blocks,
            },
        }
    }
}

impl TryFrom<ParamsDocument> for Params {
    type Error = Error;
    fn try_from(doc: ParamsDocument) -> Result<Self> {
        Ok(match doc {
            ParamsDocument::General { a, gamma, z } => {
                let n = a.len();
                if z.len() != n || z.iter().any(|r| r.len() != n) {
                    return Err(Error::Dimension(format!("Z must be {n}x{n}")));
                }
                let z = DMatrix::from_fn(n, n, |i, j| z[i][j]);
                Params::General(GeneralParams::new(a, gamma, z)?)
            }
            ParamsDocument::Coxian { gamma, u } => Params::Coxian(CoxianParams::new(gamma, u)?),
            ParamsDocument::HyperErlang { beta, delta, blocks } => {
                Params::HyperErlang(HyperErlangParams::new(beta, delta, blocks)?)
            }
        })
    }
}

/// Moves a boundary representation just inside the interior so the
/// right-inverses apply: zero `alpha` entries get mass `eps` (then
/// renormalized), zero off-diagonals become `eps |T_ii|`, and rows with
/// (near) zero exit rate get their diagonal lowered to leave exit rate
/// `eps |T_ii|`.
pub fn jitter_interior(ph: &MarkovianPH, eps: f64) -> MarkovianPH {
    let n = ph.n();
    let mut alpha: DVector<f64> = ph.alpha().map(|a| if a > 0.0 { a } else { eps });
    let total = alpha.sum();
    alpha /= total;
    let mut t = ph.t().clone();
    for i in 0..n {
        let scale = t[(i, i)].abs();
        for j in 0..n {
            if j != i && !(t[(i, j)] > 0.0) {
                t[(i, j)] = eps * scale;
            }
        }
        let row_sum = t.row(i).sum();
        if row_sum > -eps * scale {
            t[(i, i)] -= row_sum + eps * scale;
        }
    }
    MarkovianPH::new(alpha, t).expect("shape preserved")
}

/// Clamps probabilities into `[eps, 1 - eps]`.
pub fn jitter_probabilities(p: &[f64], eps: f64) -> Vec<f64> {
    p.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect()
}
