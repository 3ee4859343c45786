//! Weighted moment-regression losses, the joint moment + shape loss, and
//! their gradients in the unconstrained parameter spaces.
//!
//! Gradients are hand-derived adjoints: reverse sweeps through the moment
//! solves and through the uniformization series, followed by the chain rule
//! of each family's forward map. The Hyper-Erlang family uses closed forms
//! for its Erlang branches instead of matrix kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, poisson_pmf, BidiagonalSubgen, DenseSubgen, Subgenerator};
use crate::ph::{MarkovianPH, MomentVector};
use crate::reparam::{sigmoid, softmax, Params, Structure};

/// Default trade-off between the moment and shape parts of the loss.
pub const DEFAULT_Q: f64 = 0.05;

/// A point `(x, y)` on the CDF or PDF with an individual weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapePoint {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

impl ShapePoint {
    pub fn new(x: f64, y: f64) -> Self {
        ShapePoint { x, y, weight: 1.0 }
    }
}

/// Target moments with weights, plus optional CDF/PDF shape points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TargetDocument", into = "TargetDocument")]
pub struct FitTarget {
    pub moments: MomentVector,
    pub weights: Vec<f64>,
    pub cdf_points: Vec<ShapePoint>,
    pub pdf_points: Vec<ShapePoint>,
    pub q: f64,
}

/// `w_i = m_i^{-2}`, so the moment loss sums squared relative errors.
pub fn default_weights(moments: &[f64]) -> Result<Vec<f64>> {
    moments
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if m > 0.0 && m.is_finite() {
                Ok(1.0 / (m * m))
            } else {
                Err(Error::InvalidTarget(format!(
                    "moment {} is {m}; default weights need positive moments",
                    i + 1
                )))
            }
        })
        .collect()
}

impl FitTarget {
    /// Moments only, default weights.
    pub fn from_moments(moments: impl Into<MomentVector>) -> Result<Self> {
        let moments = moments.into();
        let weights = default_weights(&moments)?;
        let t = FitTarget {
            moments,
            weights,
            cdf_points: Vec::new(),
            pdf_points: Vec::new(),
            q: DEFAULT_Q,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_cdf_points(mut self, points: Vec<ShapePoint>, q: f64) -> Result<Self> {
        self.cdf_points = points;
        self.q = q;
        self.validate()?;
        Ok(self)
    }

    pub fn with_pdf_points(mut self, points: Vec<ShapePoint>, q: f64) -> Result<Self> {
        self.pdf_points = points;
        self.q = q;
        self.validate()?;
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = weights;
        self.validate()?;
        Ok(self)
    }

    /// Number of fitted moments.
    pub fn l(&self) -> usize {
        self.moments.len()
    }

    pub fn has_shape_terms(&self) -> bool {
        !self.cdf_points.is_empty() || !self.pdf_points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTarget(msg));
        if self.moments.is_empty() {
            return bad("at least one moment is required".into());
        }
        if !(self.moments[0] > 0.0) || self.moments.iter().any(|m| !m.is_finite()) {
            return bad("moments must be finite with a positive mean".into());
        }
        if self.weights.len() != self.moments.len() {
            return bad(format!(
                "{} weights for {} moments",
                self.weights.len(),
                self.moments.len()
            ));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return bad(format!("weights must be positive, got {w}"));
        }
        if !(self.q >= 0.0) || !self.q.is_finite() {
            return bad(format!("Q must be nonnegative, got {}", self.q));
        }
        for p in &self.cdf_points {
            if !(p.x > 0.0) || !p.x.is_finite() || !(p.y > 0.0 && p.y < 1.0) {
                return bad(format!("CDF point ({}, {}) needs x > 0 and 0 < y < 1", p.x, p.y));
            }
        }
        for p in &self.pdf_points {
            if !(p.x > 0.0) || !p.x.is_finite() || !(p.y >= 0.0) || !p.y.is_finite() {
                return bad(format!("PDF point ({}, {}) needs x > 0 and y >= 0", p.x, p.y));
            }
        }
        for p in self.cdf_points.iter().chain(&self.pdf_points) {
            if !(p.weight > 0.0) || !p.weight.is_finite() {
                return bad(format!("shape point weight must be positive, got {}", p.weight));
            }
        }
        Ok(())
    }

    /// The equivalent problem in units where the mean is 1, and the time
    /// scale `c = m_1` that was divided out. Weights are rescaled so the
    /// loss value is unchanged.
    pub fn normalized(&self) -> (FitTarget, f64) {
        let c = self.moments[0];
        let mut scale = 1.0;
        let mut moments = Vec::with_capacity(self.l());
        let mut weights = Vec::with_capacity(self.l());
        for (m, w) in self.moments.iter().zip(&self.weights) {
            scale *= c;
            moments.push(m / scale);
            weights.push(w * scale * scale);
        }
        let cdf_points = self
            .cdf_points
            .iter()
            .map(|p| ShapePoint { x: p.x / c, ..*p })
            .collect();
        let pdf_points = self
            .pdf_points
            .iter()
            .map(|p| ShapePoint {
                x: p.x / c,
                y: p.y * c,
                weight: p.weight / (c * c),
            })
            .collect();
        (
            FitTarget {
                moments: MomentVector(moments),
                weights,
                cdf_points,
                pdf_points,
                q: self.q,
            },
            c,
        )
    }
}

/// Serialized form of [`FitTarget`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDocument {
    pub moments: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdf_points: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdf_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdf_points: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdf_weights: Option<Vec<f64>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

fn shape_points(points: Option<Vec<[f64; 2]>>, weights: Option<Vec<f64>>, what: &str) -> Result<Vec<ShapePoint>> {
    let points = points.unwrap_or_default();
    let weights = weights.unwrap_or_else(|| vec![1.0; points.len()]);
    if weights.len() != points.len() {
        return Err(Error::InvalidTarget(format!(
            "{} {what} weights for {} {what} points",
            weights.len(),
            points.len()
        )));
    }
    Ok(points
        .into_iter()
        .zip(weights)
        .map(|([x, y], weight)| ShapePoint { x, y, weight })
        .collect())
}

impl TryFrom<TargetDocument> for FitTarget {
    type Error = Error;
    fn try_from(doc: TargetDocument) -> Result<Self> {
        let weights = match doc.weights {
            Some(w) => w,
            None => default_weights(&doc.moments)?,
        };
        let target = FitTarget {
            moments: MomentVector(doc.moments),
            weights,
            cdf_points: shape_points(doc.cdf_points, doc.cdf_weights, "cdf")?,
            pdf_points: shape_points(doc.pdf_points, doc.pdf_weights, "pdf")?,
            q: doc.q.unwrap_or(DEFAULT_Q),
        };
        target.validate()?;
        Ok(target)
    }
}

impl From<FitTarget> for TargetDocument {
    fn from(t: FitTarget) -> Self {
        let split = |pts: &[ShapePoint]| -> (Option<Vec<[f64; 2]>>, Option<Vec<f64>>) {
            if pts.is_empty() {
                return (None, None);
            }
            let xy = pts.iter().map(|p| [p.x, p.y]).collect();
            let w: Vec<f64> = pts.iter().map(|p| p.weight).collect();
            let w = if w.iter().all(|&v| v == 1.0) { None } else { Some(w) };
            (Some(xy), w)
        };
        let (cdf_points, cdf_weights) = split(&t.cdf_points);
        let (pdf_points, pdf_weights) = split(&t.pdf_points);
        TargetDocument {
            moments: t.moments.into_inner(),
            weights: Some(t.weights),
            cdf_points,
            cdf_weights,
            pdf_points,
            pdf_weights,
            q: Some(t.q),
        }
    }
}

/// Loss evaluated on the Markovian form through the generic PH kernels.
/// Independent of the family-specific fast paths used by [`loss`].
pub fn markovian_loss(ph: &MarkovianPH, target: &FitTarget) -> Result<f64> {
    let mu = ph.moments(target.l())?;
    let mut total: f64 = mu
        .iter()
        .zip(target.moments.iter())
        .zip(&target.weights)
        .map(|((m, t), w)| w * (m - t) * (m - t))
        .sum();
    for p in &target.cdf_points {
        let r = ph.cdf(p.x) - p.y;
        total += target.q * p.weight * r * r;
    }
    for p in &target.pdf_points {
        let r = ph.pdf(p.x) - p.y;
        total += target.q * p.weight * r * r;
    }
    Ok(total)
}

/// Loss of the parameters against the target.
pub fn loss(params: &Params, target: &FitTarget) -> Result<f64> {
    evaluate(&params.structure(), &params.flatten(), target, None)
}

/// Gradient of [`loss`] in the unconstrained parameter space.
pub fn gradient(params: &Params, target: &FitTarget) -> Result<Params> {
    Ok(loss_and_gradient(params, target)?.1)
}

pub fn loss_and_gradient(params: &Params, target: &FitTarget) -> Result<(f64, Params)> {
    let structure = params.structure();
    let flat = params.flatten();
    let mut grad = vec![0.0; flat.len()];
    let value = evaluate(&structure, &flat, target, Some(&mut grad))?;
    Ok((value, structure.unflatten(&grad)))
}

/// Loss (and optionally its gradient, written into `grad`) for a flat
/// parameter vector laid out as [`Structure::unflatten`] expects.
pub fn evaluate(structure: &Structure, flat: &[f64], target: &FitTarget, grad: Option<&mut [f64]>) -> Result<f64> {
    if flat.len() != structure.dim() {
        return Err(Error::Dimension(format!(
            "{structure} expects {} parameters, got {}",
            structure.dim(),
            flat.len()
        )));
    }
    let value = match structure {
        Structure::General { n } => general(*n, flat, target, grad)?,
        Structure::Coxian { n } => coxian(*n, flat, target, grad)?,
        Structure::HyperErlang { blocks } => hyper_erlang(blocks, flat, target, grad)?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::InvalidArgument(format!("loss is not finite ({value})")))
    }
}

/// Moment residual part: returns the loss and fills `dL/dmu`.
fn moment_terms(mu: &[f64], target: &FitTarget, mu_bar: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (k, ((m, t), w)) in mu.iter().zip(target.moments.iter()).zip(&target.weights).enumerate() {
        let r = m - t;
        total += w * r * r;
        mu_bar[k] = 2.0 * w * r;
    }
    total
}

/// Shape terms through the matrix kernels, accumulating adjoints into
/// `alpha_bar` and `grad` when requested.
fn shape_terms<S: Subgenerator>(
    sub: &S,
    alpha: &[f64],
    exit: &[f64],
    target: &FitTarget,
    adjoint: Option<(&mut [f64], &mut S::Grad)>,
) -> f64 {
    if !target.has_shape_terms() {
        return 0.0;
    }
    let n = sub.dim();
    let ones = vec![1.0; n];
    let q = target.q;
    let mut total = 0.0;
    match adjoint {
        None => {
            for p in &target.cdf_points {
                let f = 1.0 - linalg::expm_bilinear(sub, alpha, &ones, p.x);
                total += q * p.weight * (f - p.y).powi(2);
            }
            for p in &target.pdf_points {
                let f = linalg::expm_bilinear(sub, alpha, exit, p.x);
                total += q * p.weight * (f - p.y).powi(2);
            }
        }
        Some((alpha_bar, grad)) => {
            let mut r_bar = vec![0.0; n];
            for p in &target.cdf_points {
                // Value first so the adjoint seed is known.
                let surv = linalg::expm_bilinear(sub, alpha, &ones, p.x);
                let resid = 1.0 - surv - p.y;
                total += q * p.weight * resid * resid;
                let seed = -2.0 * q * p.weight * resid;
                linalg::expm_bilinear_adjoint(sub, alpha, &ones, p.x, seed, alpha_bar, &mut r_bar, grad);
            }
            r_bar.iter_mut().for_each(|v| *v = 0.0);
            for p in &target.pdf_points {
                let f = linalg::expm_bilinear(sub, alpha, exit, p.x);
                let resid = f - p.y;
                total += q * p.weight * resid * resid;
                let seed = 2.0 * q * p.weight * resid;
                linalg::expm_bilinear_adjoint(sub, alpha, exit, p.x, seed, alpha_bar, &mut r_bar, grad);
            }
            // exit = -T 1  =>  dT_ij -= exit_bar_i
            if !target.pdf_points.is_empty() {
                sub.add_outer(grad, -1.0, &r_bar, &ones);
            }
        }
    }
    total
}

fn general(n: usize, flat: &[f64], target: &FitTarget, grad: Option<&mut [f64]>) -> Result<f64> {
    let (a, rest) = flat.split_at(n);
    let (gamma, z) = rest.split_at(n);
    let alpha = softmax(a);
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        let row = softmax(&z[i * n..(i + 1) * n]);
        s[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut t = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        let g2 = gamma[i] * gamma[i];
        for j in 0..n {
            t[(i, j)] = if i == j { -g2 } else { g2 * s[i * n + j] };
        }
    }
    let exit: Vec<f64> = (0..n).map(|i| gamma[i] * gamma[i] * s[i * n + i]).collect();
    let sub = DenseSubgen::factored(&t)?;
    let us = linalg::moment_vectors(&sub, target.l())?;
    let mu = linalg::moments_from_vectors(&alpha, &us);
    let mut mu_bar = vec![0.0; mu.len()];
    let mut total = moment_terms(&mu, target, &mut mu_bar);

    let Some(grad) = grad else {
        total += shape_terms(&sub, &alpha, &exit, target, None);
        return Ok(total);
    };
    let mut alpha_bar = vec![0.0; n];
    let mut t_bar = sub.zero_grad();
    linalg::moment_adjoint(&sub, &alpha, &us, &mu_bar, &mut alpha_bar, &mut t_bar)?;
    total += shape_terms(&sub, &alpha, &exit, target, Some((&mut alpha_bar, &mut t_bar)));

    let (ga, rest) = grad.split_at_mut(n);
    let (gg, gz) = rest.split_at_mut(n);
    softmax_backward(&alpha, &alpha_bar, ga);
    let mut s_bar = vec![0.0; n];
    for i in 0..n {
        let g2 = gamma[i] * gamma[i];
        let mut dg2 = -t_bar[(i, i)];
        for j in 0..n {
            if j == i {
                s_bar[j] = 0.0;
            } else {
                dg2 += t_bar[(i, j)] * s[i * n + j];
                s_bar[j] = g2 * t_bar[(i, j)];
            }
        }
        gg[i] = 2.0 * gamma[i] * dg2;
        softmax_backward(&s[i * n..(i + 1) * n], &s_bar, &mut gz[i * n..(i + 1) * n]);
    }
    Ok(total)
}

/// `out = J_softmax^T ybar = y o (ybar - y . ybar)`.
fn softmax_backward(y: &[f64], ybar: &[f64], out: &mut [f64]) {
    let inner = linalg::dot(y, ybar);
    for ((o, yi), yb) in out.iter_mut().zip(y).zip(ybar) {
        *o = yi * (yb - inner);
    }
}

fn coxian(n: usize, flat: &[f64], target: &FitTarget, grad: Option<&mut [f64]>) -> Result<f64> {
    let (gamma, u) = flat.split_at(n);
    let rates: Vec<f64> = gamma.iter().map(|g| g * g).collect();
    let p: Vec<f64> = u.iter().map(|&v| sigmoid(v)).collect();
    let upper: Vec<f64> = p.iter().zip(&rates).map(|(pi, l)| pi * l).collect();
    let exit: Vec<f64> = (0..n)
        .map(|i| if i + 1 < n { sigmoid(-u[i]) * rates[i] } else { rates[i] })
        .collect();
    let sub = BidiagonalSubgen {
        rates: &rates,
        upper: &upper,
    };
    let mut alpha = vec![0.0; n];
    alpha[0] = 1.0;
    let us = linalg::moment_vectors(&sub, target.l())?;
    let mu = linalg::moments_from_vectors(&alpha, &us);
    let mut mu_bar = vec![0.0; mu.len()];
    let mut total = moment_terms(&mu, target, &mut mu_bar);

    let Some(grad) = grad else {
        total += shape_terms(&sub, &alpha, &exit, target, None);
        return Ok(total);
    };
    let mut alpha_bar = vec![0.0; n];
    let mut t_bar = sub.zero_grad();
    linalg::moment_adjoint(&sub, &alpha, &us, &mu_bar, &mut alpha_bar, &mut t_bar)?;
    total += shape_terms(&sub, &alpha, &exit, target, Some((&mut alpha_bar, &mut t_bar)));

    let (gg, gu) = grad.split_at_mut(n);
    for i in 0..n {
        let mut rate_bar = -t_bar.diag[i];
        if i + 1 < n {
            rate_bar += p[i] * t_bar.upper[i];
            let p_bar = rates[i] * t_bar.upper[i];
            gu[i] = p_bar * p[i] * sigmoid(-u[i]);
        }
        gg[i] = 2.0 * gamma[i] * rate_bar;
    }
    Ok(total)
}

/// Rising factorial `d (d+1) ... (d+i-1)` for `i = 1..=l`.
fn rising_factorials(d: usize, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l);
    let mut acc = 1.0;
    for i in 0..l {
        acc *= (d + i) as f64;
        out.push(acc);
    }
    out
}

/// `P(Erlang(d, rate) <= x)` with `z = rate x`, i.e. `P(Poisson(z) >= d)`.
pub(crate) fn erlang_cdf(d: usize, z: f64) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    if z < d as f64 {
        // Upper Poisson tail; terms decrease from k = d on.
        let mut term = poisson_pmf(d, z);
        let mut sum = 0.0;
        let mut k = d;
        while term > 0.0 {
            sum += term;
            k += 1;
            term *= z / k as f64;
            if term < 1e-17 * sum {
                break;
            }
        }
        sum.min(1.0)
    } else {
        // Lower tail, summed downward from k = d - 1.
        let mut term = poisson_pmf(d - 1, z);
        let mut sum = 0.0;
        for k in (0..d).rev() {
            sum += term;
            term *= k as f64 / z;
        }
        (1.0 - sum).max(0.0)
    }
}

fn hyper_erlang(blocks: &[usize], flat: &[f64], target: &FitTarget, grad: Option<&mut [f64]>) -> Result<f64> {
    let k = blocks.len();
    let (beta, delta) = flat.split_at(k);
    let omega = softmax(beta);
    let rates: Vec<f64> = delta.iter().map(|d| d * d).collect();
    if let Some(j) = rates.iter().position(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Singular {
            column: j,
            pivot: rates[j],
        });
    }
    let l = target.l();
    let q = target.q;
    // Per-branch moments r_{j,i} lambda_j^{-i}.
    let branch: Vec<Vec<f64>> = blocks
        .iter()
        .zip(&rates)
        .map(|(&d, &lam)| {
            let mut inv = 1.0;
            rising_factorials(d, l)
                .into_iter()
                .map(|r| {
                    inv /= lam;
                    r * inv
                })
                .collect()
        })
        .collect();
    let mu: Vec<f64> = (0..l).map(|i| (0..k).map(|j| omega[j] * branch[j][i]).sum()).collect();
    let mut mu_bar = vec![0.0; l];
    let mut total = moment_terms(&mu, target, &mut mu_bar);

    let mut omega_bar = vec![0.0; k];
    let mut rate_bar = vec![0.0; k];
    for p in &target.cdf_points {
        let mut f = 0.0;
        for j in 0..k {
            f += omega[j] * erlang_cdf(blocks[j], rates[j] * p.x);
        }
        let resid = f - p.y;
        total += q * p.weight * resid * resid;
        if grad.is_some() {
            let seed = 2.0 * q * p.weight * resid;
            for j in 0..k {
                let z = rates[j] * p.x;
                omega_bar[j] += seed * erlang_cdf(blocks[j], z);
                rate_bar[j] += seed * omega[j] * p.x * poisson_pmf(blocks[j] - 1, z);
            }
        }
    }
    for p in &target.pdf_points {
        let mut f = 0.0;
        for j in 0..k {
            f += omega[j] * rates[j] * poisson_pmf(blocks[j] - 1, rates[j] * p.x);
        }
        let resid = f - p.y;
        total += q * p.weight * resid * resid;
        if grad.is_some() {
            let seed = 2.0 * q * p.weight * resid;
            for j in 0..k {
                let z = rates[j] * p.x;
                let pm = poisson_pmf(blocks[j] - 1, z);
                omega_bar[j] += seed * rates[j] * pm;
                rate_bar[j] += seed * omega[j] * pm * (blocks[j] as f64 - z);
            }
        }
    }

    let Some(grad) = grad else {
        return Ok(total);
    };
    for i in 0..l {
        for j in 0..k {
            omega_bar[j] += mu_bar[i] * branch[j][i];
            rate_bar[j] -= mu_bar[i] * omega[j] * (i + 1) as f64 * branch[j][i] / rates[j];
        }
    }
    let (gb, gd) = grad.split_at_mut(k);
    softmax_backward(&omega, &omega_bar, gb);
    for j in 0..k {
        gd[j] = 2.0 * delta[j] * rate_bar[j];
    }
    Ok(total)
}
