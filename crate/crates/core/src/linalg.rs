//! Dense and bidiagonal linear algebra kernels used by the moment, CDF and
//! queue computations.
//!
//! Everything here works on plain slices so the optimizer can run the same
//! code for the dense (general) and bidiagonal (Coxian) families. The
//! [`Subgenerator`] trait is the seam: moment solves, uniformization and
//! their adjoints are written once against it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Factorization fails when a pivot falls below this fraction of the
/// largest matrix entry.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

/// Absolute truncation error of the Poisson series used by uniformization.
pub const UNIFORMIZATION_TOLERANCE: f64 = 1e-13;

/// LU factorization with partial pivoting (`P A = L U`).
#[derive(Debug, Clone)]
pub struct Lu {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "LU needs a square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let scale = a.amax();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !best.is_finite() || best <= PIVOT_TOLERANCE * scale || best == 0.0 {
                return Err(Error::Singular { column: k, pivot: best });
            }
            if p != k {
                lu.swap_rows(p, k);
                perm.swap(p, k);
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                lu[(i, k)] /= pivot;
            }
            for j in k + 1..n {
                let ukj = lu[(k, j)];
                if ukj != 0.0 {
                    for i in k + 1..n {
                        let lik = lu[(i, k)];
                        lu[(i, j)] -= lik * ukj;
                    }
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let lu = &self.lu;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= lu[(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= lu[(i, j)] * x[j];
            }
            x[i] = acc / lu[(i, i)];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let lu = &self.lu;
        // U^T z = b
        let mut z = b.to_vec();
        for i in 0..n {
            let mut acc = z[i];
            for j in 0..i {
                acc -= lu[(j, i)] * z[j];
            }
            z[i] = acc / lu[(i, i)];
        }
        // L^T w = z
        for i in (0..n).rev() {
            let mut acc = z[i];
            for j in i + 1..n {
                acc -= lu[(j, i)] * z[j];
            }
            z[i] = acc;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }

    /// Solves `X A = B` row by row, i.e. `X = B A^{-1}`.
    pub fn solve_right(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(b.nrows(), b.ncols());
        let mut row = vec![0.0; b.ncols()];
        for r in 0..b.nrows() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = b[(r, c)];
            }
            let sol = self.solve_transpose(&row);
            for (c, v) in sol.into_iter().enumerate() {
                x[(r, c)] = v;
            }
        }
        x
    }
}

/// Poisson(rate) probabilities `P(N = 0..=R)`, truncated so the neglected
/// right tail is below `tol`.
pub fn poisson_weights(rate: f64, tol: f64) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0];
    }
    let ln_rate = rate.ln();
    let mut log_term = -rate;
    let mut weights = vec![log_term.exp()];
    let mut a = 0usize;
    loop {
        a += 1;
        log_term += ln_rate - (a as f64).ln();
        let term = log_term.exp();
        weights.push(term);
        if (a as f64) > rate {
            let ratio = rate / (a as f64 + 1.0);
            if term * ratio / (1.0 - ratio) < tol {
                break;
            }
        }
    }
    weights
}

/// Poisson probability mass `P(N = k)` for `N ~ Poisson(rate)`.
pub fn poisson_pmf(k: usize, rate: f64) -> f64 {
    if rate <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (-rate + k as f64 * rate.ln() - ln_factorial(k)).exp()
}

pub fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// Kronecker product.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Operations on a PH subgenerator `T` needed by the moment and
/// uniformization kernels, together with a gradient accumulator restricted
/// to the structural nonzeros of `T`.
pub trait Subgenerator {
    type Grad;

    fn dim(&self) -> usize;
    /// `max_i |T_ii|`.
    fn uniformization_rate(&self) -> f64;
    /// `out = T x`
    fn mul(&self, x: &[f64], out: &mut [f64]);
    /// `out = T^T x`
    fn mul_t(&self, x: &[f64], out: &mut [f64]);
    /// Solves `(-T) x = b`.
    fn solve_neg(&self, b: &[f64]) -> Result<Vec<f64>>;
    /// Solves `(-T)^T x = b`.
    fn solve_neg_t(&self, b: &[f64]) -> Result<Vec<f64>>;
    fn zero_grad(&self) -> Self::Grad;
    /// `grad += scale * x y^T`, restricted to the sparsity pattern of `T`.
    fn add_outer(&self, grad: &mut Self::Grad, scale: f64, x: &[f64], y: &[f64]);
}

/// Dense subgenerator with an optional LU factorization of `-T`.
#[derive(Debug, Clone)]
pub struct DenseSubgen<'a> {
    t: &'a DMatrix<f64>,
    neg_lu: Option<Lu>,
}

impl<'a> DenseSubgen<'a> {
    pub fn new(t: &'a DMatrix<f64>) -> Self {
        DenseSubgen { t, neg_lu: None }
    }

    pub fn factored(t: &'a DMatrix<f64>) -> Result<Self> {
        let lu = Lu::new(&(-t))?;
        Ok(DenseSubgen { t, neg_lu: Some(lu) })
    }

    fn lu(&self) -> Result<&Lu> {
        self.neg_lu
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("subgenerator was not factored".into()))
    }
}

impl Subgenerator for DenseSubgen<'_> {
    type Grad = DMatrix<f64>;

    fn dim(&self) -> usize {
        self.t.nrows()
    }

    fn uniformization_rate(&self) -> f64 {
        self.t.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for i in 0..n {
                out[i] += self.t[(i, j)] * xj;
            }
        }
    }

    fn mul_t(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (j, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.t[(i, j)] * x[i];
            }
            *o = acc;
        }
    }

    fn solve_neg(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.lu()?.solve(b))
    }

    fn solve_neg_t(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.lu()?.solve_transpose(b))
    }

    fn zero_grad(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }

    fn add_outer(&self, grad: &mut DMatrix<f64>, scale: f64, x: &[f64], y: &[f64]) {
        let n = self.dim();
        for j in 0..n {
            let yj = scale * y[j];
            if yj == 0.0 {
                continue;
            }
            for i in 0..n {
                grad[(i, j)] += x[i] * yj;
            }
        }
    }
}

/// Upper-bidiagonal subgenerator: `T_ii = -rates[i]`, `T_{i,i+1} = upper[i]`.
#[derive(Debug, Clone)]
pub struct BidiagonalSubgen<'a> {
    pub rates: &'a [f64],
    pub upper: &'a [f64],
}

/// Gradient with respect to the diagonal and superdiagonal of a bidiagonal `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BidiagonalGrad {
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BidiagonalSubgen<'_> {
    fn check(&self) -> Result<()> {
        for (i, &r) in self.rates.iter().enumerate() {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::Singular { column: i, pivot: r });
            }
        }
        Ok(())
    }
}

impl Subgenerator for BidiagonalSubgen<'_> {
    type Grad = BidiagonalGrad;

    fn dim(&self) -> usize {
        self.rates.len()
    }

    fn uniformization_rate(&self) -> f64 {
        self.rates.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut v = -self.rates[i] * x[i];
            if i + 1 < n {
                v += self.upper[i] * x[i + 1];
            }
            out[i] = v;
        }
    }

    fn mul_t(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut v = -self.rates[i] * x[i];
            if i > 0 {
                v += self.upper[i - 1] * x[i - 1];
            }
            out[i] = v;
        }
    }

    fn solve_neg(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check()?;
        let n = self.dim();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = b[i];
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            }
            x[i] = acc / self.rates[i];
        }
        Ok(x)
    }

    fn solve_neg_t(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check()?;
        let n = self.dim();
        let mut x = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            if i > 0 {
                acc += self.upper[i - 1] * x[i - 1];
            }
            x[i] = acc / self.rates[i];
        }
        Ok(x)
    }

    fn zero_grad(&self) -> BidiagonalGrad {
        let n = self.dim();
        BidiagonalGrad {
            diag: vec![0.0; n],
            upper: vec![0.0; n.saturating_sub(1)],
        }
    }

    fn add_outer(&self, grad: &mut BidiagonalGrad, scale: f64, x: &[f64], y: &[f64]) {
        let n = self.dim();
        for i in 0..n {
            grad.diag[i] += scale * x[i] * y[i];
            if i + 1 < n {
                grad.upper[i] += scale * x[i] * y[i + 1];
            }
        }
    }
}

/// The vectors `u_k = (-T)^{-k} 1` for `k = 1..=l`, from `l` sequential solves
/// on a single factorization.
pub fn moment_vectors<S: Subgenerator>(sub: &S, l: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(l);
    let mut prev = vec![1.0; sub.dim()];
    for _ in 0..l {
        let next = sub.solve_neg(&prev)?;
        out.push(next.clone());
        prev = next;
    }
    Ok(out)
}

/// Raw moments `m_k = k! alpha . u_k` from the vectors of [`moment_vectors`].
pub fn moments_from_vectors(alpha: &[f64], us: &[Vec<f64>]) -> Vec<f64> {
    let mut fact = 1.0;
    us.iter()
        .enumerate()
        .map(|(k, u)| {
            fact *= (k + 1) as f64;
            fact * dot(alpha, u)
        })
        .collect()
}

/// Reverse-mode sweep through the moment solves.
///
/// `moment_bar[k]` is `dL/dm_{k+1}`. Accumulates `dL/dalpha` into
/// `alpha_bar` and `dL/dT` into `grad`.
pub fn moment_adjoint<S: Subgenerator>(
    sub: &S,
    alpha: &[f64],
    us: &[Vec<f64>],
    moment_bar: &[f64],
    alpha_bar: &mut [f64],
    grad: &mut S::Grad,
) -> Result<()> {
    let n = sub.dim();
    let l = us.len();
    let mut scaled = Vec::with_capacity(l);
    let mut fact = 1.0;
    for (k, &g) in moment_bar.iter().enumerate().take(l) {
        fact *= (k + 1) as f64;
        scaled.push(g * fact);
    }
    for (k, u) in us.iter().enumerate() {
        let g = scaled[k];
        for i in 0..n {
            alpha_bar[i] += g * u[i];
        }
    }
    let mut ubar = vec![0.0; n];
    for k in (0..l).rev() {
        let g = scaled[k];
        for i in 0..n {
            ubar[i] += g * alpha[i];
        }
        let lambda = sub.solve_neg_t(&ubar)?;
        // u_k = (-T)^{-1} u_{k-1}  =>  dT += lambda u_k^T
        sub.add_outer(grad, 1.0, &lambda, &us[k]);
        ubar = lambda;
    }
    Ok(())
}

/// `alpha e^{T x} r` by uniformization.
pub fn expm_bilinear<S: Subgenerator>(sub: &S, alpha: &[f64], r: &[f64], x: f64) -> f64 {
    let q = sub.uniformization_rate();
    if x == 0.0 || q == 0.0 {
        return dot(alpha, r);
    }
    let weights = poisson_weights(q * x, UNIFORMIZATION_TOLERANCE);
    let n = sub.dim();
    let mut w = r.to_vec();
    let mut tw = vec![0.0; n];
    let mut acc = 0.0;
    for (a, &pa) in weights.iter().enumerate() {
        if a > 0 {
            sub.mul(&w, &mut tw);
            for i in 0..n {
                w[i] += tw[i] / q;
            }
        }
        acc += pa * dot(alpha, &w);
    }
    acc
}

/// `e^{T x} v` by uniformization.
pub fn expm_action<S: Subgenerator>(sub: &S, v: &[f64], x: f64) -> Vec<f64> {
    let n = sub.dim();
    let q = sub.uniformization_rate();
    if x == 0.0 || q == 0.0 {
        return v.to_vec();
    }
    let weights = poisson_weights(q * x, UNIFORMIZATION_TOLERANCE);
    let mut w = v.to_vec();
    let mut tw = vec![0.0; n];
    let mut out = vec![0.0; n];
    for (a, &pa) in weights.iter().enumerate() {
        if a > 0 {
            sub.mul(&w, &mut tw);
            for i in 0..n {
                w[i] += tw[i] / q;
            }
        }
        for i in 0..n {
            out[i] += pa * w[i];
        }
    }
    out
}

/// `v e^{T x}` (row vector action) by uniformization on `T^T`.
pub fn expm_left_action<S: Subgenerator>(sub: &S, v: &[f64], x: f64) -> Vec<f64> {
    let n = sub.dim();
    let q = sub.uniformization_rate();
    if x == 0.0 || q == 0.0 {
        return v.to_vec();
    }
    let weights = poisson_weights(q * x, UNIFORMIZATION_TOLERANCE);
    let mut w = v.to_vec();
    let mut tw = vec![0.0; n];
    let mut out = vec![0.0; n];
    for (a, &pa) in weights.iter().enumerate() {
        if a > 0 {
            sub.mul_t(&w, &mut tw);
            for i in 0..n {
                w[i] += tw[i] / q;
            }
        }
        for i in 0..n {
            out[i] += pa * w[i];
        }
    }
    out
}

/// Value of `y = alpha e^{T x} r` and reverse-mode accumulation of
/// `ybar * dy` into `alpha_bar`, `r_bar` and `grad` (w.r.t. `T`).
///
/// The uniformization rate is held fixed while differentiating; the series
/// equals `e^{Tx}` for any rate at least `max |T_ii|`, so this is exact.
#[allow(clippy::too_many_arguments)]
pub fn expm_bilinear_adjoint<S: Subgenerator>(
    sub: &S,
    alpha: &[f64],
    r: &[f64],
    x: f64,
    ybar: f64,
    alpha_bar: &mut [f64],
    r_bar: &mut [f64],
    grad: &mut S::Grad,
) -> f64 {
    let n = sub.dim();
    let q = sub.uniformization_rate();
    if x == 0.0 || q == 0.0 {
        for i in 0..n {
            alpha_bar[i] += ybar * r[i];
            r_bar[i] += ybar * alpha[i];
        }
        return dot(alpha, r);
    }
    let weights = poisson_weights(q * x, UNIFORMIZATION_TOLERANCE);
    let terms = weights.len();
    // Forward: w_0 = r, w_{a+1} = P w_a with P = I + T/q.
    let mut ws: Vec<Vec<f64>> = Vec::with_capacity(terms);
    ws.push(r.to_vec());
    let mut tw = vec![0.0; n];
    for a in 1..terms {
        let prev = &ws[a - 1];
        sub.mul(prev, &mut tw);
        let next: Vec<f64> = prev.iter().zip(&tw).map(|(p, t)| p + t / q).collect();
        ws.push(next);
    }
    let mut value = 0.0;
    for (a, w) in ws.iter().enumerate() {
        let pa = weights[a];
        value += pa * dot(alpha, w);
        for i in 0..n {
            alpha_bar[i] += ybar * pa * w[i];
        }
    }
    // Reverse: hat_a = ybar pi_a alpha + P^T hat_{a+1}; dP += hat_{a+1} w_a^T.
    let mut hat: Vec<f64> = alpha.iter().map(|v| ybar * weights[terms - 1] * v).collect();
    for a in (0..terms - 1).rev() {
        sub.add_outer(grad, 1.0 / q, &hat, &ws[a]);
        sub.mul_t(&hat, &mut tw);
        for i in 0..n {
            hat[i] += tw[i] / q + ybar * weights[a] * alpha[i];
        }
    }
    for i in 0..n {
        r_bar[i] += hat[i];
    }
    value
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lu_solves_both_orientations() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        let lu = Lu::new(&a).unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = lu.solve(&b);
        let ax = &a * nalgebra::DVector::from_vec(x);
        for i in 0..3 {
            assert_relative_eq!(ax[i], b[i], epsilon = 1e-14);
        }
        let y = lu.solve_transpose(&b);
        let aty = a.transpose() * nalgebra::DVector::from_vec(y);
        for i in 0..3 {
            assert_relative_eq!(aty[i], b[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn lu_pivots_through_zero_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let lu = Lu::new(&a).unwrap();
        assert_eq!(lu.solve(&[3.0, 4.0]), vec![4.0, 3.0]);
    }

    #[test]
    fn lu_rejects_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(Lu::new(&a), Err(Error::Singular { .. })));
    }

    #[test]
    fn poisson_weights_sum_to_one() {
        for rate in [0.0, 0.3, 5.0, 80.0, 900.0] {
            let w = poisson_weights(rate, 1e-13);
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-11, "rate {rate}: {s}");
        }
    }

    #[test]
    fn bidiagonal_matches_dense() {
        let rates = [2.0, 3.0, 1.5];
        let upper = [1.0, 0.5];
        let bi = BidiagonalSubgen {
            rates: &rates,
            upper: &upper,
        };
        let t = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.0, 0.0, -3.0, 0.5, 0.0, 0.0, -1.5]);
        let dense = DenseSubgen::factored(&t).unwrap();
        let b = [0.3, -1.0, 2.0];
        let (x1, x2) = (bi.solve_neg(&b).unwrap(), dense.solve_neg(&b).unwrap());
        let (y1, y2) = (bi.solve_neg_t(&b).unwrap(), dense.solve_neg_t(&b).unwrap());
        for i in 0..3 {
            assert_relative_eq!(x1[i], x2[i], epsilon = 1e-14);
            assert_relative_eq!(y1[i], y2[i], epsilon = 1e-14);
        }
        let (mut o1, mut o2) = ([0.0; 3], [0.0; 3]);
        bi.mul_t(&b, &mut o1);
        dense.mul_t(&b, &mut o2);
        assert_eq!(o1, o2);
    }

    #[test]
    fn kron_dimensions() {
        let a = DMatrix::from_element(2, 3, 1.0);
        let b = DMatrix::from_element(4, 5, 2.0);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (8, 15));
        assert_eq!(k.sum(), 2.0 * 6.0 * 20.0);
    }
}
