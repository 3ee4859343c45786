//! Stationary queue length of the PH/PH/1 queue by the matrix-geometric
//! method, and the moment-count study built on it.
//!
//! Level `k >= 1` holds `k` customers; its phases are pairs
//! `(arrival phase, service phase)` indexed `i * n_s + j`. Level 0 tracks
//! only the arrival phase.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, Table};
use crate::linalg::{kron, Lu};
use crate::metrics;
use crate::objective::FitTarget;
use crate::optimizer::{self, FitConfig};
use crate::ph::MarkovianPH;

pub const DEFAULT_R_TOLERANCE: f64 = 1e-12;
pub const MAX_R_ITERATIONS: usize = 1_000_000;

/// A PH/PH/1 FCFS queue.
#[derive(Debug, Clone, PartialEq)]
pub struct QbdModel {
    pub arrival: MarkovianPH,
    pub service: MarkovianPH,
}

impl QbdModel {
    pub fn new(arrival: MarkovianPH, service: MarkovianPH) -> Result<Self> {
        for (name, ph) in [("arrival", &arrival), ("service", &service)] {
            if let Some(v) = ph.validate().first() {
                return Err(Error::InvalidArgument(format!("{name} distribution is invalid: {v}")));
            }
        }
        Ok(QbdModel { arrival, service })
    }

    /// Mean service time over mean inter-arrival time.
    pub fn rho(&self) -> Result<f64> {
        Ok(self.service.mean()? / self.arrival.mean()?)
    }
}

/// Generator blocks of the level process.
#[derive(Debug, Clone, PartialEq)]
pub struct QbdBlocks {
    /// Level up.
    pub a0: DMatrix<f64>,
    /// Within a level.
    pub a1: DMatrix<f64>,
    /// Level down.
    pub a2: DMatrix<f64>,
    pub b00: DMatrix<f64>,
    pub b01: DMatrix<f64>,
    pub b10: DMatrix<f64>,
}

pub fn build_blocks(arrival: &MarkovianPH, service: &MarkovianPH) -> QbdBlocks {
    let s = arrival.t();
    let v = service.t();
    let s0 = arrival.exit_vector();
    let v0 = service.exit_vector();
    let ia = DMatrix::<f64>::identity(arrival.n(), arrival.n());
    let is = DMatrix::<f64>::identity(service.n(), service.n());
    let s0a = &s0 * arrival.alpha().transpose();
    let v0b = &v0 * service.alpha().transpose();
    let beta_row = DMatrix::from_row_slice(1, service.n(), service.alpha().as_slice());
    let v0_col = DMatrix::from_column_slice(service.n(), 1, v0.as_slice());
    QbdBlocks {
        a0: kron(&s0a, &is),
        a1: kron(s, &is) + kron(&ia, v),
        a2: kron(&ia, &v0b),
        b00: s.clone(),
        b01: kron(&s0a, &beta_row),
        b10: kron(&ia, &v0_col),
    }
}

/// Minimal nonnegative solution of `A0 + R A1 + R^2 A2 = 0` by the
/// iteration `R <- -(A0 + R^2 A2) A1^{-1}` from `R = 0`.
pub fn solve_r(blocks: &QbdBlocks, tol: f64) -> Result<DMatrix<f64>> {
    let m = blocks.a1.nrows();
    let neg_inv = -Lu::new(&blocks.a1)?.solve_right(&DMatrix::identity(m, m));
    let mut r = DMatrix::<f64>::zeros(m, m);
    let mut step = f64::INFINITY;
    for _ in 0..MAX_R_ITERATIONS {
        let next = (&blocks.a0 + &r * &r * &blocks.a2) * &neg_inv;
        step = (&next - &r).amax();
        r = next;
        if !step.is_finite() {
            break;
        }
        if step < tol {
            return Ok(r);
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_R_ITERATIONS,
        last_step: step,
    })
}

/// Stationary solution: level-0 and level-1 vectors plus `R`.
#[derive(Debug, Clone)]
pub struct Stationary {
    pub pi0: DVector<f64>,
    pub pi1: DVector<f64>,
    pub r: DMatrix<f64>,
}

impl Stationary {
    /// `p_0..=p_{k_max}` with `p_k = pi_k 1` and `pi_{k+1} = pi_k R`.
    pub fn pmf(&self, k_max: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(k_max + 1);
        out.push(self.pi0.sum());
        let mut pi = self.pi1.transpose();
        for _ in 1..=k_max {
            out.push(pi.sum());
            pi = &pi * &self.r;
        }
        out
    }

    /// Total mass of all levels, with the closed-form tail.
    pub fn total_mass(&self) -> Result<f64> {
        Ok(self.pi0.sum() + dot(&self.pi1, &geometric_tail(&self.r)?))
    }
}

fn dot(a: &DVector<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(I - R)^{-1} 1`.
fn geometric_tail(r: &DMatrix<f64>) -> Result<Vec<f64>> {
    let m = r.nrows();
    let i_minus_r = DMatrix::identity(m, m) - r;
    Ok(Lu::new(&i_minus_r)?.solve(&vec![1.0; m]))
}

pub fn solve(model: &QbdModel, tol: f64) -> Result<Stationary> {
    let rho = model.rho()?;
    if !(rho < 1.0) {
        return Err(Error::Unstable(rho));
    }
    let blocks = build_blocks(&model.arrival, &model.service);
    let r = solve_r(&blocks, tol)?;
    let na = model.arrival.n();
    let m = blocks.a1.nrows();
    let size = na + m;
    // Balance: [pi0 pi1] [[B00, B01], [B10, A1 + R A2]] = 0.
    let mut sys = DMatrix::zeros(size, size);
    sys.view_mut((0, 0), (na, na)).copy_from(&blocks.b00);
    sys.view_mut((0, na), (na, m)).copy_from(&blocks.b01);
    sys.view_mut((na, 0), (m, na)).copy_from(&blocks.b10);
    sys.view_mut((na, na), (m, m))
        .copy_from(&(&blocks.a1 + &r * &blocks.a2));
    // One balance equation is redundant; replace it with normalization.
    let tail = geometric_tail(&r)?;
    for i in 0..na {
        sys[(i, 0)] = 1.0;
    }
    for (i, t) in tail.iter().enumerate() {
        sys[(na + i, 0)] = *t;
    }
    let mut rhs = vec![0.0; size];
    rhs[0] = 1.0;
    let x = Lu::new(&sys)?.solve_transpose(&rhs);
    Ok(Stationary {
        pi0: DVector::from_column_slice(&x[..na]),
        pi1: DVector::from_column_slice(&x[na..]),
        r,
    })
}

/// Queue-length probabilities `p_0..=p_{k_max}`.
pub fn stationary_pmf(model: &QbdModel, k_max: usize, tol: f64) -> Result<Vec<f64>> {
    Ok(solve(model, tol)?.pmf(k_max))
}

/// One moment count of a [`queue_study`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyCell {
    pub l: usize,
    pub p_hat: Option<Vec<f64>>,
    pub abs_error: Option<Vec<f64>>,
    pub accumulated: Option<Vec<f64>>,
    pub arrival_loss: Option<f64>,
    pub service_loss: Option<f64>,
    /// Why this cell has no result.
    pub error: Option<String>,
}

/// True queue-length PMF and its approximations from moment fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueStudy {
    pub rho: f64,
    pub k_max: usize,
    pub p_true: Vec<f64>,
    pub cells: Vec<StudyCell>,
}

impl QueueStudy {
    pub fn cell(&self, l: usize) -> Option<&StudyCell> {
        self.cells.iter().find(|c| c.l == l)
    }

    /// `k, p_true, p_hat_l<l>...`; failed cells leave empty cells.
    pub fn pmf_table(&self) -> Result<Table> {
        self.table("k", "p_true", |c| c.p_hat.as_ref(), "p_hat_l", Some(&self.p_true))
    }

    /// `j, accerr_l<l>...`.
    pub fn accumulated_table(&self) -> Result<Table> {
        self.table("j", "", |c| c.accumulated.as_ref(), "accerr_l", None)
    }

    fn table(
        &self,
        index: &str,
        first: &str,
        column: impl Fn(&StudyCell) -> Option<&Vec<f64>>,
        prefix: &str,
        leading: Option<&Vec<f64>>,
    ) -> Result<Table> {
        let mut header = vec![index.to_string()];
        if leading.is_some() {
            header.push(first.to_string());
        }
        header.extend(self.cells.iter().map(|c| format!("{prefix}{}", c.l)));
        let mut t = Table::new(header);
        for k in 0..=self.k_max {
            let mut row = vec![k.to_string()];
            if let Some(v) = leading {
                row.push(fmt_f64(v[k]));
            }
            row.extend(
                self.cells
                    .iter()
                    .map(|c| column(c).map(|v| fmt_f64(v[k])).unwrap_or_default()),
            );
            t.push(row)?;
        }
        Ok(t)
    }
}

/// Fits both distributions of the queue with their first `l` moments for
/// each `l`, then compares the resulting queue-length distributions with
/// the true one. Failures of individual cells are recorded, not raised.
pub fn queue_study(
    arrival: &MarkovianPH,
    service: &MarkovianPH,
    l_values: &[usize],
    config: &FitConfig,
    k_max: usize,
) -> Result<QueueStudy> {
    let model = QbdModel::new(arrival.clone(), service.clone())?;
    let rho = model.rho()?;
    let p_true = stationary_pmf(&model, k_max, DEFAULT_R_TOLERANCE)?;
    let cells = l_values
        .par_iter()
        .map(|&l| match study_cell(arrival, service, l, config, &p_true, k_max) {
            Ok(cell) => cell,
            Err(e) => StudyCell {
                l,
                p_hat: None,
                abs_error: None,
                accumulated: None,
                arrival_loss: None,
                service_loss: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(QueueStudy {
        rho,
        k_max,
        p_true,
        cells,
    })
}

fn study_cell(
    arrival: &MarkovianPH,
    service: &MarkovianPH,
    l: usize,
    config: &FitConfig,
    p_true: &[f64],
    k_max: usize,
) -> Result<StudyCell> {
    let fit_one = |ph: &MarkovianPH| optimizer::fit(&FitTarget::from_moments(ph.moments(l)?)?, config);
    let a = fit_one(arrival)?;
    let s = fit_one(service)?;
    let p_hat = stationary_pmf(&QbdModel::new(a.ph, s.ph)?, k_max, DEFAULT_R_TOLERANCE)?;
    let abs_error: Vec<f64> = p_true.iter().zip(&p_hat).map(|(a, b)| (a - b).abs()).collect();
    let accumulated = metrics::accumulated_errors(p_true, &p_hat);
    Ok(StudyCell {
        l,
        p_hat: Some(p_hat),
        abs_error: Some(abs_error),
        accumulated: Some(accumulated),
        arrival_loss: Some(a.final_loss),
        service_loss: Some(s.final_loss),
        error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mm1(lambda: f64, mu: f64) -> QbdModel {
        QbdModel::new(MarkovianPH::exponential(lambda), MarkovianPH::exponential(mu)).unwrap()
    }

    #[test]
    fn scalar_blocks() {
        let b = build_blocks(&MarkovianPH::exponential(0.7), &MarkovianPH::exponential(1.0));
        assert_relative_eq!(b.a0[(0, 0)], 0.7);
        assert_relative_eq!(b.a1[(0, 0)], -1.7);
        assert_relative_eq!(b.a2[(0, 0)], 1.0);
    }

    #[test]
    fn mm1_r_and_pmf() {
        let m = mm1(0.7, 1.0);
        let b = build_blocks(&m.arrival, &m.service);
        let r = solve_r(&b, DEFAULT_R_TOLERANCE).unwrap();
        assert!((r[(0, 0)] - 0.7).abs() < 1e-10);
        let p = stationary_pmf(&m, 10, DEFAULT_R_TOLERANCE).unwrap();
        for (k, pk) in p.iter().enumerate() {
            assert!((pk - 0.3 * 0.7f64.powi(k as i32)).abs() < 1e-8);
        }
        let p = stationary_pmf(&mm1(0.5, 1.0), 0, DEFAULT_R_TOLERANCE).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn unstable_queue_is_rejected() {
        assert!(matches!(solve(&mm1(1.05, 1.0), 1e-12), Err(Error::Unstable(_))));
    }

    #[test]
    fn busy_probability_is_utilization() {
        let m = QbdModel::new(crate::cases::queue::arrival(), crate::cases::queue::service()).unwrap();
        assert!((m.rho().unwrap() - crate::cases::queue::RHO).abs() < 1e-12);
        let s = solve(&m, DEFAULT_R_TOLERANCE).unwrap();
        assert!((s.total_mass().unwrap() - 1.0).abs() < 1e-10);
        assert!((1.0 - s.pmf(0)[0] - crate::cases::queue::RHO).abs() < 1e-9);
    }
}
