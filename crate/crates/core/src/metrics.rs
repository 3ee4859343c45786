//! Evaluation metrics: per-moment MAPE, success rate, accumulated queue
//! error and KL divergence between PH densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ph::{MarkovianPH, MomentVector};

/// Densities are floored here inside the KL log ratio.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Per-instance fitting outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance: String,
    pub target: MomentVector,
    pub fitted: MomentVector,
    pub mape: Vec<f64>,
    pub max_mape: f64,
    pub wall_time: f64,
}

impl EvalRecord {
    pub fn new(
        instance: impl Into<String>,
        target: MomentVector,
        fitted: MomentVector,
        wall_time: f64,
    ) -> Result<Self> {
        let mape = mape(&target, &fitted)?;
        let max_mape = mape.iter().cloned().fold(0.0, f64::max);
        Ok(EvalRecord {
            instance: instance.into(),
            target,
            fitted,
            mape,
            max_mape,
            wall_time,
        })
    }

    pub fn is_accurate(&self, eta: f64) -> bool {
        self.max_mape <= eta
    }
}

/// `|m_i - fitted_i| / m_i * 100` for every moment.
pub fn mape(target: &[f64], fitted: &[f64]) -> Result<Vec<f64>> {
    if target.len() != fitted.len() {
        return Err(Error::Dimension(format!(
            "{} target moments but {} fitted",
            target.len(),
            fitted.len()
        )));
    }
    target
        .iter()
        .zip(fitted)
        .enumerate()
        .map(|(i, (&m, &f))| {
            if m > 0.0 {
                Ok((m - f).abs() / m * 100.0)
            } else {
                Err(Error::InvalidTarget(format!("target moment {} is {m}", i + 1)))
            }
        })
        .collect()
}

/// Percentage of records whose worst MAPE is at most `eta` percent.
pub fn success_rate(records: &[EvalRecord], eta: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("success rate of an empty record set".into()));
    }
    let ok = records.iter().filter(|r| r.is_accurate(eta)).count();
    Ok(100.0 * ok as f64 / records.len() as f64)
}

/// `sum_{i <= j} |p_i - p_hat_i|`.
pub fn accumulated_error(p: &[f64], p_hat: &[f64], j: usize) -> Result<f64> {
    if j >= p.len() || j >= p_hat.len() {
        return Err(Error::InvalidArgument(format!(
            "index {j} out of range for sequences of length {} and {}",
            p.len(),
            p_hat.len()
        )));
    }
    Ok(p.iter().zip(p_hat).take(j + 1).map(|(a, b)| (a - b).abs()).sum())
}

/// Accumulated error for every `j` at once.
pub fn accumulated_errors(p: &[f64], p_hat: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .zip(p_hat)
        .map(|(a, b)| {
            acc += (a - b).abs();
            acc
        })
        .collect()
}

/// Composite Simpson rule on `[0, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub x_max: f64,
    /// Even number of panels.
    pub panels: usize,
}

impl Quadrature {
    pub const DEFAULT_PANELS: usize = 10_000;
    /// Upper limit is the larger of the two distributions' quantile at this level.
    pub const DEFAULT_COVERAGE: f64 = 1.0 - 1e-8;

    /// Grid covering both distributions up to [`Quadrature::DEFAULT_COVERAGE`].
    pub fn covering(p: &MarkovianPH, q: &MarkovianPH) -> Result<Self> {
        let x_max = p
            .quantile(Self::DEFAULT_COVERAGE)?
            .max(q.quantile(Self::DEFAULT_COVERAGE)?);
        Ok(Quadrature {
            x_max,
            panels: Self::DEFAULT_PANELS,
        })
    }

    fn weights(&self) -> (f64, Vec<f64>) {
        let panels = self.panels + self.panels % 2;
        let h = self.x_max / panels as f64;
        let w = (0..=panels)
            .map(|i| {
                if i == 0 || i == panels {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                }
            })
            .map(|c| c * h / 3.0)
            .collect();
        (h, w)
    }
}

/// Numeric `KL(p || q) = int f_p log(f_p / f_q)` on the quadrature grid.
pub fn kl_divergence(p: &MarkovianPH, q: &MarkovianPH, grid: &Quadrature) -> f64 {
    let (h, weights) = grid.weights();
    let fp = p.pdf_grid(0.0, h, weights.len());
    let fq = q.pdf_grid(0.0, h, weights.len());
    weights
        .iter()
        .zip(fp.iter().zip(&fq))
        .map(|(w, (&a, &b))| {
            if a <= 0.0 {
                0.0
            } else {
                w * a * (a.max(DENSITY_FLOOR) / b.max(DENSITY_FLOOR)).ln()
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(max: f64) -> EvalRecord {
        EvalRecord::new("x", vec![1.0].into(), vec![1.0 + max / 100.0].into(), 0.0).unwrap()
    }

    #[test]
    fn mape_examples() {
        assert_relative_eq!(mape(&[100.0], &[101.0]).unwrap()[0], 1.0, epsilon = 1e-12);
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let m = mape(&[1.0, 2.0, 6.0], &[1.01, 1.98, 6.3]).unwrap();
        for (a, b) in m.iter().zip([1.0, 1.0, 5.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-9);
        }
        assert!(mape(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mape(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn success_rate_examples() {
        let recs: Vec<_> = [0.1, 0.3, 0.7].iter().map(|&m| record(m)).collect();
        assert_relative_eq!(success_rate(&recs, 0.5).unwrap(), 200.0 / 3.0, epsilon = 1e-9);
        let mut many: Vec<_> = (0..450).map(|_| record(0.0)).collect();
        many.extend((0..50).map(|_| record(5.0)));
        assert_relative_eq!(success_rate(&many, 1.0).unwrap(), 90.0);
        assert!(success_rate(&[], 1.0).is_err());
    }

    #[test]
    fn accumulated_error_examples() {
        assert_relative_eq!(
            accumulated_error(&[0.5, 0.5], &[0.6, 0.4], 1).unwrap(),
            0.2,
            epsilon = 1e-15
        );
        assert_eq!(accumulated_error(&[0.2, 0.8], &[0.2, 0.8], 1).unwrap(), 0.0);
        assert!(accumulated_error(&[0.5], &[0.5], 1).is_err());
    }

    #[test]
    fn kl_of_exponentials() {
        let p = MarkovianPH::exponential(1.0);
        let q = MarkovianPH::exponential(2.0);
        let grid = Quadrature::covering(&p, &q).unwrap();
        let kl = kl_divergence(&p, &q, &grid);
        assert!((kl - (0.5f64.ln() + 1.0)).abs() < 1e-4, "{kl}");
        assert!(kl_divergence(&p, &p, &grid).abs() < 1e-6);
    }
}
