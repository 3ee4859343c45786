//! Bundled worked examples: a queue whose moment fits are compared at
//! several moment counts, and a bimodal distribution fitted with and
//! without CDF points.

use crate::error::Result;
use crate::objective::{FitTarget, ShapePoint, DEFAULT_Q};
use crate::optimizer::FitConfig;
use crate::ph::MarkovianPH;
use crate::reparam::{hypererlang_markovian, Structure};

/// PH/PH/1 queue at utilization 0.7.
pub mod queue {
    use super::*;

    pub const RHO: f64 = 0.7;
    pub const L_VALUES: [usize; 4] = [2, 3, 4, 5];
    /// Truncation level of the reported queue-length tables.
    pub const K_MAX: usize = 200;

    /// Inter-arrival times with mean 1: a mixture of a short Erlang-2 and
    /// a long Erlang-3 branch.
    pub fn arrival() -> MarkovianPH {
        hypererlang_markovian(&[0.7, 0.3], &[4.0, 1.5], &[2, 3])
            .normalize_mean(1.0)
            .expect("valid mixture")
    }

    /// Service times with mean `RHO`: a fast exponential mixed with a slow
    /// Erlang-4 branch.
    pub fn service() -> MarkovianPH {
        hypererlang_markovian(&[0.6, 0.4], &[5.0, 2.0], &[1, 4])
            .normalize_mean(RHO)
            .expect("valid mixture")
    }

    /// Fitting setup for both distributions.
    pub fn config() -> FitConfig {
        FitConfig::new(Structure::Coxian { n: 10 })
            .with_population(1000)
            .with_max_epochs(30_000)
    }
}

/// Bimodal distribution with mean 1.
pub mod shape {
    use super::*;

    pub const MOMENTS: usize = 5;
    pub const CDF_POINTS: usize = 20;

    /// Equal mixture of Erlang-3 with mean 0.4 and Erlang-8 with mean 1.6.
    pub fn reference() -> MarkovianPH {
        hypererlang_markovian(&[0.5, 0.5], &[3.0 / 0.4, 8.0 / 1.6], &[3, 8])
    }

    /// CDF points at the reference's `(j - 1/2) / count` quantiles.
    pub fn cdf_points(count: usize) -> Result<Vec<ShapePoint>> {
        let r = reference();
        (1..=count)
            .map(|j| {
                let y = (j as f64 - 0.5) / count as f64;
                Ok(ShapePoint::new(r.quantile(y)?, y))
            })
            .collect()
    }

    /// First five moments of the reference plus `points` CDF points.
    pub fn target(points: usize) -> Result<FitTarget> {
        let t = FitTarget::from_moments(reference().moments(MOMENTS)?)?;
        if points == 0 {
            Ok(t)
        } else {
            t.with_cdf_points(cdf_points(points)?, DEFAULT_Q)
        }
    }

    pub fn config() -> FitConfig {
        FitConfig::new(Structure::HyperErlang {
            blocks: vec![3, 4, 6, 7],
        })
        .with_population(1000)
        .with_max_epochs(30_000)
    }
}
