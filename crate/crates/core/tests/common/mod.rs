#![allow(dead_code)]

use phfit::objective;
use phfit::reparam::Structure;
use phfit::{FitTarget, MarkovianPH, ShapePoint};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};

/// Random point in the unconstrained space of `structure`, away from the
/// degenerate `gamma = 0` corner.
pub fn random_flat<R: Rng + ?Sized>(structure: &Structure, rng: &mut R) -> Vec<f64> {
    let mut v = Vec::with_capacity(structure.dim());
    let normal = |k: usize, rng: &mut R, v: &mut Vec<f64>| {
        for _ in 0..k {
            v.push(StandardNormal.sample(rng));
        }
    };
    let rate = |k: usize, rng: &mut R, v: &mut Vec<f64>| {
        for _ in 0..k {
            let g: f64 = rng.random_range(0.5..2.0);
            v.push(if rng.random::<bool>() { g } else { -g });
        }
    };
    match structure {
        Structure::General { n } => {
            normal(*n, rng, &mut v);
            rate(*n, rng, &mut v);
            normal(n * n, rng, &mut v);
        }
        Structure::Coxian { n } => {
            rate(*n, rng, &mut v);
            normal(n - 1, rng, &mut v);
        }
        Structure::HyperErlang { blocks } => {
            normal(blocks.len(), rng, &mut v);
            rate(blocks.len(), rng, &mut v);
        }
    }
    v
}

pub fn random_structure<R: Rng + ?Sized>(family: phfit::Family, max_n: usize, rng: &mut R) -> Structure {
    let n = rng.random_range(1..=max_n);
    match family {
        phfit::Family::General => Structure::General { n },
        phfit::Family::Coxian => Structure::Coxian { n },
        phfit::Family::HyperErlang => {
            let k = rng.random_range(1..=n);
            Structure::HyperErlang {
                blocks: phfit::sampler::uniform_composition(n, k, rng),
            }
        }
    }
}

/// Moments of an unrelated random PH, optionally with CDF points taken
/// from yet another one so the residuals do not vanish.
pub fn random_target<R: Rng + ?Sized>(l: usize, cdf_points: usize, q: f64, rng: &mut R) -> FitTarget {
    let n = rng.random_range(1..=4);
    let source = phfit::sampler::sample_coxian(n, rng)
        .normalize_mean(rng.random_range(0.5..2.0))
        .unwrap();
    let mut t = FitTarget::from_moments(source.moments(l).unwrap()).unwrap();
    if cdf_points > 0 {
        let pts = (0..cdf_points)
            .map(|_| ShapePoint::new(rng.random_range(0.05..3.0), rng.random_range(0.05..0.95)))
            .collect();
        t = t.with_cdf_points(pts, q).unwrap();
    }
    t
}

/// One gradient component compared with its central difference.
#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientCheck {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs())
    }
}

/// Central differences with step `1e-6 max(1, |theta|)` for every component.
pub fn gradient_checks(structure: &Structure, flat: &[f64], target: &FitTarget) -> Vec<GradientCheck> {
    let mut grad = vec![0.0; flat.len()];
    objective::evaluate(structure, flat, target, Some(&mut grad)).unwrap();
    (0..flat.len())
        .map(|i| {
            let h = 1e-6 * flat[i].abs().max(1.0);
            let mut p = flat.to_vec();
            p[i] = flat[i] + h;
            let up = objective::evaluate(structure, &p, target, None).unwrap();
            p[i] = flat[i] - h;
            let down = objective::evaluate(structure, &p, target, None).unwrap();
            GradientCheck {
                index: i,
                analytic: grad[i],
                numeric: (up - down) / (2.0 * h),
            }
        })
        .collect()
}

/// Time-average number in system of a FCFS single-server queue, simulated
/// event by event for `arrivals` arrivals. The last bucket collects
/// everything above `k_max`.
pub fn simulate_queue<R: Rng + ?Sized>(
    arrival: &MarkovianPH,
    service: &MarkovianPH,
    arrivals: usize,
    k_max: usize,
    rng: &mut R,
) -> Vec<f64> {
    let a = arrival.sampler();
    let s = service.sampler();
    let mut occupancy = vec![0.0; k_max + 2];
    let mut now = 0.0;
    let mut in_system = 0usize;
    let mut next_arrival = a.sample(rng);
    let mut next_departure = f64::INFINITY;
    let mut seen = 0usize;
    while seen < arrivals {
        let t = next_arrival.min(next_departure);
        occupancy[in_system.min(k_max + 1)] += t - now;
        now = t;
        if next_arrival <= next_departure {
            seen += 1;
            in_system += 1;
            if in_system == 1 {
                next_departure = now + s.sample(rng);
            }
            next_arrival = now + a.sample(rng);
        } else {
            in_system -= 1;
            next_departure = if in_system > 0 {
                now + s.sample(rng)
            } else {
                f64::INFINITY
            };
        }
    }
    occupancy.iter().map(|o| o / now).collect()
}

/// Total-variation distance, with the mass beyond the shorter sequence
/// counted as a difference.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    let get = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    0.5 * (0..n).map(|i| (get(p, i) - get(q, i)).abs()).sum::<f64>()
}
