//! Multi-start gradient descent with population culling.
//!
//! A population of starting points is optimized in lockstep. At scheduled
//! epochs only the candidates with the lowest current loss survive. The run
//! stops when the best loss falls below `epsilon` or after `max_epochs`.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::objective::{self, FitTarget};
use crate::ph::MarkovianPH;
use crate::reparam::{Family, Params, Structure};

pub const DEFAULT_POPULATION: usize = 10_000;
pub const DEFAULT_MAX_EPOCHS: usize = 125_000;
pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const DEFAULT_STEP_SIZE: f64 = 0.01;
pub const DEFAULT_SEED: u64 = 1;
/// Environment variable capping the worker pool when no explicit cap is set.
pub const WORKERS_ENV: &str = "PHFIT_WORKERS";

/// `(epoch, candidates kept)` for the 10000-start reference setting.
pub const REFERENCE_SCHEDULE: [(usize, usize); 4] = [(1, 10_000), (500, 2_000), (5_000, 200), (15_000, 20)];

/// Range of initial rate parameters; squared rates span `[0.01, 10]`.
pub const INIT_RATE_PARAM: (f64, f64) = (0.1, 3.162_277_660_168_379_5);

/// Culling schedule: at each listed epoch keep only the given number of
/// best candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule(pub Vec<(usize, usize)>);

impl Schedule {
    pub fn reference() -> Self {
        Schedule(REFERENCE_SCHEDULE.to_vec())
    }

    /// The reference schedule with keep counts scaled to `population`
    /// starts. Steps beyond `max_epochs` and steps that would no longer
    /// shrink the population are dropped.
    pub fn scaled(population: usize, max_epochs: usize) -> Self {
        let base = REFERENCE_SCHEDULE[0].1 as f64;
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &(step, keep) in REFERENCE_SCHEDULE.iter() {
            if step > max_epochs {
                break;
            }
            let k = ((keep as f64 / base) * population as f64).round().max(1.0) as usize;
            let k = k.min(population);
            if out.last().is_none_or(|&(_, prev)| k < prev) {
                out.push((step, k));
            }
        }
        Schedule(out)
    }

    pub fn keep_at(&self, epoch: usize) -> Option<usize> {
        self.0.iter().find(|(s, _)| *s == epoch).map(|&(_, k)| k)
    }

    pub fn validate(&self, population: usize, max_epochs: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for w in self.0.windows(2) {
            if w[1].0 <= w[0].0 {
                return bad(format!("schedule steps must increase: {} then {}", w[0].0, w[1].0));
            }
            if w[1].1 >= w[0].1 {
                return bad(format!(
                    "schedule keep counts must decrease: {} then {}",
                    w[0].1, w[1].1
                ));
            }
        }
        for &(step, keep) in &self.0 {
            if step == 0 || keep == 0 {
                return bad("schedule steps and keep counts must be positive".into());
            }
            if keep > population {
                return bad(format!("schedule keeps {keep} of only {population} candidates"));
            }
        }
        if let Some(&(last, _)) = self.0.last() {
            if max_epochs < last {
                return bad(format!(
                    "max_epochs {max_epochs} is before the last schedule step {last}"
                ));
            }
        }
        Ok(())
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub structure: Structure,
    pub population: usize,
    pub max_epochs: usize,
    pub epsilon: f64,
    /// `None` means the reference schedule scaled to the population.
    pub schedule: Option<Schedule>,
    pub step_size: f64,
    pub seed: u64,
    /// Worker cap; `None` falls back to `PHFIT_WORKERS`, then all cores.
    pub workers: Option<usize>,
}

impl FitConfig {
    pub fn new(structure: Structure) -> Self {
        FitConfig {
            structure,
            population: DEFAULT_POPULATION,
            max_epochs: DEFAULT_MAX_EPOCHS,
            epsilon: DEFAULT_EPSILON,
            schedule: None,
            step_size: DEFAULT_STEP_SIZE,
            seed: DEFAULT_SEED,
            workers: None,
        }
    }

    pub fn with_population(mut self, population: usize) -> Self {
        self.population = population;
        self
    }

    pub fn with_max_epochs(mut self, max_epochs: usize) -> Self {
        self.max_epochs = max_epochs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers);
        self
    }

    pub fn effective_schedule(&self) -> Schedule {
        self.schedule
            .clone()
            .unwrap_or_else(|| Schedule::scaled(self.population, self.max_epochs))
    }

    pub fn validate(&self) -> Result<()> {
        self.structure.check()?;
        if self.population == 0 {
            return Err(Error::InvalidConfig("population must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step size {} must be positive",
                self.step_size
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be nonnegative",
                self.epsilon
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("worker cap must be at least 1".into()));
        }
        self.effective_schedule().validate(self.population, self.max_epochs)
    }

    fn worker_count(&self) -> usize {
        self.workers
            .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
            .unwrap_or(0)
    }
}

/// Serialized form of [`FitConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub structure: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

/// Resolves a family plus either a phase count or explicit blocks.
pub fn resolve_structure(family: Family, n: Option<usize>, blocks: Option<Vec<usize>>) -> Result<Structure> {
    let need_n = || n.ok_or_else(|| Error::InvalidConfig(format!("structure {family} needs `n`")));
    let s = match family {
        Family::General => Structure::General { n: need_n()? },
        Family::Coxian => Structure::Coxian { n: need_n()? },
        Family::HyperErlang => {
            let blocks = match (blocks, n) {
                (Some(b), Some(n)) if b.iter().sum::<usize>() != n => {
                    return Err(Error::InvalidConfig(format!("blocks {b:?} do not sum to n = {n}")))
                }
                (Some(b), _) => b,
                (None, Some(n)) => Structure::default_blocks(n).ok_or_else(|| {
                    Error::InvalidConfig(format!("no default hyper-erlang blocks for n = {n}; give `blocks`"))
                })?,
                (None, None) => return Err(Error::InvalidConfig("hyper-erlang needs `blocks` or `n`".into())),
            };
            Structure::HyperErlang { blocks }
        }
    };
    s.check()?;
    Ok(s)
}

impl TryFrom<ConfigDocument> for FitConfig {
    type Error = Error;
    fn try_from(d: ConfigDocument) -> Result<Self> {
        let defaults = FitConfig::new(resolve_structure(d.structure, d.n, d.blocks)?);
        let cfg = FitConfig {
            population: d.population.unwrap_or(defaults.population),
            max_epochs: d.max_epochs.unwrap_or(defaults.max_epochs),
            epsilon: d.epsilon.unwrap_or(defaults.epsilon),
            schedule: d.schedule.map(Schedule),
            step_size: d.step_size.unwrap_or(defaults.step_size),
            seed: d.seed.unwrap_or(defaults.seed),
            workers: d.workers,
            structure: defaults.structure,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&FitConfig> for ConfigDocument {
    fn from(c: &FitConfig) -> Self {
        let (n, blocks) = match &c.structure {
            Structure::General { n } | Structure::Coxian { n } => (Some(*n), None),
            Structure::HyperErlang { blocks } => (Some(blocks.iter().sum()), Some(blocks.clone())),
        };
        ConfigDocument {
            structure: c.structure.family(),
            n,
            blocks,
            population: Some(c.population),
            max_epochs: Some(c.max_epochs),
            epsilon: Some(c.epsilon),
            schedule: Some(c.effective_schedule().0),
            step_size: Some(c.step_size),
            seed: Some(c.seed),
            workers: c.workers,
        }
    }
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Epsilon,
    MaxEpochs,
}

/// Per-epoch progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    /// Best loss seen in any epoch so far.
    pub best_loss: f64,
    /// Lowest loss among the candidates evaluated this epoch.
    pub epoch_best: f64,
    /// Candidates evaluated this epoch.
    pub live: usize,
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub ph: MarkovianPH,
    pub params: Params,
    pub final_loss: f64,
    pub per_moment_mape: Vec<f64>,
    pub epochs_run: usize,
    pub candidates_evaluated: usize,
    pub wall_time: f64,
    pub stop_reason: StopReason,
    /// Index of the starting point that produced the result.
    pub best_candidate: usize,
    #[serde(skip)]
    pub history: Vec<EpochStat>,
}

impl FitResult {
    pub fn max_mape(&self) -> f64 {
        self.per_moment_mape.iter().cloned().fold(0.0, f64::max)
    }
}

/// SplitMix64 finalizer, used to derive per-candidate streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(index))
}

/// Starting point `index` of the population seeded by `seed`.
pub fn init_candidate(structure: &Structure, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let (lo, hi) = INIT_RATE_PARAM;
    let normal = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(rng)).collect() };
    let rate = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(lo..hi)).collect() };
    let mut v = Vec::with_capacity(structure.dim());
    match structure {
        Structure::General { n } => {
            v.extend(normal(&mut rng, *n));
            v.extend(rate(&mut rng, *n));
            v.extend(normal(&mut rng, n * n));
        }
        Structure::Coxian { n } => {
            v.extend(rate(&mut rng, *n));
            v.extend(normal(&mut rng, n - 1));
        }
        Structure::HyperErlang { blocks } => {
            v.extend(normal(&mut rng, blocks.len()));
            v.extend(rate(&mut rng, blocks.len()));
        }
    }
    v
}

/// The `population` starting points of a run.
pub fn init_population(config: &FitConfig) -> Vec<Params> {
    (0..config.population)
        .map(|i| {
            config
                .structure
                .unflatten(&init_candidate(&config.structure, config.seed, i))
        })
        .collect()
}

/// Adaptive first-order update with bias-corrected moment estimates.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(dim: usize) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

struct Candidate {
    index: usize,
    params: Vec<f64>,
    grad: Vec<f64>,
    adam: Adam,
    loss: f64,
    /// `grad` holds the gradient at `params` and has not been applied yet.
    pending: bool,
}

/// Fits the target with the configured family.
pub fn fit(target: &FitTarget, config: &FitConfig) -> Result<FitResult> {
    fit_with_progress(target, config, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with_progress(
    target: &FitTarget,
    config: &FitConfig,
    progress: impl FnMut(&EpochStat),
) -> Result<FitResult> {
    target.validate()?;
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build worker pool: {e}")))?;
    run(&pool, target, config, progress)
}

fn run(
    pool: &rayon::ThreadPool,
    target: &FitTarget,
    config: &FitConfig,
    mut progress: impl FnMut(&EpochStat),
) -> Result<FitResult> {
    let started = Instant::now();
    let (norm, scale) = target.normalized();
    let structure = &config.structure;
    let dim = structure.dim();
    let schedule = config.effective_schedule();

    let mut live: Vec<Candidate> = pool.install(|| {
        (0..config.population)
            .into_par_iter()
            .map(|i| Candidate {
                index: i,
                params: init_candidate(structure, config.seed, i),
                grad: vec![0.0; dim],
                adam: Adam::new(dim),
                loss: f64::NAN,
                pending: false,
            })
            .collect()
    });

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut history = Vec::new();
    let mut evaluated = 0usize;
    let mut stop = StopReason::MaxEpochs;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        if let Some(keep) = schedule.keep_at(epoch) {
            if live.len() > keep {
                if epoch == 1 {
                    pool.install(|| {
                        live.par_iter_mut().for_each(|c| {
                            c.loss = objective::evaluate(structure, &c.params, &norm, None).unwrap_or(f64::INFINITY);
                        })
                    });
                }
                cull(&mut live, keep);
            }
        }

        let lr = config.step_size;
        pool.install(|| {
            live.par_iter_mut().for_each(|c| {
                // The update from the previous epoch's gradient is applied
                // here so that each epoch needs one parallel pass.
                if c.pending {
                    let Candidate { params, grad, adam, .. } = c;
                    adam.step(params, grad, lr);
                }
                c.loss = match objective::evaluate(structure, &c.params, &norm, Some(&mut c.grad)) {
                    Ok(v) if c.grad.iter().all(|g| g.is_finite()) => v,
                    _ => f64::NAN,
                };
                c.pending = true;
            })
        });
        let before = live.len();
        live.retain(|c| c.loss.is_finite());
        if live.is_empty() {
            return Err(Error::AllCandidatesFailed(before));
        }
        evaluated += live.len();
        epochs_run = epoch;

        let leader = live
            .iter()
            .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)))
            .expect("nonempty");
        if best.as_ref().is_none_or(|(l, _, _)| leader.loss < *l) {
            best = Some((leader.loss, leader.index, leader.params.clone()));
        }
        let best_loss = best.as_ref().map(|b| b.0).unwrap_or(f64::INFINITY);
        let stat = EpochStat {
            epoch,
            best_loss,
            epoch_best: leader.loss,
            live: live.len(),
        };
        progress(&stat);
        history.push(stat);
        if best_loss < config.epsilon {
            stop = StopReason::Epsilon;
            break;
        }
    }

    let (final_loss, best_candidate, flat) = best.expect("at least one epoch ran");
    let params = time_scale_params(structure.unflatten(&flat), scale);
    let ph = params.to_markovian();
    let fitted = ph.moments(target.l())?;
    let per_moment_mape = metrics::mape(&target.moments, &fitted)?;
    Ok(FitResult {
        ph,
        params,
        final_loss,
        per_moment_mape,
        epochs_run,
        candidates_evaluated: evaluated,
        wall_time: started.elapsed().as_secs_f64(),
        stop_reason: stop,
        best_candidate,
        history,
    })
}

/// Keeps the `keep` lowest-loss candidates (ties broken by index), in index order.
fn cull(live: &mut Vec<Candidate>, keep: usize) {
    live.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)));
    live.truncate(keep);
    live.sort_by_key(|c| c.index);
}

/// Parameters of the distribution scaled in time by `c` (rates divided by `c`).
pub fn time_scale_params(params: Params, c: f64) -> Params {
    let f = 1.0 / c.sqrt();
    match params {
        Params::General(mut p) => {
            p.gamma.iter_mut().for_each(|g| *g *= f);
            Params::General(p)
        }
        Params::Coxian(mut p) => {
            p.gamma.iter_mut().for_each(|g| *g *= f);
            Params::Coxian(p)
        }
        Params::HyperErlang(mut p) => {
            p.delta.iter_mut().for_each(|d| *d *= f);
            Params::HyperErlang(p)
        }
    }
}
