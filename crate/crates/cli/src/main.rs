#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use phfit::evaluation::{self, GridCell};
use phfit::io::{self, fmt_f64, Table};
use phfit::metrics::{kl_divergence, Quadrature};
use phfit::optimizer::{self, ConfigDocument, FitConfig, FitResult};
use phfit::qbd::{self, QbdModel};
use phfit::sampler::{self, SampleSpec};
use phfit::{Error, Family, FitTarget, MarkovianPH};

const EXIT_ABOVE_THRESHOLD: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_OPTIMIZER: u8 = 3;
const EXIT_UNSTABLE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "phfit",
    version,
    about = "Fit phase-type distributions to moments and CDF points"
)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a PH distribution to target moments.
    Fit(FitArgs),
    /// Fit moments jointly with CDF points, optionally scoring KL against a reference PH.
    ShapeFit(ShapeFitArgs),
    /// Generate a random test set.
    Sample(SampleArgs),
    /// Fit a test set over a grid of structures and moment counts.
    Eval(EvalArgs),
    /// Compare queue-length distributions of a PH/PH/1 queue and its moment fits.
    Queue(QueueArgs),
}

/// Optimizer settings; flags override the config document.
#[derive(Args, Clone, Default)]
struct FitOpts {
    /// Optimizer config document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// general, coxian or hyper-erlang.
    #[arg(long)]
    structure: Option<Family>,
    #[arg(long)]
    n: Option<usize>,
    /// Hyper-Erlang block sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seed of the starting population [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (also read from PHFIT_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// Target document.
    #[arg(long)]
    target: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Success threshold on the worst per-moment error, in percent.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Trade-off weight of the CDF/PDF terms.
    #[arg(long = "Q")]
    q: Option<f64>,
    #[command(flatten)]
    opts: FitOpts,
}

#[derive(Args)]
struct ShapeFitArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Reference PH document for the KL report.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Sample spec document.
    #[arg(long)]
    spec: PathBuf,
    /// Archive directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Test-set archive directory.
    #[arg(long)]
    testset: PathBuf,
    /// Grid document: a list of `{"structure", "n" | "blocks", "l": [..]}`.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: FitOpts,
}

#[derive(Args)]
struct QueueArgs {
    /// Inter-arrival PH document.
    #[arg(long)]
    arrival: PathBuf,
    /// Service PH document.
    #[arg(long)]
    service: PathBuf,
    /// Moment counts to compare.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    l: Vec<usize>,
    /// Largest queue length reported.
    #[arg(long, default_value_t = 200)]
    k_max: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: FitOpts,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let progress = !cli.quiet;
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(&a, None, progress),
        Command::ShapeFit(a) => cmd_fit(&a.fit, a.reference.as_deref(), progress),
        Command::Sample(a) => cmd_sample(&a, progress),
        Command::Eval(a) => cmd_eval(&a, progress),
        Command::Queue(a) => cmd_queue(&a, progress),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn read_doc<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {what} {}", path.display()))
        .exit_with(EXIT_PARSE)?;
    serde_json::from_str(&text)
        .with_context(|| format!("malformed {what} {}", path.display()))
        .exit_with(EXIT_PARSE)
}

fn resolve_config(opts: &FitOpts) -> Result<FitConfig, Failure> {
    let mut doc = match &opts.config {
        Some(p) => read_doc::<ConfigDocument>(p, "config")?,
        None => ConfigDocument {
            structure: opts
                .structure
                .ok_or_else(|| anyhow!("give --structure or --config"))
                .exit_with(EXIT_PARSE)?,
            n: None,
            blocks: None,
            population: None,
            max_epochs: None,
            epsilon: None,
            schedule: None,
            step_size: None,
            seed: None,
            workers: None,
        },
    };
    if let Some(s) = opts.structure {
        if s != doc.structure {
            doc.n = None;
            doc.blocks = None;
        }
        doc.structure = s;
    }
    if opts.n.is_some() {
        doc.n = opts.n;
        if opts.blocks.is_none() {
            doc.blocks = None;
        }
    }
    if opts.blocks.is_some() {
        doc.blocks = opts.blocks.clone();
        if opts.n.is_none() {
            doc.n = None;
        }
    }
    if opts.population.is_some() || opts.max_epochs.is_some() {
        // The schedule depends on both; rescale unless it was given explicitly.
        if opts.config.is_none() {
            doc.schedule = None;
        }
    }
    doc.population = opts.population.or(doc.population);
    doc.max_epochs = opts.max_epochs.or(doc.max_epochs);
    doc.step_size = opts.step_size.or(doc.step_size);
    doc.epsilon = opts.epsilon.or(doc.epsilon);
    doc.seed = opts.seed.or(doc.seed);
    doc.workers = opts.workers.or(doc.workers);
    FitConfig::try_from(doc)
        .context("invalid optimizer settings")
        .exit_with(EXIT_PARSE)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .exit_with(EXIT_PARSE)
}

fn write_out<T>(r: phfit::Result<T>, path: &Path) -> Result<T, Failure> {
    r.with_context(|| format!("cannot write {}", path.display()))
        .exit_with(EXIT_PARSE)
}

fn progress_printer(enabled: bool, label: String) -> impl FnMut(&optimizer::EpochStat) {
    let mut last_live = usize::MAX;
    move |s| {
        if enabled && (s.live != last_live || s.epoch % 1000 == 0) {
            eprintln!(
                "[{label}] epoch {} best loss {:.3e} live {}",
                s.epoch, s.best_loss, s.live
            );
            last_live = s.live;
        }
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    config: ConfigDocument,
    eta: f64,
    max_mape: f64,
    accurate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    kl: Option<f64>,
    result: &'a FitResult,
}

fn cmd_fit(args: &FitArgs, reference: Option<&Path>, progress: bool) -> Result<u8, Failure> {
    let mut target: FitTarget = read_doc(&args.target, "target")?;
    if let Some(q) = args.q {
        target.q = q;
    }
    target.validate().context("invalid target").exit_with(EXIT_PARSE)?;
    let config = resolve_config(&args.opts)?;
    let reference: Option<MarkovianPH> = reference.map(|p| read_doc(p, "reference PH")).transpose()?;
    if !(args.eta >= 0.0) {
        return Err(anyhow!("--eta must be nonnegative")).exit_with(EXIT_PARSE);
    }
    create_dir(&args.out)?;

    let result = optimizer::fit_with_progress(&target, &config, progress_printer(progress, "fit".into()))
        .context("optimizer failed")
        .exit_with(EXIT_OPTIMIZER)?;
    let kl = match &reference {
        Some(r) => {
            let grid = Quadrature::covering(r, &result.ph)
                .context("cannot size the KL quadrature")
                .exit_with(EXIT_OPTIMIZER)?;
            Some(kl_divergence(r, &result.ph, &grid))
        }
        None => None,
    };

    let max_mape = result.max_mape();
    let accurate = max_mape <= args.eta;
    let report = FitReport {
        config: ConfigDocument::from(&config),
        eta: args.eta,
        max_mape,
        accurate,
        kl,
        result: &result,
    };
    let p = args.out.join("result.json");
    write_out(io::write_json(&p, &report), &p)?;
    let p = args.out.join("ph.json");
    write_out(io::write_json(&p, &result.ph), &p)?;
    let p = args.out.join("mape.csv");
    write_out(mape_table(&target, &result).and_then(|t| t.write_csv(&p)), &p)?;

    let kl_text = kl.map(|k| format!(" kl={}", fmt_f64(k))).unwrap_or_default();
    println!(
        "{} loss={:.3e} max_mape={:.4}% eta={}% epochs={} stop={:?} time={:.2}s{kl_text}",
        if accurate { "ok" } else { "above-threshold" },
        result.final_loss,
        max_mape,
        args.eta,
        result.epochs_run,
        result.stop_reason,
        result.wall_time,
    );
    Ok(if accurate { 0 } else { EXIT_ABOVE_THRESHOLD })
}

fn mape_table(target: &FitTarget, result: &FitResult) -> phfit::Result<Table> {
    let fitted = result.ph.moments(target.l())?;
    let mut t = Table::new(["i", "target", "fitted", "mape"]);
    for i in 0..target.l() {
        t.push(vec![
            (i + 1).to_string(),
            fmt_f64(target.moments[i]),
            fmt_f64(fitted[i]),
            fmt_f64(result.per_moment_mape[i]),
        ])?;
    }
    Ok(t)
}

fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let n = workers
        .or_else(|| std::env::var(optimizer::WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .context("cannot start worker pool")
        .exit_with(EXIT_PARSE)
}

fn cmd_sample(args: &SampleArgs, progress: bool) -> Result<u8, Failure> {
    let mut spec: SampleSpec = read_doc(&args.spec, "sample spec")?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate().context("invalid sample spec").exit_with(EXIT_PARSE)?;
    let pool = worker_pool(args.workers)?;
    let set = pool
        .install(|| sampler::generate_testset(&spec))
        .context("sampling failed")
        .exit_with(EXIT_OPTIMIZER)?;
    write_out(io::write_testset(&args.out, &spec, &set), &args.out)?;
    if progress {
        eprintln!(
            "wrote {} {} instances to {}",
            set.len(),
            spec.family,
            args.out.display()
        );
    }
    Ok(0)
}

/// One entry of a grid document.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridEntry {
    structure: Family,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    blocks: Option<Vec<usize>>,
    l: Vec<usize>,
}

fn cmd_eval(args: &EvalArgs, progress: bool) -> Result<u8, Failure> {
    let (_, instances) = io::read_testset(&args.testset)
        .with_context(|| format!("cannot read test set {}", args.testset.display()))
        .exit_with(EXIT_PARSE)?;
    let entries: Vec<GridEntry> = read_doc(&args.grid, "grid")?;
    let mut cells = Vec::new();
    for e in entries {
        let structure = optimizer::resolve_structure(e.structure, e.n, e.blocks)
            .context("invalid grid entry")
            .exit_with(EXIT_PARSE)?;
        cells.extend(e.l.into_iter().map(|l| GridCell {
            structure: structure.clone(),
            l,
        }));
    }
    let mut opts = args.opts.clone();
    if opts.config.is_none() && opts.structure.is_none() {
        // The grid supplies the structure; this one only seeds the defaults.
        opts.structure = Some(Family::Coxian);
        opts.n = Some(1);
    }
    let base = resolve_config(&opts)?;
    create_dir(&args.out)?;

    let total = instances.len();
    let rows = evaluation::evaluate_grid(&instances, &cells, &base, |ci, ii, row| {
        if progress {
            let status = match (&row.record, &row.error) {
                (Some(r), _) => format!("max_mape={:.4}%", r.max_mape),
                (None, Some(e)) => format!("failed: {e}"),
                _ => String::new(),
            };
            eprintln!("[{}] {}/{total} {status}", cells[ci].label(), ii + 1);
        }
    });
    let summaries = evaluation::summarize(&cells, &rows);
    let p = args.out.join("rows.csv");
    write_out(evaluation::rows_table(&cells, &rows).and_then(|t| t.write_csv(&p)), &p)?;
    let p = args.out.join("summary.csv");
    write_out(evaluation::summary_table(&summaries).and_then(|t| t.write_csv(&p)), &p)?;
    let p = args.out.join("report.json");
    write_out(io::write_json(&p, &summaries), &p)?;
    for s in &summaries {
        println!(
            "{} success@{:?}={:?} failures={} mean_time={:.2}s",
            s.cell.label(),
            evaluation::ETAS,
            s.success,
            s.failures,
            s.mean_wall_time
        );
    }
    Ok(0)
}

fn cmd_queue(args: &QueueArgs, progress: bool) -> Result<u8, Failure> {
    let arrival: MarkovianPH = read_doc(&args.arrival, "arrival PH")?;
    let service: MarkovianPH = read_doc(&args.service, "service PH")?;
    let model = QbdModel::new(arrival.clone(), service.clone()).exit_with(EXIT_PARSE)?;
    let rho = model.rho().exit_with(EXIT_PARSE)?;
    if !(rho < 1.0) {
        return Err(Error::Unstable(rho))
            .context("the queue has no stationary distribution")
            .exit_with(EXIT_UNSTABLE);
    }
    if args.l.is_empty() || args.l.contains(&0) {
        return Err(anyhow!("--l needs positive moment counts")).exit_with(EXIT_PARSE);
    }
    let config = resolve_config(&args.opts)?;
    create_dir(&args.out)?;
    if progress {
        eprintln!(
            "utilization {rho:.6}; fitting l = {:?} with {}",
            args.l, config.structure
        );
    }
    let study = qbd::queue_study(&arrival, &service, &args.l, &config, args.k_max)
        .context("queue study failed")
        .exit_with(EXIT_OPTIMIZER)?;
    let p = args.out.join("pmf.csv");
    write_out(study.pmf_table().and_then(|t| t.write_csv(&p)), &p)?;
    let p = args.out.join("accumulated.csv");
    write_out(study.accumulated_table().and_then(|t| t.write_csv(&p)), &p)?;
    let p = args.out.join("study.json");
    write_out(io::write_json(&p, &study), &p)?;
    for c in &study.cells {
        match (&c.accumulated, &c.error) {
            (Some(acc), _) => println!("l={} accumulated_error={}", c.l, fmt_f64(acc[args.k_max])),
            (None, Some(e)) => println!("l={} failed: {e}", c.l),
            _ => {}
        }
    }
    Ok(0)
}
