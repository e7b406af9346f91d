use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dmida_core::classifier::TrainConfig;
use dmida_core::embedding::{self, EmbeddingSet};
use dmida_core::harness::{
    run_benchmark, synth_gaussian_tasks, BenchmarkOptions, Mode, RunReport, SynthSpec, TaskSpec,
};
use dmida_core::ida::Ridge;
use dmida_core::selftrain::LoopConfig;
use dmida_core::verify::{self, VerifyOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const LOSSES: [&str; 3] = ["ce", "ce+dm", "ce+cond-ent"];
const SELECTORS: [&str; 5] = ["none", "rand", "nn", "confid", "ida"];

/// Few-shot classification over cached embeddings with dependency-maximization
/// training and discriminant-based pseudo-label selection.
#[derive(Parser)]
#[command(name = "dmida", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark and report mean accuracy with a 95% interval.
    Run(RunArgs),
    /// Sweep every loss against every selector on one configuration.
    Ablate(RunArgs),
    /// Run the numerical self-checks. Exits 3 if any fails.
    Verify(VerifyArgs),
    /// Write a synthetic Gaussian embedding set to disk.
    Synth(SynthArgs),
    /// Print a summary of an embedding cache.
    ExportInfo(ExportInfoArgs),
}

#[derive(Args, Clone)]
#[group(id = "source", required = true, multiple = false)]
struct Source {
    /// Embedding manifest (or a .csv fixture).
    #[arg(long, value_name = "PATH", group = "source")]
    features: Option<PathBuf>,
    /// Synthetic source: n_classes,dim,separation,spread,per_class.
    #[arg(long, value_name = "SPEC", group = "source")]
    synth: Option<SynthSpec>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Seed of the synthetic generator (episodes use --seed).
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,

    #[arg(long, default_value_t = Mode::Transductive)]
    mode: Mode,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    q_per_class: usize,
    /// Unlabeled rows per class (semi mode only).
    #[arg(long, default_value_t = 50)]
    u_per_class: usize,

    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads [default: all cores]. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,

    /// Gaussian bandwidth for both Gram matrices (reference setting 0.5).
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Weight of the dependency term (reference setting 0.01).
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    /// Adam step size (reference setting 1e-4).
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Optimizer steps per training pass (reference setting 1000).
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Objective: ce, ce+dm or ce+cond-ent. Ignored by `ablate`.
    #[arg(long, default_value = "ce+dm")]
    loss: String,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// Weight of the conditional-entropy term.
    #[arg(long, default_value_t = 1.0)]
    entropy_weight: f64,

    /// Pseudo-labeled rows merged per class per round (reference setting 5).
    #[arg(long, default_value_t = 5)]
    select_per_class: usize,
    /// Upper bound on training passes per episode.
    #[arg(long, default_value_t = 10)]
    max_loop_iters: usize,
    /// none, rand, nn, confid, ida or ida-bound. Ignored by `ablate`.
    #[arg(long, default_value = "ida")]
    selector: String,
    /// Scatter ridge: `rel:F` (F times the mean scatter eigenvalue) or `abs:V`.
    #[arg(long, default_value_t = Ridge::default())]
    ridge: Ridge,
    /// Restrict the dependency term to rows not yet merged.
    #[arg(long)]
    dm_over_pool: bool,

    /// Skip row L2-normalization.
    #[arg(long)]
    no_normalize: bool,
    /// JSON report path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Per-episode CSV path (`run` only).
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

impl RunArgs {
    fn task(&self) -> TaskSpec {
        TaskSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.q_per_class,
            u_per_class: self.u_per_class,
            mode: self.mode,
        }
    }

    fn loop_config(&self, loss: &str, selector: &str) -> LoopConfig {
        LoopConfig {
            k_per_class: self.select_per_class,
            max_iterations: self.max_loop_iters,
            selector: selector.to_string(),
            ridge: self.ridge,
            dm_over_pool: self.dm_over_pool,
            record_psi: false,
            train: TrainConfig {
                loss: loss.to_string(),
                lambda: self.lambda,
                entropy_weight: self.entropy_weight,
                feature_sigma: self.sigma,
                prediction_sigma: self.sigma,
                lr: self.lr,
                iters: self.iters,
                optimizer: self.optimizer.clone(),
                ..TrainConfig::default()
            },
        }
    }

    fn options(&self) -> BenchmarkOptions {
        BenchmarkOptions {
            episodes: self.episodes,
            seed: self.seed,
            threads: self.threads,
            normalize: !self.no_normalize,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// n_classes,dim,separation,spread,per_class
    #[arg(long, value_name = "SPEC")]
    synth: SynthSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for manifest.json and its blob.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportInfoArgs {
    /// Manifest path (or a .csv fixture).
    path: PathBuf,
}

/// Exit status classes: 1 bad configuration or input, 2 failure while running, 3 failed checks.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Checks,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Checks => 3,
        }
    }
}

fn config<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::ExportInfo(args) => cmd_export_info(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) | Failure::Runtime(e) => eprintln!("error: {}", describe(e)),
                Failure::Checks => eprintln!("error: self-checks failed"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// The error chain, skipping causes the outer message already spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn load_source(source: &Source, synth_seed: u64) -> Result<(EmbeddingSet, String), Failure> {
    if let Some(path) = &source.features {
        let set = embedding::load(path).map_err(config)?;
        return Ok((set, path.display().to_string()));
    }
    let spec = source.synth.expect("clap enforces exactly one source");
    let set =
        synth_gaussian_tasks(&mut ChaCha8Rng::seed_from_u64(synth_seed), &spec).map_err(config)?;
    Ok((set, format!("synth:{spec}@{synth_seed}")))
}

/// Rejects bad settings up front so they exit 1 rather than 2.
fn validate(args: &RunArgs, cfg: &LoopConfig) -> Result<(), Failure> {
    args.task().validate().map_err(config)?;
    cfg.validate().map_err(config)?;
    if args.episodes == 0 {
        return Err(config(anyhow::anyhow!("--episodes must be at least 1")));
    }
    if args.threads == Some(0) {
        return Err(config(anyhow::anyhow!("--threads must be at least 1")));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    std::fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.loop_config(&args.loss, &args.selector);
    validate(args, &cfg)?;
    let (set, source) = load_source(&args.source, args.synth_seed)?;
    let report =
        run_benchmark(&set, &source, &args.task(), &cfg, &args.options()).map_err(runtime)?;

    if let Some(path) = &args.out {
        report
            .write_json(path)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(runtime)?;
    }
    if let Some(path) = &args.csv {
        let file = File::create(path)
            .with_context(|| format!("cannot create {}", path.display()))
            .map_err(runtime)?;
        report.write_csv(BufWriter::new(file)).map_err(runtime)?;
    }
    print_summary(&report, &cfg);
    Ok(())
}

fn print_summary(report: &RunReport, cfg: &LoopConfig) {
    println!(
        "{} / {}: {:.2}% +/- {:.2}% over {} episodes ({} failed)",
        cfg.train.loss,
        cfg.selector,
        100.0 * report.mean_accuracy,
        100.0 * report.ci95,
        report.completed,
        report.failed
    );
    if let Some(t) = &report.timing {
        println!("{:.1}s on {} threads", t.wall_seconds, t.threads);
    }
}

#[derive(Serialize)]
struct AblationRow {
    loss: String,
    selector: String,
    mean_accuracy: f64,
    ci95: f64,
    completed: usize,
    failed: usize,
}

#[derive(Serialize)]
struct AblationReport {
    source: String,
    task: TaskSpec,
    episodes: usize,
    seed: u64,
    rows: Vec<AblationRow>,
}

fn cmd_ablate(args: &RunArgs) -> Result<(), Failure> {
    for loss in LOSSES {
        for selector in SELECTORS {
            validate(args, &args.loop_config(loss, selector))?;
        }
    }
    let (set, source) = load_source(&args.source, args.synth_seed)?;
    let mut rows = Vec::with_capacity(LOSSES.len() * SELECTORS.len());
    println!(
        "{:<12} {:<8} {:>9} {:>8}",
        "loss", "selector", "accuracy", "ci95"
    );
    for loss in LOSSES {
        for selector in SELECTORS {
            let cfg = args.loop_config(loss, selector);
            // same seed everywhere, so every cell sees the same episodes
            let report = run_benchmark(&set, &source, &args.task(), &cfg, &args.options())
                .map_err(runtime)?;
            println!(
                "{:<12} {:<8} {:>8.2}% {:>7.2}%",
                loss,
                selector,
                100.0 * report.mean_accuracy,
                100.0 * report.ci95
            );
            rows.push(AblationRow {
                loss: loss.into(),
                selector: selector.into(),
                mean_accuracy: report.mean_accuracy,
                ci95: report.ci95,
                completed: report.completed,
                failed: report.failed,
            });
        }
    }
    if let Some(path) = &args.out {
        write_json(
            path,
            &AblationReport {
                source,
                task: args.task(),
                episodes: args.episodes,
                seed: args.seed,
                rows,
            },
        )?;
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let outcomes = verify::run_all(&VerifyOptions {
        seed: args.seed,
        inject_gradient_fault: args.inject_fault,
    });
    for o in &outcomes {
        println!(
            "{} {:<24} {:>4} instances  worst {:.2e}  tol {:.0e}  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.instances,
            o.worst,
            o.tolerance,
            o.detail
        );
    }
    if let Some(path) = &args.out {
        write_json(path, &outcomes)?;
    }
    if outcomes.iter().all(|o| o.passed) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let set = synth_gaussian_tasks(&mut ChaCha8Rng::seed_from_u64(args.seed), &args.synth)
        .map_err(config)?;
    let manifest = embedding::save_embeddings(&set, &args.out).map_err(runtime)?;
    println!(
        "wrote {} rows x {} dims in {} classes to {}",
        manifest.count,
        manifest.dim,
        set.num_classes(),
        args.out.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_export_info(args: &ExportInfoArgs) -> Result<(), Failure> {
    let set = embedding::load(&args.path).map_err(config)?;
    let sizes: Vec<usize> = set.class_members().iter().map(Vec::len).collect();
    let norms: Vec<f64> = set.features().row_iter().map(|r| r.norm()).collect();
    println!("path      {}", args.path.display());
    println!("rows      {}", set.count());
    println!("dim       {}", set.dim());
    println!(
        "classes   {} (members per class {}..{})",
        set.num_classes(),
        sizes.iter().min().copied().unwrap_or(0),
        sizes.iter().max().copied().unwrap_or(0)
    );
    println!(
        "row norms {:.4}..{:.4}",
        norms.iter().cloned().fold(f64::INFINITY, f64::min),
        norms.iter().cloned().fold(0.0, f64::max)
    );
    if let Some(names) = set.class_names() {
        let shown: Vec<&str> = names.iter().take(5).map(String::as_str).collect();
        let more = if names.len() > 5 { ", ..." } else { "" };
        println!("names     {}{more}", shown.join(", "));
    }
    Ok(())
}
