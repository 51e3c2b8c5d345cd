use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use earl::audit::{audit_binomial, audit_delta_equivalence, audit_eq4, audit_uniformity, AuditReport};
use earl::generate::{generate_dataset, write_manifest, Distribution, GeneratorSpec, Layout};
use earl::datastore::DEFAULT_BLOCK_SIZE;
use earl::jobs::{kmeans_job, proportion_job, JobSpec, KMeansJob, MeanJob, MedianJob, SumJob};
use earl::{full_scan, open_dataset, run_job, Job, ResultMode, SamplerMode};
use serde::Serialize;

mod config;

use config::{env_seed, load_file_config, FileConfig, FlagConfig, RunConfig};

#[derive(Parser)]
#[command(name = "earl", version, about = "Early-terminating approximate aggregation over line-oriented datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its truth manifest.
    Generate(GenerateArgs),
    /// Run a job until its bootstrap error meets the target.
    Run(RunArgs),
    /// Exact answer from a full scan.
    Full(FullArgs),
    /// Statistical self-checks.
    Audit {
        #[command(subcommand)]
        kind: AuditKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DistKind {
    Normal,
    Uniform,
    Clusters,
    Categorical,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "normal")]
    distribution: DistKind,
    #[arg(long, default_value_t = 1_000_000)]
    records: u64,
    #[arg(long, default_value = "shuffled")]
    layout: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    mean: f64,
    #[arg(long, default_value_t = 1.0)]
    sd: f64,
    #[arg(long, default_value_t = 0.0)]
    low: f64,
    #[arg(long, default_value_t = 1.0)]
    high: f64,
    /// Cluster centers, e.g. "0,0;10,0;0,10;10,10".
    #[arg(long)]
    centers: Option<String>,
    /// Label weights, e.g. "yes=0.3,no=0.7".
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, short)]
    out: PathBuf,
    /// Defaults to <out>.manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// mean | sum | median | proportion:<label> | kmeans:<k>
    #[arg(long)]
    job: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    p_init: Option<f64>,
    #[arg(long)]
    ladder_depth: Option<usize>,
    /// pre | post | reservoir
    #[arg(long)]
    sampler: Option<String>,
    /// Fixed bootstrap count instead of the estimated one.
    #[arg(long)]
    bootstraps: Option<usize>,
    #[arg(long)]
    no_intra_sharing: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// worker:iteration, repeatable.
    #[arg(long)]
    fail: Vec<String>,
    /// early | full
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Defaults to $EARL_SEED, then a random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Result JSON path (also printed to stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Error curve points CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct FullArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mean")]
    job: String,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AuditKind {
    /// Per-record inclusion uniformity of a sampler.
    Uniformity {
        #[arg(long, default_value = "post")]
        sampler: String,
        #[arg(long, default_value_t = 1000)]
        records: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Maintained against fresh resamples.
    DeltaEquivalence {
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        nprime: usize,
        #[arg(long, default_value_t = 1_000_000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// naive | sketched | both
        #[arg(long, default_value = "both")]
        path: String,
    },
    /// Identical-prefix probability table.
    Eq4 {
        #[arg(long, default_value_t = 29)]
        n: usize,
    },
    /// Old-part size law, exact and Gaussian.
    Binomial {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        nprime: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_vectors(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|c| {
            c.split(',')
                .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad coordinate `{x}`")))
                .collect()
        })
        .collect()
}

fn parse_labels(s: &str) -> Result<Vec<(String, f64)>> {
    s.split(',')
        .map(|kv| {
            let (k, v) = kv.split_once('=').with_context(|| format!("label must be name=weight, got `{kv}`"))?;
            Ok((k.trim().to_string(), v.trim().parse().with_context(|| format!("bad weight `{v}`"))?))
        })
        .collect()
}

fn cmd_generate(a: GenerateArgs) -> Result<ExitCode> {
    let distribution = match a.distribution {
        DistKind::Normal => Distribution::Normal { mean: a.mean, sd: a.sd },
        DistKind::Uniform => Distribution::Uniform { low: a.low, high: a.high },
        DistKind::Clusters => Distribution::Clusters {
            centers: parse_vectors(a.centers.as_deref().unwrap_or("0,0;10,0;0,10;10,10"))?,
            sd: a.sd,
        },
        DistKind::Categorical => Distribution::Categorical {
            labels: parse_labels(a.labels.as_deref().unwrap_or("yes=0.3,no=0.7"))?,
        },
    };
    let layout = match a.layout.as_str() {
        "shuffled" => Layout::Shuffled,
        "sorted" => Layout::Sorted,
        other => bail!("unknown layout `{other}` (expected shuffled or sorted)"),
    };
    let spec = GeneratorSpec {
        distribution,
        records: a.records,
        layout,
        seed: a.seed,
    };
    let manifest = generate_dataset(&spec, &a.out)?;
    let manifest_path = a.manifest.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".manifest.json");
        p.into()
    });
    write_manifest(&manifest, &manifest_path)?;
    println!(
        "wrote {} records ({} bytes) to {}; manifest {}",
        manifest.records,
        manifest.total_bytes,
        a.out.display(),
        manifest_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Calls `$body` with `$job` bound to the concrete job for `$spec`.
macro_rules! with_job {
    ($spec:expr, $seed:expr, |$job:ident| $body:expr) => {
        match $spec {
            JobSpec::Mean => {
                let $job = MeanJob;
                $body
            }
            JobSpec::Sum => {
                let $job = SumJob;
                $body
            }
            JobSpec::Median => {
                let $job = MedianJob;
                $body
            }
            JobSpec::Proportion(label) => {
                let $job = proportion_job(label.clone());
                $body
            }
            JobSpec::KMeans(k) => {
                let $job: KMeansJob = kmeans_job(*k, 100, 1e-6).with_seed($seed);
                $body
            }
        }
    };
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn execute<J: Job>(cfg: &RunConfig, job: &J) -> Result<ExitCode> {
    let bf = open_dataset(&cfg.data, DEFAULT_BLOCK_SIZE)?;
    let report = run_job(&bf, job, &cfg.estimator, &cfg.runtime)?;
    let json = serde_json::to_string_pretty(&report.result)?;
    println!("{json}");
    if let Some(p) = &cfg.output {
        write_text(p, &(json + "\n"))?;
    }
    if let Some(p) = &cfg.trace {
        write_text(p, &report.trace_csv())?;
    }
    if let Some(p) = &cfg.curve {
        match &report.curve {
            Some(c) => write_text(p, &c.to_csv())?,
            None => write_text(p, "n,cv\n")?,
        }
    }
    Ok(match report.result.mode {
        ResultMode::Early | ResultMode::Full => ExitCode::SUCCESS,
        ResultMode::Degraded => ExitCode::from(2),
    })
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let file = match &a.config {
        Some(p) => load_file_config(p)?,
        None => FileConfig::default(),
    };
    let flags = FlagConfig {
        data: a.data,
        job: a.job,
        sigma: a.sigma,
        tau: a.tau,
        p_init: a.p_init,
        ladder_depth: a.ladder_depth,
        sampler: a.sampler,
        bootstraps: a.bootstraps,
        no_intra_sharing: a.no_intra_sharing,
        workers: a.workers,
        fail: a.fail,
        mode: a.mode,
        max_iterations: a.max_iterations,
        seed: a.seed,
        output: a.output,
        trace: a.trace,
        curve: a.curve,
    };
    let cfg = RunConfig::resolve(file, flags, env_seed()?)?;
    let seed = cfg.runtime.seed;
    with_job!(&cfg.job, seed, |job| execute(&cfg, &job))
}

#[derive(Serialize)]
struct FullOutput<'a> {
    job: String,
    estimate: f64,
    detail: &'a earl::jobs::Detail,
    records: u64,
}

fn cmd_full(a: FullArgs) -> Result<ExitCode> {
    let spec: JobSpec = a.job.parse()?;
    let bf = open_dataset(&a.data, DEFAULT_BLOCK_SIZE)?;
    let (fin, records) = with_job!(&spec, 0, |job| full_scan(&bf, &job)?);
    let json = serde_json::to_string_pretty(&FullOutput {
        job: spec.to_string(),
        estimate: fin.estimate,
        detail: &fin.detail,
        records,
    })?;
    println!("{json}");
    if let Some(p) = &a.output {
        write_text(p, &(json + "\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn print_report(r: &AuditReport) -> bool {
    println!("{r}");
    r.passed
}

fn cmd_audit(kind: AuditKind) -> Result<ExitCode> {
    let passed = match kind {
        AuditKind::Uniformity { sampler, records, trials, n, seed } => {
            let mode: SamplerMode = sampler.parse()?;
            let dir = tempfile_dir()?;
            let r = audit_uniformity(mode, records, trials, n, seed, &dir);
            let _ = std::fs::remove_dir_all(&dir);
            print_report(&r?)
        }
        AuditKind::DeltaEquivalence { n, nprime, trials, seed, path } => {
            let paths: &[bool] = match path.as_str() {
                "naive" => &[false],
                "sketched" => &[true],
                "both" => &[false, true],
                other => bail!("unknown path `{other}` (expected naive, sketched or both)"),
            };
            let mut ok = true;
            for &sketched in paths {
                ok &= print_report(&audit_delta_equivalence(n, nprime, trials, seed, sketched)?);
            }
            ok
        }
        AuditKind::Eq4 { n } => print_report(&audit_eq4(n)?),
        AuditKind::Binomial { n, nprime, draws, seed } => print_report(&audit_binomial(n, nprime, draws, seed)?),
    };
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn tempfile_dir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("earl-audit-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Full(a) => cmd_full(a),
        Command::Audit { kind } => cmd_audit(kind),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
