//! Run configuration: config file, then flags, then defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use earl::engine::{FailureSpec, RunMode};
use earl::jobs::JobSpec;
use earl::{EstimatorConfig, RuntimeConfig, SamplerMode};
use serde::Deserialize;

pub const SEED_ENV: &str = "EARL_SEED";

/// Keys accepted in a config file. Everything is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub job: Option<String>,
    pub sigma: Option<f64>,
    pub tau: Option<f64>,
    pub p_init: Option<f64>,
    pub ladder_depth: Option<usize>,
    pub sampler: Option<String>,
    pub bootstraps: Option<usize>,
    pub intra_sharing: Option<bool>,
    pub workers: Option<usize>,
    #[serde(default)]
    pub fail: Vec<String>,
    pub mode: Option<String>,
    pub max_iterations: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub curve: Option<PathBuf>,
}

pub fn parse_file_config(text: &str, origin: &Path) -> Result<FileConfig> {
    match toml::from_str(text) {
        Ok(c) => Ok(c),
        Err(e) => {
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!(":{line}")
                })
                .unwrap_or_default();
            bail!("{}{at}: {}", origin.display(), e.message())
        }
    }
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_file_config(&text, path)
}

/// Flag values; `None` means "not given on the command line".
#[derive(Debug, Default, Clone)]
pub struct FlagConfig {
    pub data: Option<PathBuf>,
    pub job: Option<String>,
    pub sigma: Option<f64>,
    pub tau: Option<f64>,
    pub p_init: Option<f64>,
    pub ladder_depth: Option<usize>,
    pub sampler: Option<String>,
    pub bootstraps: Option<usize>,
    pub no_intra_sharing: bool,
    pub workers: Option<usize>,
    pub fail: Vec<String>,
    pub mode: Option<String>,
    pub max_iterations: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: PathBuf,
    pub job: JobSpec,
    pub estimator: EstimatorConfig,
    pub runtime: RuntimeConfig,
    pub output: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub curve: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<RunMode> {
    match s {
        "early" => Ok(RunMode::Early),
        "full" => Ok(RunMode::Full),
        other => bail!("unknown mode `{other}` (expected early or full)"),
    }
}

pub fn random_seed() -> u64 {
    use std::hash::{BuildHasher, Hasher};
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default(),
    );
    h.finish()
}

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got `{v}`")),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    /// Flags win over the file; the seed falls back to the environment and
    /// then to a fresh random value.
    pub fn resolve(file: FileConfig, flags: FlagConfig, env_seed: Option<u64>) -> Result<Self> {
        let data = flags
            .data
            .or(file.data)
            .context("no dataset given (use --data or `data = ...` in the config file)")?;
        let job: JobSpec = flags
            .job
            .or(file.job)
            .unwrap_or_else(|| "mean".into())
            .parse()?;
        let d = EstimatorConfig::default();
        let sigma = flags.sigma.or(file.sigma).unwrap_or(d.sigma);
        let estimator = EstimatorConfig {
            sigma,
            // The default threshold must stay below very small targets.
            tau: flags.tau.or(file.tau).unwrap_or(if d.tau < sigma { d.tau } else { sigma / 2.0 }),
            p_init: flags.p_init.or(file.p_init).unwrap_or(d.p_init),
            ladder_depth: flags.ladder_depth.or(file.ladder_depth).unwrap_or(d.ladder_depth),
        };
        estimator.validate()?;
        let r = RuntimeConfig::default();
        let sampler: SamplerMode = match flags.sampler.or(file.sampler) {
            Some(s) => s.parse()?,
            None => r.sampler,
        };
        let fail_specs = if flags.fail.is_empty() { file.fail } else { flags.fail };
        let failures = fail_specs
            .iter()
            .map(|s| s.parse::<FailureSpec>())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mode = match flags.mode.or(file.mode) {
            Some(m) => parse_mode(&m)?,
            None => r.mode,
        };
        let workers = flags.workers.or(file.workers).unwrap_or(r.workers);
        if workers == 0 {
            bail!("workers must be positive");
        }
        if let Some(b) = flags.bootstraps.or(file.bootstraps) {
            if b < 2 {
                bail!("bootstraps must be at least 2");
            }
        }
        let runtime = RuntimeConfig {
            sampler,
            seed: flags.seed.or(file.seed).or(env_seed).unwrap_or_else(random_seed),
            workers,
            bootstraps: flags.bootstraps.or(file.bootstraps),
            intra_sharing: !flags.no_intra_sharing && file.intra_sharing.unwrap_or(r.intra_sharing),
            failures,
            mode,
            max_iterations: flags.max_iterations.or(file.max_iterations).unwrap_or(r.max_iterations),
        };
        Ok(RunConfig {
            data,
            job,
            estimator,
            runtime,
            output: flags.output.or(file.output),
            trace: flags.trace.or(file.trace),
            curve: flags.curve.or(file.curve),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(data: &str) -> FlagConfig {
        FlagConfig {
            data: Some(data.into()),
            ..Default::default()
        }
    }

    #[test]
    fn flags_override_file() {
        let file = parse_file_config("sigma = 0.1\nworkers = 3\njob = \"median\"\n", Path::new("c.toml")).unwrap();
        let mut f = flags("d.txt");
        f.sigma = Some(0.02);
        let cfg = RunConfig::resolve(file, f, Some(7)).unwrap();
        assert_eq!(cfg.estimator.sigma, 0.02);
        assert_eq!(cfg.runtime.workers, 3);
        assert_eq!(cfg.job, JobSpec::Median);
        assert_eq!(cfg.runtime.seed, 7);
    }

    #[test]
    fn tiny_sigma_lowers_default_tau() {
        let mut f = flags("d");
        f.sigma = Some(1e-9);
        let cfg = RunConfig::resolve(FileConfig::default(), f, None).unwrap();
        assert_eq!(cfg.estimator.tau, 5e-10);
    }

    #[test]
    fn seed_precedence() {
        let file = parse_file_config("seed = 5\n", Path::new("c.toml")).unwrap();
        assert_eq!(RunConfig::resolve(file, flags("d"), Some(9)).unwrap().runtime.seed, 5);
        let mut f = flags("d");
        f.seed = Some(1);
        let file = parse_file_config("seed = 5\n", Path::new("c.toml")).unwrap();
        assert_eq!(RunConfig::resolve(file, f, Some(9)).unwrap().runtime.seed, 1);
    }

    #[test]
    fn error_names_the_line() {
        let err = parse_file_config("sigma = 0.1\nworkers = \"many\"\n", Path::new("run.toml")).unwrap_err();
        assert!(err.to_string().starts_with("run.toml:2:"), "{err}");
        let err = parse_file_config("sigma = 0.1\n\nbogus = 1\n", Path::new("run.toml")).unwrap_err();
        assert!(err.to_string().starts_with("run.toml:3:"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        let mut f = flags("d");
        f.sigma = Some(1.5);
        assert!(RunConfig::resolve(FileConfig::default(), f, None).is_err());
        let mut f = flags("d");
        f.fail = vec!["x".into()];
        assert!(RunConfig::resolve(FileConfig::default(), f, None).is_err());
        assert!(RunConfig::resolve(FileConfig::default(), FlagConfig::default(), None).is_err());
    }
}
