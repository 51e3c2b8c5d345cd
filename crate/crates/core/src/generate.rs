//! Synthetic dataset generator with a truth manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution as _, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{EarlError, Result};
use crate::EarlRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    /// Isotropic Gaussian blobs, one per center, equal weights.
    Clusters { centers: Vec<Vec<f64>>, sd: f64 },
    Categorical { labels: Vec<(String, f64)> },
}

/// On-disk record order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Records in generation order (i.i.d. layout).
    Shuffled,
    /// Records sorted by value, so neighbouring blocks hold similar values.
    Sorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub distribution: Distribution,
    pub records: u64,
    pub layout: Layout,
    pub seed: u64,
}

/// Exact statistics of a generated file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: GeneratorSpec,
    pub records: u64,
    pub total_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_sum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_median: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub true_proportions: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub centroids: Vec<Vec<f64>>,
}

enum Generated {
    Scalars(Vec<f64>),
    Vectors(Vec<(usize, Vec<f64>)>),
    Labels(Vec<usize>),
}

fn draw(spec: &GeneratorSpec) -> Result<Generated> {
    let mut rng = EarlRng::seed_from_u64(spec.seed);
    let n = spec.records as usize;
    Ok(match &spec.distribution {
        Distribution::Normal { mean, sd } => {
            let d = Normal::new(*mean, *sd).map_err(|e| EarlError::invalid(e.to_string()))?;
            Generated::Scalars((0..n).map(|_| d.sample(&mut rng)).collect())
        }
        Distribution::Uniform { low, high } => {
            let d = Uniform::new(*low, *high).map_err(|e| EarlError::invalid(e.to_string()))?;
            Generated::Scalars((0..n).map(|_| d.sample(&mut rng)).collect())
        }
        Distribution::Clusters { centers, sd } => {
            if centers.is_empty() {
                return Err(EarlError::invalid("clusters need at least one center"));
            }
            let noise = Normal::new(0.0, *sd).map_err(|e| EarlError::invalid(e.to_string()))?;
            Generated::Vectors(
                (0..n)
                    .map(|_| {
                        let c = rng.random_range(0..centers.len());
                        let p = centers[c].iter().map(|x| x + noise.sample(&mut rng)).collect();
                        (c, p)
                    })
                    .collect(),
            )
        }
        Distribution::Categorical { labels } => {
            let total: f64 = labels.iter().map(|(_, w)| w).sum();
            if labels.is_empty() || total <= 0.0 {
                return Err(EarlError::invalid("categorical weights must be positive"));
            }
            Generated::Labels(
                (0..n)
                    .map(|_| {
                        let mut u = rng.random::<f64>() * total;
                        for (i, (_, w)) in labels.iter().enumerate() {
                            if u < *w {
                                return i;
                            }
                            u -= w;
                        }
                        labels.len() - 1
                    })
                    .collect(),
            )
        }
    })
}

/// Writes the dataset to `path` and returns its manifest.
pub fn generate_dataset(spec: &GeneratorSpec, path: impl AsRef<Path>) -> Result<Manifest> {
    if spec.records == 0 {
        return Err(EarlError::invalid("records must be positive"));
    }
    let mut out = BufWriter::with_capacity(1 << 16, File::create(path.as_ref())?);
    let mut total_bytes = 0u64;
    let mut emit = |i: usize, value: &str| -> Result<()> {
        let line = format!("r{i}\t{value}\n");
        total_bytes += line.len() as u64;
        out.write_all(line.as_bytes())?;
        Ok(())
    };

    let mut manifest = Manifest {
        spec: spec.clone(),
        records: spec.records,
        total_bytes: 0,
        true_mean: None,
        true_sum: None,
        true_median: None,
        true_proportions: BTreeMap::new(),
        centroids: Vec::new(),
    };

    match draw(spec)? {
        Generated::Scalars(mut xs) => {
            if spec.layout == Layout::Sorted {
                xs.sort_by(f64::total_cmp);
            }
            for (i, x) in xs.iter().enumerate() {
                emit(i, &x.to_string())?;
            }
            let sum: f64 = xs.iter().sum();
            manifest.true_sum = Some(sum);
            manifest.true_mean = Some(sum / xs.len() as f64);
            xs.sort_by(f64::total_cmp);
            manifest.true_median = Some(crate::jobs::median_of_sorted(&xs));
        }
        Generated::Vectors(mut pts) => {
            if spec.layout == Layout::Sorted {
                pts.sort_by_key(|(c, _)| *c);
            }
            for (i, (_, p)) in pts.iter().enumerate() {
                let text: Vec<String> = p.iter().map(f64::to_string).collect();
                emit(i, &text.join(","))?;
            }
            if let Distribution::Clusters { centers, .. } = &spec.distribution {
                manifest.centroids = centers.clone();
            }
        }
        Generated::Labels(mut ls) => {
            if spec.layout == Layout::Sorted {
                ls.sort_unstable();
            }
            let Distribution::Categorical { labels } = &spec.distribution else {
                unreachable!()
            };
            let mut counts = vec![0u64; labels.len()];
            for (i, l) in ls.iter().enumerate() {
                counts[*l] += 1;
                emit(i, &labels[*l].0)?;
            }
            for ((name, _), c) in labels.iter().zip(counts) {
                manifest
                    .true_proportions
                    .insert(name.clone(), c as f64 / spec.records as f64);
            }
        }
    }
    out.flush()?;
    drop(out);
    manifest.total_bytes = total_bytes;
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| EarlError::invalid(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EarlError::invalid(e.to_string()))
}
