//! Planted-signal synthetic cohort.
//!
//! Each sample has a latent class. A minority of its patches come from a
//! signal cluster whose center moves along a per-class direction; the rest
//! come from class-agnostic background clusters. Gene groups sit at
//! per-class group means. Each modality carries its class signal only for a
//! random subset of samples (`signal_presence`), so either modality alone
//! misses some samples that the other one catches. The two signal-free
//! subsets are disjoint, each of size `round((1 − signal_presence)·n)`.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::write_feature_file;
use super::{Dataset, ManifestEntry, SampleRecord, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::losses::SurvivalTarget;
use crate::numkit::Tensor;

pub const GENERATOR_FILE: &str = "generator.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub d: usize,
    pub d_g: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub n_groups: usize,
    /// Shift of the signal-cluster center along the class direction.
    pub signal_p: f64,
    /// Shift of each gene-group mean along its class direction.
    pub signal_g: f64,
    pub noise: f64,
    /// Fraction of a bag's patches drawn from the signal cluster.
    pub signal_fraction: f64,
    pub background_clusters: usize,
    /// Per-modality fraction of samples carrying their class signal; at
    /// least 0.5 so the two signal-free subsets can be disjoint.
    pub signal_presence: f64,
    pub censor_rate: f64,
    /// Exponential event rate per class. Empty means `0.1·2^c`.
    pub base_hazard: Vec<f64>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            n_classes: 3,
            d: 32,
            d_g: 64,
            m_min: 32,
            m_max: 64,
            n_groups: 6,
            signal_p: 6.0,
            signal_g: 6.0,
            noise: 1.0,
            signal_fraction: 0.2,
            background_clusters: 3,
            signal_presence: 0.75,
            censor_rate: 0.3,
            base_hazard: Vec::new(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_samples == 0 || self.n_classes == 0 || self.d == 0 || self.d_g == 0 {
            return bad("samples, classes, d and d_g must be positive");
        }
        if self.n_groups == 0 || self.background_clusters == 0 {
            return bad("gene groups and background clusters must be positive");
        }
        if self.m_min == 0 || self.m_min > self.m_max {
            return bad("need 1 <= m_min <= m_max");
        }
        if self.signal_p < 0.0 || self.signal_g < 0.0 || self.noise < 0.0 {
            return bad("signal strengths and noise must be non-negative");
        }
        for (name, v, lo) in [
            ("censor_rate", self.censor_rate, 0.0),
            ("signal_fraction", self.signal_fraction, 0.0),
            ("signal_presence", self.signal_presence, 0.5),
        ] {
            if !(lo..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "{name} must lie in [{lo}, 1], got {v}"
                )));
            }
        }
        if !self.base_hazard.is_empty() && self.base_hazard.len() != self.n_classes {
            return bad("base_hazard needs one rate per class");
        }
        if self.hazards().iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return bad("hazard rates must be positive");
        }
        Ok(())
    }

    pub fn hazards(&self) -> Vec<f64> {
        if self.base_hazard.is_empty() {
            (0..self.n_classes)
                .map(|c| 0.1 * 2f64.powi(c as i32))
                .collect()
        } else {
            self.base_hazard.clone()
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit directions, mutually orthogonal while `count <= dim`.
fn directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = unit(rng, dim);
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Mapping from latent class to subtype label; a non-identity permutation
/// whenever there are at least two classes.
fn subtype_map(rng: &mut ChaCha8Rng, classes: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..classes).collect();
    if classes < 2 {
        return perm;
    }
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Round to f32 precision so the in-memory dataset equals what is stored.
fn narrow(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Draws the cohort in memory.
pub fn synthesize(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.n_classes;

    let background: Vec<Vec<f64>> = (0..config.background_clusters)
        .map(|_| gaussian(&mut rng, config.d, 2.0))
        .collect();
    let signal_center = gaussian(&mut rng, config.d, 2.0);
    let path_dirs = directions(&mut rng, c, config.d);
    let group_means: Vec<Vec<f64>> = (0..config.n_groups)
        .map(|_| gaussian(&mut rng, config.d_g, 1.0))
        .collect();
    let gene_dirs: Vec<Vec<Vec<f64>>> = (0..config.n_groups)
        .map(|_| directions(&mut rng, c, config.d_g))
        .collect();
    let subtypes = subtype_map(&mut rng, c);
    let hazards = config.hazards();

    // Disjoint signal-free subsets, one per modality.
    let n_off = ((1.0 - config.signal_presence) * config.n_samples as f64).round() as usize;
    let mut shuffled: Vec<usize> = (0..config.n_samples).collect();
    shuffled.shuffle(&mut rng);
    let path_off: HashSet<usize> = shuffled.iter().take(n_off).copied().collect();
    let gene_off: HashSet<usize> = shuffled.iter().skip(n_off).take(n_off).copied().collect();

    let width = (config.n_samples.max(1) - 1).to_string().len().max(3);
    let mut samples = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let class = rng.gen_range(0..c);
        let path_signal = !path_off.contains(&i);
        let gene_signal = !gene_off.contains(&i);

        let m = rng.gen_range(config.m_min..=config.m_max);
        let n_signal = ((config.signal_fraction * m as f64).round() as usize).clamp(1, m);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
        for p in 0..m {
            let center: Vec<f64> = if p < n_signal {
                let shift = if path_signal { config.signal_p } else { 0.0 };
                signal_center
                    .iter()
                    .zip(&path_dirs[class])
                    .map(|(s, u)| s + shift * u)
                    .collect()
            } else {
                background[rng.gen_range(0..background.len())].clone()
            };
            let noise = gaussian(&mut rng, config.d, config.noise);
            rows.push(center.iter().zip(&noise).map(|(a, b)| a + b).collect());
        }
        rows.shuffle(&mut rng);

        let mut genes = Vec::with_capacity(config.n_groups);
        for (n, mean) in group_means.iter().enumerate() {
            let shift = if gene_signal { config.signal_g } else { 0.0 };
            let noise = gaussian(&mut rng, config.d_g, config.noise);
            genes.push(
                mean.iter()
                    .zip(&gene_dirs[n][class])
                    .zip(&noise)
                    .map(|((g, v), e)| g + shift * v + e)
                    .collect::<Vec<f64>>(),
            );
        }

        let event_time: f64 = Exp::new(hazards[class])
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng);
        let censored = rng.gen_bool(config.censor_rate);
        let time = if censored {
            event_time * rng.gen::<f64>()
        } else {
            event_time
        };

        samples.push(SampleRecord {
            id: format!("s{i:0width$}"),
            patch_features: narrow(Tensor::from_rows(&rows)?),
            gene_groups: narrow(Tensor::from_rows(&genes)?),
            grade: class,
            subtype: subtypes[class],
            survival: SurvivalTarget {
                time,
                censored,
                bin: 0,
            },
        });
    }
    Ok(Dataset {
        samples,
        n_classes: c,
    })
}

/// Generates the cohort and writes features, manifest and the generator
/// config under `out`.
pub fn generate(config: &GeneratorConfig, out: &Path) -> Result<Dataset> {
    let dataset = synthesize(config)?;
    let features = out.join("features");
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let mut manifest = String::new();
    for s in &dataset.samples {
        let path_file = format!("features/{}_path.umfb", s.id);
        let gene_file = format!("features/{}_gene.umfb", s.id);
        write_feature_file(&out.join(&path_file), &s.patch_features)?;
        write_feature_file(&out.join(&gene_file), &s.gene_groups)?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            grade: s.grade,
            subtype: s.subtype,
            surv_time: s.survival.time,
            censor: u8::from(s.survival.censored),
            path_file,
            gene_file,
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    let mpath = out.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let gpath = out.join(GENERATOR_FILE);
    let json = serde_json::to_string_pretty(config)?;
    std::fs::write(&gpath, json + "\n").map_err(|e| Error::io(&gpath, e))?;
    Ok(dataset)
}
