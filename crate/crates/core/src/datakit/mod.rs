//! Synthetic cohorts, the feature-file format, manifests and fold splits.

mod format;
mod generate;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use format::{decode, encode, read_feature_file, write_feature_file, MAGIC};
pub use generate::{generate, synthesize, GeneratorConfig, GENERATOR_FILE};

use crate::error::{Error, Result};
use crate::fusion::Task;
use crate::losses::SurvivalTarget;
use crate::numkit::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// M×d patch bag.
    pub patch_features: Tensor,
    /// N×d_g gene groups.
    pub gene_groups: Tensor,
    pub grade: usize,
    pub subtype: usize,
    pub survival: SurvivalTarget,
}

impl SampleRecord {
    /// Class label for a diagnosis task.
    pub fn label(&self, task: Task) -> usize {
        match task {
            Task::Grading => self.grade,
            Task::Classification => self.subtype,
            Task::Survival => self.survival.bin,
        }
    }
}

/// One manifest line. `censor` is 1 when the event was not observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub grade: usize,
    pub subtype: usize,
    pub surv_time: f64,
    pub censor: u8,
    pub path_file: String,
    pub gene_file: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn find(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn patch_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.patch_features.cols())
    }

    pub fn gene_shape(&self) -> (usize, usize) {
        self.samples
            .first()
            .map_or((0, 0), |s| s.gene_groups.shape())
    }

    /// Reads `manifest.jsonl` and every feature file it references.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(dir)?;
        let mut samples = Vec::with_capacity(entries.len());
        for e in entries {
            let patch_features = read_feature_file(&dir.join(&e.path_file))?;
            let gene_groups = read_feature_file(&dir.join(&e.gene_file))?;
            samples.push(SampleRecord {
                id: e.id,
                patch_features,
                gene_groups,
                grade: e.grade,
                subtype: e.subtype,
                survival: SurvivalTarget {
                    time: e.surv_time,
                    censored: e.censor != 0,
                    bin: 0,
                },
            });
        }
        let dataset = Self {
            n_classes: samples
                .iter()
                .map(|s| s.grade.max(s.subtype) + 1)
                .max()
                .unwrap_or(0),
            samples,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.samples.first() else {
            return Err(Error::Contract("dataset has no samples".into()));
        };
        let d = first.patch_features.cols();
        let g = first.gene_groups.shape();
        for s in &self.samples {
            if s.patch_features.rows() == 0 || s.patch_features.cols() != d {
                return Err(Error::Contract(format!(
                    "{}: patch bag {:?} does not match width {d}",
                    s.id,
                    s.patch_features.shape()
                )));
            }
            if s.gene_groups.shape() != g {
                return Err(Error::Contract(format!(
                    "{}: gene groups {:?} differ from {g:?}",
                    s.id,
                    s.gene_groups.shape()
                )));
            }
            if !s.patch_features.is_finite() || !s.gene_groups.is_finite() {
                return Err(Error::Contract(format!("{}: non-finite features", s.id)));
            }
            if !(s.survival.time.is_finite() && s.survival.time >= 0.0) {
                return Err(Error::Contract(format!("{}: invalid survival time", s.id)));
            }
        }
        Ok(())
    }
}

/// Parses `dir/manifest.jsonl`, checking id uniqueness and file presence.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest { line: i + 1, msg };
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !seen.insert(entry.id.clone()) {
            return Err(err(format!("duplicate id {:?}", entry.id)));
        }
        for f in [&entry.path_file, &entry.gene_file] {
            if !dir.join(f).is_file() {
                return Err(err(format!("missing feature file {f}")));
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Train/test ids for `fold` of a `k`-fold split. Ids are sorted, shuffled
/// with `split_seed`, and position `i` of the shuffle goes to test fold `i % k`.
pub fn kfold_split(
    ids: &[String],
    k: usize,
    fold: usize,
    split_seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if k == 0 || fold >= k {
        return Err(Error::Config(format!(
            "fold {fold} out of range for k = {k}"
        )));
    }
    if k > ids.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} available samples",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, id) in order.into_iter().enumerate() {
        if i % k == fold {
            test.push(id);
        } else {
            train.push(id);
        }
    }
    Ok((train, test))
}
