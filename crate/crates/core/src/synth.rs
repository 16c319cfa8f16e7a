//! Synthetic bag datasets.
//!
//! Each class gets a prototype vector on a sphere; a bag carries
//! `ceil(witness_rate * M)` witness instances (prototype plus Gaussian noise)
//! among background instances (pure Gaussian noise around the origin). Two
//! knobs — prototype separation and witness rate — control difficulty. All
//! values are quantized to `f32` at generation time, so in-memory bags match
//! the on-disk format exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::SlideBag;
use crate::bagio;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_slides: usize,
    pub classes: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub feature_dim: usize,
    /// Fraction of instances carrying class evidence, in (0, 1].
    pub witness_rate: f64,
    /// Target distance between class prototype vectors.
    pub prototype_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        // The "easy" benchmark configuration.
        SyntheticSpec {
            num_slides: 300,
            classes: 4,
            instances_min: 30,
            instances_max: 60,
            feature_dim: 64,
            witness_rate: 0.3,
            prototype_separation: 6.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("classes", "must be at least 2"));
        }
        if self.num_slides < self.classes {
            return Err(Error::invalid("num_slides", "must be at least `classes`"));
        }
        if self.instances_min < 1 || self.instances_max < self.instances_min {
            return Err(Error::invalid("instances_min", "need 1 <= instances_min <= instances_max"));
        }
        if self.feature_dim < 1 {
            return Err(Error::invalid("feature_dim", "must be at least 1"));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return Err(Error::invalid("witness_rate", "must be in (0, 1]"));
        }
        if !(self.prototype_separation > 0.0) {
            return Err(Error::invalid("prototype_separation", "must be positive"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: SyntheticSpec =
            serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub path: String,
    pub num_instances: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: usize,
    pub feature_dim: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Class prototypes on a sphere, resampled until every pairwise distance
/// reaches `0.9 * separation`. The sphere radius is `separation / sqrt(2)`:
/// independent directions in high dimension are near-orthogonal, so pairwise
/// distances concentrate at the requested separation.
pub fn sample_prototypes(spec: &SyntheticSpec, rng: &mut Rng) -> Matrix<f64> {
    let radius = spec.prototype_separation / std::f64::consts::SQRT_2;
    loop {
        let mut protos = Matrix::zeros(spec.classes, spec.feature_dim);
        for c in 0..spec.classes {
            let mut norm = 0.0;
            let row = protos.row_mut(c);
            for v in row.iter_mut() {
                *v = rng.normal();
                norm += *v * *v;
            }
            let scale = radius / norm.sqrt();
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        let mut ok = true;
        'pairs: for a in 0..spec.classes {
            for b in (a + 1)..spec.classes {
                let d2: f64 = protos
                    .row(a)
                    .iter()
                    .zip(protos.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d2.sqrt() < 0.9 * spec.prototype_separation {
                    ok = false;
                    break 'pairs;
                }
            }
        }
        if ok {
            return protos;
        }
    }
}

fn quantize(m: &mut Matrix<f64>) {
    for v in m.data_mut() {
        *v = (*v as f32) as f64;
    }
}

/// Generates the dataset in memory. Labels cycle through the classes, so
/// counts are balanced within one; bag row order is shuffled per bag.
pub fn generate_bags(spec: &SyntheticSpec) -> Result<(Vec<SlideBag<f64>>, Matrix<f64>)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let prototypes = sample_prototypes(spec, &mut rng);
    let mut bags = Vec::with_capacity(spec.num_slides);
    for i in 0..spec.num_slides {
        let label = i % spec.classes;
        let m = spec.instances_min + rng.below(spec.instances_max - spec.instances_min + 1);
        let witnesses = ((spec.witness_rate * m as f64).ceil() as usize).clamp(1, m);
        let mut instances = Matrix::zeros(m, spec.feature_dim);
        let mut rows: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut rows);
        for (slot, &r) in rows.iter().enumerate() {
            let is_witness = slot < witnesses;
            let row = instances.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                let center = if is_witness { prototypes[(label, j)] } else { 0.0 };
                *v = center + spec.noise_sigma * rng.normal();
            }
        }
        quantize(&mut instances);
        bags.push(SlideBag::new(format!("slide_{i:04}"), instances, label)?);
    }
    Ok((bags, prototypes))
}

/// Generates the dataset and writes one bag file per slide plus
/// `manifest.json` into `out_dir`.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let (bags, _) = generate_bags(spec)?;
    let mut entries = Vec::with_capacity(bags.len());
    for bag in &bags {
        let file = format!("{}.sgcd", bag.id);
        bagio::write_bag(out_dir.join(&file), &bag.instances)?;
        entries.push(ManifestEntry {
            id: bag.id.clone(),
            label: bag.label,
            path: file,
            num_instances: bag.num_instances(),
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        classes: spec.classes,
        feature_dim: spec.feature_dim,
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads a dataset directory written by [`generate_synthetic_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<SlideBag<f64>>)> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    let mut bags = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if entry.label >= manifest.classes {
            return Err(Error::LabelOutOfRange { label: entry.label, classes: manifest.classes });
        }
        if !seen.insert(entry.id.clone()) {
            return Err(Error::invalid("entries", format!("duplicate id `{}`", entry.id)));
        }
        let instances = bagio::read_bag(dir.join(&entry.path))?;
        if instances.rows() != entry.num_instances {
            return Err(Error::invalid(
                "num_instances",
                format!(
                    "manifest says {} for `{}`, file has {}",
                    entry.num_instances,
                    entry.id,
                    instances.rows()
                ),
            ));
        }
        if instances.cols() != manifest.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "bag `{}` has width {}, manifest says {}",
                entry.id,
                instances.cols(),
                manifest.feature_dim
            )));
        }
        bags.push(SlideBag::new(entry.id.clone(), instances, entry.label)?);
    }
    Ok((manifest, bags))
}

/// Accuracy of the nearest-prototype classifier on bag-mean features — the
/// independent check that a generated task is learnable at all.
pub fn nearest_prototype_accuracy(bags: &[SlideBag<f64>], prototypes: &Matrix<f64>) -> f64 {
    let mut correct = 0usize;
    for bag in bags {
        let d = bag.feature_dim();
        let mut mean = vec![0.0; d];
        for r in 0..bag.num_instances() {
            for (m, &v) in mean.iter_mut().zip(bag.instances.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= bag.num_instances() as f64;
        }
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..prototypes.rows() {
            let d2: f64 = mean
                .iter()
                .zip(prototypes.row(c))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if d2 < best.0 {
                best = (d2, c);
            }
        }
        if best.1 == bag.label {
            correct += 1;
        }
    }
    correct as f64 / bags.len() as f64
}
