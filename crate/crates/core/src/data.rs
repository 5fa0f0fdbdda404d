//! Synthetic spike data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::training::Sample;

/// Firing probability of a class's own channels in [`gen_toy`].
pub const TOY_SIGNAL_RATE: f64 = 0.8;
/// Firing probability of every other channel.
pub const TOY_BACKGROUND_RATE: f64 = 0.05;

fn bernoulli<F: Scalar, R: Rng>(rng: &mut R, p: f64) -> F {
    if rng.gen::<f64>() < p {
        F::ONE
    } else {
        F::ZERO
    }
}

/// Independent Bernoulli(`rate`) spikes, shape `[t × n]`.
pub fn gen_random_spikes<F: Scalar>(n: usize, t: usize, rate: f64, seed: u64) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::validation(
            "rate",
            format!("must lie in [0, 1], got {rate}"),
        ));
    }
    if n == 0 || t == 0 {
        return Err(Error::validation(
            "spike raster",
            "n and t must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * t).map(|_| bernoulli(&mut rng, rate)).collect();
    Tensor::new(vec![t, n], data)
}

/// Channels driven by `class`: an equal, disjoint slice of the inputs.
pub fn toy_channels(class: usize, classes: usize, n_in: usize) -> std::ops::Range<usize> {
    let k = n_in / classes;
    class * k..(class + 1) * k
}

/// Rate-coded classification data. Each class drives its own block of
/// input channels at a high rate over a low background. Samples cycle
/// through the classes: sample `j` has label `j % classes`.
pub fn gen_toy<F: Scalar>(
    classes: usize,
    n_in: usize,
    t: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<Sample<F>>> {
    if classes < 2 {
        return Err(Error::validation(
            "classes",
            format!("need at least 2, got {classes}"),
        ));
    }
    if classes > n_in {
        return Err(Error::validation(
            "classes",
            format!("{classes} classes need at least as many input channels, got {n_in}"),
        ));
    }
    if t == 0 || samples_per_class == 0 {
        return Err(Error::validation(
            "toy data",
            "t and samples_per_class must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * samples_per_class);
    for j in 0..classes * samples_per_class {
        let class = j % classes;
        let active = toy_channels(class, classes, n_in);
        let mut data = Vec::with_capacity(t * n_in);
        for _ in 0..t {
            for ch in 0..n_in {
                let p = if active.contains(&ch) {
                    TOY_SIGNAL_RATE
                } else {
                    TOY_BACKGROUND_RATE
                };
                data.push(bernoulli(&mut rng, p));
            }
        }
        out.push(Sample::labeled(
            Tensor::new(vec![t, n_in], data)?,
            class,
            classes,
        )?);
    }
    Ok(out)
}

/// On-disk dataset: labelled `[t × n]` rasters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub version: u32,
    pub classes: usize,
    pub samples: Vec<SampleFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleFile {
    pub label: usize,
    /// One row per time step.
    pub spikes: Vec<Vec<f64>>,
}

pub fn load_dataset<F: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Sample<F>>> {
    let file: DatasetFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.version != 1 {
        return Err(Error::validation(
            "dataset version",
            format!("expected 1, got {}", file.version),
        ));
    }
    let mut out = Vec::with_capacity(file.samples.len());
    for (j, s) in file.samples.iter().enumerate() {
        let t = s.spikes.len();
        let n = s.spikes.first().map_or(0, Vec::len);
        if t == 0 || n == 0 || s.spikes.iter().any(|r| r.len() != n) {
            return Err(Error::validation(
                "dataset sample",
                format!("sample {j} must be a non-empty rectangular raster"),
            ));
        }
        let data: Vec<f64> = s.spikes.concat();
        out.push(Sample::labeled(
            Tensor::from_f64(vec![t, n], &data)?,
            s.label,
            file.classes,
        )?);
    }
    Ok(out)
}

pub fn save_dataset<F: Scalar>(samples: &[Sample<F>], path: impl AsRef<Path>) -> Result<()> {
    let classes = samples.first().map_or(0, |s| s.target.numel());
    let file = DatasetFile {
        version: 1,
        classes,
        samples: samples
            .iter()
            .map(|s| {
                let t = s.input.shape()[0];
                let n = s.input.numel() / t;
                let v = s.input.to_f64_vec();
                SampleFile {
                    label: s.label(),
                    spikes: v.chunks(n).map(<[f64]>::to_vec).collect(),
                }
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}
