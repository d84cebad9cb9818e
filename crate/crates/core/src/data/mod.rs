//! Image-classification datasets: loading, standardization, splitting,
//! subsampling and batching.

mod cifar;
mod idx;

pub use cifar::{load_cifar_binary, write_cifar_binary};
pub use idx::{load_idx, write_idx_images, write_idx_labels, IMAGES_MAGIC, LABELS_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        let [n, ..] = images.dims4("dataset")?;
        if labels.len() != n {
            return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copy of the samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Config(format!("{}: empty selection", self.name)));
        }
        Ok(Dataset {
            images: self.images.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: self.name.clone(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Minibatches in order, or in a seeded random order. The final short
    /// batch is kept.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
        let order = match shuffle_seed {
            Some(s) => Rng::new(s).permutation(self.len()),
            None => (0..self.len()).collect(),
        };
        Batches {
            ds: self,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug)]
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl ExactSizeIterator for Batches<'_> {}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.ds.images.gather_rows(idx).map(|images| Batch {
            images,
            labels: idx.iter().map(|&i| self.ds.labels[i]).collect(),
        }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Self {
        let [c, h, w] = ds.sample_shape();
        let hw = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, plane) in ds.images.data().chunks_exact(hw).enumerate() {
            let ch = i % c;
            for &v in plane {
                let v = v as f64;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        let m = (ds.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, mu)| (s / m - mu * mu).max(0.0).sqrt().max(1e-8))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        let [c, h, w] = ds.sample_shape();
        if c != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                expected: vec![self.mean.len()],
                got: vec![c],
            });
        }
        let hw = h * w;
        for (i, plane) in ds.images.data_mut().chunks_exact_mut(hw).enumerate() {
            let ch = i % c;
            let (mu, sd) = (self.mean[ch], self.std[ch]);
            plane.iter_mut().for_each(|v| *v = ((*v as f64 - mu) / sd) as f32);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub val_fraction: f64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            val_fraction: 0.2,
        }
    }
}

/// Seeded disjoint train/validation split; every index lands in exactly
/// one side.
pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::Config(format!("validation fraction {} not in [0, 1)", spec.val_fraction)));
    }
    let n = ds.len();
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Config(format!("cannot split {n} samples with fraction {}", spec.val_fraction)));
    }
    let mut order = Rng::new(spec.seed).fork(1).permutation(n);
    let val_idx = order.split_off(n - n_val);
    Ok((ds.select(&order)?, ds.select(&val_idx)?))
}

/// Uniform random subset of `n` samples without stratification.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() || n == 0 {
        return Err(Error::Config(format!("cannot subsample {n} of {} samples", ds.len())));
    }
    let mut order = Rng::new(seed).fork(2).permutation(ds.len());
    order.truncate(n);
    ds.select(&order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 2, 3, 3], |i| ((i * 7919) % 255) as f32 / 255.0).unwrap();
        Dataset::new(images, (0..n).map(|i| i % classes).collect(), classes, "toy").unwrap()
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let ds = toy(101, 3);
        let (a, b) = split(&ds, SplitSpec::new(4)).unwrap();
        let (c, d) = split(&ds, SplitSpec::new(4)).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(b.len(), 20);
        assert_eq!(a.len(), 81);
        let (_, e) = split(&ds, SplitSpec::new(5)).unwrap();
        assert_ne!(b, e);
    }

    #[test]
    fn subsample_exact_size() {
        let ds = toy(1500, 10);
        let s = subsample(&ds, 1000, 0).unwrap();
        assert_eq!(s.len(), 1000);
        assert!(subsample(&ds, 1501, 0).is_err());
    }

    #[test]
    fn batches_keep_short_tail() {
        let ds = toy(10, 2);
        let sizes: Vec<usize> = ds.batches(4, None).map(|b| b.unwrap().labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(ds.batches(4, Some(1)).len(), 3);
        let a: Vec<usize> = ds.batches(3, Some(9)).flat_map(|b| b.unwrap().labels).collect();
        let b: Vec<usize> = ds.batches(3, Some(9)).flat_map(|b| b.unwrap().labels).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn standardizes_training_split() {
        let mut ds = toy(64, 2);
        let norm = Normalizer::fit(&ds);
        norm.apply(&mut ds).unwrap();
        let refit = Normalizer::fit(&ds);
        for (m, s) in refit.mean.iter().zip(&refit.std) {
            assert!(m.abs() < 1e-3, "{m}");
            assert!((s - 1.0).abs() < 1e-2, "{s}");
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let images = Tensor::zeros(&[2, 1, 2, 2]).unwrap();
        assert!(Dataset::new(images.clone(), vec![0, 5], 3, "x").is_err());
        assert!(Dataset::new(images, vec![0], 3, "x").is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 5usize..300, seed in 0u64..1000, frac in 0.05f64..0.6) {
            let images = Tensor::from_fn(&[n, 1, 1, 1], |i| i as f32).unwrap();
            let ds = Dataset::new(images, vec![0; n], 2, "idx").unwrap();
            prop_assume!((n as f64 * frac).round() as usize >= 1);
            let (a, b) = split(&ds, SplitSpec { seed, val_fraction: frac }).unwrap();
            let mut all: Vec<usize> = a.images.data().iter().chain(b.images.data()).map(|&v| v as usize).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let want = (n as f64 * frac).round() as usize;
            prop_assert!((b.len() as i64 - want as i64).abs() <= 1);
        }
    }
}
