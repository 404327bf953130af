//! Labeled datasets: synthetic generators, the CIFAR-10 binary format, and
//! stochastic augmentations.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, ...sample_shape]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() < 2 || inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside {num_classes} classes")));
        }
        if !inputs.is_finite() {
            return Err(Error::Data("non-finite input values".into()));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the rows in `index`.
    pub fn batch(&self, index: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(index),
            index.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, index: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(index);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// First `per_class` samples of every class, in dataset order.
    pub fn take_per_class(&self, per_class: usize) -> Dataset {
        let mut seen = vec![0; self.num_classes];
        let index: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let y = self.labels[i];
                seen[y] += 1;
                seen[y] <= per_class
            })
            .collect();
        self.subset(&index)
    }
}

/// Shuffled minibatch order for one epoch; the final partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

/// Gaussian clusters around random class centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBlobs {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class centers.
    pub separation: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticBlobs {
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes < 2 || self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Data("blob dataset needs 2+ classes and nonempty splits".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let centers: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut split = |per_class: usize| {
            let mut data = Vec::with_capacity(per_class * self.classes * self.dim);
            let mut labels = Vec::new();
            for i in 0..per_class * self.classes {
                let y = i % self.classes;
                data.extend(
                    centers[y]
                        .iter()
                        .map(|c| c + self.noise * rng.sample::<f64, _>(StandardNormal)),
                );
                labels.push(y);
            }
            Dataset::new(Tensor::new(&[labels.len(), self.dim], data)?, labels, self.classes)
        };
        let train = split(self.train_per_class)?;
        let test = split(self.test_per_class)?;
        Ok((train, test))
    }
}

/// Small multi-channel images. Every class combines a few primitives (soft
/// colored blobs) drawn from a pool shared by all classes; samples jitter the
/// primitive intensities, translate the image and add pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImages {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pool: usize,
    pub primitives_per_class: usize,
    pub amplitude_jitter: f64,
    pub max_shift: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticImages {
    fn default() -> Self {
        Self {
            classes: 16,
            channels: 3,
            size: 12,
            train_per_class: 64,
            test_per_class: 64,
            pool: 24,
            primitives_per_class: 3,
            amplitude_jitter: 0.4,
            max_shift: 2,
            noise: 0.6,
            seed: 0,
        }
    }
}

struct Primitive {
    cx: f64,
    cy: f64,
    sigma: f64,
    color: Vec<f64>,
}

impl SyntheticImages {
    pub fn sample_shape(&self) -> Vec<usize> {
        vec![self.channels, self.size, self.size]
    }

    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes < 2
            || self.channels == 0
            || self.size < 4
            || self.primitives_per_class == 0
            || self.primitives_per_class > self.pool
            || self.train_per_class == 0
            || self.test_per_class == 0
        {
            return Err(Error::Data(format!("invalid synthetic image settings {self:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.size as f64;
        let pool: Vec<Primitive> = (0..self.pool)
            .map(|_| Primitive {
                cx: rng.random_range(0.15 * s..0.85 * s),
                cy: rng.random_range(0.15 * s..0.85 * s),
                sigma: rng.random_range(0.08 * s..0.2 * s),
                color: (0..self.channels).map(|_| rng.sample(StandardNormal)).collect(),
            })
            .collect();
        let recipes: Vec<Vec<(usize, f64)>> = (0..self.classes)
            .map(|_| {
                rand::seq::index::sample(&mut rng, self.pool, self.primitives_per_class)
                    .into_iter()
                    .map(|p| (p, if rng.random_bool(0.5) { 1.5 } else { -1.5 }))
                    .collect()
            })
            .collect();
        let area = self.channels * self.size * self.size;
        let mut split = |per_class: usize| {
            let n = per_class * self.classes;
            let mut data = vec![0.0; n * area];
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let y = i % self.classes;
                labels.push(y);
                let shift = self.max_shift as i64;
                let dx = rng.random_range(-shift..=shift) as f64;
                let dy = rng.random_range(-shift..=shift) as f64;
                let img = &mut data[i * area..(i + 1) * area];
                for &(p, amp) in &recipes[y] {
                    let prim = &pool[p];
                    let a = amp * (1.0 + self.amplitude_jitter * rng.sample::<f64, _>(StandardNormal));
                    let denom = 2.0 * prim.sigma * prim.sigma;
                    for r in 0..self.size {
                        for c in 0..self.size {
                            let ddx = c as f64 - prim.cx - dx;
                            let ddy = r as f64 - prim.cy - dy;
                            let v = a * (-(ddx * ddx + ddy * ddy) / denom).exp();
                            for (ch, col) in prim.color.iter().enumerate() {
                                img[(ch * self.size + r) * self.size + c] += v * col;
                            }
                        }
                    }
                }
                for v in img.iter_mut() {
                    *v += self.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut shape = vec![n];
            shape.extend(self.sample_shape());
            Dataset::new(Tensor::new(&shape, data)?, labels, self.classes)
        };
        let train = split(self.train_per_class)?;
        let test = split(self.test_per_class)?;
        Ok((train, test))
    }
}

const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn read_cifar_files(dir: &Path, files: &[String], limit: Option<usize>) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    'files: for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!("{} is not a CIFAR-10 binary batch", path.display())));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if limit.is_some_and(|l| labels.len() >= l) {
                break 'files;
            }
            labels.push(rec[0] as usize);
            for (i, &px) in rec[1..].iter().enumerate() {
                let ch = i / 1024;
                data.push((px as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
            }
        }
    }
    Dataset::new(Tensor::new(&[labels.len(), 3, 32, 32], data)?, labels, 10)
}

/// Reads the CIFAR-10 binary distribution (`data_batch_{1..5}.bin`,
/// `test_batch.bin`) with per-channel standardization; `limit`s cap the
/// number of training / test images.
pub fn load_cifar10(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<(Dataset, Dataset)> {
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train = read_cifar_files(dir, &train_files, train_limit)?;
    let test = read_cifar_files(dir, &["test_batch.bin".to_string()], test_limit)?;
    Ok((train, test))
}

/// Random per-sample transformations. Image batches `[n, c, h, w]` get
/// translation with zero fill, horizontal flips, intensity scaling and
/// noise; vector batches `[n, f]` get scaling, coordinate dropout and noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub max_shift: usize,
    pub flip: bool,
    pub scale_jitter: f64,
    pub dropout: f64,
    pub noise: f64,
}

impl Augment {
    pub fn none() -> Self {
        Self {
            max_shift: 0,
            flip: false,
            scale_jitter: 0.0,
            dropout: 0.0,
            noise: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }

    pub fn apply(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(x.clone());
        }
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::param("noise", e.to_string()))?;
        let mut out = x.clone();
        let n = x.rows();
        let row = x.row_len();
        for i in 0..n {
            let src = x.row(i);
            let dst = out.row_mut(i);
            if let [_, c, h, w] = *x.shape() {
                let s = self.max_shift as i64;
                let dx = rng.random_range(-s..=s);
                let dy = rng.random_range(-s..=s);
                let flip = self.flip && rng.random_bool(0.5);
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            let sr = r as i64 - dy;
                            let mut sc = col as i64 - dx;
                            if flip {
                                sc = w as i64 - 1 - sc;
                            }
                            dst[(ch * h + r) * w + col] = if (0..h as i64).contains(&sr) && (0..w as i64).contains(&sc) {
                                src[(ch * h + sr as usize) * w + sc as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            } else if self.dropout > 0.0 {
                for v in dst.iter_mut() {
                    if rng.random_bool(self.dropout) {
                        *v = 0.0;
                    }
                }
            }
            let scale = if self.scale_jitter > 0.0 {
                1.0 + rng.random_range(-self.scale_jitter..=self.scale_jitter)
            } else {
                1.0
            };
            for v in dst.iter_mut().take(row) {
                *v = *v * scale + if self.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Tensor::zeros(&[2, 3]), vec![0], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[2, 3]), vec![0, 2], 2).is_err());
        assert!(Dataset::new(Tensor::full(&[1, 1], f64::NAN), vec![0], 2).is_err());
        let d = Dataset::new(Tensor::zeros(&[2, 3]), vec![0, 1], 2).unwrap();
        assert_eq!(d.sample_shape(), &[3]);
    }

    #[test]
    fn generators_are_deterministic_and_balanced() {
        let gen = SyntheticImages {
            classes: 4,
            size: 8,
            train_per_class: 3,
            test_per_class: 2,
            ..Default::default()
        };
        let (a, t) = gen.generate().unwrap();
        let (b, _) = gen.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.inputs.shape(), &[12, 3, 8, 8]);
        assert_eq!(t.len(), 8);
        for y in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == y).count(), 3);
        }
        let blobs = SyntheticBlobs {
            classes: 3,
            dim: 5,
            train_per_class: 4,
            test_per_class: 1,
            separation: 3.0,
            noise: 0.1,
            seed: 1,
        };
        let (tr, te) = blobs.generate().unwrap();
        assert_eq!(tr.inputs.shape(), &[12, 5]);
        assert_eq!(te.take_per_class(1).len(), 3);
    }

    #[test]
    fn epoch_batches_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(10, 3, &mut rng);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
    }

    #[test]
    fn translation_moves_pixels() {
        let aug = Augment {
            max_shift: 1,
            ..Augment::none()
        };
        let mut x = Tensor::zeros(&[1, 1, 3, 3]);
        x.data_mut()[4] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let y = aug.apply(&x, &mut rng).unwrap();
            assert_eq!(y.sum(), 1.0);
        }
        assert_eq!(Augment::none().apply(&x, &mut rng).unwrap(), x);
    }

    #[test]
    fn flip_reverses_columns() {
        let aug = Augment {
            flip: true,
            ..Augment::none()
        };
        let x = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..20 {
            let y = aug.apply(&x, &mut rng).unwrap();
            seen.insert(y.data().iter().map(|v| *v as i64).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 2);
        assert!(seen.contains(&vec![3, 2, 1]));
    }

    #[test]
    fn missing_cifar_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path(), None, None), Err(Error::Io { .. })));
        std::fs::write(dir.path().join("data_batch_1.bin"), [0u8; 5]).unwrap();
        assert!(matches!(load_cifar10(dir.path(), None, None), Err(Error::Data(_))));
    }

    #[test]
    fn cifar_records_parse() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(255u8).take(3072));
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &rec).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let (train, test) = load_cifar10(dir.path(), Some(3), None).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.labels, vec![7]);
        let expect = (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0];
        assert!((train.inputs.data()[0] - expect).abs() < 1e-12);
    }
}
