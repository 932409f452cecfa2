//! CIFAR binary ingestion, per-channel normalization, flip/translate
//! augmentation and synthetic class-separable fixtures.
//!
//! A CIFAR record is `label_bytes` label bytes followed by 3072 pixel bytes
//! (R plane, G plane, B plane, each 32x32 row-major).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PcnError, Result};
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const PAD: usize = 4;
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel moments of a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Population moments per channel, accumulated in f64.
    pub fn compute(images: &Tensor<f32>) -> Self {
        let [n, c, h, w] = images.dims4("channel stats").expect("dataset images are NCHW");
        assert_eq!(c, 3, "dataset images have 3 channels");
        let plane = h * w;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for ch in 0..3 {
            let planes = || (0..n).map(move |i| (i * 3 + ch) * plane);
            let data = images.data();
            let count = (n * plane) as f64;
            let m = planes()
                .map(|o| data[o..o + plane].iter().map(|&v| v as f64).sum::<f64>())
                .sum::<f64>()
                / count;
            let var = planes()
                .map(|o| data[o..o + plane].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[ch] = m;
            std[ch] = var.sqrt();
        }
        Self { mean, std }
    }
}

/// Images `[N, 3, H, W]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Training-split moments used to normalize, once normalized.
    pub stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let [n, c, _, _] = images.dims4("dataset")?;
        if c != 3 {
            return Err(PcnError::shape("dataset", format!("expected 3 channels, got {c}")));
        }
        if labels.len() != n {
            return Err(PcnError::shape(
                "dataset",
                format!("{n} images but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(PcnError::Contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W)`.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn image_len(&self) -> usize {
        let (h, w) = self.image_size();
        3 * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// The first `n` items (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let (h, w) = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            images: Tensor::from_vec(&[indices.len(), 3, h, w], data)
                .expect("selection preserves image size"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            stats: self.stats,
        }
    }

    /// Stack items at `indices` into a batch, optionally transformed.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        mut transform: impl FnMut(&[f32]) -> Vec<f32>,
    ) -> (Tensor<T>, Vec<usize>) {
        let (h, w) = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(transform(self.image(i)).into_iter().map(|v| T::from_f64(v as f64)));
        }
        let x = Tensor::from_vec(&[indices.len(), 3, h, w], data).expect("batch of whole images");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// CIFAR-10 layout bytes for images in `[0, 1]`: one label byte, then
    /// the pixels quantized as `round(255 x)`.
    pub fn to_cifar10_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * (1 + CIFAR_PIXELS));
        for i in 0..self.len() {
            out.push(self.labels[i] as u8);
            out.extend(self.image(i).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        out
    }
}

/// Raw records of one CIFAR binary file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecords {
    pub label_bytes: usize,
    /// `label_bytes` bytes per record.
    pub labels: Vec<u8>,
    /// `CIFAR_PIXELS` bytes per record.
    pub pixels: Vec<u8>,
}

impl CifarRecords {
    pub fn parse(bytes: &[u8], label_bytes: usize, path: &Path) -> Result<Self> {
        let rec = label_bytes + CIFAR_PIXELS;
        if bytes.len() % rec != 0 {
            let offset = (bytes.len() / rec * rec) as u64;
            return Err(PcnError::Data {
                path: path.to_path_buf(),
                offset,
                message: format!(
                    "truncated record: {} of {rec} bytes present",
                    bytes.len() % rec
                ),
            });
        }
        let n = bytes.len() / rec;
        let mut labels = Vec::with_capacity(n * label_bytes);
        let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
        for r in bytes.chunks_exact(rec) {
            labels.extend_from_slice(&r[..label_bytes]);
            pixels.extend_from_slice(&r[label_bytes..]);
        }
        Ok(Self {
            label_bytes,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / CIFAR_PIXELS
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Re-serialize in the source layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() + self.pixels.len());
        for (l, p) in self
            .labels
            .chunks_exact(self.label_bytes)
            .zip(self.pixels.chunks_exact(CIFAR_PIXELS))
        {
            out.extend_from_slice(l);
            out.extend_from_slice(p);
        }
        out
    }

    /// Decode using label byte `label_index`; pixels scale to `p / 255`.
    pub fn to_dataset(&self, label_index: usize, num_classes: usize, path: &Path) -> Result<Dataset> {
        let n = self.len();
        let labels: Vec<usize> = self
            .labels
            .chunks_exact(self.label_bytes)
            .map(|l| l[label_index] as usize)
            .collect();
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(PcnError::Data {
                path: path.to_path_buf(),
                offset: (i * (self.label_bytes + CIFAR_PIXELS) + label_index) as u64,
                message: format!("label {} outside [0, {num_classes})", labels[i]),
            });
        }
        let data = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let images = Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?;
        Dataset::new(images, labels, num_classes)
    }
}

fn read_records(path: &Path, label_bytes: usize) -> Result<CifarRecords> {
    let bytes = std::fs::read(path).map_err(|e| PcnError::io(path, e))?;
    CifarRecords::parse(&bytes, label_bytes, path)
}

fn load_files(
    files: &[PathBuf],
    label_bytes: usize,
    label_index: usize,
    num_classes: usize,
) -> Result<Dataset> {
    let mut parts = Vec::with_capacity(files.len());
    for f in files {
        parts.push(read_records(f, label_bytes)?.to_dataset(label_index, num_classes, f)?);
    }
    concat(&parts)
}

/// Concatenate datasets with equal image size and class count.
pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| PcnError::Contract("nothing to concatenate".into()))?;
    let (h, w) = first.image_size();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.image_size() != (h, w) || p.num_classes != first.num_classes {
            return Err(PcnError::shape("concat", "datasets disagree on layout"));
        }
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    Dataset::new(
        Tensor::from_vec(&[labels.len(), 3, h, w], data)?,
        labels,
        first.num_classes,
    )
}

/// Use `dir/sub` when the archive's folder is present, else `dir` itself.
fn resolve(dir: &Path, sub: &str) -> PathBuf {
    let nested = dir.join(sub);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let root = resolve(dir, "cifar-10-batches-bin");
    let train: Vec<PathBuf> = (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect();
    Ok((
        load_files(&train, 1, 0, 10)?,
        load_files(&[root.join("test_batch.bin")], 1, 0, 10)?,
    ))
}

/// `train.bin` and `test.bin`; records carry (coarse, fine) label bytes and
/// the fine label is used.
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    let root = resolve(dir, "cifar-100-binary");
    Ok((
        load_files(&[root.join("train.bin")], 2, 1, 100)?,
        load_files(&[root.join("test.bin")], 2, 1, 100)?,
    ))
}

/// `x := (x - mean_c) / max(std_c, 1e-8)` with moments from `stats_from`.
pub fn normalize(dataset: &Dataset, stats_from: &Dataset) -> Dataset {
    normalize_with(dataset, &ChannelStats::compute(&stats_from.images))
}

pub fn normalize_with(dataset: &Dataset, stats: &ChannelStats) -> Dataset {
    let [_, _, h, w] = dataset.images.dims4("normalize").expect("dataset images are NCHW");
    let plane = h * w;
    let mut out = dataset.clone();
    for (k, chunk) in out.images.data_mut().chunks_exact_mut(plane).enumerate() {
        let ch = k % 3;
        let mean = stats.mean[ch];
        let scale = 1.0 / stats.std[ch].max(STD_FLOOR);
        for v in chunk {
            *v = ((*v as f64 - mean) * scale) as f32;
        }
    }
    out.stats = Some(*stats);
    out
}

/// Crop `[H, W]` out of the image zero-padded by [`PAD`], with the crop's
/// top-left corner at `(dy, dx)` in padded coordinates, then optionally
/// mirror horizontally. `dx = dy = PAD` with no flip is the identity.
pub fn augment_with(image: &[f32], h: usize, w: usize, dx: usize, dy: usize, flip: bool) -> Vec<f32> {
    assert_eq!(image.len(), 3 * h * w, "augment expects a 3xHxW image");
    assert!(dx <= 2 * PAD && dy <= 2 * PAD, "crop offset outside the padded frame");
    let mut out = vec![0.0; image.len()];
    for c in 0..3 {
        let src = &image[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let sy = (y + dy) as isize - PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + dx) as isize - PAD as isize;
                if sx >= 0 && sx < w as isize {
                    dst[y * w + x] = src[sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random pad-4 crop and horizontal flip with probability 0.5.
pub fn augment<R: Rng + ?Sized>(image: &[f32], h: usize, w: usize, rng: &mut R) -> Vec<f32> {
    let dx = rng.random_range(0..=2 * PAD);
    let dy = rng.random_range(0..=2 * PAD);
    let flip = rng.random_bool(0.5);
    augment_with(image, h, w, dx, dy, flip)
}

/// `n` 32x32 images: class-dependent oriented gratings with a class colour
/// tint plus Gaussian noise, clipped to `[0, 1]`. Label of item `i` is
/// `i mod num_classes`.
pub fn synthetic_dataset(num_classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    synthetic_dataset_sized(num_classes, n, CIFAR_SIDE, seed)
}

pub fn synthetic_dataset_sized(num_classes: usize, n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || n < num_classes {
        return Err(PcnError::Contract(format!(
            "synthetic dataset needs n >= num_classes >= 2, got n={n}, classes={num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid noise std");
    let plane = side * side;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % num_classes;
        let theta = PI * k as f64 / num_classes as f64;
        let (s, c) = theta.sin_cos();
        let freq = 2.0 * PI / 8.0;
        let phase = rng.random_range(0.0..2.0 * PI);
        let hue = 2.0 * PI * k as f64 / num_classes as f64;
        let tint = [hue.cos(), (hue + 2.0 * PI / 3.0).cos(), (hue + 4.0 * PI / 3.0).cos()];
        for t in tint {
            for y in 0..side {
                for x in 0..side {
                    let u = c * x as f64 + s * y as f64;
                    let g = (freq * u + phase).sin();
                    let v = 0.5 + 0.3 * g + 0.15 * t + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(k);
    }
    Dataset::new(Tensor::from_vec(&[n, 3, side, side], data)?, labels, num_classes)
}
