//! In-memory datasets, synthetic data and image augmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[N x sample_shape]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if images.shape().len() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::dim("Dataset::new", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain(format!("label {bad} outside 0..{class_count}")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Contiguous samples `start..end` as a batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<(Tensor, &[usize])> {
        if start >= end || end > self.len() {
            return Err(Error::Domain(format!("slice {start}..{end} of {} samples", self.len())));
        }
        let s = self.sample_len();
        let mut shape = vec![end - start];
        shape.extend_from_slice(self.sample_shape());
        let images = Tensor::new(shape, self.images.data()[start * s..end * s].to_vec())?;
        Ok((images, &self.labels[start..end]))
    }

    /// Batch of the samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Domain(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * s..(i + 1) * s]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let (images, labels) = self.slice(0, n).expect("in range");
        Self {
            images,
            labels: labels.to_vec(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    pub fn reshape_samples(mut self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.images = self.images.reshape(full)?;
        Ok(self)
    }

    /// Affine map of all pixel values onto `[0, 1]`.
    pub fn rescale_to_unit(&mut self) {
        let d = self.images.data_mut();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        d.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
}

/// Fraction of samples the network classifies correctly.
pub fn accuracy(net: &Network, data: &Dataset, chunk: usize) -> Result<f64> {
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk.max(1)).min(data.len());
        let (images, labels) = data.slice(start, end)?;
        let pred = net.predict(&images)?;
        correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        start = end;
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Gaussian clusters (unit variance) around random centres at pairwise
/// distance at least `separation`. Labels cycle `0, 1, .., classes-1`.
pub fn synth_blobs(n: usize, dims: usize, classes: usize, separation: f64, rng: &mut Rng) -> Result<Dataset> {
    if separation.is_nan() || separation <= 0.0 {
        return Err(Error::Config(format!("separation {separation} must be > 0")));
    }
    if n == 0 || dims == 0 || classes == 0 {
        return Err(Error::Config("blobs need n, dims, classes >= 1".into()));
    }
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut radius = separation;
    let mut failures = 0;
    while centres.len() < classes {
        let mut c: Vec<f64> = (0..dims).map(|_| rng.normal()).collect();
        let len = libm::sqrt(c.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
        c.iter_mut().for_each(|x| *x *= radius / len);
        let far = centres.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            libm::sqrt(d2) >= separation
        });
        if far {
            centres.push(c);
        } else {
            failures += 1;
            if failures % 100 == 0 {
                radius *= 1.5;
            }
        }
    }
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        data.extend(centres[k].iter().map(|c| c + rng.normal()));
    }
    Dataset::new(Tensor::new(vec![n, dims], data)?, labels, classes, Split::Train)
}

fn channel_layout(shape: &[usize]) -> (usize, usize) {
    // (channels, values per channel per sample)
    match shape {
        [c, rest @ ..] if !rest.is_empty() => (*c, rest.iter().product()),
        _ => (1, shape.iter().product()),
    }
}

/// Per-channel mean and standard deviation, fitted on a training split
/// and reused verbatim for every other split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let (c, per) = channel_layout(train.sample_shape());
        let s = train.sample_len();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let count = (train.len() * per) as f64;
        for sample in train.images.data().chunks(s) {
            for ch in 0..c {
                for &v in &sample[ch * per..(ch + 1) * per] {
                    mean[ch] += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for sample in train.images.data().chunks(s) {
            for ch in 0..c {
                for &v in &sample[ch * per..(ch + 1) * per] {
                    sq[ch] += (v - mean[ch]) * (v - mean[ch]);
                }
            }
        }
        let std = sq
            .iter()
            .map(|q| {
                let s = libm::sqrt(q / count);
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        let (c, per) = channel_layout(data.sample_shape());
        if c != self.mean.len() {
            return Err(Error::dim("Standardizer::apply", &[self.mean.len()], &[c]));
        }
        let s = data.sample_len();
        for sample in data.images.data_mut().chunks_mut(s) {
            for ch in 0..c {
                for v in &mut sample[ch * per..(ch + 1) * per] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
        Ok(())
    }
}

/// Zero-pads every plane of a `C x H x W` sample by `pad` on each side.
pub fn pad_image(x: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = (ch * ph + y + pad) * pw + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// `h x w` window at offset `(dy, dx)` of a padded `C x ph x pw` sample.
#[allow(clippy::too_many_arguments)]
pub fn crop_image(x: &[f64], c: usize, ph: usize, pw: usize, dy: usize, dx: usize, h: usize, w: usize) -> Vec<f64> {
    assert!(dy + h <= ph && dx + w <= pw, "crop outside image");
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let start = (ch * ph + dy + y) * pw + dx;
            out.extend_from_slice(&x[start..start + w]);
        }
    }
    out
}

pub fn flip_horizontal(x: &mut [f64], c: usize, h: usize, w: usize) {
    for ch in 0..c {
        for y in 0..h {
            x[(ch * h + y) * w..(ch * h + y + 1) * w].reverse();
        }
    }
}

/// Padding used by [`augment`] before the random crop.
pub const AUGMENT_PAD: usize = 4;

/// Training-time augmentation of a `[B x C x H x W]` batch: zero-pad by
/// four pixels, take a random `H x W` crop, flip horizontally with
/// probability one half. Standardisation is applied to the dataset up
/// front, not here. Draws per sample: crop row, crop column, flip.
pub fn augment(batch: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let [b, c, h, w] = batch.shape()[..] else {
        return Err(Error::dim("augment", batch.shape(), &[0, 0, 0, 0]));
    };
    let s = c * h * w;
    let mut out = Vec::with_capacity(b * s);
    for sample in batch.data().chunks(s) {
        let padded = pad_image(sample, c, h, w, AUGMENT_PAD);
        let dy = rng.below(2 * AUGMENT_PAD + 1);
        let dx = rng.below(2 * AUGMENT_PAD + 1);
        let mut crop = crop_image(&padded, c, h + 2 * AUGMENT_PAD, w + 2 * AUGMENT_PAD, dy, dx, h, w);
        if rng.bernoulli(0.5) {
            flip_horizontal(&mut crop, c, h, w);
        }
        out.extend(crop);
    }
    Tensor::new(batch.shape().to_vec(), out)
}
