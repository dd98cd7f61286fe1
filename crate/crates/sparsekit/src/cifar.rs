//! CIFAR-10 binary format: fixed 3073-byte records, one label byte then
//! 3072 pixel bytes (R, G and B planes of 32x32, row-major).

use std::fs;
use std::path::{Path, PathBuf};

use sparsekit_core::data::{Dataset, Split};
use sparsekit_core::Tensor;

use crate::error::{Error, Result};

pub const RECORD_LEN: usize = 3073;
pub const PIXELS: usize = 3072;
pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];
pub const CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Decodes one batch file's bytes; `path` is only used in error messages.
pub fn parse_records(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::format(
            path,
            format!(
                "length {} is not a multiple of the {RECORD_LEN}-byte record size",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::format(path, format!("record {i}: label byte {label} > 9")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Ok(Dataset::new(images, labels, CLASSES, split)?)
}

pub fn read_batch(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, path, split)
}

fn concat(parts: Vec<Dataset>, split: Split) -> Result<Dataset> {
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend_from_slice(&p.labels);
        pixels.extend(p.images.into_data());
    }
    Ok(Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, CLASSES, split)?)
}

/// The five training batches (in order) and the test batch.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let missing: Vec<PathBuf> = TRAIN_FILES
        .iter()
        .chain([&TEST_FILE])
        .map(|f| dir.join(f))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        let names: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::DatasetMissing(format!(
            "CIFAR-10 binary batches missing: {}",
            names.join(", ")
        )));
    }
    let train = TRAIN_FILES
        .iter()
        .map(|f| read_batch(&dir.join(f), Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let train = concat(train, Split::Train)?;
    let test = read_batch(&dir.join(TEST_FILE), Split::Test)?;
    Ok((train, test))
}

/// Encodes `[N x 3 x 32 x 32]` images with values in `[0, 1]` (clamped,
/// rounded to the nearest byte) and labels below 10.
pub fn encode_records(data: &Dataset) -> Result<Vec<u8>> {
    if data.sample_shape() != IMAGE_SHAPE {
        return Err(Error::invalid("images", format!("CIFAR-10 records need 3x32x32 samples, got {:?}", data.sample_shape())));
    }
    let mut out = Vec::with_capacity(data.len() * RECORD_LEN);
    for (img, &label) in data.images.data().chunks(PIXELS).zip(&data.labels) {
        if label >= CLASSES {
            return Err(Error::invalid("labels", format!("label {label} does not fit a CIFAR-10 record")));
        }
        out.push(label as u8);
        out.extend(img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_batch(path: &Path, data: &Dataset) -> Result<()> {
    let bytes = encode_records(data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a complete CIFAR-10 style directory: `train` split evenly over
/// the five training files, `test` as the test batch.
pub fn write_cifar10(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    if train.len() < TRAIN_FILES.len() {
        return Err(Error::invalid("train", "need at least one record per training file"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let per = train.len().div_ceil(TRAIN_FILES.len());
    for (k, name) in TRAIN_FILES.iter().enumerate() {
        let start = (k * per).min(train.len());
        let end = ((k + 1) * per).min(train.len());
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = train.gather(&idx)?;
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&IMAGE_SHAPE);
        let part = Dataset {
            images: images.reshape(shape)?,
            labels,
            class_count: CLASSES,
            split: Split::Train,
        };
        write_batch(&dir.join(name), &part)?;
    }
    write_batch(&dir.join(TEST_FILE), test)
}
