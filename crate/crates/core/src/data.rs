//! Datasets: IDX image/label files and a seeded Gaussian-cluster generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::spec::Shape;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs `[count, channels, height, width]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() != 4 {
            return Err(Error::Data(format!("inputs must be rank 4, got {:?}", inputs.shape())));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} >= class count {classes}")));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> Shape {
        let s = self.inputs.shape();
        Shape::new(s[1], s[2], s[3])
    }

    /// Reinterprets each example with `shape` (same element count).
    pub fn reshaped(self, shape: Shape) -> Result<Self> {
        if shape.size() != self.sample_shape().size() {
            return Err(Error::Data(format!(
                "examples have {} values, network input {shape} needs {}",
                self.sample_shape().size(),
                shape.size()
            )));
        }
        let n = self.len();
        Ok(Dataset {
            inputs: self.inputs.reshape(&shape.batched(n))?,
            ..self
        })
    }

    /// Copies the selected examples into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_shape().size();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let shape = self.sample_shape().batched(indices.len());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&shape, data).expect("gathered length matches"), labels)
    }
}

/// Raw IDX image payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: "images",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::Data(format!(
            "images: header declares {need} pixel bytes, file has {}",
            payload.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: "labels",
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Data(format!(
            "labels: header declares {count} entries, file has {}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Byte pixel to `[-1, 1]` via `(v - 127.5) / 127.5`.
pub fn normalize_pixel(v: u8) -> f64 {
    (f64::from(v) - 127.5) / 127.5
}

/// Builds a single-channel dataset from parsed IDX payloads. Without
/// `normalize`, inputs are the raw byte values `0..=255`.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8], normalize: bool) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let data = images
        .pixels
        .iter()
        .map(|&p| if normalize { normalize_pixel(p) } else { f64::from(p) })
        .collect();
    let inputs = Tensor::from_vec(&[images.count, 1, images.rows, images.cols], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, normalize: bool) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e));
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    dataset_from_idx(&images, &labels, normalize)
}

/// Isotropic unit-variance Gaussian clusters around `separation`-scaled
/// unit directions (drawn from the seed). Samples are flat `[dims, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianClasses {
    centers: Vec<Vec<f64>>,
    dims: usize,
}

impl GaussianClasses {
    pub fn new(classes: usize, dims: usize, separation: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if dims == 0 {
            return Err(Error::invalid("dims must be >= 1"));
        }
        if !(separation >= 0.0 && separation.is_finite()) {
            return Err(Error::invalid(format!("separation must be >= 0, got {separation}")));
        }
        let mut rng = RngStream::derived(seed, 0);
        let centers = (0..classes)
            .map(|_| {
                let dir: Vec<f64> = (0..dims).map(|_| rng.gaussian()).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.into_iter().map(|v| separation * v / norm).collect()
            })
            .collect();
        Ok(GaussianClasses { centers, dims })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// `per_class` samples of every class, shuffled; `sample_seed` picks
    /// the noise and order independently of the centers.
    pub fn sample(&self, per_class: usize, sample_seed: u64) -> Result<Dataset> {
        let classes = self.centers.len();
        let mut rng = RngStream::derived(sample_seed, 1);
        let mut order: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        order.shuffle(&mut rng);
        let mut data = Vec::with_capacity(order.len() * self.dims);
        for &c in &order {
            data.extend(self.centers[c].iter().map(|m| m + rng.gaussian()));
        }
        let inputs = Tensor::from_vec(&[order.len(), self.dims, 1, 1], data)?;
        Dataset::new(inputs, order, classes)
    }

    /// Index of the nearest center (lowest index on ties).
    pub fn nearest_center(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centers.iter().enumerate() {
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

pub fn synth_gaussian_classes(
    classes: usize,
    per_class: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    GaussianClasses::new(classes, dims, separation, seed)?.sample(per_class, seed)
}

/// Example indices for one epoch, permuted with seed `shuffle_seed ^ epoch`
/// and cut into `batch_size` chunks (the last may be short).
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut RngStream::new(shuffle_seed ^ epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images() -> IdxImages {
        IdxImages {
            count: 3,
            rows: 2,
            cols: 2,
            pixels: vec![0, 255, 127, 128, 1, 2, 3, 4, 250, 251, 252, 253],
        }
    }

    #[test]
    fn labels_parse() {
        let bytes = encode_idx_labels(&[0, 1, 2]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 1]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn wrong_magic_names_expected_and_found() {
        let mut bytes = encode_idx_images(&tiny_images());
        bytes[3] = 0x01;
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(matches!(
            err,
            Error::BadMagic {
                what: "images",
                expected: 0x803,
                found: 0x801
            }
        ));
        assert!(err.to_string().contains("0x00000803") && err.to_string().contains("0x00000801"));
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let bytes = encode_idx_images(&tiny_images());
        assert!(parse_idx_images(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx_images(&bytes[..6]).is_err());
        assert!(dataset_from_idx(&tiny_images(), &[0, 1], true).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_pixel(255), 1.0);
        assert_eq!(normalize_pixel(0), -1.0);
        let ds = dataset_from_idx(&tiny_images(), &[0, 1, 2], true).unwrap();
        assert_eq!(ds.inputs().data()[..2], [-1.0, 1.0]);
        assert_eq!(ds.classes(), 3);
    }

    #[test]
    fn batch_sizes_and_coverage() {
        let ds = synth_gaussian_classes(2, 5, 3, 1.0, 1).unwrap();
        let b = batches(&ds, 4, 7, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(&ds, 4, 7, 1).unwrap());
        assert_ne!(b, batches(&ds, 4, 7, 2).unwrap());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_gaussian_classes(3, 10, 4, 2.0, 9).unwrap();
        let b = synth_gaussian_classes(3, 10, 4, 2.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert!(synth_gaussian_classes(1, 10, 4, 2.0, 9).is_err());
    }

    #[test]
    fn reshape_checks_size() {
        let ds = synth_gaussian_classes(2, 2, 16, 1.0, 1).unwrap();
        assert!(ds.clone().reshaped(Shape::new(1, 4, 4)).is_ok());
        assert!(ds.reshaped(Shape::new(1, 3, 3)).is_err());
    }
}
