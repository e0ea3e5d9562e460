//! Datasets: MNIST-style IDX files, synthetic Gaussian blobs and seeded
//! mini-batch iteration.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// IDX magic for unsigned-byte rank-3 arrays (images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// IDX magic for unsigned-byte rank-1 arrays (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Examples as rows of a `N × features` matrix plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.rank() != 2 || images.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label: bad, n_classes });
        }
        Ok(Self {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.row_len()
    }

    /// Copies the selected examples into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let w = self.features();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let images = Tensor::new(vec![indices.len(), w], data).expect("non-empty batch");
        (images, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Seeded shuffle of all indices keyed by `(seed, epoch)`, cut into
    /// `floor(N / batch_size)` full batches. The remainder is dropped.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
        batches(self.len(), batch_size, seed, epoch)
    }
}

/// Index batches for a dataset of `n` examples; see [`Dataset::batches`].
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be between 1 and the dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stream 0 belongs to weight initialization.
    order.shuffle(&mut rng::stream(seed, epoch + 1));
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Reads an IDX file, returning its dimensions and raw payload.
fn read_idx(path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header = 4 + 4 * rank;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(&bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(&bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        }),
        std::cmp::Ordering::Greater => Err(Error::TrailingData {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        }),
        std::cmp::Ordering::Equal => Ok((dims, bytes[header..].to_vec())),
    }
}

/// Loads an IDX image/label pair. Pixels are scaled by `1/255`; the class
/// count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path.as_ref(), IDX_IMAGES_MAGIC, 3)?;
    let (ldims, raw_labels) = read_idx(labels_path.as_ref(), IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let features = idims[1] * idims[2];
    let images = Tensor::new(
        vec![idims[0], features],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, n_classes)
}

/// Writes raw bytes as an IDX image file (`n × rows × cols`) and label file.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    dims: (usize, usize, usize),
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let (n, rows, cols) = dims;
    if pixels.len() != n * rows * cols || labels.len() != n {
        return Err(Error::CountMismatch {
            images: pixels.len() / (rows * cols).max(1),
            labels: labels.len(),
        });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Gaussian clusters (unit noise) around random unit-norm centers scaled by
/// `separation`. Classes are interleaved, so every prefix of length
/// `k · n_classes` is balanced.
pub fn synth_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if separation.is_nan() || separation <= 0.0 || n_per_class == 0 || n_classes < 2 || dim == 0 {
        return Err(Error::Config(format!(
            "blobs need separation > 0, n_per_class >= 1, n_classes >= 2, dim >= 1 \
             (got {separation}, {n_per_class}, {n_classes}, {dim})"
        )));
    }
    let mut rng = rng::seeded(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                break v.into_iter().map(|x| x / n * separation).collect();
            }
        })
        .collect();
    let total = n_per_class * n_classes;
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % n_classes;
        for &c in &centers[class] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(c + z);
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![total, dim], data)?, labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_arithmetic_drops_remainder() {
        let b = batches(250, 100, 1, 0).unwrap();
        assert_eq!(b.len(), 2);
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 200);
    }

    #[test]
    fn epochs_shuffle_differently() {
        assert_ne!(batches(50, 10, 7, 0).unwrap(), batches(50, 10, 7, 1).unwrap());
        assert_eq!(batches(50, 10, 7, 3).unwrap(), batches(50, 10, 7, 3).unwrap());
    }

    #[test]
    fn oversized_batch_is_rejected() {
        assert!(batches(5, 6, 0, 0).is_err());
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = synth_blobs(30, 3, 5, 4.0, 9).unwrap();
        let b = synth_blobs(30, 3, 5, 4.0, 9).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 30);
        }
        let c = synth_blobs(30, 3, 5, 4.0, 10).unwrap();
        assert_ne!(a.images, c.images);
        assert!(synth_blobs(3, 2, 2, 0.0, 1).is_err());
    }
}
