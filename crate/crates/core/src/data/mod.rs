//! Labeled image datasets, IDX ingestion, Wide-MNIST synthesis and batching.
//!
//! Pixels loaded from IDX files stay as bytes (`value = byte / 255`) so that
//! the 60 000-image training set costs 47 MB rather than 376 MB; small
//! synthetic sets can hold `f64` pixels directly.

mod batches;
mod idx;
mod wide;

pub use batches::{batch_iterator, epoch_batches, BatchIter};
pub use idx::{load_idx, load_idx_with_classes, read_idx, write_idx, IdxArray};
pub use wide::{make_wide_mnist, wide_side_is_right};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel storage; both variants are row-major `count × rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl Pixels {
    fn len(&self) -> usize {
        match self {
            Pixels::U8(v) => v.len(),
            Pixels::F64(v) => v.len(),
        }
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub synthesis_seed: Option<u64>,
}

/// Images with values in `[0, 1]` and integer labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    rows: usize,
    cols: usize,
    num_classes: usize,
    pixels: Pixels,
    labels: Vec<usize>,
    provenance: Provenance,
}

impl LabeledDataset {
    fn build(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        num_classes: usize,
        pixels: Pixels,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if rows == 0 || cols == 0 || num_classes == 0 {
            return Err(Error::Data(format!(
                "{name}: rows, cols and num_classes must be positive"
            )));
        }
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::Data(format!(
                "{name}: {} pixel values for {} images of {rows}×{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "{name}: label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            name,
            rows,
            cols,
            num_classes,
            pixels,
            labels,
            provenance: Provenance::default(),
        })
    }

    /// Byte pixels, interpreted as `byte / 255`.
    pub fn from_u8(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        Self::build(name, rows, cols, num_classes, Pixels::U8(pixels), labels)
    }

    /// Floating-point pixels; every value must lie in `[0, 1]`.
    pub fn from_f64(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        num_classes: usize,
        pixels: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("{name}: pixel {bad} outside [0, 1]")));
        }
        Self::build(name, rows, cols, num_classes, Pixels::F64(pixels), labels)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Flattened image size `rows · cols`.
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn pixels(&self) -> &Pixels {
        &self.pixels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Writes image `index` as `f64` values into `out` (length `dim()`).
    pub fn write_image(&self, index: usize, out: &mut [f64]) {
        let d = self.dim();
        let range = index * d..(index + 1) * d;
        match &self.pixels {
            Pixels::U8(v) => {
                for (o, &b) in out.iter_mut().zip(&v[range]) {
                    *o = f64::from(b) / 255.0;
                }
            }
            Pixels::F64(v) => out.copy_from_slice(&v[range]),
        }
    }

    pub fn image(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.write_image(index, &mut out);
        out
    }

    /// Gathers the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let d = self.dim();
        let mut data = vec![0.0; indices.len() * d];
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in data.chunks_exact_mut(d).zip(indices) {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "index {i} outside dataset of {}",
                    self.len()
                )));
            }
            self.write_image(i, row);
            labels.push(self.labels[i]);
        }
        Ok(Batch {
            inputs: Tensor::new(vec![indices.len(), d], data)?,
            labels,
            indices: indices.to_vec(),
        })
    }

    /// New dataset holding the listed examples in the listed order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let d = self.dim();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Usage(format!(
                "index {bad} outside dataset of {}",
                self.len()
            )));
        }
        let pixels = match &self.pixels {
            Pixels::U8(v) => Pixels::U8(
                indices
                    .iter()
                    .flat_map(|&i| v[i * d..(i + 1) * d].iter().copied())
                    .collect(),
            ),
            Pixels::F64(v) => Pixels::F64(
                indices
                    .iter()
                    .flat_map(|&i| v[i * d..(i + 1) * d].iter().copied())
                    .collect(),
            ),
        };
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(
            Self::build(name, self.rows, self.cols, self.num_classes, pixels, labels)?
                .with_provenance(self.provenance.clone()),
        )
    }

    /// The first `n` examples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        self.subset(&indices, self.name.clone())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// A mini-batch: `inputs` is `[N, rows·cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Source indices in the dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, j: usize) -> &[f64] {
        self.inputs.row_slice(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        LabeledDataset::from_u8("tiny", 1, 2, 3, vec![0, 255, 51, 102, 0, 0], vec![2, 0, 1])
            .unwrap()
    }

    #[test]
    fn byte_pixels_are_scaled() {
        let d = tiny();
        assert_eq!(d.image(0), vec![0.0, 1.0]);
        assert_eq!(d.image(1), vec![0.2, 0.4]);
        assert_eq!(d.class_histogram(), vec![1, 1, 1]);
    }

    #[test]
    fn validation() {
        assert!(LabeledDataset::from_u8("x", 1, 2, 3, vec![0; 6], vec![0, 3, 1]).is_err());
        assert!(LabeledDataset::from_u8("x", 1, 2, 3, vec![0; 5], vec![0, 1, 1]).is_err());
        assert!(LabeledDataset::from_f64("x", 1, 1, 2, vec![1.5], vec![0]).is_err());
        assert!(LabeledDataset::from_f64("x", 1, 1, 2, vec![f64::NAN], vec![0]).is_err());
    }

    #[test]
    fn batch_and_subset() {
        let d = tiny();
        let b = d.batch(&[2, 0]).unwrap();
        assert_eq!(b.inputs.shape(), &[2, 2]);
        assert_eq!(b.input(1), &[0.0, 1.0]);
        assert_eq!(b.labels, vec![1, 2]);
        let s = d.subset(&[1], "one").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.image(0), d.image(1));
        assert!(d.batch(&[3]).is_err());
        assert!(d.batch(&[]).is_err());
        assert_eq!(d.take(10).unwrap().len(), 3);
    }
}
