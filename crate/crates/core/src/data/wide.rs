//! Wide-MNIST: each digit is placed in the left or right half of a blank
//! canvas twice as wide, and the label records both digit and side.

use rand::Rng;

use super::{LabeledDataset, Pixels, Provenance};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, keyed_rng, purpose};

/// Side drawn for source example `index`: a fair coin from the stream keyed
/// by `(seed, index)`, so any example's side can be recomputed on its own.
pub fn wide_side_is_right(seed: u64, index: usize) -> bool {
    keyed_rng(derive_seed(seed, &[purpose::SYNTHESIS]), index as u64).gen::<bool>()
}

/// Builds the `rows × 2·cols` dataset with `2k` classes: digit `d` on the
/// left keeps label `d`, on the right becomes `k + d`.
pub fn make_wide_mnist(source: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    if source.num_classes() != 10 {
        return Err(Error::Data(format!(
            "{}: Wide-MNIST needs a 10-class source, found {}",
            source.name(),
            source.num_classes()
        )));
    }
    let (rows, cols, k) = (source.rows(), source.cols(), source.num_classes());
    let d = rows * cols;
    let mut labels = Vec::with_capacity(source.len());
    let sides: Vec<bool> = (0..source.len())
        .map(|i| wide_side_is_right(seed, i))
        .collect();

    fn place<T: Copy + Default>(src: &[T], d: usize, cols: usize, sides: &[bool]) -> Vec<T> {
        let mut out = vec![T::default(); src.len() * 2];
        for (i, &right) in sides.iter().enumerate() {
            let img = &src[i * d..(i + 1) * d];
            let dst = &mut out[i * 2 * d..(i + 1) * 2 * d];
            let offset = if right { cols } else { 0 };
            for (r, row) in img.chunks_exact(cols).enumerate() {
                let start = r * 2 * cols + offset;
                dst[start..start + cols].copy_from_slice(row);
            }
        }
        out
    }

    for (i, &right) in sides.iter().enumerate() {
        labels.push(source.label(i) + if right { k } else { 0 });
    }
    let name = format!("wide-{}", source.name());
    let wide = match source.pixels() {
        Pixels::U8(v) => LabeledDataset::from_u8(
            name,
            rows,
            2 * cols,
            2 * k,
            place(v, d, cols, &sides),
            labels,
        )?,
        Pixels::F64(v) => LabeledDataset::from_f64(
            name,
            rows,
            2 * cols,
            2 * k,
            place(v, d, cols, &sides),
            labels,
        )?,
    };
    let mut provenance: Provenance = source.provenance().clone();
    provenance.synthesis_seed = Some(seed);
    Ok(wide.with_provenance(provenance))
}
