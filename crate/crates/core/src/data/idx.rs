//! Big-endian IDX files (the MNIST distribution format), optionally gzipped.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{LabeledDataset, Pixels, Provenance};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;
const UBYTE: u8 = 0x08;

/// An unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| data_err(path, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse(path: &Path, bytes: Vec<u8>) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(data_err(path, "file shorter than the IDX header"));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE || bytes[3] == 0 {
        return Err(data_err(
            path,
            format!("bad magic {magic:#010x}, expected an unsigned-byte IDX file"),
        ));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(data_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims.iter().product::<usize>();
    let payload = bytes.len() - header;
    if payload != expected {
        return Err(data_err(
            path,
            format!("payload has {payload} bytes, header dims {dims:?} imply {expected}"),
        ));
    }
    let mut data = bytes;
    data.drain(..header);
    Ok(IdxArray { magic, dims, data })
}

/// Reads any unsigned-byte IDX file; gzip input is detected by its magic.
pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    parse(path, read_bytes(path)?)
}

/// Loads an image/label file pair, inferring the class count from the
/// largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    load_idx_impl(images.as_ref(), labels.as_ref(), None)
}

/// Loads an image/label file pair with a known class count.
pub fn load_idx_with_classes(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
) -> Result<LabeledDataset> {
    load_idx_impl(images.as_ref(), labels.as_ref(), Some(num_classes))
}

fn load_idx_impl(
    images: &Path,
    labels: &Path,
    num_classes: Option<usize>,
) -> Result<LabeledDataset> {
    let img = read_idx(images)?;
    if img.magic != IMAGES_MAGIC || img.dims.len() != 3 {
        return Err(data_err(
            images,
            format!(
                "expected image magic {IMAGES_MAGIC} with 3 dims, found {}",
                img.magic
            ),
        ));
    }
    let lab = read_idx(labels)?;
    if lab.magic != LABELS_MAGIC || lab.dims.len() != 1 {
        return Err(data_err(
            labels,
            format!(
                "expected label magic {LABELS_MAGIC} with 1 dim, found {}",
                lab.magic
            ),
        ));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(data_err(
            labels,
            format!(
                "{} labels but {} holds {} images",
                lab.dims[0],
                images.display(),
                img.dims[0]
            ),
        ));
    }
    let label_values: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = match num_classes {
        Some(k) => k,
        None => label_values.iter().max().map_or(1, |&m| m + 1),
    };
    let name = images
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::from_u8(
        name,
        img.dims[1],
        img.dims[2],
        classes,
        img.data,
        label_values,
    )
    .map_err(|e| data_err(labels, e))
    .map(|d| {
        d.with_provenance(Provenance {
            sources: vec![images.display().to_string(), labels.display().to_string()],
            synthesis_seed: None,
        })
    })
}

fn header(magic: u32, dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Writes a dataset as an uncompressed IDX pair (magic 2051 / 2049).
/// Floating-point pixels are rounded to the nearest byte; labels must fit in
/// a byte.
pub fn write_idx(
    dataset: &LabeledDataset,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    if dataset.num_classes() > 256 {
        return Err(Error::Data(
            "labels above 255 do not fit in IDX bytes".into(),
        ));
    }
    let mut img = header(
        IMAGES_MAGIC,
        &[dataset.len(), dataset.rows(), dataset.cols()],
    );
    match dataset.pixels() {
        Pixels::U8(v) => img.extend_from_slice(v),
        Pixels::F64(v) => img.extend(v.iter().map(|&p| (p * 255.0).round() as u8)),
    }
    let mut lab = header(LABELS_MAGIC, &[dataset.len()]);
    lab.extend(dataset.labels().iter().map(|&l| l as u8));
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))?;
    Ok(())
}
