//! Binary checkpoint format.
//!
//! ```text
//! "CMPZ1"
//! u64 LE   config length
//! bytes    canonical TOML of the ComposerConfig
//! u64 LE   parameter count
//! per parameter, sorted by id:
//!   u32 LE id length, id bytes (UTF-8)
//!   u32 LE rank, rank × u64 LE dims
//!   product(dims) × f64 LE
//! ```
//!
//! Loading rebuilds the model from the config and then overwrites every
//! parameter, so a checkpoint whose parameters do not match its own config is
//! rejected rather than partially applied.

use std::path::Path;

use super::{Composer, ComposerConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMPZ";
const VERSION: u8 = b'1';

pub fn to_bytes(model: &Composer) -> Result<Vec<u8>> {
    let config = model.config().to_canonical_string()?;
    let params = model.params();
    let mut out = Vec::with_capacity(64 + config.len() + 8 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (id, pid) in params.sorted() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        let value = params.value(pid);
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Composer> {
    let mut r = Reader { bytes, pos: 0 };
    let header = r.take(5, "header")?;
    if &header[..4] != MAGIC {
        return Err(Error::Checkpoint(
            "not a composer checkpoint (bad magic)".into(),
        ));
    }
    if header[4] != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {:?}, expected {:?}",
            header[4] as char, VERSION as char
        )));
    }
    let config_len = r.len("config length")?;
    let text = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = ComposerConfig::from_toml_str(text)?;
    let mut model = Composer::new(config)?;

    let count = r.len("parameter count")?;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameters, config defines {}",
            model.params().len()
        )));
    }
    let expected: Vec<(String, _)> = model
        .params()
        .sorted()
        .map(|(id, pid)| (id.to_string(), pid))
        .collect();
    for (id, pid) in expected {
        let id_len = r.u32("parameter id length")? as usize;
        let found = r.take(id_len, "parameter id")?;
        if found != id.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected parameter {id:?}, found {:?}",
                String::from_utf8_lossy(found)
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        if shape != model.params().value(pid).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {id:?} has shape {shape:?}, config implies {:?}",
                model.params().value(pid).shape()
            )));
        }
        let n = model.params().value(pid).len();
        let raw = r.take(n * 8, "parameter data")?;
        let dst = model.params_mut().value_mut(pid).data_mut();
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save_model(model: &Composer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Composer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
