//! Binary checkpoint: `KRNA`, u32 version, u32 length + canonical config
//! text, u32 parameter count, then per parameter u32 name length, name,
//! u32 rank, u32 extents and raw f32 values. All integers little-endian.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{KarinaModel, ModelConfig};
use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KRNA";
const VERSION: u32 = 1;

pub fn save_checkpoint<T: Real>(model: &KarinaModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    let config = model.config.to_canonical();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(config.as_bytes())?;
    out.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (_, p) in model.params.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &e in p.value.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * p.value.numel());
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Exact byte length of the checkpoint written for `model`.
pub fn checkpoint_size<T: Real>(model: &KarinaModel<T>) -> u64 {
    let header = 4 + 4 + 4 + model.config.to_canonical().len() + 4;
    let body: usize = model
        .params
        .iter()
        .map(|(_, p)| 4 + p.name.len() + 4 + 4 * p.value.rank() + 4 * p.value.numel())
        .sum();
    (header + body) as u64
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let path = self.path;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err(path, "string is not UTF-8"))
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: PathBuf::from(path),
        reason: reason.into(),
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<KarinaModel<f32>> {
    load(path.as_ref(), None)
}

/// Loads and checks the stored config against `expected`, naming the first
/// field that differs.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<KarinaModel<f32>> {
    load(path.as_ref(), Some(expected))
}

fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<KarinaModel<f32>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != &MAGIC[..] {
        return Err(format_err(path, "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_canonical(&r.string()?)?;
    if let Some(exp) = expected {
        if let Some((field, want, found)) = exp.first_difference(&config) {
            return Err(Error::ConfigMismatch {
                field: field.to_string(),
                expected: want,
                found,
            });
        }
    }
    let mut model = KarinaModel::<f32>::build(config, 0)?;
    let count = r.u32()?;
    if count != model.params.len() {
        return Err(format_err(
            path,
            format!("{count} parameters stored, model has {}", model.params.len()),
        ));
    }
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let id = model
            .params
            .id_of(&name)
            .ok_or_else(|| format_err(path, format!("unexpected parameter `{name}`")))?;
        if !seen.insert(id) {
            return Err(Error::DuplicateName(name));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let target = model.params.get_mut(id);
        if shape != target.value.shape() {
            return Err(format_err(
                path,
                format!("`{name}` has shape {shape:?}, model expects {:?}", target.value.shape()),
            ));
        }
        let raw = r.take(4 * target.value.numel())?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        target.value = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(format_err(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}
