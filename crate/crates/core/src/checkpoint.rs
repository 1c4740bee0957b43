//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "KWSCKPT\0"
//! version  u32
//! manifest u32 length + UTF-8 JSON (variant name, width, heads, version, full spec)
//! count    u32
//! count × { u32 name length, name, u8 trainable, u32 rank, rank × u64 dims,
//!           product(dims) × f64 }
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"KWSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: String,
    pub channels: usize,
    pub heads: usize,
    pub version: u32,
    pub spec: ModelSpec,
}

/// A named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let spec = model.spec();
    let manifest = Manifest {
        variant: spec.name.clone(),
        channels: spec.channels,
        heads: spec.heads,
        version: FORMAT_VERSION,
        spec: spec.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let store = model.store();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint into its manifest and tensors. `path` is only used
/// in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Manifest, Vec<StoredTensor>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        tensors.push(StoredTensor { name, trainable, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok((manifest, tensors))
}

/// Lists every difference between the stored tensors and the layout of a
/// freshly built model.
pub fn layout_diff(store: &ParamStore, tensors: &[StoredTensor]) -> Vec<String> {
    let mut diff = Vec::new();
    for p in store.iter() {
        match tensors.iter().find(|t| t.name == p.name) {
            None => diff.push(format!("missing {} {:?}", p.name, p.value.shape())),
            Some(t) if t.tensor.shape() != p.value.shape() => {
                diff.push(format!("{}: stored {:?}, model expects {:?}", p.name, t.tensor.shape(), p.value.shape()))
            }
            Some(_) => {}
        }
    }
    for t in tensors {
        if store.id(&t.name).is_none() {
            diff.push(format!("unexpected {} {:?}", t.name, t.tensor.shape()));
        }
    }
    diff
}

/// Rebuilds the model described by a checkpoint and loads its tensors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let (manifest, tensors) = decode(bytes, path)?;
    if manifest.spec.name != manifest.variant
        || manifest.spec.channels != manifest.channels
        || manifest.spec.heads != manifest.heads
    {
        return Err(Error::format(path, "manifest fields disagree with the embedded spec"));
    }
    let mut model = Model::build(&manifest.spec, 0)?;
    let diff = layout_diff(model.store(), &tensors);
    if !diff.is_empty() {
        return Err(Error::CheckpointMismatch(format!(
            "{} ({}): {}",
            path.display(),
            manifest.variant,
            diff.join("; ")
        )));
    }
    for t in tensors {
        let id = model.store().id(&t.name).expect("checked by layout_diff");
        let p = model.store_mut().get_mut(id);
        p.value = t.tensor;
        p.trainable = t.trainable;
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = Model::build(&Variant::StAttNet4.spec(), 3).unwrap();
        // awkward values survive unchanged
        let id = model.store().id("classifier/weight").unwrap();
        let w = model.store_mut().get_mut(id).value.data_mut();
        w[0] = -0.0;
        w[1] = f64::MIN_POSITIVE / 3.0;
        w[2] = 1.0 / 3.0;
        let bytes = encode(&model);
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode(&back), bytes);
        for (a, b) in model.store().iter().zip(back.store().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = Model::build(&Variant::StNet4.spec(), 0).unwrap();
        let bytes = encode(&model);
        assert!(from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, Path::new("x")).is_err());
    }

    #[test]
    fn mismatched_layout_reports_diff() {
        let narrow = Model::build(&Variant::StAttNet4.spec(), 0).unwrap();
        let (mut manifest, tensors) = decode(&encode(&narrow), Path::new("x")).unwrap();
        manifest.spec = Variant::StAttNet4Wide.spec();
        manifest.variant = manifest.spec.name.clone();
        manifest.channels = 65;
        let wide = Model::build(&manifest.spec, 0).unwrap();
        let diff = layout_diff(wide.store(), &tensors);
        assert!(diff.iter().any(|d| d.contains("classifier/weight: stored [45, 12], model expects [65, 12]")));
    }
}
