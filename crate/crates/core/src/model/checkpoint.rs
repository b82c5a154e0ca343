//! Checkpoint container: `MMCK`, u32 LE header length, JSON header, then
//! each parameter as a u64 LE byte length followed by an `.mmt` blob.

use mmvt_tensor::{mmt, Element, Tensor};
use serde::{Deserialize, Serialize};

use super::{MMModel, ModelConfig};
use crate::error::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

fn err(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

pub fn save_checkpoint<E: Element>(m: &MMModel<E>) -> Result<Vec<u8>> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: E::DTYPE.to_string(),
        config: m.config.clone(),
        params: m
            .params
            .names()
            .iter()
            .zip(m.params.values())
            .map(|(name, v)| ParamEntry {
                name: name.clone(),
                dims: v.dims().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(m.num_params() * std::mem::size_of::<E>() + json.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| err("header too large"))?.to_le_bytes());
    out.extend_from_slice(&json);
    for v in m.params.values() {
        let blob = mmt::encode(v);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| err(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn load_checkpoint<E: Element>(bytes: &[u8]) -> Result<MMModel<E>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(err("bad magic bytes; not a checkpoint"));
    }
    let len = u32::from_le_bytes(r.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| err(format!("unreadable header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if header.dtype != E::DTYPE.to_string() {
        return Err(err(format!("stored as {}, requested {}", header.dtype, E::DTYPE)));
    }
    let mut model = MMModel::<E>::build(header.config, &mut |_, dims| Tensor::zeros(dims.to_vec()))?;
    if header.params.len() != model.params.len() {
        return Err(err(format!(
            "header lists {} parameters, spec needs {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for (id, entry) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&header.params) {
        let expected = model.params.get(id);
        if entry.name != model.params.name(id) || entry.dims != expected.dims() {
            return Err(err(format!(
                "parameter {} {:?} does not match spec layout {} {:?}",
                entry.name,
                entry.dims,
                model.params.name(id),
                expected.dims()
            )));
        }
        let blob_len = u64::from_le_bytes(r.take(8, "blob length")?.try_into().expect("8 bytes"));
        let blob = r.take(usize::try_from(blob_len).map_err(|_| err("blob too large"))?, &entry.name)?;
        let value = mmt::decode(blob)?.into_exact::<E>()?;
        if value.dims() != entry.dims {
            return Err(err(format!("blob for {} has dims {:?}", entry.name, value.dims())));
        }
        *model.params.get_mut(id) = value;
    }
    if r.pos != bytes.len() {
        return Err(err("trailing bytes after last parameter"));
    }
    Ok(model)
}

impl<E: Element> MMModel<E> {
    /// Loads a checkpoint and checks that it was saved for `expected`.
    pub fn load_matching(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        let m = load_checkpoint::<E>(bytes)?;
        if m.config.spec != expected.spec {
            return Err(err(format!(
                "checkpoint is for {}, not {}",
                m.config.spec, expected.spec
            )));
        }
        if m.config != *expected {
            return Err(err("checkpoint config differs from the requested model config"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, save_checkpoint(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CoreError::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        load_checkpoint(&bytes)
    }
}
