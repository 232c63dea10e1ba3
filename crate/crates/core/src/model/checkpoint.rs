//! Binary checkpoint.
//!
//! ```text
//! "DUPL"  version:u32  variant:u8  C:u32 T:u32 B:u32 d:u32
//! count:u32
//! count × { name_len:u16 name:utf8  rank:u8  dims:u32×rank  data:f32×Π dims }
//! meta_len:u32 meta:utf8 JSON
//! ```
//!
//! All integers and floats are little-endian. The JSON metadata carries the
//! full [`ModelConfig`] under `"model"` plus whatever the caller adds. Named
//! tensors that are not model parameters are returned as extras.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use super::{DuploModel, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"DUPL";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DuploModel<f32>,
    /// Additional named tensors stored after the parameters.
    pub extras: Vec<(String, Tensor<f32>)>,
    /// Free-form metadata; `"model"` is reserved for the config.
    pub metadata: Value,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor<f32>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let model = &ckpt.model;
    let cfg = &model.config;
    w.write_all(&MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[model.variant.tag()])?;
    for v in [cfg.num_classes, cfg.timestamps, cfg.bands, cfg.hidden] {
        write_u32(w, v, "header dimension")?;
    }
    let entries: Vec<(&str, &Tensor<f32>)> = model
        .store
        .ids()
        .map(|id| (model.store.name(id), model.store.get(id)))
        .chain(ckpt.extras.iter().map(|(n, t)| (n.as_str(), t)))
        .collect();
    write_u32(w, entries.len(), "tensor count")?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::DimOverflow(format!("tensor name `{name}`")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::DimOverflow(format!("rank of `{name}`")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            write_u32(w, d, name)?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    let mut meta = match &ckpt.metadata {
        Value::Object(m) => m.clone(),
        Value::Null => serde_json::Map::new(),
        _ => return Err(Error::Contract("checkpoint metadata must be a JSON object".into())),
    };
    meta.insert(
        "model".into(),
        serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
    );
    let text = serde_json::to_string(&Value::Object(meta)).map_err(|e| Error::Format(e.to_string()))?;
    write_u32(w, text.len(), "metadata length")?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut tag = [0u8; 1];
    read_exact(r, &mut tag, "variant")?;
    let variant = Variant::from_tag(tag[0])?;
    let mut header = [0usize; 4];
    for h in &mut header {
        *h = read_u32(r, "header")? as usize;
    }

    let count = read_u32(r, "tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(r, &mut len, "tensor name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank, &name)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(r, &name)? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::DimOverflow(format!("shape {dims:?} of `{name}`")))?;
        let mut data = Vec::new();
        r.by_ref()
            .take(len as u64 * 4)
            .read_to_end(&mut data)
            .map_err(Error::Io)?;
        if data.len() != len * 4 {
            return Err(Error::Truncated(format!("tensor `{name}` payload")));
        }
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(dims, values)?));
    }

    let meta_len = read_u32(r, "metadata length")? as usize;
    let mut meta = Vec::new();
    r.by_ref().take(meta_len as u64).read_to_end(&mut meta)?;
    if meta.len() != meta_len {
        return Err(Error::Truncated("metadata".into()));
    }
    let metadata: Value = serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let config: ModelConfig = serde_json::from_value(metadata.get("model").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Format(format!("model config: {e}")))?;
    let stated = [config.num_classes, config.timestamps, config.bands, config.hidden];
    if stated != header {
        return Err(Error::Format(format!(
            "header dimensions {header:?} disagree with stored config {stated:?}"
        )));
    }

    let mut model = DuploModel::<f32>::new(config, variant)?;
    let mut seen = vec![false; model.store.len()];
    let mut extras = Vec::new();
    for (name, t) in tensors {
        match model.store.find(&name) {
            Some(id) => {
                model.store.set(id, t)?;
                seen[id.index()] = true;
            }
            None => extras.push((name, t)),
        }
    }
    if let Some(id) = model.store.ids().find(|id| !seen[id.index()]) {
        return Err(Error::Format(format!("parameter `{}` missing from checkpoint", model.store.name(id))));
    }
    Ok(Checkpoint { model, extras, metadata })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn write_u32(w: &mut impl Write, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimOverflow(format!("{what} = {v}")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
