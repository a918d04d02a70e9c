use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, FeedForwardNet, OutputHead};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// File signature: "RDIFF", a zero byte, then format version 1.0.
pub const MAGIC: [u8; 8] = *b"RDIFF\x00\x01\x00";

const MAX_META_LEN: u32 = 1 << 24;

/// Metadata block of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub head: String,
    /// Free-form annotations such as the model role or input layout.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// A decoded model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub meta: ModelMeta,
    pub params: Vec<f64>,
}

impl ModelFile {
    pub fn from_net<T: Scalar>(net: &FeedForwardNet<T>, extra: BTreeMap<String, serde_json::Value>) -> Self {
        Self {
            meta: ModelMeta {
                layer_dims: net.layer_dims(),
                activation: net.activation().name().to_string(),
                head: net.head().name().to_string(),
                extra,
            },
            params: net.params_flat().iter().map(|p| p.to_f64_lossy()).collect(),
        }
    }

    /// Rebuilds the network in the requested scalar type.
    pub fn to_net<T: Scalar>(&self) -> Result<FeedForwardNet<T>> {
        let activation = Activation::from_name(&self.meta.activation)?;
        let head = OutputHead::from_name(&self.meta.head)?;
        let dims = &self.meta.layer_dims;
        let mut net = FeedForwardNet::<T>::zeros(dims, activation, head)?;
        if net.num_params() != self.params.len() {
            return Err(Error::Format(format!(
                "layer dims {dims:?} need {} parameters, file has {}",
                net.num_params(),
                self.params.len()
            )));
        }
        let params: Vec<T> = self.params.iter().map(|&p| T::lit(p)).collect();
        net.set_params_flat(&params)?;
        if !net.all_finite() {
            return Err(Error::Format("non-finite parameter in payload".into()));
        }
        Ok(net)
    }

    pub fn extra_str(&self, key: &str) -> Option<&str> {
        self.meta.extra.get(key).and_then(|v| v.as_str())
    }
}

/// Compact JSON form of a network for embedding in another file's metadata;
/// parameters are base64 little-endian f64 with a CRC-32.
pub fn net_to_json<T: Scalar>(net: &FeedForwardNet<T>) -> serde_json::Value {
    use base64::Engine;
    let mut payload = Vec::with_capacity(net.num_params() * 8);
    for p in net.params_flat() {
        payload.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
    }
    serde_json::json!({
        "layer_dims": net.layer_dims(),
        "activation": net.activation().name(),
        "head": net.head().name(),
        "crc32": crc32fast::hash(&payload),
        "params": base64::engine::general_purpose::STANDARD.encode(&payload),
    })
}

pub fn net_from_json<T: Scalar>(v: &serde_json::Value) -> Result<FeedForwardNet<T>> {
    use base64::Engine;
    #[derive(Deserialize)]
    struct Embedded {
        layer_dims: Vec<usize>,
        activation: String,
        head: String,
        crc32: u32,
        params: String,
    }
    let e: Embedded = serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("embedded net: {e}")))?;
    let payload = base64::engine::general_purpose::STANDARD
        .decode(&e.params)
        .map_err(|e| Error::Format(format!("embedded net payload: {e}")))?;
    if crc32fast::hash(&payload) != e.crc32 || payload.len() % 8 != 0 {
        return Err(Error::Format("embedded net checksum mismatch".into()));
    }
    ModelFile {
        meta: ModelMeta {
            layer_dims: e.layer_dims,
            activation: e.activation,
            head: e.head,
            extra: BTreeMap::new(),
        },
        params: payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    }
    .to_net()
}

pub fn write_model<W: Write>(mut w: W, file: &ModelFile) -> Result<()> {
    let meta = serde_json::to_vec(&file.meta)?;
    let meta_len = u32::try_from(meta.len())
        .ok()
        .filter(|&n| n <= MAX_META_LEN)
        .ok_or_else(|| Error::Format("metadata block too large".into()))?;
    let mut payload = Vec::with_capacity(file.params.len() * 8);
    for p in &file.params {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&MAGIC)?;
    w.write_all(&meta_len.to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(file.params.len() as u64).to_le_bytes())?;
    w.write_all(&payload)?;
    w.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<ModelFile> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic; not a model file or unsupported version".into()));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "metadata length")?;
    let meta_len = u32::from_le_bytes(b4);
    if meta_len > MAX_META_LEN {
        return Err(Error::Format(format!("metadata length {meta_len} exceeds limit")));
    }
    let mut meta = vec![0u8; meta_len as usize];
    read_exact(&mut r, &mut meta, "metadata")?;
    let meta: ModelMeta = serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;

    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8, "parameter count")?;
    let count = u64::from_le_bytes(b8);
    let expected: u64 = meta
        .layer_dims
        .windows(2)
        .map(|w| (w[0] * w[1] + w[1]) as u64)
        .sum();
    if count != expected {
        return Err(Error::Format(format!(
            "parameter count {count} does not match layer dims ({expected})"
        )));
    }
    let mut payload = vec![0u8; count as usize * 8];
    read_exact(&mut r, &mut payload, "parameters")?;
    read_exact(&mut r, &mut b4, "checksum")?;
    let stored = u32::from_le_bytes(b4);
    let actual = crc32fast::hash(&payload);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ModelFile { meta, params })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn save_model<T: Scalar>(
    path: impl AsRef<Path>,
    net: &FeedForwardNet<T>,
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let f = File::create(path.as_ref())?;
    write_model(BufWriter::new(f), &ModelFile::from_net(net, extra))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_model(BufReader::new(f))
}
