//! Binary checkpoints: magic "MQCK", version u32 LE, config-hash u64 LE,
//! tensor count u32 LE, then per tensor {name-len u16 LE, name UTF-8,
//! rank u8, extents u32 LE each, f32 LE payload}.
//!
//! The resolved run config rides along as the `meta.config` tensor (one
//! byte per element), so a checkpoint alone is enough to rebuild the
//! model; the header hash is the FNV-1a of that embedded JSON and load
//! verifies the two agree.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::MqError;
use crate::rng::fnv1a64;
use crate::tensor::{ParamStore, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"MQCK";
pub const CKPT_VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "meta.config";

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    cfg: &RunConfig,
) -> Result<(), MqError> {
    let json = cfg.to_json();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&cfg.hash().to_le_bytes());
    let config_tensor = Tensor::new(
        &[json.len()],
        json.bytes().map(|b| b as f32).collect::<Vec<f32>>(),
    );
    let count = store.len() as u32 + 1;
    buf.extend_from_slice(&count.to_le_bytes());
    let mut write_tensor = |name: &str, t: &Tensor<f32>| {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    write_tensor(CONFIG_TENSOR, &config_tensor);
    for (name, p) in store.iter() {
        assert_ne!(name, CONFIG_TENSOR, "reserved tensor name");
        write_tensor(name, &p.value);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn fail_trunc<T>(what: &str) -> Result<T, MqError> {
    Err(MqError::format(format!(
        "truncated checkpoint while reading {what}"
    )))
}

type NamedTensors = Vec<(String, Tensor<f32>)>;

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, MqError> {
        let mut buf = vec![0u8; n];
        match self.0.read_exact(&mut buf) {
            Ok(()) => Ok(buf),
            Err(_) => fail_trunc(what),
        }
    }

    fn u16le(&mut self, what: &str) -> Result<u16, MqError> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32le(&mut self, what: &str) -> Result<u32, MqError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64le(&mut self, what: &str) -> Result<u64, MqError> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Raw tensor table plus header hash, without interpretation.
pub fn read_tensor_table(path: &Path) -> Result<(u64, NamedTensors), MqError> {
    let f = std::fs::File::open(path)?;
    let mut r = Reader(std::io::BufReader::new(f));
    let magic = r.bytes(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(MqError::format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32le("version")?;
    if version != CKPT_VERSION {
        return Err(MqError::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hash = r.u64le("config hash")?;
    let count = r.u32le("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16le("name length")? as usize;
        let name_bytes = r.bytes(name_len, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| MqError::format("tensor name is not UTF-8".to_string()))?;
        let rank = r.bytes(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32le("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.bytes(n * 4, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)));
    }
    Ok((hash, tensors))
}

/// Loads the parameter table and the embedded config. Every parameter
/// comes back frozen; the caller marks the trainable set for its phase.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, RunConfig), MqError> {
    let (hash, tensors) = read_tensor_table(path)?;
    let mut store = ParamStore::new();
    let mut config = None;
    for (name, tensor) in tensors {
        if name == CONFIG_TENSOR {
            let bytes: Vec<u8> = tensor.data().iter().map(|&v| v as u8).collect();
            let json = String::from_utf8(bytes)
                .map_err(|_| MqError::format("embedded config is not UTF-8".to_string()))?;
            if fnv1a64(json.as_bytes()) != hash {
                return Err(MqError::format(
                    "checkpoint header hash does not match the embedded config".to_string(),
                ));
            }
            config = Some(RunConfig::from_embedded_json(&json)?);
        } else {
            store.insert(&name, tensor, false);
        }
    }
    let config = config
        .ok_or_else(|| MqError::format("checkpoint is missing the embedded config".to_string()))?;
    Ok((store, config))
}

/// Load that fails loudly when the checkpoint was produced by a different
/// config.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected_hash: u64,
) -> Result<(ParamStore<f32>, RunConfig), MqError> {
    let (store, cfg) = load_checkpoint(path)?;
    if cfg.hash() != expected_hash {
        return Err(MqError::config(format!(
            "config hash mismatch: checkpoint {} carries {:016x}, expected {:016x}",
            path.display(),
            cfg.hash(),
            expected_hash
        )));
    }
    Ok((store, cfg))
}

/// One line per tensor for the inspect command.
pub fn describe_checkpoint(path: &Path) -> Result<String, MqError> {
    let (hash, tensors) = read_tensor_table(path)?;
    let mut out = String::new();
    out.push_str(&format!("config-hash {hash:016x}\n"));
    out.push_str(&format!("tensors {}\n", tensors.len()));
    let mut total = 0usize;
    for (name, t) in &tensors {
        let shape: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
        out.push_str(&format!("{name}\t({})\t{}\n", shape.join(", "), t.numel()));
        total += t.numel();
    }
    out.push_str(&format!("total elements {total}\n"));
    Ok(out)
}
