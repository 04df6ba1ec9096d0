//! Binary tensor container and model weight serialization.
//!
//! Layout: magic `GIRW`, format version (u32 LE), manifest length
//! (u64 LE), a UTF-8 JSON manifest listing `{name, shape, offset}` per
//! tensor plus free-form metadata, then the data section of row-major
//! little-endian 32-bit floats. Offsets are byte positions within the
//! data section. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor2};

use super::{ModelConfig, ModelParams};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"GIRW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [u64; 2],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Named f32 tensors plus JSON metadata, written in insertion order.
#[derive(Debug, Clone)]
pub struct TensorContainer {
    pub meta: serde_json::Value,
    entries: Vec<(String, Tensor2<f32>)>,
}

impl TensorContainer {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor2<f32>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::WeightsFormat(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2<f32>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: [t.rows() as u64, t.cols() as u64],
                offset,
            });
            offset += (t.as_slice().len() * 4) as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors,
        })?;

        w.write_all(&WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for (_, t) in &self.entries {
            for &v in t.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != WEIGHTS_MAGIC {
            return Err(Error::WeightsFormat(format!(
                "bad magic {:?}, expected GIRW",
                magic
            )));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != WEIGHTS_VERSION {
            return Err(Error::WeightsFormat(format!(
                "unsupported format version {version}"
            )));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let manifest_len = u64::from_le_bytes(len8) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        r.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

        let mut data = Vec::new();
        r.read_to_end(&mut data)?;

        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n = (e.shape[0] * e.shape[1]) as usize;
            let start = e.offset as usize;
            let end = start + n * 4;
            if end > data.len() {
                return Err(Error::WeightsFormat(format!(
                    "tensor {} extends past end of data section",
                    e.name
                )));
            }
            let mut values = Vec::with_capacity(n);
            for chunk in data[start..end].chunks_exact(4) {
                values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            entries.push((
                e.name.clone(),
                Tensor2::from_vec(e.shape[0] as usize, e.shape[1] as usize, values),
            ));
        }
        Ok(Self {
            meta: manifest.meta,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Pack model weights (cast to f32) into a container with the config in
/// its metadata.
pub fn params_to_container<R: Scalar>(params: &ModelParams<R>) -> Result<TensorContainer> {
    let meta = serde_json::json!({
        "kind": "model-params",
        "config": params.config,
    });
    let mut c = TensorContainer::new(meta);
    let mut err = None;
    params.for_each_tensor(|name, t| {
        if err.is_none() {
            if let Err(e) = c.insert(name, t.cast::<f32>()) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(c),
    }
}

/// Rebuild model weights from a container, casting into the requested
/// element type.
pub fn params_from_container<R: Scalar>(c: &TensorContainer) -> Result<ModelParams<R>> {
    let config: ModelConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::WeightsFormat("missing config in metadata".to_string()))?,
    )?;
    let mut params = ModelParams::<R>::zeros(config)?;
    let mut err: Option<Error> = None;
    params.for_each_tensor_mut(|name, t| {
        if err.is_some() {
            return;
        }
        match c.get(name) {
            Some(stored) if stored.shape() == t.shape() => *t = stored.cast::<R>(),
            Some(stored) => {
                err = Some(Error::WeightsFormat(format!(
                    "tensor {name}: stored shape {:?} does not match expected {:?}",
                    stored.shape(),
                    t.shape()
                )))
            }
            None => err = Some(Error::WeightsFormat(format!("missing tensor {name}"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(params),
    }
}

pub fn save_params<R: Scalar>(params: &ModelParams<R>, path: impl AsRef<Path>) -> Result<()> {
    params_to_container(params)?.save(path)
}

pub fn load_params<R: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<R>> {
    params_from_container(&TensorContainer::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> ModelParams<f32> {
        let config = ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 2,
            d_v: 12,
            max_query_len: 4,
        };
        ModelParams::random(config, 99).unwrap()
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let params = small_params();
        let c = params_to_container(&params).unwrap();
        let mut bytes1 = Vec::new();
        c.write_to(&mut bytes1).unwrap();

        let back = TensorContainer::read_from(bytes1.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes1, bytes2, "save/load/save must be byte-identical");

        let restored: ModelParams<f32> = params_from_container(&back).unwrap();
        assert_eq!(restored, params);
    }

    #[test]
    fn header_validation() {
        let params = small_params();
        let c = params_to_container(&params).unwrap();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(TensorContainer::read_from(bad_magic.as_slice()).is_err());

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(TensorContainer::read_from(bad_version.as_slice()).is_err());

        let truncated = &bytes[..bytes.len() - 8];
        assert!(TensorContainer::read_from(truncated).is_err());
    }

    #[test]
    fn missing_tensor_is_error() {
        let params = small_params();
        let mut c = params_to_container(&params).unwrap();
        c.entries.pop();
        assert!(params_from_container::<f32>(&c).is_err());
    }

    #[test]
    fn duplicate_name_is_error() {
        let mut c = TensorContainer::new(serde_json::json!({}));
        c.insert("a", Tensor2::zeros(1, 1)).unwrap();
        assert!(c.insert("a", Tensor2::zeros(1, 1)).is_err());
    }

    #[test]
    fn wide_mode_load_casts() {
        let params = small_params();
        let c = params_to_container(&params).unwrap();
        let wide: ModelParams<f64> = params_from_container(&c).unwrap();
        assert_eq!(wide.embed.shape(), params.embed.shape());
        assert!((wide.embed.get(0, 0) - params.embed.get(0, 0) as f64).abs() < 1e-12);
    }
}
