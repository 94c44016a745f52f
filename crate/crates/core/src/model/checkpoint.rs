//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "BFS1" | version u32 | entry count u32
//! per entry: name len u16 | UTF-8 name | rank u8 | dims u32 × rank | dtype u8 | values
//! ```
//!
//! `dtype` is 0 for 32-bit and 1 for 64-bit floats. The model
//! configuration is written next to the checkpoint as `<file>.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::params::Module;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"BFS1";
pub const VERSION: u32 = 1;

/// Path of the JSON config stored beside a checkpoint.
pub fn config_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serializes every parameter in visiting order.
pub fn encode_params<T: Scalar, M: Module<T>>(module: &M) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
    module.visit_params("", &mut |name, t| {
        entries.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(T::DTYPE_TAG);
        for v in data {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// One decoded entry, values widened to `f64` losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub dtype: u8,
    pub values: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a whole checkpoint image. Nothing is returned unless every
/// entry decodes.
pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Entry)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a BFS1 checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = r.u8("dtype")?;
        let n: usize = shape.iter().product();
        let values = match dtype {
            0 => r
                .take(n * 4, &name)?
                .chunks_exact(4)
                .map(|c| f32::read_le(c) as f64)
                .collect(),
            1 => r.take(n * 8, &name)?.chunks_exact(8).map(f64::read_le).collect(),
            t => return Err(Error::Checkpoint(format!("entry {name}: unknown dtype tag {t}"))),
        };
        out.push((name, Entry { shape, dtype, values }));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Fills `module`'s parameters from decoded entries, all or nothing.
pub fn apply_entries<T: Scalar, M: Module<T>>(module: &mut M, entries: Vec<(String, Entry)>) -> Result<()> {
    let mut map: HashMap<String, Entry> = HashMap::with_capacity(entries.len());
    for (name, e) in entries {
        if map.insert(name.clone(), e).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
    }
    // Validate everything before touching the module.
    let mut missing = None;
    let mut mismatch = None;
    let mut known = 0;
    module.visit_params("", &mut |name, t| match map.get(name) {
        None => {
            missing.get_or_insert_with(|| name.to_string());
        }
        Some(e) => {
            known += 1;
            if e.shape != t.shape() {
                mismatch.get_or_insert_with(|| {
                    format!("{name}: checkpoint {:?}, model {:?}", e.shape, t.shape())
                });
            }
        }
    });
    if let Some(name) = missing {
        return Err(Error::Checkpoint(format!("missing entry {name}")));
    }
    if let Some(m) = mismatch {
        return Err(Error::Checkpoint(format!("shape mismatch for {m}")));
    }
    if known != map.len() {
        let names: std::collections::HashSet<String> = module.param_names().into_iter().collect();
        let extra = map.keys().find(|k| !names.contains(*k)).cloned().unwrap_or_default();
        return Err(Error::Checkpoint(format!("unexpected entry {extra}")));
    }
    module.visit_params_mut("", &mut |name, t| {
        for (d, &v) in t.data_mut().iter_mut().zip(&map[name].values) {
            *d = T::c(v);
        }
        t.zero_grad();
    });
    Ok(())
}

/// Writes the parameters to `path` and the config to `<path>.json`.
pub fn save_checkpoint<T: Scalar>(model: &SegModel<T>, path: &Path) -> Result<()> {
    let bytes = encode_params(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let cfg = config_path(path);
    let json = serde_json::to_string_pretty(&model.config).expect("config serializes");
    fs::write(&cfg, json).map_err(|e| Error::io(cfg, e))
}

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a checkpoint against an explicit configuration.
pub fn load_checkpoint_with<T: Scalar>(path: &Path, config: &ModelConfig) -> Result<SegModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode_entries(&bytes)?;
    let mut model = SegModel::init(config, 0)?;
    apply_entries(&mut model, entries)?;
    Ok(model)
}

/// Loads a checkpoint using the configuration stored beside it.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SegModel<T>> {
    let config = read_config(&config_path(path))?;
    load_checkpoint_with(path, &config)
}

/// Exact byte size of the checkpoint `encode_params` would write.
pub fn encoded_size<T: Scalar, M: Module<T>>(module: &M) -> usize {
    let mut size = 12;
    module.visit_params("", &mut |name, t| {
        size += 2 + name.len() + 1 + 4 * t.shape().len() + 1 + T::BYTES * t.numel();
    });
    size
}

