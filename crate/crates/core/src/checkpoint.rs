//! Parameter checkpoint container (integers little-endian):
//!
//! ```text
//! "OCKP" | u32 version | u32 manifest_len | manifest JSON | f32 payload
//! ```
//!
//! The manifest lists every block as `{name, shape, offset}` with `offset`
//! in bytes from the start of the payload, plus a free-form `meta` object.
//! Several stores can share one file by giving each a name prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OceanError, Result};
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.manifest
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Overwrites every block of `store` with the entry named
    /// `prefix + block name`.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for i in 0..store.len() {
            let name = format!("{prefix}{}", store.block(i).name);
            let t = self
                .get(&name)
                .ok_or_else(|| OceanError::invalid(format!("checkpoint has no block `{name}`")))?;
            let b = store.block_mut(i);
            if t.shape() != b.value.shape() {
                return Err(OceanError::shape("checkpoint load", b.value.shape(), t.shape()));
            }
            b.value = t.clone();
        }
        Ok(())
    }
}

pub fn write_checkpoint(path: &Path, stores: &[(&str, &ParamStore<f32>)], meta: serde_json::Value) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (prefix, store) in stores {
        for b in store.blocks() {
            entries.push(ManifestEntry {
                name: format!("{prefix}{}", b.name),
                shape: b.value.shape().to_vec(),
                offset,
            });
            offset += 4 * b.value.len() as u64;
        }
    }
    let manifest = serde_json::to_vec(&Manifest { entries, meta })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, store) in stores {
        for b in store.blocks() {
            for v in b.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => OceanError::Truncated(what.to_string()),
        _ => OceanError::Io(e),
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "magic")?;
    if word != CHECKPOINT_MAGIC {
        return Err(OceanError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: word,
        });
    }
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(OceanError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    read_exact(&mut r, &mut word, "manifest length")?;
    let mut mbuf = vec![0u8; u32::from_le_bytes(word) as usize];
    read_exact(&mut r, &mut mbuf, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&mbuf)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(OceanError::Truncated(format!("payload of `{}`", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(&e.shape, data)?);
    }
    Ok(Checkpoint { manifest, tensors })
}
