//! Dataset archive layout (all integers little-endian):
//!
//! ```text
//! "OCDS" | u32 version | u32 header_len | header JSON
//!        | f32 images, scene order, each [3,R,R]
//!        | f32 masks, scene order, each [objects,R,R]
//!        | u64 annotations_len | annotations JSON (array of scenes)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Rendered, RuleSetName, SceneAnnotation, Split};
use crate::error::{OceanError, Result};
use crate::numcore::Tensor;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"OCDS";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub rule_set: RuleSetName,
    pub split: Split,
    pub resolution: usize,
    pub seed: u64,
    pub count: usize,
    pub object_counts: Vec<usize>,
}

impl ArchiveHeader {
    /// Bytes of image plus mask payload implied by the header.
    pub fn payload_bytes(&self) -> u64 {
        let plane = (self.resolution * self.resolution) as u64;
        let objects: u64 = self.object_counts.iter().map(|&n| n as u64).sum();
        4 * plane * (3 * self.count as u64 + objects)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: ArchiveHeader,
    pub scenes: Vec<SceneAnnotation>,
    pub images: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(
        rule_set: RuleSetName,
        split: Split,
        resolution: usize,
        seed: u64,
        scenes: Vec<SceneAnnotation>,
        rendered: Vec<Rendered>,
    ) -> Self {
        let (images, masks) = rendered.into_iter().map(|r| (r.image, r.masks)).unzip();
        Dataset {
            header: ArchiveHeader {
                rule_set,
                split,
                resolution,
                seed,
                count: scenes.len(),
                object_counts: scenes.iter().map(|s| s.objects.len()).collect(),
            },
            scenes,
            images,
            masks,
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.scenes.iter().map(|s| s.label).collect()
    }

    /// First `n` scenes.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let scenes = self.scenes[..n].to_vec();
        Dataset {
            header: ArchiveHeader {
                count: n,
                object_counts: self.header.object_counts[..n].to_vec(),
                ..self.header.clone()
            },
            scenes,
            images: self.images[..n].to_vec(),
            masks: self.masks[..n].to_vec(),
        }
    }
}

fn write_floats<W: Write>(w: &mut W, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_archive(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(OceanError::invalid("refusing to write an empty dataset"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(&ds.header)?;
    w.write_all(&ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for img in &ds.images {
        write_floats(&mut w, img.data())?;
    }
    for m in &ds.masks {
        write_floats(&mut w, m.data())?;
    }
    let ann = serde_json::to_vec(&ds.scenes)?;
    w.write_all(&(ann.len() as u64).to_le_bytes())?;
    w.write_all(&ann)?;
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => OceanError::Truncated(what.to_string()),
        _ => OceanError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_floats<R: Read>(r: &mut R, shape: &[usize], what: &str) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes, what)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_archive(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != ARCHIVE_MAGIC {
        return Err(OceanError::BadMagic {
            expected: ARCHIVE_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != ARCHIVE_VERSION {
        return Err(OceanError::Version {
            expected: ARCHIVE_VERSION,
            found: version,
        });
    }
    let hlen = read_u32(&mut r, "header length")? as usize;
    let mut hbuf = vec![0u8; hlen];
    read_exact(&mut r, &mut hbuf, "header")?;
    let header: ArchiveHeader = serde_json::from_slice(&hbuf)?;
    if header.object_counts.len() != header.count {
        return Err(OceanError::invalid("archive header: object_counts length differs from count"));
    }
    let res = header.resolution;
    let images = (0..header.count)
        .map(|_| read_floats(&mut r, &[3, res, res], "image payload"))
        .collect::<Result<Vec<_>>>()?;
    let masks = header
        .object_counts
        .iter()
        .map(|&n| read_floats(&mut r, &[n, res, res], "mask payload"))
        .collect::<Result<Vec<_>>>()?;
    let mut lb = [0u8; 8];
    read_exact(&mut r, &mut lb, "annotation length")?;
    let mut abuf = vec![0u8; u64::from_le_bytes(lb) as usize];
    read_exact(&mut r, &mut abuf, "annotations")?;
    let scenes: Vec<SceneAnnotation> = serde_json::from_slice(&abuf)?;
    if scenes.len() != header.count {
        return Err(OceanError::invalid("archive: annotation count differs from header"));
    }
    Ok(Dataset {
        header,
        scenes,
        images,
        masks,
    })
}
