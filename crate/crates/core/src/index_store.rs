//! Offline index of per-image features and its binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SDEI" | u32 version = 1 | u64 entry count
//! l: u32 | K: u32 | top_n: u32 | nms_iou: f64 | seed: u64
//! camera: center_x, center_y, rim_radius, phi, image_size as 5 × f64
//! per entry:
//!   u32 id byte length | UTF-8 id | u32 r_d | global 4×256 f32
//!   r_d × (box cx, cy, w, h, theta as 5 × f32 | feature 4×256 f32)
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::anchors::RotatedBox;
use crate::error::{Error, Result};
use crate::features::{MultiScaleFeature, StoredFeature, FEATURE_LEN};
use crate::geometry::CameraModel;
use crate::image::GrayImage;
use crate::pipeline::{ImageFeatures, IndexConfig, Region};

pub const MAGIC: &[u8; 4] = b"SDEI";
pub const VERSION: u32 = 1;

/// Parameters an index was built with; queries must match them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexParams {
    pub l: u32,
    pub k: u32,
    pub top_n: u32,
    pub nms_iou: f64,
    pub seed: u64,
    pub camera: CameraModel,
}

impl IndexParams {
    /// Describes the first field where `self` and `other` disagree.
    pub fn mismatch(&self, other: &IndexParams) -> Option<String> {
        if self.l != other.l {
            return Some(format!("l {} vs {}", self.l, other.l));
        }
        if self.k != other.k {
            return Some(format!("K {} vs {}", self.k, other.k));
        }
        if self.top_n != other.top_n {
            return Some(format!("top_n {} vs {}", self.top_n, other.top_n));
        }
        if self.nms_iou.to_bits() != other.nms_iou.to_bits() {
            return Some(format!("nms_iou {} vs {}", self.nms_iou, other.nms_iou));
        }
        if self.seed != other.seed {
            return Some(format!("seed {} vs {}", self.seed, other.seed));
        }
        if self.camera != other.camera {
            return Some(format!("camera {:?} vs {:?}", self.camera, other.camera));
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub image_id: String,
    pub features: ImageFeatures,
}

impl IndexEntry {
    pub fn global(&self) -> &StoredFeature {
        &self.features.global
    }

    pub fn regions(&self) -> &[Region] {
        &self.features.regions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    params: IndexParams,
    entries: Vec<IndexEntry>,
}

impl Index {
    /// Sorts entries by id and rejects duplicates or empty ids.
    pub fn from_entries(params: IndexParams, mut entries: Vec<IndexEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(e) = entries.iter().find(|e| e.image_id.is_empty()) {
            return Err(Error::InvalidInput(format!("empty image id in index (entry {:?})", e.image_id)));
        }
        if let Some(w) = entries.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::DuplicateId(w[0].image_id.clone()));
        }
        Ok(Self { params, entries })
    }

    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.image_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        let p = &self.params;
        out.extend_from_slice(&p.l.to_le_bytes());
        out.extend_from_slice(&p.k.to_le_bytes());
        out.extend_from_slice(&p.top_n.to_le_bytes());
        out.extend_from_slice(&p.nms_iou.to_le_bytes());
        out.extend_from_slice(&p.seed.to_le_bytes());
        let cam = &p.camera;
        for v in [
            cam.center_x(),
            cam.center_y(),
            cam.rim_radius(),
            cam.phi(),
            f64::from(cam.image_size()),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(&(e.image_id.len() as u32).to_le_bytes());
            out.extend_from_slice(e.image_id.as_bytes());
            out.extend_from_slice(&(e.regions().len() as u32).to_le_bytes());
            write_feature(&mut out, e.global());
            for r in e.regions() {
                for v in [r.rbox.cx, r.rbox.cy, r.rbox.w, r.rbox.h, r.rbox.theta] {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
                write_feature(&mut out, &r.feature);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected \"SDEI\"".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let count = r.u64("entry count")?;
        let l = r.u32("l")?;
        let k = r.u32("K")?;
        let top_n = r.u32("top_n")?;
        let nms_iou = r.f64("nms_iou")?;
        let seed = r.u64("seed")?;
        let cam_offset = r.pos;
        let cam: Vec<f64> = (0..5).map(|_| r.f64("camera")).collect::<Result<_>>()?;
        let image_size = cam[4];
        if !(image_size >= 1.0 && image_size <= f64::from(u32::MAX) && image_size.fract() == 0.0) {
            return Err(Error::Format {
                offset: cam_offset as u64 + 32,
                message: format!("invalid image size {image_size}"),
            });
        }
        let camera = CameraModel::new(cam[0], cam[1], cam[2], cam[3], image_size as u32).map_err(|e| Error::Format {
            offset: cam_offset as u64,
            message: e.to_string(),
        })?;
        let params = IndexParams {
            l,
            k,
            top_n,
            nms_iou,
            seed,
            camera,
        };
        let mut entries = Vec::new();
        for _ in 0..count {
            let id_offset = r.pos;
            let id_len = r.u32("id length")? as usize;
            let id = std::str::from_utf8(r.take(id_len, "id")?)
                .map_err(|_| Error::Format {
                    offset: id_offset as u64 + 4,
                    message: "image id is not UTF-8".into(),
                })?
                .to_owned();
            let r_d = r.u32("region count")? as usize;
            let global = r.feature()?;
            let mut regions = Vec::with_capacity(r_d.min(1 << 16));
            for _ in 0..r_d {
                let v: Vec<f64> = (0..5).map(|_| r.f32("box").map(f64::from)).collect::<Result<_>>()?;
                let rbox = RotatedBox {
                    cx: v[0],
                    cy: v[1],
                    w: v[2],
                    h: v[3],
                    theta: v[4],
                };
                regions.push(Region {
                    rbox,
                    feature: r.feature()?,
                });
            }
            entries.push(IndexEntry {
                image_id: id,
                features: ImageFeatures { global, regions },
            });
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes after checksum", bytes.len() - r.pos),
            });
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::Format {
                offset: body_end as u64,
                message: format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
            });
        }
        let sorted = entries.windows(2).all(|w| w[0].image_id < w[1].image_id);
        if !sorted {
            return Err(Error::Format {
                offset: 16,
                message: "entries are not sorted by unique image id".into(),
            });
        }
        Index::from_entries(params, entries)
    }

    pub fn save(&self, sink: &mut impl Write) -> Result<()> {
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(source: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.save(&mut w).and_then(|_| w.flush().map_err(Error::from)).map_err(|e| match e {
            Error::Stream(io) => Error::io(path, io),
            other => other,
        })
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_feature(out: &mut Vec<u8>, f: &StoredFeature) {
    for v in f.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn feature(&mut self) -> Result<StoredFeature> {
        let raw = self.take(FEATURE_LEN * 4, "feature")?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        MultiScaleFeature::from_raw(values)
    }
}

/// Extracts every image with `cfg` and collects the entries sorted by id.
pub fn build_index(images: &[(String, GrayImage)], cfg: &IndexConfig) -> Result<Index> {
    cfg.validate()?;
    let mut ids: Vec<&str> = images.iter().map(|(id, _)| id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateId(w[0].to_owned()));
    }
    let cands = cfg.candidates()?;
    let entries = images
        .par_iter()
        .map(|(id, img)| {
            Ok(IndexEntry {
                image_id: id.clone(),
                features: cfg.extract_with(img, &cands)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Index::from_entries(cfg.params(), entries)
}
