//! The learnable synthetic set and its binary container.
//!
//! Container layout (little endian):
//!
//! ```text
//! magic      8 bytes  "ATOMSYN\0"
//! version    u32      = 1
//! dtype      u8       0 = f32, 1 = f64
//! classes    u32
//! ipc        u32
//! dataset    u32 len + utf-8
//! origin     u32 len + utf-8   ("atom", "random", ...)
//! images     u32 ndim (= 4) + 4 × u64 shape [K·ipc, C, H, W] + payload
//! labels     u64 count + count × u32
//! preprocess u8 flag, then the serialized record when flag = 1
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array4, Axis, Ix4};
use rand::seq::index::sample;

use super::dataset::LabeledImageSet;
use super::preprocess::PreprocessRecord;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::rng::{stream, Stream};

pub const CONTAINER_MAGIC: &[u8; 8] = b"ATOMSYN\0";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset<F: Real> {
    /// `[K·ipc, C, H, W]`, class-major: class `k` owns rows `k·ipc .. (k+1)·ipc`.
    pub images: Array4<F>,
    labels: Vec<usize>,
    ipc: usize,
    num_classes: usize,
    pub dataset: String,
    pub origin: String,
    pub preprocess: Option<PreprocessRecord>,
}

impl<F: Real> SyntheticDataset<F> {
    pub fn new(images: Array4<F>, num_classes: usize, ipc: usize) -> Result<Self> {
        if ipc == 0 {
            return Err(Error::param("ipc must be >= 1"));
        }
        if images.shape()[0] != num_classes * ipc {
            return Err(Error::param(format!(
                "{} images for {num_classes} classes × {ipc} ipc",
                images.shape()[0]
            )));
        }
        let labels = (0..num_classes).flat_map(|k| std::iter::repeat_n(k, ipc)).collect();
        Ok(SyntheticDataset {
            images,
            labels,
            ipc,
            num_classes,
            dataset: String::new(),
            origin: String::new(),
            preprocess: None,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_range(&self, class: usize) -> std::ops::Range<usize> {
        class * self.ipc..(class + 1) * self.ipc
    }

    /// Content hash of the images and labels.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::with_capacity(self.images.len() * 8);
        for &x in self.images.iter() {
            x.write_le(&mut buf);
        }
        for &y in &self.labels {
            buf.extend_from_slice(&(y as u32).to_le_bytes());
        }
        Sha256::digest(&buf)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CONTAINER_MAGIC);
        w.u32(CONTAINER_VERSION);
        w.u8(F::DTYPE.tag());
        w.u32(self.num_classes as u32);
        w.u32(self.ipc as u32);
        w.str(&self.dataset);
        w.str(&self.origin);
        w.array(&self.images);
        w.u64(self.labels.len() as u64);
        for &y in &self.labels {
            w.u32(y as u32);
        }
        match &self.preprocess {
            None => w.u8(0),
            Some(rec) => {
                w.u8(1);
                rec.write(&mut w);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if bytes.is_empty() {
            return Err(r.err("empty file"));
        }
        if r.take(8)? != CONTAINER_MAGIC {
            return Err(r.err("not a synthetic-set container (bad magic)"));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(r.err(format!("unsupported container version {version}")));
        }
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| r.err("unknown dtype tag"))?;
        let num_classes = r.u32()? as usize;
        let ipc = r.u32()? as usize;
        let dataset = r.str()?;
        let origin = r.str()?;
        let images = r
            .array::<F>(dtype)?
            .into_dimensionality::<Ix4>()
            .map_err(|_| r.err("image payload is not 4-D"))?;
        let n = r.u64()? as usize;
        if n != images.shape()[0] || n != num_classes * ipc {
            return Err(r.err(format!(
                "label count {n} inconsistent with shape {:?} and {num_classes}×{ipc}",
                images.shape()
            )));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32()? as usize);
        }
        let preprocess = match r.u8()? {
            0 => None,
            1 => Some(PreprocessRecord::read(&mut r)?),
            t => return Err(r.err(format!("bad preprocess flag {t}"))),
        };
        r.finish()?;
        let mut s = SyntheticDataset::new(images, num_classes, ipc).map_err(|e| r.err(e.to_string()))?;
        if s.labels != labels {
            return Err(r.err("labels are not class-major with ipc entries per class"));
        }
        s.dataset = dataset;
        s.origin = origin;
        s.preprocess = preprocess;
        Ok(s)
    }

    pub fn cast<G: Real>(&self) -> SyntheticDataset<G> {
        SyntheticDataset {
            images: self.images.mapv(|x| G::of(x.f64())),
            labels: self.labels.clone(),
            ipc: self.ipc,
            num_classes: self.num_classes,
            dataset: self.dataset.clone(),
            origin: self.origin.clone(),
            preprocess: self.preprocess.clone(),
        }
    }
}

pub fn save_synthetic<F: Real>(s: &SyntheticDataset<F>, path: &Path) -> Result<()> {
    fs::write(path, s.to_bytes())?;
    Ok(())
}

pub fn load_synthetic<F: Real>(path: &Path) -> Result<SyntheticDataset<F>> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    SyntheticDataset::from_bytes(&bytes, path)
}

/// Reads only the stored element type of a container.
pub fn container_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut r = Reader::new(&bytes, path);
    if r.take(8)? != CONTAINER_MAGIC {
        return Err(r.err("not a synthetic-set container (bad magic)"));
    }
    r.u32()?;
    DType::from_tag(r.u8()?).ok_or_else(|| r.err("unknown dtype tag"))
}

/// Copies `ipc` distinct real samples per class, chosen by a seeded RNG.
pub fn init_synthetic<F: Real>(real: &LabeledImageSet<F>, ipc: usize, seed: u64) -> Result<SyntheticDataset<F>> {
    if ipc == 0 {
        return Err(Error::param("ipc must be >= 1"));
    }
    let mut rng = stream(seed, Stream::Init);
    let [c, h, w] = real.image_shape();
    let k = real.num_classes();
    let mut images = Array4::zeros((k * ipc, c, h, w));
    for class in 0..k {
        let pool = real.class_indices(class);
        if pool.len() < ipc {
            return Err(Error::InsufficientData {
                class,
                available: pool.len(),
                requested: ipc,
            });
        }
        let picks = sample(&mut rng, pool.len(), ipc);
        for (j, p) in picks.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), class * ipc + j)
                .assign(&real.images().index_axis(Axis(0), pool[p]));
        }
    }
    let mut s = SyntheticDataset::new(images, k, ipc)?;
    s.preprocess = Some(real.preprocess().clone());
    Ok(s)
}
