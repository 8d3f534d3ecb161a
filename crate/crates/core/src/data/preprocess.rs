//! Per-channel standardization and ZCA whitening, with exact inverses for image export.

use ndarray::{Array2, Array4, ArrayView4, Axis, Ix2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::real::{DType, Real};

pub const DEFAULT_ZCA_EPS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessMode {
    MeanStd,
    Zca,
}

/// Whitening applied after standardization: `w = (x - mean) · matrix`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    pub matrix: Array2<f64>,
    pub inverse: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessRecord {
    pub mode: PreprocessMode,
    /// Image shape `[C, H, W]` the record applies to.
    pub shape: [usize; 3],
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub zca: Option<ZcaTransform>,
    pub zca_eps: f64,
}

impl PreprocessRecord {
    /// Identity standardization for images of the given shape.
    pub fn identity(shape: [usize; 3]) -> Self {
        PreprocessRecord {
            mode: PreprocessMode::MeanStd,
            shape,
            mean: vec![0.0; shape[0]],
            std: vec![1.0; shape[0]],
            zca: None,
            zca_eps: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    /// Combines channel statistics from `self` with whitening from `zca`.
    pub fn with_whitening(mut self, zca: PreprocessRecord) -> Result<Self> {
        if zca.shape != self.shape {
            return Err(Error::param("whitening fit on a different image shape"));
        }
        self.mode = zca.mode;
        self.zca = zca.zca;
        self.zca_eps = zca.zca_eps;
        Ok(self)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u8(match self.mode {
            PreprocessMode::MeanStd => 0,
            PreprocessMode::Zca => 1,
        });
        for &d in &self.shape {
            w.u64(d as u64);
        }
        w.f64s(&self.mean);
        w.f64s(&self.std);
        w.f64(self.zca_eps);
        match &self.zca {
            None => w.u8(0),
            Some(z) => {
                w.u8(1);
                w.f64s(&z.mean);
                w.array(&z.matrix);
                w.array(&z.inverse);
            }
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let mode = match r.u8()? {
            0 => PreprocessMode::MeanStd,
            1 => PreprocessMode::Zca,
            t => return Err(r.err(format!("unknown preprocess mode tag {t}"))),
        };
        let shape = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
        let mean = r.f64s()?;
        let std = r.f64s()?;
        let zca_eps = r.f64()?;
        let zca = match r.u8()? {
            0 => None,
            1 => {
                let zmean = r.f64s()?;
                let matrix = r.array::<f64>(DType::F64)?;
                let inverse = r.array::<f64>(DType::F64)?;
                let to2 = |a: ndarray::ArrayD<f64>| {
                    a.into_dimensionality::<Ix2>()
                        .map_err(|_| r.err("whitening matrix is not 2-D"))
                };
                Some(ZcaTransform {
                    mean: zmean,
                    matrix: to2(matrix)?,
                    inverse: to2(inverse)?,
                })
            }
            t => return Err(r.err(format!("bad whitening flag {t}"))),
        };
        if (mode == PreprocessMode::Zca) != zca.is_some() {
            return Err(r.err("whitening matrices present iff mode is zca"));
        }
        Ok(PreprocessRecord {
            mode,
            shape,
            mean,
            std,
            zca,
            zca_eps,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        self.write(&mut w);
        w.buf
    }

    /// Short content hash used to detect mismatched preprocessing.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_finite<F: Real>(images: ArrayView4<'_, F>) -> Result<()> {
    if images.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("images contain NaN or Inf".into()));
    }
    Ok(())
}

fn flatten_f64<F: Real>(images: ArrayView4<'_, F>) -> Array2<f64> {
    let n = images.shape()[0];
    let d = images.len() / n.max(1);
    let data: Vec<f64> = images.iter().map(|x| x.f64()).collect();
    Array2::from_shape_vec((n, d), data).unwrap()
}

/// Per-channel mean and (population) standard deviation.
pub fn fit_mean_std<F: Real>(images: &Array4<F>) -> Result<PreprocessRecord> {
    check_finite(images.view())?;
    let (n, c, h, w) = images.dim();
    if n == 0 {
        return Err(Error::param("cannot fit statistics on an empty set"));
    }
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let plane = images.index_axis(Axis(1), ch);
        let m = plane.iter().map(|x| x.f64()).sum::<f64>() / count;
        let v = plane.iter().map(|x| (x.f64() - m).powi(2)).sum::<f64>() / count;
        mean[ch] = m;
        std[ch] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    Ok(PreprocessRecord {
        mode: PreprocessMode::MeanStd,
        shape: [c, h, w],
        mean,
        std,
        zca: None,
        zca_eps: 0.0,
    })
}

/// Fits a ZCA whitening transform `E (Λ + eps·I)^(-1/2) Eᵀ` on the flattened images.
///
/// The returned record has identity channel statistics; combine it with a
/// standardization record via [`PreprocessRecord::with_whitening`].
pub fn fit_zca<F: Real>(images: &Array4<F>, eps: f64) -> Result<PreprocessRecord> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("zca eps must be > 0, got {eps}")));
    }
    check_finite(images.view())?;
    let (n, c, h, w) = images.dim();
    if n < 2 {
        return Err(Error::param("zca needs at least 2 samples"));
    }
    let mut x = flatten_f64(images.view());
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).unwrap();
    x -= &mean;
    let cov = x.t().dot(&x) / (n as f64 - 1.0);

    let cov = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let vecs = Array2::from_shape_fn((d, d), |(i, k)| eig.eigenvectors[(i, k)]);
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0) + eps).collect();
    let scaled = |f: &dyn Fn(f64) -> f64| {
        let mut s = vecs.clone();
        for (mut col, &l) in s.axis_iter_mut(Axis(1)).zip(&lam) {
            col *= f(l);
        }
        s.dot(&vecs.t())
    };
    let whiten = scaled(&|l| l.sqrt().recip());
    let unwhiten = scaled(&|l| l.sqrt());

    Ok(PreprocessRecord {
        mode: PreprocessMode::Zca,
        shape: [c, h, w],
        mean: vec![0.0; c],
        std: vec![1.0; c],
        zca: Some(ZcaTransform {
            mean: mean.to_vec(),
            matrix: whiten,
            inverse: unwhiten,
        }),
        zca_eps: eps,
    })
}

fn check_shape<F: Real>(rec: &PreprocessRecord, images: &Array4<F>) -> Result<()> {
    let (_, c, h, w) = images.dim();
    if [c, h, w] != rec.shape {
        return Err(Error::param(format!(
            "image shape {:?} does not match preprocess record {:?}",
            [c, h, w],
            rec.shape
        )));
    }
    Ok(())
}

fn map_whitening<F: Real>(images: &Array4<F>, matrix: &Array2<f64>, pre: &[f64], post: &[f64]) -> Array4<F> {
    const CHUNK: usize = 512;
    let n = images.shape()[0];
    let d = matrix.nrows();
    let src = images.as_standard_layout();
    let flat = src.as_slice().unwrap();
    let mut out = Vec::with_capacity(flat.len());
    for start in (0..n).step_by(CHUNK) {
        let rows = CHUNK.min(n - start);
        let x = Array2::from_shape_fn((rows, d), |(i, j)| {
            flat[(start + i) * d + j].f64() - pre[j]
        });
        let y = x.dot(matrix);
        for row in y.outer_iter() {
            out.extend(row.iter().zip(post).map(|(&v, m)| F::of(v + m)));
        }
    }
    Array4::from_shape_vec(images.raw_dim(), out).unwrap()
}

/// Standardizes then (in zca mode) whitens.
pub fn apply_preprocess<F: Real>(rec: &PreprocessRecord, images: &Array4<F>) -> Result<Array4<F>> {
    check_shape(rec, images)?;
    let mut out = images.clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (F::of(rec.mean[ch]), F::of(rec.std[ch]));
        plane.mapv_inplace(|x| (x - m) / s);
    }
    if let Some(z) = &rec.zca {
        let zero = vec![0.0; rec.dim()];
        out = map_whitening(&out, &z.matrix, &z.mean, &zero);
    }
    Ok(out)
}

/// Exact inverse of [`apply_preprocess`], used to export images in display space.
pub fn invert_preprocess<F: Real>(rec: &PreprocessRecord, images: &Array4<F>) -> Result<Array4<F>> {
    check_shape(rec, images)?;
    let mut out = match &rec.zca {
        Some(z) => {
            let zero = vec![0.0; rec.dim()];
            map_whitening(images, &z.inverse, &zero, &z.mean)
        }
        None => images.clone(),
    };
    for (ch, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (F::of(rec.mean[ch]), F::of(rec.std[ch]));
        plane.mapv_inplace(|x| x * s + m);
    }
    Ok(out)
}
