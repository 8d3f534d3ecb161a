//! PNG export of synthetic sets in display space.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array3, ArrayView3, Axis};

use crate::data::{invert_preprocess, SyntheticDataset};
use crate::error::{Error, Result};
use crate::real::Real;

/// Undoes the dataset preprocessing and quantizes to 8 bits, clamping to `[0, 1]`.
pub fn to_display<F: Real>(syn: &SyntheticDataset<F>) -> Result<Vec<Array3<u8>>> {
    let rec = syn
        .preprocess
        .as_ref()
        .ok_or_else(|| Error::Contract("synthetic set carries no preprocessing record".into()))?;
    let raw = invert_preprocess(rec, &syn.images)?;
    Ok(raw
        .axis_iter(Axis(0))
        .map(|img| img.mapv(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect())
}

fn save_png(img: ArrayView3<'_, u8>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    let err = |e: image::ImageError| Error::Io(std::io::Error::other(e));
    match c {
        1 => {
            let buf: Vec<u8> = img.iter().copied().collect();
            GrayImage::from_raw(w as u32, h as u32, buf).unwrap().save(path).map_err(err)
        }
        3 => {
            let buf: Vec<u8> = img.permuted_axes([1, 2, 0]).iter().copied().collect();
            RgbImage::from_raw(w as u32, h as u32, buf).unwrap().save(path).map_err(err)
        }
        _ => Err(Error::param(format!("cannot export {c}-channel images"))),
    }
}

/// Lays images out on a square-ish grid with a one-pixel black border.
pub fn montage(images: &[ArrayView3<'_, u8>]) -> Array3<u8> {
    let (c, h, w) = images[0].dim();
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let mut out = Array3::zeros((c, rows * (h + 1) + 1, cols * (w + 1) + 1));
    for (i, img) in images.iter().enumerate() {
        let (r, col) = (i / cols, i % cols);
        let (y, x) = (1 + r * (h + 1), 1 + col * (w + 1));
        out.slice_mut(ndarray::s![.., y..y + h, x..x + w]).assign(img);
    }
    out
}

/// Writes `class{k}_idx{j}.png` for every image and `montage_class{k}.png` per class.
/// Returns the written paths, sorted by class then index.
pub fn export_images<F: Real>(syn: &SyntheticDataset<F>, dir: &Path) -> Result<Vec<PathBuf>> {
    let pixels = to_display(syn)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(pixels.len() + syn.num_classes());
    for k in 0..syn.num_classes() {
        let range = syn.class_range(k);
        for (j, i) in range.clone().enumerate() {
            let path = dir.join(format!("class{k}_idx{j}.png"));
            save_png(pixels[i].view(), &path)?;
            written.push(path);
        }
        let views: Vec<_> = range.map(|i| pixels[i].view()).collect();
        let path = dir.join(format!("montage_class{k}.png"));
        save_png(montage(&views).view(), &path)?;
        written.push(path);
    }
    Ok(written)
}
