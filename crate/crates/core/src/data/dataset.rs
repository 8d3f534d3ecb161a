//! Labeled image sets and the dataset loaders.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::preprocess::{
    apply_preprocess, fit_mean_std, fit_zca, PreprocessRecord, DEFAULT_ZCA_EPS,
};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{stream, Stream};

/// Real images `[N, C, H, W]` in preprocessed space, with integer labels.
#[derive(Debug, Clone)]
pub struct LabeledImageSet<F: Real> {
    images: Array4<F>,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    preprocess: PreprocessRecord,
}

impl<F: Real> LabeledImageSet<F> {
    pub fn new(
        images: Array4<F>,
        labels: Vec<usize>,
        num_classes: usize,
        preprocess: PreprocessRecord,
    ) -> Result<Self> {
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} images", labels.len())));
        }
        if images.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("images contain NaN or Inf".into()));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
            }
            class_index[y].push(i);
        }
        Ok(LabeledImageSet {
            images,
            labels,
            num_classes,
            class_index,
            preprocess,
        })
    }

    pub fn images(&self) -> &Array4<F> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dim();
        [c, h, w]
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    pub fn preprocess(&self) -> &PreprocessRecord {
        &self.preprocess
    }

    pub fn select(&self, indices: &[usize]) -> Array4<F> {
        self.images.select(Axis(0), indices)
    }

    /// Stable content hash of images, labels and preprocessing.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for &x in self.images.iter() {
            x.write_le(&mut buf);
            if buf.len() > 1 << 16 {
                h.update(&buf);
                buf.clear();
            }
        }
        h.update(&buf);
        for &y in &self.labels {
            h.update((y as u32).to_le_bytes());
        }
        h.update(self.preprocess.to_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits<F: Real> {
    pub name: String,
    pub train: LabeledImageSet<F>,
    pub test: LabeledImageSet<F>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Whiten after standardization. `None` picks the dataset default.
    pub zca: Option<bool>,
    pub zca_eps: f64,
    /// Where fitted whitening transforms are cached; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            zca: None,
            zca_eps: DEFAULT_ZCA_EPS,
            cache_dir: None,
        }
    }
}

pub const DATASETS: [&str; 4] = ["cifar10", "cifar100", "tinyimagenet", "toy-fixture"];

/// Loads the train and test splits with the dataset's default preprocessing.
pub fn load_dataset<F: Real>(name: &str, root: &Path) -> Result<DatasetSplits<F>> {
    let opts = LoadOptions {
        cache_dir: Some(root.join(".atom-cache")),
        ..LoadOptions::default()
    };
    load_dataset_with(name, root, &opts)
}

pub fn load_dataset_with<F: Real>(
    name: &str,
    root: &Path,
    opts: &LoadOptions,
) -> Result<DatasetSplits<F>> {
    let (raw_train, raw_test, k, default_zca) = match name {
        "cifar10" => {
            let (tr, te) = load_cifar(root, CifarKind::Ten)?;
            (tr, te, 10, true)
        }
        "cifar100" => {
            let (tr, te) = load_cifar(root, CifarKind::Hundred)?;
            (tr, te, 100, true)
        }
        "tinyimagenet" => {
            let (tr, te) = load_tiny_imagenet(root)?;
            (tr, te, 200, false)
        }
        "toy-fixture" => {
            let tr = toy_fixture_raw(TOY_TRAIN_PER_CLASS, 0x7079);
            let te = toy_fixture_raw(TOY_TEST_PER_CLASS, 0x7e57);
            (tr, te, TOY_CLASSES, false)
        }
        other => return Err(Error::UnsupportedDataset(other.to_string())),
    };
    let (train_x, train_y) = raw_train;
    let (test_x, test_y) = raw_test;

    let mut rec = fit_mean_std(&train_x)?;
    if opts.zca.unwrap_or(default_zca) {
        let standardized = apply_preprocess(&rec, &train_x)?;
        let whitening = cached_zca(name, &standardized, opts)?;
        rec = rec.with_whitening(whitening)?;
    }
    let train = LabeledImageSet::new(apply_preprocess(&rec, &train_x)?, train_y, k, rec.clone())?;
    let test = LabeledImageSet::new(apply_preprocess(&rec, &test_x)?, test_y, k, rec)?;
    Ok(DatasetSplits {
        name: name.to_string(),
        train,
        test,
    })
}

const ZCA_CACHE_MAGIC: &[u8; 8] = b"ATOMZCA\0";

fn cached_zca<F: Real>(name: &str, standardized: &Array4<F>, opts: &LoadOptions) -> Result<PreprocessRecord> {
    let Some(dir) = &opts.cache_dir else {
        return fit_zca(standardized, opts.zca_eps);
    };
    let path = dir.join(format!("{name}-zca-{}.bin", opts.zca_eps));
    if let Ok(bytes) = fs::read(&path) {
        let mut r = Reader::new(&bytes, &path);
        if r.take(8).ok() == Some(&ZCA_CACHE_MAGIC[..]) {
            if let Ok(rec) = PreprocessRecord::read(&mut r) {
                let (_, c, h, w) = standardized.dim();
                if rec.shape == [c, h, w] {
                    return Ok(rec);
                }
            }
        }
    }
    let rec = fit_zca(standardized, opts.zca_eps)?;
    let mut w = Writer::default();
    w.bytes(ZCA_CACHE_MAGIC);
    rec.write(&mut w);
    // A cache that cannot be written is not an error.
    if fs::create_dir_all(dir).is_ok() {
        let _ = fs::write(&path, w.buf);
    }
    Ok(rec)
}

type Raw<F> = (Array4<F>, Vec<usize>);

#[derive(Clone, Copy)]
enum CifarKind {
    Ten,
    Hundred,
}

fn find_dir(root: &Path, candidates: &[&str], probe: &str) -> Result<PathBuf> {
    for c in candidates {
        let d = root.join(c);
        if d.join(probe).is_file() {
            return Ok(d);
        }
    }
    Err(Error::load(root, format!("could not find `{probe}` under {candidates:?}")))
}

fn load_cifar<F: Real>(root: &Path, kind: CifarKind) -> Result<(Raw<F>, Raw<F>)> {
    let (dir, train_files, test_file, label_bytes): (PathBuf, Vec<String>, &str, usize) = match kind {
        CifarKind::Ten => (
            find_dir(root, &["cifar-10-batches-bin", "cifar10", ""], "test_batch.bin")?,
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            "test_batch.bin",
            1,
        ),
        CifarKind::Hundred => (
            find_dir(root, &["cifar-100-binary", "cifar100", ""], "test.bin")?,
            vec!["train.bin".to_string()],
            "test.bin",
            2,
        ),
    };
    let k = match kind {
        CifarKind::Ten => 10,
        CifarKind::Hundred => 100,
    };
    let read = |files: &[String]| -> Result<Raw<F>> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            let path = dir.join(f);
            let bytes = fs::read(&path).map_err(|e| Error::load(&path, e.to_string()))?;
            let rec = label_bytes + 3072;
            if bytes.is_empty() || bytes.len() % rec != 0 {
                return Err(Error::load(&path, format!("size {} is not a multiple of {rec}", bytes.len())));
            }
            for chunk in bytes.chunks_exact(rec) {
                let y = chunk[label_bytes - 1] as usize;
                if y >= k {
                    return Err(Error::load(&path, format!("label {y} out of range")));
                }
                labels.push(y);
                pixels.extend(chunk[label_bytes..].iter().map(|&b| F::of(b as f64 / 255.0)));
            }
        }
        let n = labels.len();
        Ok((Array4::from_shape_vec((n, 3, 32, 32), pixels).unwrap(), labels))
    };
    Ok((read(&train_files)?, read(&[test_file.to_string()])?))
}

fn decode_rgb<F: Real>(path: &Path, out: &mut Vec<F>) -> Result<()> {
    let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.to_rgb8();
    if img.dimensions() != (64, 64) {
        return Err(Error::load(path, format!("expected 64x64, got {:?}", img.dimensions())));
    }
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..64 {
                out.push(F::of(img.get_pixel(x, y)[c] as f64 / 255.0));
            }
        }
    }
    Ok(())
}

fn load_tiny_imagenet<F: Real>(root: &Path) -> Result<(Raw<F>, Raw<F>)> {
    let dir = find_dir(root, &["tiny-imagenet-200", "tinyimagenet", ""], "wnids.txt")?;
    let wnids_path = dir.join("wnids.txt");
    let wnids: Vec<String> = fs::read_to_string(&wnids_path)
        .map_err(|e| Error::load(&wnids_path, e.to_string()))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let class_of = |w: &str| wnids.iter().position(|x| x == w);

    let mut train_px = Vec::new();
    let mut train_y = Vec::new();
    for (k, wnid) in wnids.iter().enumerate() {
        let img_dir = dir.join("train").join(wnid).join("images");
        let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)
            .map_err(|e| Error::load(&img_dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for f in files {
            decode_rgb(&f, &mut train_px)?;
            train_y.push(k);
        }
    }

    let ann_path = dir.join("val").join("val_annotations.txt");
    let ann = fs::read_to_string(&ann_path).map_err(|e| Error::load(&ann_path, e.to_string()))?;
    let mut test_px = Vec::new();
    let mut test_y = Vec::new();
    for line in ann.lines().filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split('\t');
        let (Some(file), Some(wnid)) = (cols.next(), cols.next()) else {
            return Err(Error::load(&ann_path, format!("malformed line `{line}`")));
        };
        let k = class_of(wnid).ok_or_else(|| Error::load(&ann_path, format!("unknown class {wnid}")))?;
        decode_rgb(&dir.join("val").join("images").join(file), &mut test_px)?;
        test_y.push(k);
    }
    let to_arr = |px: Vec<F>, n: usize| Array4::from_shape_vec((n, 3, 64, 64), px).unwrap();
    Ok((
        (to_arr(train_px, train_y.len()), train_y),
        (to_arr(test_px, test_y.len()), test_y),
    ))
}

pub const TOY_CLASSES: usize = 2;
pub const TOY_TRAIN_PER_CLASS: usize = 32;
pub const TOY_TEST_PER_CLASS: usize = 128;
pub const TOY_SIZE: usize = 8;
pub const TOY_CHANNELS: usize = 3;

/// Deterministic two-class 8×8 RGB fixture with pixel values in `[0, 1]`.
///
/// Class 0 carries a horizontal bar, class 1 a vertical bar, each at a jittered
/// position with random tint, plus a bright square distractor of random color
/// and position and Gaussian background noise.
pub fn toy_fixture_raw<F: Real>(per_class: usize, seed: u64) -> Raw<F> {
    let n = per_class * TOY_CLASSES;
    let mut rng = stream(seed, Stream::Init);
    let noise = Normal::new(0.0, 0.12).unwrap();
    let mut images = Array4::<f64>::zeros((n, TOY_CHANNELS, TOY_SIZE, TOY_SIZE));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % TOY_CLASSES;
        labels.push(y);
        let mut img = images.slice_mut(s![i, .., .., ..]);
        img.mapv_inplace(|_| 0.3 + noise.sample(&mut rng));

        let pos = rng.random_range(2..=4usize);
        let amp: f64 = rng.random_range(0.25..0.5);
        let tint: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
        for c in 0..TOY_CHANNELS {
            for t in 0..TOY_SIZE {
                for b in pos..pos + 2 {
                    let (r, col) = if y == 0 { (b, t) } else { (t, b) };
                    img[[c, r, col]] += amp * tint[c];
                }
            }
        }

        let (dr, dc) = (rng.random_range(0..=5usize), rng.random_range(0..=5usize));
        let damp: f64 = rng.random_range(0.4..0.6);
        let dcolor: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for c in 0..TOY_CHANNELS {
            for r in dr..dr + 3 {
                for col in dc..dc + 3 {
                    img[[c, r, col]] += damp * dcolor[c];
                }
            }
        }
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    (images.mapv(F::of), labels)
}
