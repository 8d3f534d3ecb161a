//! The distillation loop.
//!
//! Every iteration draws a fresh randomly initialized ConvNet, pairs a real
//! batch with the synthetic images of each class, applies one shared DSA draw
//! to both, and moves the synthetic pixels along the gradient of
//! `atom + λ·mmd` with SGD momentum. Network weights are never trained.
//!
//! ```no_run
//! use atom_distill::data::{load_dataset, DatasetSplits};
//! use atom_distill::distill::{distill, DistillConfig};
//!
//! let data: DatasetSplits<f32> = load_dataset("toy-fixture", std::path::Path::new("data"))?;
//! let mut cfg = DistillConfig::new(1);
//! cfg.iterations = 200;
//! let out = distill(&cfg, &data.train)?;
//! println!("final loss {:.4}", out.metrics.last().unwrap().loss.total);
//! # Ok::<_, atom_distill::Error>(())
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, Axis, Ix4};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{class_loss, total_loss, AtomParams, ClassTargets, LossBreakdown};
use crate::augment::{apply_aug, apply_aug_backward, sample_aug, AugSettings};
use crate::binio::{Reader, Writer};
use crate::data::{init_synthetic, sample_class_batch, ClassSampler, LabeledImageSet, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{build_network, ConvNetSpec, Encoder, FeatureGrads, Mode, TapPoint};
use crate::real::{DType, Real};
use crate::rng::{stream, Rng, RngState, Stream};

const CHECKPOINT_MAGIC: &[u8; 8] = b"ATOMCKP\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Resolved hyperparameters of one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub ipc: usize,
    pub iterations: u64,
    /// `None` picks 1.0, or 10.0 above 50 images per class.
    pub lr_images: Option<f64>,
    pub image_momentum: f64,
    pub weight_decay_images: f64,
    pub lambda: f64,
    pub atom: AtomParams,
    pub batch_real: usize,
    /// Caps the synthetic images per class used in one step; `None` uses all.
    pub syn_batch: Option<usize>,
    pub seed: u64,
    pub tap: TapPoint,
    pub augment: bool,
    pub aug: AugSettings,
    pub encoder: Encoder,
    /// Iterations between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl DistillConfig {
    pub fn new(ipc: usize) -> Self {
        DistillConfig {
            ipc,
            iterations: 8000,
            lr_images: None,
            image_momentum: 0.5,
            weight_decay_images: 0.0,
            lambda: 0.01,
            atom: AtomParams::default(),
            batch_real: 128,
            syn_batch: None,
            seed: 0,
            tap: TapPoint::PostPool,
            augment: true,
            aug: AugSettings::default(),
            encoder: Encoder::default(),
            checkpoint_every: 0,
        }
    }

    pub fn image_lr(&self) -> f64 {
        self.lr_images.unwrap_or(if self.ipc > 50 { 10.0 } else { 1.0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.ipc == 0 || self.batch_real == 0 || self.syn_batch == Some(0) {
            return Err(Error::param("ipc, batch_real and syn_batch must be >= 1"));
        }
        if !(self.image_lr() >= 0.0) || !self.image_lr().is_finite() {
            return Err(Error::param(format!("lr_images must be finite and >= 0, got {}", self.image_lr())));
        }
        if !(0.0..1.0).contains(&self.image_momentum) {
            return Err(Error::param(format!("image_momentum must lie in [0, 1), got {}", self.image_momentum)));
        }
        if !(self.weight_decay_images >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::param("weight_decay_images and lambda must be >= 0"));
        }
        self.atom.validate()?;
        if self.augment {
            self.aug.validate()?;
            if self.aug.per_image {
                return Err(Error::param(
                    "per-image augmentation draws cannot be shared between real and synthetic batches of different sizes",
                ));
            }
        }
        if self.encoder.depth.is_some_and(|d| !crate::model::DEPTHS.contains(&d)) {
            return Err(Error::param(format!("encoder depth {:?} is off the grid", self.encoder.depth)));
        }
        Ok(())
    }

    /// Hash of everything that affects the trajectory, excluding the iteration
    /// budget and checkpoint cadence.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["iterations"] = 0.into();
        v["checkpoint_every"] = 0.into();
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn spec_for(&self, input: [usize; 3], num_classes: usize) -> ConvNetSpec {
        self.encoder.spec(input, num_classes)
    }
}

/// Default task balance: 0.01, or 0.02 for inputs of 64 pixels or more.
pub fn default_lambda(image_side: usize) -> f64 {
    if image_side >= 64 {
        0.02
    } else {
        0.01
    }
}

/// Loss and timing of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Zero-based index of the iteration.
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub step_ms: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct DistillState<F: Real> {
    pub synthetic: SyntheticDataset<F>,
    pub momentum: Array4<F>,
    iteration: u64,
    net_rng: Rng,
    aug_rng: Rng,
    sampler: ClassSampler,
    syn_sampler: ClassSampler,
    config_hash: String,
}

impl<F: Real> DistillState<F> {
    /// Initializes the synthetic set from real samples of each class.
    pub fn new(config: &DistillConfig, real: &LabeledImageSet<F>) -> Result<Self> {
        config.validate()?;
        let spec = config.spec_for(real.image_shape(), real.num_classes());
        spec.validate()?;
        let mut synthetic = init_synthetic(real, config.ipc, config.seed)?;
        synthetic.origin = "atom".into();
        let momentum = Array4::zeros(synthetic.images.raw_dim());
        Ok(DistillState {
            synthetic,
            momentum,
            iteration: 0,
            net_rng: stream(config.seed, Stream::Network),
            aug_rng: stream(config.seed, Stream::Augment),
            sampler: ClassSampler::new(real.num_classes(), stream(config.seed, Stream::Batch)),
            syn_sampler: ClassSampler::new(real.num_classes(), stream(config.seed, Stream::Synthetic)),
            config_hash: config.hash(),
        })
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(F::DTYPE.tag());
        w.str(&self.config_hash);
        w.u64(self.iteration);
        RngState::capture(&self.net_rng).write(&mut w);
        RngState::capture(&self.aug_rng).write(&mut w);
        self.sampler.write(&mut w);
        self.syn_sampler.write(&mut w);
        let syn = self.synthetic.to_bytes();
        w.u64(syn.len() as u64);
        w.bytes(&syn);
        w.array(&self.momentum);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| r.err("unknown dtype tag"))?;
        if dtype != F::DTYPE {
            return Err(r.err(format!("checkpoint holds {dtype:?} data")));
        }
        let config_hash = r.str()?;
        let iteration = r.u64()?;
        let net_rng = RngState::read(&mut r)?.restore();
        let aug_rng = RngState::read(&mut r)?.restore();
        let sampler = ClassSampler::read(&mut r)?;
        let syn_sampler = ClassSampler::read(&mut r)?;
        let n = r.u64()? as usize;
        let synthetic = SyntheticDataset::from_bytes(r.take(n)?, path)?;
        let momentum = r
            .array::<F>(dtype)?
            .into_dimensionality::<Ix4>()
            .map_err(|_| r.err("momentum buffer is not 4-D"))?;
        r.finish()?;
        if momentum.shape() != synthetic.images.shape() {
            return Err(r.err("momentum buffer and synthetic images differ in shape"));
        }
        Ok(DistillState {
            synthetic,
            momentum,
            iteration,
            net_rng,
            aug_rng,
            sampler,
            syn_sampler,
            config_hash,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Loads a checkpoint and checks that it was written under an equivalent config.
pub fn resume<F: Real>(path: &Path, config: &DistillConfig) -> Result<DistillState<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let state = DistillState::from_bytes(&bytes, path)?;
    let expected = config.hash();
    if state.config_hash != expected {
        return Err(Error::ConfigMismatch {
            checkpoint: state.config_hash,
            config: expected,
        });
    }
    if state.synthetic.ipc() != config.ipc {
        return Err(Error::Contract(format!(
            "checkpoint has {} images per class, config asks for {}",
            state.synthetic.ipc(),
            config.ipc
        )));
    }
    Ok(state)
}

fn check_state<F: Real>(state: &DistillState<F>, config: &DistillConfig, real: &LabeledImageSet<F>) -> Result<()> {
    if state.config_hash != config.hash() {
        return Err(Error::ConfigMismatch {
            checkpoint: state.config_hash.clone(),
            config: config.hash(),
        });
    }
    let syn = &state.synthetic;
    let [c, h, w] = real.image_shape();
    if syn.num_classes() != real.num_classes() || syn.images.shape()[1..] != [c, h, w] {
        return Err(Error::Contract("synthetic set does not match the real set's classes or image shape".into()));
    }
    if state.momentum.shape() != syn.images.shape() {
        return Err(Error::Contract("momentum buffer shape differs from synthetic images".into()));
    }
    Ok(())
}

/// One iteration. On divergence the images and momentum are left untouched.
pub fn step<F: Real>(state: &mut DistillState<F>, config: &DistillConfig, real: &LabeledImageSet<F>) -> Result<StepRecord> {
    check_state(state, config, real)?;
    let started = Instant::now();
    let spec = config.spec_for(real.image_shape(), real.num_classes());
    let net = build_network::<F>(&spec, state.net_rng.next_u64())?;
    let hw = (spec.input[1], spec.input[2]);
    let ipc = state.synthetic.ipc();
    let mut grad = Array4::<F>::zeros(state.synthetic.images.raw_dim());
    let (mut atom, mut mmd) = (0.0, 0.0);
    let mut per_layer = vec![0.0; spec.depth];

    for class in 0..real.num_classes() {
        let mut real_batch = sample_class_batch(real, class, config.batch_real, &mut state.sampler)?;
        let base = state.synthetic.class_range(class).start;
        let rows: Vec<usize> = match config.syn_batch {
            Some(cap) if cap < ipc => state.syn_sampler.next_positions(ipc, class, cap)?,
            _ => (0..ipc).collect(),
        };
        let mut syn_batch = state.synthetic.images.select(Axis(0), &rows.iter().map(|r| base + r).collect::<Vec<_>>());
        let aug = if config.augment {
            let p = sample_aug(&mut state.aug_rng, &config.aug, hw, 1)?;
            real_batch = apply_aug(&real_batch, &p)?;
            syn_batch = apply_aug(&syn_batch, &p)?;
            Some(p)
        } else {
            None
        };
        let real_stack = net.forward_features(&real_batch, config.tap, Mode::Train)?;
        let targets = ClassTargets::from_features(&real_stack, &config.atom)?;
        let (syn_stack, tape) = net.forward_with_tape(&syn_batch, config.tap, Mode::Train)?;
        let cl = class_loss(&targets, &syn_stack, &config.atom, 1.0, config.lambda)?;
        atom += cl.atom;
        mmd += cl.mmd;
        for (acc, v) in per_layer.iter_mut().zip(&cl.per_layer) {
            *acc += v;
        }
        let fg = FeatureGrads {
            per_layer: cl.grad_layers.into_iter().map(Some).collect(),
            embedding: Some(cl.grad_embedding),
            logits: None,
        };
        let (mut dx, _) = net.backward(&tape, &fg, false)?;
        if let Some(p) = &aug {
            dx = apply_aug_backward(&dx, p)?;
        }
        for (i, r) in rows.iter().enumerate() {
            let mut g = grad.index_axis_mut(Axis(0), base + r);
            g += &dx.index_axis(Axis(0), i);
        }
    }

    let mut loss = total_loss(atom, mmd, config.lambda)?;
    loss.per_layer.clone_from(&per_layer);
    if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            iteration: state.iteration,
            loss: loss.total,
        });
    }

    let (m, lr, wd) = (
        F::of(config.image_momentum),
        F::of(config.image_lr()),
        F::of(config.weight_decay_images),
    );
    ndarray::Zip::from(&mut state.momentum)
        .and(&mut state.synthetic.images)
        .and(&grad)
        .for_each(|v, x, &g| {
            *v = m * *v + g + wd * *x;
            *x -= lr * *v;
        });
    let record = StepRecord {
        iteration: state.iteration,
        loss,
        step_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    state.iteration += 1;
    Ok(record)
}

/// Final synthetic set and the loss trace.
#[derive(Debug, Clone)]
pub struct DistillOutcome<F: Real> {
    pub synthetic: SyntheticDataset<F>,
    pub metrics: Vec<StepRecord>,
}

/// Steps `state` until `config.iterations` are complete, calling `on_step` after each one.
pub fn run<F: Real>(
    state: &mut DistillState<F>,
    config: &DistillConfig,
    real: &LabeledImageSet<F>,
    mut on_step: impl FnMut(&DistillState<F>, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut metrics = Vec::new();
    while state.iteration < config.iterations {
        let rec = step(state, config, real)?;
        on_step(state, &rec)?;
        metrics.push(rec);
    }
    Ok(metrics)
}

pub fn distill<F: Real>(config: &DistillConfig, real: &LabeledImageSet<F>) -> Result<DistillOutcome<F>> {
    let mut state = DistillState::new(config, real)?;
    let metrics = run(&mut state, config, real, |_, _| Ok(()))?;
    Ok(DistillOutcome {
        synthetic: state.synthetic,
        metrics,
    })
}

/// Mean total loss over consecutive windows of `window` steps.
pub fn windowed_means(metrics: &[StepRecord], window: usize) -> Vec<f64> {
    metrics
        .chunks(window.max(1))
        .map(|c| c.iter().map(|r| r.loss.total).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Trailing moving average of the total loss; the first entries average what is available.
pub fn moving_average(metrics: &[StepRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(metrics.len());
    let mut acc = 0.0;
    for (i, r) in metrics.iter().enumerate() {
        acc += r.loss.total;
        if i >= window {
            acc -= metrics[i - window].loss.total;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Append-only metrics files: `metrics.csv` with `iter,atom,mmd,total,step_ms`
/// and `metrics_layers.csv` with one column per block.
pub struct MetricsLog {
    main: BufWriter<File>,
    layers: BufWriter<File>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "iter,atom,mmd,total,step_ms";

    /// Opens both files in `dir`, writing headers only when a file is new.
    pub fn open(dir: &Path, depth: usize) -> Result<Self> {
        let open = |name: &str, header: String| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
            let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
            if fresh {
                writeln!(f, "{header}")?;
            }
            Ok(f)
        };
        let layer_header = std::iter::once("iter".to_string())
            .chain((0..depth).map(|l| format!("layer{l}")))
            .collect::<Vec<_>>()
            .join(",");
        Ok(MetricsLog {
            main: open("metrics.csv", Self::HEADER.to_string())?,
            layers: open("metrics_layers.csv", layer_header)?,
        })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(
            self.main,
            "{},{},{},{},{:.3}",
            r.iteration, r.loss.atom, r.loss.mmd, r.loss.total, r.step_ms
        )?;
        let cols: Vec<String> = r.loss.per_layer.iter().map(|v| v.to_string()).collect();
        writeln!(self.layers, "{},{}", r.iteration, cols.join(","))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.main.flush()?;
        self.layers.flush()?;
        Ok(())
    }
}
