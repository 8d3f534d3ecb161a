//! Train-on-synthetic, test-on-real evaluation.
//!
//! Fresh networks are trained on a (distilled) image set with SGD momentum,
//! weight decay and step decay of the learning rate, then scored by top-1
//! accuracy on the real test split. Reports carry mean and unbiased standard
//! deviation over the trained models.

use std::time::Instant;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply_aug, sample_aug, AugSettings};
use crate::data::{init_synthetic, LabeledImageSet, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{build_network, cross_entropy, ConvNetSpec, Encoder, FeatureGrads, Mode, Network, TapPoint};
use crate::real::Real;
use crate::rng::{stream, Stream};

const TEST_CHUNK: usize = 256;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub n_models: usize,
    pub epochs: usize,
    pub lr_net: f64,
    pub net_momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by this every `lr_decay_step` epochs.
    pub lr_decay_rate: f64,
    pub lr_decay_step: usize,
    /// `None` uses `min(256, |S|)`.
    pub batch_size: Option<usize>,
    pub augment: bool,
    pub aug: AugSettings,
    pub encoder: Encoder,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_models: 5,
            epochs: 300,
            lr_net: 0.01,
            net_momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_rate: 0.5,
            lr_decay_step: 15,
            batch_size: None,
            augment: true,
            aug: AugSettings {
                per_image: true,
                ..AugSettings::default()
            },
            encoder: Encoder::default(),
            seed: 0,
            threads: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 || self.lr_decay_step == 0 || self.batch_size == Some(0) {
            return Err(Error::param("n_models, lr_decay_step and batch_size must be >= 1"));
        }
        if !(self.lr_net > 0.0 && self.lr_net <= 1.0) {
            return Err(Error::param(format!("lr_net must lie in (0, 1], got {}", self.lr_net)));
        }
        if !(0.0..1.0).contains(&self.net_momentum) || !(self.weight_decay >= 0.0) || !(self.lr_decay_rate > 0.0) {
            return Err(Error::param("net_momentum must lie in [0, 1), weight_decay >= 0, lr_decay_rate > 0"));
        }
        if self.augment {
            self.aug.validate()?;
        }
        Ok(())
    }

    /// Hash of the protocol, excluding the thread count.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("protocol serializes");
        v["threads"] = 0.into();
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn workers(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            t => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub mean_acc: f64,
    /// Percent, unbiased estimator; 0 for a single model.
    pub std_acc: f64,
    pub per_model: Vec<f64>,
    pub runtime_s: Vec<f64>,
    pub config_hash: String,
    pub spec: String,
    /// Origin tag of the evaluated set ("atom", "random", ...).
    pub origin: String,
}

impl EvalReport {
    pub fn from_accuracies(per_model: Vec<f64>, runtime_s: Vec<f64>, config_hash: String, spec: String, origin: String) -> Self {
        let (mean_acc, std_acc) = mean_std(&per_model);
        EvalReport {
            mean_acc,
            std_acc,
            per_model,
            runtime_s,
            config_hash,
            spec,
            origin,
        }
    }

    pub const CSV_HEADER: &'static str = "acc_mean,acc_std,n_models";

    /// `acc_mean,acc_std,n_models`.
    pub fn csv_row(&self) -> String {
        format!("{:.4},{:.4},{}", self.mean_acc, self.std_acc, self.per_model.len())
    }

    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean_acc, self.std_acc)
    }
}

/// Mean and unbiased standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// A per-class uniform sample of real images, left unoptimized.
pub fn random_baseline<F: Real>(real: &LabeledImageSet<F>, ipc: usize, seed: u64) -> Result<SyntheticDataset<F>> {
    let mut s = init_synthetic(real, ipc, seed)?;
    s.origin = "random".into();
    Ok(s)
}

/// Trains `proto.n_models` networks of `proto.encoder` on `syn` and tests them.
pub fn evaluate<F: Real>(syn: &SyntheticDataset<F>, test: &LabeledImageSet<F>, proto: &EvalProtocol) -> Result<EvalReport> {
    if let Some(rec) = &syn.preprocess {
        let (a, b) = (rec.fingerprint(), test.preprocess().fingerprint());
        if a != b {
            return Err(Error::PreprocessMismatch {
                container: a,
                dataset: b,
            });
        }
    }
    let spec = proto.encoder.spec(test.image_shape(), test.num_classes());
    let mut report = evaluate_images(&syn.images, syn.labels(), test, proto, &spec)?;
    report.origin = syn.origin.clone();
    Ok(report)
}

/// Same as [`evaluate`] for an arbitrary labeled training set and architecture.
pub fn evaluate_images<F: Real>(
    images: &Array4<F>,
    labels: &[usize],
    test: &LabeledImageSet<F>,
    proto: &EvalProtocol,
    spec: &ConvNetSpec,
) -> Result<EvalReport> {
    proto.validate()?;
    spec.validate()?;
    let [c, h, w] = test.image_shape();
    if images.shape()[1..] != [c, h, w] || spec.input != [c, h, w] {
        return Err(Error::Contract(format!(
            "training images {:?} do not match test images {:?}",
            &images.shape()[1..],
            [c, h, w]
        )));
    }
    if labels.len() != images.shape()[0] {
        return Err(Error::Contract(format!("{} labels for {} images", labels.len(), images.shape()[0])));
    }
    for k in 0..test.num_classes() {
        if !labels.contains(&k) {
            return Err(Error::Contract(format!("class {k} has no training images")));
        }
    }
    if labels.iter().any(|&y| y >= test.num_classes()) || spec.num_classes != test.num_classes() {
        return Err(Error::Contract("training labels exceed the test set's classes".into()));
    }

    let mut seeder = stream(proto.seed, Stream::Eval);
    let seeds: Vec<u64> = (0..proto.n_models).map(|_| seeder.next_u64()).collect();
    let mut results: Vec<Option<Result<(f64, f64)>>> = (0..proto.n_models).map(|_| None).collect();
    let workers = proto.workers().min(proto.n_models).max(1);
    std::thread::scope(|scope| {
        for (slot_chunk, seed_chunk) in results
            .chunks_mut(proto.n_models.div_ceil(workers))
            .zip(seeds.chunks(proto.n_models.div_ceil(workers)))
        {
            scope.spawn(move || {
                for (slot, &seed) in slot_chunk.iter_mut().zip(seed_chunk) {
                    let started = Instant::now();
                    *slot = Some(
                        train_and_test(images, labels, test, proto, spec, seed)
                            .map(|acc| (acc, started.elapsed().as_secs_f64())),
                    );
                }
            });
        }
    });
    let mut accs = Vec::with_capacity(proto.n_models);
    let mut times = Vec::with_capacity(proto.n_models);
    for r in results {
        let (a, t) = r.expect("every model slot is filled")?;
        accs.push(a);
        times.push(t);
    }
    Ok(EvalReport::from_accuracies(accs, times, proto.hash(), spec.canonical(), String::new()))
}

/// Trains one network from `seed` and returns its test accuracy in percent.
pub fn train_and_test<F: Real>(
    images: &Array4<F>,
    labels: &[usize],
    test: &LabeledImageSet<F>,
    proto: &EvalProtocol,
    spec: &ConvNetSpec,
    seed: u64,
) -> Result<f64> {
    let net = train_network(images, labels, proto, spec, seed)?;
    accuracy(&net, test)
}

/// SGD with momentum, weight decay and step decay on `(images, labels)`.
pub fn train_network<F: Real>(
    images: &Array4<F>,
    labels: &[usize],
    proto: &EvalProtocol,
    spec: &ConvNetSpec,
    seed: u64,
) -> Result<Network<F>> {
    let mut net = build_network::<F>(spec, seed)?;
    let mut rng = stream(seed, Stream::Eval);
    let n = images.shape()[0];
    let bs = proto.batch_size.unwrap_or(256).min(n);
    let hw = (spec.input[1], spec.input[2]);
    let mut velocity: Vec<ndarray::ArrayD<F>> = net.parameters().iter().map(|p| p.to_owned() * F::zero()).collect();
    let (mom, wd) = (F::of(proto.net_momentum), F::of(proto.weight_decay));
    let mut lr = proto.lr_net;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..proto.epochs {
        if epoch > 0 && epoch % proto.lr_decay_step == 0 {
            lr *= proto.lr_decay_rate;
        }
        let lr_f = F::of(lr);
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            let mut x = images.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            if proto.augment {
                let p = sample_aug(&mut rng, &proto.aug, hw, batch.len())?;
                x = apply_aug(&x, &p)?;
            }
            let (stack, tape) = net.forward_with_tape(&x, TapPoint::PostPool, Mode::Train)?;
            let (loss, g_logits) = cross_entropy(&stack.logits, &y);
            if !loss.is_finite() {
                return Err(Error::TrainingFailed(format!(
                    "{} produced a non-finite loss at epoch {epoch}",
                    spec.canonical()
                )));
            }
            let fg = FeatureGrads {
                logits: Some(g_logits),
                ..FeatureGrads::empty(spec.depth)
            };
            let (_, grads) = net.backward(&tape, &fg, true)?;
            let grads = grads.expect("parameter gradients requested");
            net.update_running_stats(&tape, BN_MOMENTUM);
            for ((mut p, g), v) in net.parameters_mut().into_iter().zip(&grads.0).zip(&mut velocity) {
                ndarray::Zip::from(&mut p).and(g).and(v).for_each(|p, &g, v| {
                    *v = mom * *v + g + wd * *p;
                    *p -= lr_f * *v;
                });
            }
        }
    }
    Ok(net)
}

/// Top-1 accuracy in percent, with batch norm in inference mode.
pub fn accuracy<F: Real>(net: &Network<F>, test: &LabeledImageSet<F>) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(TEST_CHUNK) {
        let x = test.select(chunk);
        let logits = net.forward_features(&x, TapPoint::PostPool, Mode::Eval)?.logits;
        for (row, &i) in logits.outer_iter().zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            correct += (pred == test.labels()[i]) as usize;
        }
    }
    Ok(100.0 * correct as f64 / test.len().max(1) as f64)
}

/// Accuracy after each of a run's checkpoints, as `(iteration, mean_acc)`.
pub fn convergence_curve<F: Real>(
    checkpoints: &[(u64, SyntheticDataset<F>)],
    test: &LabeledImageSet<F>,
    proto: &EvalProtocol,
) -> Result<Vec<(u64, f64)>> {
    if checkpoints.is_empty() {
        return Err(Error::param("no checkpoints to evaluate"));
    }
    checkpoints
        .iter()
        .map(|(it, syn)| evaluate(syn, test, proto).map(|r| (*it, r.mean_acc)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{toy_fixture_raw, PreprocessRecord};

    fn toy(n: usize, seed: u64) -> LabeledImageSet<f32> {
        let (x, y) = toy_fixture_raw::<f32>(n, seed);
        LabeledImageSet::new(x, y, 2, PreprocessRecord::identity([3, 8, 8])).unwrap()
    }

    fn quick() -> EvalProtocol {
        EvalProtocol {
            n_models: 3,
            epochs: 4,
            encoder: Encoder {
                depth: Some(1),
                width: 32,
                ..Encoder::default()
            },
            ..EvalProtocol::default()
        }
    }

    #[test]
    fn unbiased_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn report_reaggregates() {
        let r = EvalReport::from_accuracies(vec![50.0, 60.0, 70.0], vec![0.0; 3], "h".into(), "s".into(), "x".into());
        assert_eq!((r.mean_acc, r.std_acc), mean_std(&r.per_model));
        assert_eq!(r.csv_row(), "60.0000,10.0000,3");
    }

    #[test]
    fn evaluation_is_deterministic_and_read_only() {
        let train = toy(4, 1);
        let test = toy(8, 2);
        let syn = random_baseline(&train, 2, 5).unwrap();
        let before = syn.digest();
        let mut p = quick();
        let a = evaluate(&syn, &test, &p).unwrap();
        p.threads = 1;
        let b = evaluate(&syn, &test, &p).unwrap();
        assert_eq!(a.per_model, b.per_model);
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(syn.digest(), before);
        assert_eq!(a.origin, "random");
        assert_eq!(a.per_model.len(), 3);
    }

    #[test]
    fn random_baseline_counts_and_seeds() {
        let train = toy(16, 1);
        let a = random_baseline(&train, 1, 1).unwrap();
        assert_eq!(a.len(), 2);
        let differs = (2..10).any(|s| random_baseline(&train, 1, s).unwrap().images != a.images);
        assert!(differs);
    }

    #[test]
    fn missing_class_is_a_contract_error() {
        let test = toy(4, 2);
        let images = test.images().slice(ndarray::s![0..1, .., .., ..]).to_owned();
        let spec = quick().encoder.spec([3, 8, 8], 2);
        let err = evaluate_images(&images, &[0], &test, &quick(), &spec).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn preprocess_mismatch_is_detected() {
        let train = toy(4, 1);
        let test = toy(4, 2);
        let mut syn = random_baseline(&train, 1, 0).unwrap();
        let mut other = PreprocessRecord::identity([3, 8, 8]);
        other.mean = vec![0.5; 3];
        syn.preprocess = Some(other);
        assert!(matches!(evaluate(&syn, &test, &quick()), Err(Error::PreprocessMismatch { .. })));
    }

    #[test]
    fn empty_curve_is_rejected() {
        let test = toy(4, 2);
        assert!(convergence_curve::<f32>(&[], &test, &quick()).is_err());
    }
}
