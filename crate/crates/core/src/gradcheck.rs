//! Finite-difference checks of the analytic pixel gradients.
//!
//! Every suite compares the analytic gradient of a scalar objective with
//! central differences over all input pixels, in double precision on a small
//! one-block network.

use ndarray::Array4;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{class_loss, AtomParams, ClassTargets, MatchMode};
use crate::augment::{apply_aug, apply_aug_backward, AugDraw, AugOp, AugParams};
use crate::error::{Error, Result};
use crate::model::{build_network, ConvNetSpec, Encoder, FeatureGrads, Mode, Network, TapPoint};
use crate::rng::{stream, Stream};

pub const SUITES: [&str; 10] = [
    "spatial", "channel", "both", "mmd", "dsa-color", "dsa-crop", "dsa-cutout", "dsa-flip", "dsa-scale", "dsa-rotate",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub batch: usize,
    pub size: usize,
    pub channels: usize,
    pub width: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Suite whose analytic gradient is deliberately perturbed (negative control).
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            batch: 2,
            size: 4,
            channels: 3,
            width: 32,
            step: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            corrupt: None,
        }
    }
}

impl GradcheckConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_size(mut self, batch: usize, size: usize) -> Self {
        self.batch = batch;
        self.size = size;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn corrupting(mut self, suite: &str) -> Self {
        self.corrupt = Some(suite.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    /// `max|a − n| / max(‖a‖∞, ‖n‖∞)`.
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect()
    }

    /// One line per suite.
    pub fn lines(&self) -> Vec<String> {
        self.suites
            .iter()
            .map(|s| {
                format!(
                    "{:<12} max_rel_err={:.3e} ({} pixels) {}",
                    s.name,
                    s.max_rel_err,
                    s.checked,
                    if s.passed { "ok" } else { "FAIL" }
                )
            })
            .collect()
    }
}

/// Relative error of two gradients in the max norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` over every element of `x`.
pub fn numeric_gradient(x: &Array4<f64>, step: f64, mut f: impl FnMut(&Array4<f64>) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let up = f(&probe)?;
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let down = f(&probe)?;
        probe.as_slice_mut().unwrap()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

struct Fixture {
    net: Network<f64>,
    real: Array4<f64>,
    syn: Array4<f64>,
}

fn fixture(cfg: &GradcheckConfig) -> Result<Fixture> {
    let spec = ConvNetSpec {
        depth: 1,
        ..Encoder {
            width: cfg.width,
            ..Encoder::default()
        }
        .spec([cfg.channels, cfg.size, cfg.size], 2)
    };
    let net = build_network::<f64>(&spec, cfg.seed)?;
    let mut rng = stream(cfg.seed, Stream::Init);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let shape = (cfg.batch, cfg.channels, cfg.size, cfg.size);
    let real = Array4::from_shape_simple_fn(shape, || normal.sample(&mut rng));
    let syn = Array4::from_shape_simple_fn(shape, || normal.sample(&mut rng));
    Ok(Fixture { net, real, syn })
}

/// Loss and pixel gradient of one matching objective.
fn matching(fx: &Fixture, params: &AtomParams, atom_w: f64, mmd_w: f64, x: &Array4<f64>, grad: bool) -> Result<(f64, Option<Array4<f64>>)> {
    let real = fx.net.forward_features(&fx.real, TapPoint::PostPool, Mode::Train)?;
    let targets = ClassTargets::from_features(&real, params)?;
    let (stack, tape) = fx.net.forward_with_tape(x, TapPoint::PostPool, Mode::Train)?;
    let cl = class_loss(&targets, &stack, params, atom_w, mmd_w)?;
    let loss = atom_w * cl.atom + mmd_w * cl.mmd;
    if !grad {
        return Ok((loss, None));
    }
    let fg = FeatureGrads {
        per_layer: cl.grad_layers.into_iter().map(Some).collect(),
        embedding: Some(cl.grad_embedding),
        logits: None,
    };
    let (dx, _) = fx.net.backward(&tape, &fg, false)?;
    Ok((loss, Some(dx)))
}

fn fixed_draw(op: AugOp, size: usize) -> AugDraw {
    match op {
        AugOp::Color => AugDraw::Color {
            brightness: 0.2,
            saturation: 1.3,
            contrast: 0.9,
        },
        AugOp::Crop => AugDraw::Crop { dy: 1, dx: -1 },
        AugOp::Cutout => AugDraw::Cutout {
            y0: size / 4,
            x0: 0,
            size_h: size / 2,
            size_w: size / 2,
        },
        AugOp::Flip => AugDraw::Flip { flip: true },
        AugOp::Scale => AugDraw::Scale { sy: 1.13, sx: 0.91 },
        AugOp::Rotate => AugDraw::Rotate { degrees: 11.0 },
    }
}

fn run_suite(name: &str, cfg: &GradcheckConfig, fx: &Fixture) -> Result<SuiteResult> {
    let (analytic, numeric) = if let Some(op) = name.strip_prefix("dsa-") {
        let op = AugOp::ALL
            .into_iter()
            .find(|o| o.name() == op)
            .ok_or_else(|| Error::param(format!("unknown suite {name}")))?;
        let p = AugParams {
            op,
            draws: vec![fixed_draw(op, cfg.size)],
            image_hw: (cfg.size, cfg.size),
        };
        let weights = fx.real.clone();
        let objective = |x: &Array4<f64>| -> Result<f64> { Ok((apply_aug(x, &p)? * &weights).sum()) };
        let analytic = apply_aug_backward(&weights, &p)?;
        (analytic, numeric_gradient(&fx.syn, cfg.step, objective)?)
    } else {
        let (mode, atom_w, mmd_w) = match name {
            "spatial" => (MatchMode::Spatial, 1.0, 0.0),
            "channel" => (MatchMode::Channel, 1.0, 0.0),
            "both" => (MatchMode::Both, 1.0, 0.01),
            "mmd" => (MatchMode::Both, 0.0, 1.0),
            _ => return Err(Error::param(format!("unknown suite {name}"))),
        };
        let params = AtomParams {
            mode,
            ..AtomParams::default()
        };
        let analytic = matching(fx, &params, atom_w, mmd_w, &fx.syn, true)?.1.unwrap();
        let numeric = numeric_gradient(&fx.syn, cfg.step, |x| Ok(matching(fx, &params, atom_w, mmd_w, x, false)?.0))?;
        (analytic, numeric)
    };
    let mut analytic: Vec<f64> = analytic.iter().copied().collect();
    if cfg.corrupt.as_deref() == Some(name) {
        analytic.iter_mut().for_each(|g| *g = *g * 1.1 + 1e-3);
    }
    let err = relative_error(&analytic, &numeric);
    Ok(SuiteResult {
        name: name.to_string(),
        max_rel_err: err,
        checked: numeric.len(),
        passed: err <= cfg.tolerance,
    })
}

/// Runs every suite in [`SUITES`].
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.batch == 0 || cfg.size == 0 || cfg.channels == 0 || cfg.size % 2 != 0 || !(cfg.step > 0.0) {
        return Err(Error::param("gradcheck needs positive batch, channels and step, and an even image size"));
    }
    let fx = fixture(cfg)?;
    let suites = SUITES.iter().map(|s| run_suite(s, cfg, &fx)).collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        suites,
        tolerance: cfg.tolerance,
    })
}
