//! Differentiable Siamese augmentation.
//!
//! One op is drawn per call from the enabled set; its random draws are then
//! applied identically to the real and the synthetic batch of a matched pair.
//! Every op is affine in the pixels, so the backward pass is exact: geometric
//! ops are sparse bilinear maps (zero padding) and color jitter is a mix of
//! the image with its channel and global means.

use ndarray::{s, Array4, ArrayView3, ArrayViewMut3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugOp {
    Color,
    Crop,
    Cutout,
    Flip,
    Scale,
    Rotate,
}

impl AugOp {
    pub const ALL: [AugOp; 6] = [AugOp::Color, AugOp::Crop, AugOp::Cutout, AugOp::Flip, AugOp::Scale, AugOp::Rotate];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::Color => "color",
            AugOp::Crop => "crop",
            AugOp::Cutout => "cutout",
            AugOp::Flip => "flip",
            AugOp::Scale => "scale",
            AugOp::Rotate => "rotate",
        }
    }
}

/// Enabled ops and their ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugSettings {
    pub ops: Vec<AugOp>,
    /// Brightness shift is drawn from `[-b/2, b/2]`.
    pub brightness: f64,
    /// Saturation factor is drawn from `[0, s]`.
    pub saturation: f64,
    /// Contrast factor is drawn from `[c, 1 + c]`.
    pub contrast: f64,
    /// Maximum translation as a fraction of the image side.
    pub crop_pad: f64,
    /// Cutout side as a fraction of the image side.
    pub cutout: f64,
    pub flip_p: f64,
    /// Per-axis scale is drawn from `[1/r, r]`.
    pub scale: f64,
    /// Rotation is drawn from `[-deg, +deg]`.
    pub rotate_deg: f64,
    /// Independent draws per image instead of one shared draw per batch.
    pub per_image: bool,
}

impl Default for AugSettings {
    fn default() -> Self {
        AugSettings {
            ops: AugOp::ALL.to_vec(),
            brightness: 1.0,
            saturation: 2.0,
            contrast: 0.5,
            crop_pad: 0.125,
            cutout: 0.5,
            flip_p: 0.5,
            scale: 1.2,
            rotate_deg: 15.0,
            per_image: false,
        }
    }
}

impl AugSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.brightness >= 0.0
            && self.saturation >= 0.0
            && self.contrast >= 0.0
            && (0.0..1.0).contains(&self.crop_pad)
            && (0.0..=1.0).contains(&self.cutout)
            && self.flip_p > 0.0
            && self.flip_p <= 1.0
            && self.scale >= 1.0
            && (0.0..=180.0).contains(&self.rotate_deg);
        if !ok {
            return Err(Error::param(format!("augmentation ranges out of bounds: {self:?}")));
        }
        Ok(())
    }
}

/// Random draws of one op for one image (or a whole batch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugDraw {
    Color { brightness: f64, saturation: f64, contrast: f64 },
    Crop { dy: i64, dx: i64 },
    Cutout { y0: usize, x0: usize, size_h: usize, size_w: usize },
    Flip { flip: bool },
    Scale { sy: f64, sx: f64 },
    Rotate { degrees: f64 },
}

/// An op plus either one shared draw or one draw per batch element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub op: AugOp,
    pub draws: Vec<AugDraw>,
    /// `(H, W)` the draws were made for.
    pub image_hw: (usize, usize),
}

impl AugParams {
    /// Checks every draw against the configured ranges.
    pub fn within(&self, s: &AugSettings) -> bool {
        let (h, w) = self.image_hw;
        self.draws.iter().all(|d| match *d {
            AugDraw::Color {
                brightness,
                saturation,
                contrast,
            } => {
                brightness.abs() <= s.brightness / 2.0
                    && (0.0..=s.saturation).contains(&saturation)
                    && (s.contrast..=1.0 + s.contrast).contains(&contrast)
            }
            AugDraw::Crop { dy, dx } => {
                dy.unsigned_abs() as usize <= shift_limit(h, s.crop_pad)
                    && dx.unsigned_abs() as usize <= shift_limit(w, s.crop_pad)
            }
            AugDraw::Cutout { y0, x0, size_h, size_w } => {
                size_h == cut_size(h, s.cutout) && size_w == cut_size(w, s.cutout) && y0 + size_h <= h && x0 + size_w <= w
            }
            AugDraw::Flip { .. } => true,
            AugDraw::Scale { sy, sx } => {
                let r = 1.0 / s.scale..=s.scale;
                r.contains(&sy) && r.contains(&sx)
            }
            AugDraw::Rotate { degrees } => degrees.abs() <= s.rotate_deg,
        })
    }
}

fn shift_limit(side: usize, ratio: f64) -> usize {
    (side as f64 * ratio + 0.5) as usize
}

fn cut_size(side: usize, ratio: f64) -> usize {
    ((side as f64 * ratio + 0.5) as usize).min(side)
}

fn draw(op: AugOp, s: &AugSettings, (h, w): (usize, usize), rng: &mut Rng) -> AugDraw {
    match op {
        AugOp::Color => AugDraw::Color {
            brightness: (rng.random::<f64>() - 0.5) * s.brightness,
            saturation: rng.random::<f64>() * s.saturation,
            contrast: rng.random::<f64>() + s.contrast,
        },
        AugOp::Crop => {
            let (ly, lx) = (shift_limit(h, s.crop_pad) as i64, shift_limit(w, s.crop_pad) as i64);
            AugDraw::Crop {
                dy: rng.random_range(-ly..=ly),
                dx: rng.random_range(-lx..=lx),
            }
        }
        AugOp::Cutout => {
            let (ch, cw) = (cut_size(h, s.cutout), cut_size(w, s.cutout));
            AugDraw::Cutout {
                y0: rng.random_range(0..=h - ch),
                x0: rng.random_range(0..=w - cw),
                size_h: ch,
                size_w: cw,
            }
        }
        AugOp::Flip => AugDraw::Flip {
            flip: rng.random::<f64>() < s.flip_p,
        },
        AugOp::Scale => {
            let lo = 1.0 / s.scale;
            AugDraw::Scale {
                sy: lo + rng.random::<f64>() * (s.scale - lo),
                sx: lo + rng.random::<f64>() * (s.scale - lo),
            }
        }
        AugOp::Rotate => AugDraw::Rotate {
            degrees: (rng.random::<f64>() - 0.5) * 2.0 * s.rotate_deg,
        },
    }
}

/// Picks one enabled op uniformly and draws its parameters.
///
/// `batch` is only used when `per_image` is set; otherwise one draw is shared.
pub fn sample_aug(rng: &mut Rng, settings: &AugSettings, image_hw: (usize, usize), batch: usize) -> Result<AugParams> {
    if settings.ops.is_empty() {
        return Err(Error::param("no augmentation ops enabled"));
    }
    let op = settings.ops[rng.random_range(0..settings.ops.len())];
    let n = if settings.per_image { batch.max(1) } else { 1 };
    let draws = (0..n).map(|_| draw(op, settings, image_hw, rng)).collect();
    Ok(AugParams { op, draws, image_hw })
}

/// Output pixel `p` reads `Σ weight·input[src]` over its taps.
struct SpatialMap {
    taps: Vec<Vec<(usize, f64)>>,
}

impl SpatialMap {
    fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> Vec<(usize, f64)>) -> Self {
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                taps.push(f(y, x));
            }
        }
        SpatialMap { taps }
    }

    fn apply<F: Real>(&self, src: ArrayView3<'_, F>, mut dst: ArrayViewMut3<'_, F>) {
        let w = src.shape()[2];
        for c in 0..src.shape()[0] {
            for (p, taps) in self.taps.iter().enumerate() {
                let mut acc = F::zero();
                for &(i, wt) in taps {
                    acc += F::of(wt) * src[[c, i / w, i % w]];
                }
                dst[[c, p / w, p % w]] = acc;
            }
        }
    }

    fn apply_transpose<F: Real>(&self, g: ArrayView3<'_, F>, mut dst: ArrayViewMut3<'_, F>) {
        let w = g.shape()[2];
        dst.fill(F::zero());
        for c in 0..g.shape()[0] {
            for (p, taps) in self.taps.iter().enumerate() {
                let gv = g[[c, p / w, p % w]];
                for &(i, wt) in taps {
                    dst[[c, i / w, i % w]] += F::of(wt) * gv;
                }
            }
        }
    }
}

/// Bilinear sampling of an affine grid in normalized `[-1, 1]` coordinates
/// with aligned corners: source `(xs, ys) = A · (u, v)`.
fn affine_map(h: usize, w: usize, a: [[f64; 2]; 2]) -> SpatialMap {
    let norm = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let denorm = |t: f64, n: usize| if n > 1 { (t + 1.0) / 2.0 * (n - 1) as f64 } else { 0.0 };
    SpatialMap::from_fn(h, w, |y, x| {
        let (u, v) = (norm(x, w), norm(y, h));
        let xs = denorm(a[0][0] * u + a[0][1] * v, w);
        let ys = denorm(a[1][0] * u + a[1][1] * v, h);
        let (x0, y0) = (xs.floor(), ys.floor());
        let (fx, fy) = (xs - x0, ys - y0);
        let mut taps = Vec::with_capacity(4);
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (sy, sx) = (y0 + dy, x0 + dx);
                let wt = wy * wx;
                if wt != 0.0 && sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                    taps.push((sy as usize * w + sx as usize, wt));
                }
            }
        }
        taps
    })
}

fn spatial_map(d: &AugDraw, h: usize, w: usize) -> Option<SpatialMap> {
    match *d {
        AugDraw::Crop { dy, dx } => Some(SpatialMap::from_fn(h, w, |y, x| {
            let (sy, sx) = (y as i64 - dy, x as i64 - dx);
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                vec![(sy as usize * w + sx as usize, 1.0)]
            } else {
                Vec::new()
            }
        })),
        AugDraw::Flip { flip: true } => Some(SpatialMap::from_fn(h, w, |y, x| vec![(y * w + (w - 1 - x), 1.0)])),
        AugDraw::Scale { sy, sx } => Some(affine_map(h, w, [[sx, 0.0], [0.0, sy]])),
        AugDraw::Rotate { degrees } => {
            let t = degrees.to_radians();
            let (sn, cs) = t.sin_cos();
            Some(affine_map(h, w, [[cs, sn], [-sn, cs]]))
        }
        _ => None,
    }
}

fn check(batch: &Array4<impl Real>, params: &AugParams) -> Result<()> {
    let (b, _, h, w) = batch.dim();
    if (h, w) != params.image_hw {
        return Err(Error::param(format!(
            "batch is {h}×{w} but augmentation was drawn for {:?}",
            params.image_hw
        )));
    }
    if params.draws.len() != 1 && params.draws.len() != b {
        return Err(Error::param(format!("{} draws for a batch of {b}", params.draws.len())));
    }
    Ok(())
}

fn draw_for(params: &AugParams, i: usize) -> &AugDraw {
    if params.draws.len() == 1 {
        &params.draws[0]
    } else {
        &params.draws[i]
    }
}

/// Color jitter `y = contrast ∘ saturation ∘ brightness (x)` for one image.
fn color_forward<F: Real>(img: ArrayView3<'_, F>, mut out: ArrayViewMut3<'_, F>, b: f64, s: f64, c: f64) {
    let (ch, h, w) = img.dim();
    out.assign(&img);
    out.mapv_inplace(|v| v + F::of(b));
    let (sf, cf) = (F::of(s), F::of(c));
    let inv_c = F::of(1.0 / ch as f64);
    for y in 0..h {
        for x in 0..w {
            let m = out.slice(s![.., y, x]).sum() * inv_c;
            for k in 0..ch {
                out[[k, y, x]] = (out[[k, y, x]] - m) * sf + m;
            }
        }
    }
    let m = out.sum() * F::of(1.0 / (ch * h * w) as f64);
    out.mapv_inplace(|v| (v - m) * cf + m);
}

fn color_backward<F: Real>(g: ArrayView3<'_, F>, mut out: ArrayViewMut3<'_, F>, s: f64, c: f64) {
    let (ch, h, w) = g.dim();
    let (sf, cf) = (F::of(s), F::of(c));
    let gm = g.sum() * F::of(1.0 / (ch * h * w) as f64);
    out.assign(&g);
    out.mapv_inplace(|v| v * cf + (F::one() - cf) * gm);
    let inv_c = F::of(1.0 / ch as f64);
    for y in 0..h {
        for x in 0..w {
            let m = out.slice(s![.., y, x]).sum() * inv_c;
            for k in 0..ch {
                out[[k, y, x]] = out[[k, y, x]] * sf + (F::one() - sf) * m;
            }
        }
    }
}

fn run<F: Real>(batch: &Array4<F>, params: &AugParams, transpose: bool) -> Result<Array4<F>> {
    check(batch, params)?;
    let (b, _, h, w) = batch.dim();
    let mut out = Array4::<F>::zeros(batch.raw_dim());
    let shared_map = (params.draws.len() == 1).then(|| spatial_map(&params.draws[0], h, w)).flatten();
    for i in 0..b {
        let d = draw_for(params, i);
        let src = batch.slice(s![i, .., .., ..]);
        let dst = out.slice_mut(s![i, .., .., ..]);
        match *d {
            AugDraw::Color {
                brightness,
                saturation,
                contrast,
            } => {
                if transpose {
                    color_backward(src, dst, saturation, contrast)
                } else {
                    color_forward(src, dst, brightness, saturation, contrast)
                }
            }
            AugDraw::Cutout { y0, x0, size_h, size_w } => {
                let mut dst = dst;
                dst.assign(&src);
                dst.slice_mut(s![.., y0..y0 + size_h, x0..x0 + size_w]).fill(F::zero());
            }
            AugDraw::Flip { flip: false } => {
                let mut dst = dst;
                dst.assign(&src);
            }
            _ => {
                let local;
                let map = match &shared_map {
                    Some(m) => m,
                    None => {
                        local = spatial_map(d, h, w).expect("geometric draw");
                        &local
                    }
                };
                if transpose {
                    map.apply_transpose(src, dst)
                } else {
                    map.apply(src, dst)
                }
            }
        }
    }
    Ok(out)
}

/// Applies the drawn op to `[B, C, H, W]`.
pub fn apply_aug<F: Real>(batch: &Array4<F>, params: &AugParams) -> Result<Array4<F>> {
    run(batch, params, false)
}

/// Vector-Jacobian product: maps a gradient w.r.t. the augmented batch back to the input.
pub fn apply_aug_backward<F: Real>(grad: &Array4<F>, params: &AugParams) -> Result<Array4<F>> {
    run(grad, params, true)
}
