//! Forward and backward kernels for the ConvNet building blocks, NCHW layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array4, ArrayView2, ArrayViewMut2, Axis};

use super::spec::{Activation, Pooling};
use crate::real::Real;

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const LEAKY_SLOPE: f64 = 0.01;

/// Images per im2col chunk; bounds the temporary column buffer.
const CONV_CHUNK: usize = 16;

fn im2col<F: Real>(x: &[F], n: usize, c: usize, h: usize, w: usize, cols: &mut [F]) {
    let k = c * 9;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[((b * h + y) * w + xx) * k..][..k];
                for ch in 0..c {
                    let plane = &x[(b * c + ch) * h * w..][..h * w];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            row[ch * 9 + ky * 3 + kx] =
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    plane[sy as usize * w + sx as usize]
                                } else {
                                    F::zero()
                                };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], n: usize, c: usize, h: usize, w: usize, dx: &mut [F]) {
    let k = c * 9;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = &cols[((b * h + y) * w + xx) * k..][..k];
                for ch in 0..c {
                    let plane = &mut dx[(b * c + ch) * h * w..][..h * w];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                plane[sy as usize * w + sx as usize] += row[ch * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `[Co, Ci, 3, 3]`.
pub(crate) fn conv3x3<F: Real>(x: &Array4<F>, weight: &Array4<F>, bias: &Array1<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let co = weight.shape()[0];
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let wm = weight.view().into_shape_with_order((co, c * 9)).unwrap();
    let mut out = Array4::<F>::zeros((n, co, h, w));
    let hw = h * w;
    let mut cols = vec![F::zero(); CONV_CHUNK.min(n) * hw * c * 9];
    let mut prod = vec![F::zero(); CONV_CHUNK.min(n) * hw * co];
    for start in (0..n).step_by(CONV_CHUNK) {
        let m = CONV_CHUNK.min(n - start);
        im2col(&xs[start * c * hw..], m, c, h, w, &mut cols[..m * hw * c * 9]);
        let cv = ArrayView2::from_shape((m * hw, c * 9), &cols[..m * hw * c * 9]).unwrap();
        let mut pv = ArrayViewMut2::from_shape((m * hw, co), &mut prod[..m * hw * co]).unwrap();
        general_mat_mul(F::one(), &cv, &wm.t(), F::zero(), &mut pv);
        for b in 0..m {
            for o in 0..co {
                let bo = bias[o];
                let mut plane = out.slice_mut(ndarray::s![start + b, o, .., ..]);
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = pv[[b * hw + p, o]] + bo;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`; parameter gradients only when `want_params`.
pub(crate) fn conv3x3_backward<F: Real>(
    x: &Array4<F>,
    weight: &Array4<F>,
    dy: &Array4<F>,
    want_params: bool,
) -> (Array4<F>, Option<(Array4<F>, Array1<F>)>) {
    let (n, c, h, w) = x.dim();
    let co = weight.shape()[0];
    let hw = h * w;
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let wm = weight.view().into_shape_with_order((co, c * 9)).unwrap();
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    let mut dwm = ndarray::Array2::<F>::zeros((co, c * 9));
    let mut cols = vec![F::zero(); CONV_CHUNK.min(n) * hw * c * 9];
    let mut dmat = vec![F::zero(); CONV_CHUNK.min(n) * hw * co];
    {
        let dxs = dx.as_slice_mut().unwrap();
        for start in (0..n).step_by(CONV_CHUNK) {
            let m = CONV_CHUNK.min(n - start);
            for b in 0..m {
                for o in 0..co {
                    let plane = dy.slice(ndarray::s![start + b, o, .., ..]);
                    for (p, &v) in plane.iter().enumerate() {
                        dmat[(b * hw + p) * co + o] = v;
                    }
                }
            }
            let dv = ArrayView2::from_shape((m * hw, co), &dmat[..m * hw * co]).unwrap();
            if want_params {
                im2col(&xs[start * c * hw..], m, c, h, w, &mut cols[..m * hw * c * 9]);
                let cv = ArrayView2::from_shape((m * hw, c * 9), &cols[..m * hw * c * 9]).unwrap();
                general_mat_mul(F::one(), &dv.t(), &cv, F::one(), &mut dwm);
            }
            let mut dcv = ArrayViewMut2::from_shape((m * hw, c * 9), &mut cols[..m * hw * c * 9]).unwrap();
            general_mat_mul(F::one(), &dv, &wm, F::zero(), &mut dcv);
            col2im(&cols[..m * hw * c * 9], m, c, h, w, &mut dxs[start * c * hw..]);
        }
    }
    let params = want_params.then(|| {
        let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        (dwm.into_shape_with_order((co, c, 3, 3)).unwrap(), db)
    });
    (dx, params)
}

/// Statistics saved by a normalization forward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<F> {
    pub xhat: Array4<F>,
    /// One inverse standard deviation per normalization set.
    pub inv_std: Vec<F>,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Group norm over `groups` channel groups of each sample, per-channel affine.
pub(crate) fn group_norm<F: Real>(
    x: &Array4<F>,
    groups: usize,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array4<F>, NormCache<F>) {
    let (n, c, h, w) = x.dim();
    let cg = c / groups;
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let set = cg * h * w;
    let mut xhat = vec![F::zero(); xs.len()];
    let mut y = vec![F::zero(); xs.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    let mut means = Vec::with_capacity(n * groups);
    let mut vars = Vec::with_capacity(n * groups);
    let cnt = F::of(set as f64);
    for b in 0..n {
        for g in 0..groups {
            let off = (b * c + g * cg) * h * w;
            let seg = &xs[off..off + set];
            let mean = seg.iter().copied().sum::<F>() / cnt;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cnt;
            let is = (var + F::of(NORM_EPS)).sqrt().recip();
            for i in 0..set {
                let ch = g * cg + i / (h * w);
                let xh = (seg[i] - mean) * is;
                xhat[off + i] = xh;
                y[off + i] = gamma[ch] * xh + beta[ch];
            }
            inv_std.push(is);
            means.push(mean);
            vars.push(var);
        }
    }
    let shape = (n, c, h, w);
    (
        Array4::from_shape_vec(shape, y).unwrap(),
        NormCache {
            xhat: Array4::from_shape_vec(shape, xhat).unwrap(),
            inv_std,
            mean: means,
            var: vars,
        },
    )
}

/// Shared backward for any normalization whose sets are given by `set_of(b, ch)`.
///
/// `dx = is/N · (N·g − Σg − x̂·Σ(g·x̂))` with `g = dy·γ`.
fn norm_backward_sets<F: Real>(
    dy: &Array4<F>,
    cache: &NormCache<F>,
    gamma: &Array1<F>,
    num_sets: usize,
    set_of: impl Fn(usize, usize) -> usize,
    want_params: bool,
) -> (Array4<F>, Option<(Array1<F>, Array1<F>)>) {
    let (n, c, _, _) = dy.dim();
    let mut sum_g = vec![F::zero(); num_sets];
    let mut sum_gx = vec![F::zero(); num_sets];
    let mut count = vec![0usize; num_sets];
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    for b in 0..n {
        for ch in 0..c {
            let s = set_of(b, ch);
            let dyp = dy.slice(ndarray::s![b, ch, .., ..]);
            let xhp = cache.xhat.slice(ndarray::s![b, ch, .., ..]);
            for (&d, &xh) in dyp.iter().zip(xhp.iter()) {
                let g = d * gamma[ch];
                sum_g[s] += g;
                sum_gx[s] += g * xh;
                if want_params {
                    dgamma[ch] += d * xh;
                    dbeta[ch] += d;
                }
            }
            count[s] += dyp.len();
        }
    }
    let mut dx = Array4::<F>::zeros(dy.raw_dim());
    for b in 0..n {
        for ch in 0..c {
            let s = set_of(b, ch);
            let cnt = F::of(count[s] as f64);
            let is = cache.inv_std[s];
            let (mg, mgx) = (sum_g[s] / cnt, sum_gx[s] / cnt);
            let dyp = dy.slice(ndarray::s![b, ch, .., ..]);
            let xhp = cache.xhat.slice(ndarray::s![b, ch, .., ..]);
            let mut dxp = dx.slice_mut(ndarray::s![b, ch, .., ..]);
            for ((o, &d), &xh) in dxp.iter_mut().zip(dyp.iter()).zip(xhp.iter()) {
                *o = is * (d * gamma[ch] - mg - xh * mgx);
            }
        }
    }
    (dx, want_params.then_some((dgamma, dbeta)))
}

pub(crate) fn group_norm_backward<F: Real>(
    dy: &Array4<F>,
    cache: &NormCache<F>,
    groups: usize,
    gamma: &Array1<F>,
    want_params: bool,
) -> (Array4<F>, Option<(Array1<F>, Array1<F>)>) {
    let (n, c, _, _) = dy.dim();
    let cg = c / groups;
    norm_backward_sets(dy, cache, gamma, n * groups, |b, ch| b * groups + ch / cg, want_params)
}

/// Batch norm. With `running = Some((mean, var))` the given statistics are used
/// instead of batch statistics (inference mode).
pub(crate) fn batch_norm<F: Real>(
    x: &Array4<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    running: Option<(&Array1<F>, &Array1<F>)>,
) -> (Array4<F>, NormCache<F>) {
    let (n, c, h, w) = x.dim();
    let cnt = F::of((n * h * w) as f64);
    let mut xhat = Array4::<F>::zeros(x.raw_dim());
    let mut y = Array4::<F>::zeros(x.raw_dim());
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = x.index_axis(Axis(1), ch);
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[ch], rv[ch]),
            None => {
                let mean = plane.iter().copied().sum::<F>() / cnt;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cnt;
                (mean, var)
            }
        };
        let is = (var + F::of(NORM_EPS)).sqrt().recip();
        let mut xh = xhat.index_axis_mut(Axis(1), ch);
        xh.zip_mut_with(&plane, |o, &v| *o = (v - mean) * is);
        y.index_axis_mut(Axis(1), ch).zip_mut_with(&xh, |o, &v| *o = gamma[ch] * v + beta[ch]);
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            mean: means,
            var: vars,
        },
    )
}

pub(crate) fn batch_norm_backward<F: Real>(
    dy: &Array4<F>,
    cache: &NormCache<F>,
    gamma: &Array1<F>,
    fixed_stats: bool,
    want_params: bool,
) -> (Array4<F>, Option<(Array1<F>, Array1<F>)>) {
    if !fixed_stats {
        let c = dy.shape()[1];
        return norm_backward_sets(dy, cache, gamma, c, |_, ch| ch, want_params);
    }
    let mut dx = dy.clone();
    for (ch, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
        let s = gamma[ch] * cache.inv_std[ch];
        plane.mapv_inplace(|v| v * s);
    }
    let params = want_params.then(|| {
        let prod = dy * &cache.xhat;
        (
            prod.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)),
            dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)),
        )
    });
    (dx, params)
}

pub(crate) fn activate<F: Real>(x: &Array4<F>, act: Activation) -> Array4<F> {
    let slope = F::of(LEAKY_SLOPE);
    match act {
        Activation::Relu => x.mapv(|v| if v > F::zero() { v } else { F::zero() }),
        Activation::LeakyRelu => x.mapv(|v| if v > F::zero() { v } else { v * slope }),
        Activation::Sigmoid => x.mapv(|v| (F::one() + (-v).exp()).recip()),
    }
}

/// `x` is the activation input, `y` its output.
pub(crate) fn activate_backward<F: Real>(x: &Array4<F>, y: &Array4<F>, dy: &Array4<F>, act: Activation) -> Array4<F> {
    let slope = F::of(LEAKY_SLOPE);
    let mut dx = dy.clone();
    match act {
        Activation::Relu => dx.zip_mut_with(x, |d, &v| {
            if v <= F::zero() {
                *d = F::zero()
            }
        }),
        Activation::LeakyRelu => dx.zip_mut_with(x, |d, &v| {
            if v <= F::zero() {
                *d *= slope
            }
        }),
        Activation::Sigmoid => dx.zip_mut_with(y, |d, &s| *d *= s * (F::one() - s)),
    }
    dx
}

/// 2×2 pooling with stride 2. Returns the pooled map and, for max pooling, the
/// flat argmax offset (0..4) inside each window.
pub(crate) fn pool2<F: Real>(x: &Array4<F>, kind: Pooling) -> (Array4<F>, Vec<u8>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<F>::zeros((n, c, oh, ow));
    let mut arg = Vec::new();
    let quarter = F::of(0.25);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let vals = [
                        x[[b, ch, 2 * y, 2 * xx]],
                        x[[b, ch, 2 * y, 2 * xx + 1]],
                        x[[b, ch, 2 * y + 1, 2 * xx]],
                        x[[b, ch, 2 * y + 1, 2 * xx + 1]],
                    ];
                    out[[b, ch, y, xx]] = match kind {
                        Pooling::Avg => (vals[0] + vals[1] + vals[2] + vals[3]) * quarter,
                        Pooling::Max => {
                            let mut best = 0;
                            for i in 1..4 {
                                if vals[i] > vals[best] {
                                    best = i;
                                }
                            }
                            arg.push(best as u8);
                            vals[best]
                        }
                        Pooling::None => unreachable!("pool2 called without pooling"),
                    };
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool2_backward<F: Real>(dy: &Array4<F>, kind: Pooling, arg: &[u8], in_hw: (usize, usize)) -> Array4<F> {
    let (n, c, oh, ow) = dy.dim();
    let mut dx = Array4::<F>::zeros((n, c, in_hw.0, in_hw.1));
    let quarter = F::of(0.25);
    let mut k = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let d = dy[[b, ch, y, xx]];
                    match kind {
                        Pooling::Avg => {
                            for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dx[[b, ch, 2 * y + dy_, 2 * xx + dx_]] += d * quarter;
                            }
                        }
                        Pooling::Max => {
                            let a = arg[k] as usize;
                            k += 1;
                            dx[[b, ch, 2 * y + a / 2, 2 * xx + a % 2]] += d;
                        }
                        Pooling::None => unreachable!(),
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = stream(seed, Stream::Init);
        Array4::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(x: &Array4<f64>, wt: &Array4<f64>, b: &Array1<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let co = wt.shape()[0];
        Array4::from_shape_fn((n, co, h, w), |(i, o, y, xx)| {
            let mut acc = b[o];
            for ch in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += wt[[o, ch, ky, kx]] * x[[i, ch, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = randn((19, 2, 5, 4), 1);
        let wt = randn((3, 2, 3, 3), 2);
        let b = Array1::from(vec![0.1, -0.2, 0.3]);
        let got = conv3x3(&x, &wt, &b);
        let want = conv_oracle(&x, &wt, &b);
        assert!(got.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w, so the backward pass must satisfy
        // <dx, x> + <dw, w> + <db, b> = 2·<conv(x) - b, g> + <b, Σg>.
        let x = randn((17, 2, 4, 3), 3);
        let wt = randn((4, 2, 3, 3), 4);
        let b = Array1::from(vec![0.5, 0.1, -0.3, 0.7]);
        let g = randn((17, 4, 4, 3), 5);
        let y = conv3x3(&x, &wt, &b);
        let (dx, p) = conv3x3_backward(&x, &wt, &g, true);
        let (dw, db) = p.unwrap();
        let lin: f64 = (&y - &b.view().into_shape_with_order((1, 4, 1, 1)).unwrap()) .iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let lhs_x: f64 = dx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let lhs_w: f64 = dw.iter().zip(wt.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs_x - lin).abs() < 1e-9 * lin.abs().max(1.0));
        assert!((lhs_w - lin).abs() < 1e-9 * lin.abs().max(1.0));
        let gsum = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        assert!(db.iter().zip(gsum.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let x = randn((2, 4, 3, 3), 6);
        let ones = Array1::ones(4);
        let zeros = Array1::zeros(4);
        let (y, _) = group_norm(&x, 4, &ones, &zeros);
        for b in 0..2 {
            for c in 0..4 {
                let p = y.slice(ndarray::s![b, c, .., ..]);
                let m = p.mean().unwrap();
                let v = p.mapv(|t| (t - m) * (t - m)).mean().unwrap();
                assert!(m.abs() < 1e-12);
                assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = pool2(&x, Pooling::Max);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        let dx = pool2_backward::<f64>(&Array4::ones((1, 1, 1, 1)), Pooling::Max, &arg, (2, 2));
        assert_eq!(dx.iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
    }
}
