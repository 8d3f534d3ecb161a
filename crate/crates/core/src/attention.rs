//! Attention statistics of feature maps and the matching losses built on them.
//!
//! For a feature map `f` of shape `[B, C, H, W]`:
//!
//! * spatial attention sums `|f|^p` over channels, giving `[B, H·W]`;
//! * channel attention sums `|f|^p` over the flattened spatial positions, giving `[B, C]`.
//!
//! Each row is L2-normalized, the rows are averaged over the batch, and the
//! squared distance between the real and synthetic averages is summed over
//! layers and classes. The penultimate embedding is matched separately by the
//! linear-kernel MMD (distance between batch mean embeddings).

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureStack;
use crate::real::Real;

/// Guard on row norms so that all-zero attention rows stay zero.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Spatial,
    Channel,
}

/// Which intermediate statistics are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    Spatial,
    Channel,
    Both,
    /// Raw mean features without attention or normalization (ablation baseline).
    FeatureMap,
}

impl MatchMode {
    pub fn name(self) -> &'static str {
        match self {
            MatchMode::Spatial => "spatial",
            MatchMode::Channel => "channel",
            MatchMode::Both => "both",
            MatchMode::FeatureMap => "feature-map",
        }
    }
}

/// A vectorized attention statistic of one layer, `[B, H·W]` or `[B, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVector<F: Real> {
    pub kind: AttentionKind,
    pub values: Array2<F>,
    pub layer_index: usize,
    pub power: f64,
}

fn check_power(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::param(format!("attention power must be >= 1, got {p}")));
    }
    Ok(())
}

#[inline]
fn abs_pow<F: Real>(v: F, p: F, int_p: Option<i32>) -> F {
    match int_p {
        Some(k) => v.abs().powi(k),
        None => v.abs().powf(p),
    }
}

/// `d|v|^p / dv = p·|v|^(p-1)·sign(v)`, zero at `v = 0`.
#[inline]
fn abs_pow_grad<F: Real>(v: F, p: F, int_p: Option<i32>) -> F {
    if v == F::zero() {
        return F::zero();
    }
    let mag = match int_p {
        Some(k) => v.abs().powi(k - 1),
        None => v.abs().powf(p - F::one()),
    };
    p * mag * v.signum()
}

fn integer_power(p: f64) -> Option<i32> {
    (p.fract() == 0.0 && p <= 64.0).then_some(p as i32)
}

/// Sums non-negative terms in ascending order, so the result does not depend
/// on the order the terms were produced in.
fn sorted_sum<F: Real>(terms: &mut [F]) -> F {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().fold(F::zero(), |acc, &t| acc + t)
}

/// `Σ_c |f[b, c, h, w]|^p`, flattened to `[B, H·W]`.
pub fn spatial_attention<F: Real>(f: &Array4<F>, p: f64) -> Result<AttentionVector<F>> {
    check_power(p)?;
    let (b, c, h, w) = f.dim();
    let (pf, ip) = (F::of(p), integer_power(p));
    let mut out = Array2::<F>::zeros((b, h * w));
    let mut terms = Array2::<F>::zeros((h * w, c));
    for i in 0..b {
        for ch in 0..c {
            let plane = f.slice(ndarray::s![i, ch, .., ..]);
            for (t, &v) in terms.column_mut(ch).iter_mut().zip(plane.iter()) {
                *t = abs_pow(v, pf, ip);
            }
        }
        for (o, mut row) in out.row_mut(i).iter_mut().zip(terms.outer_iter_mut()) {
            *o = sorted_sum(row.as_slice_mut().unwrap());
        }
    }
    Ok(AttentionVector {
        kind: AttentionKind::Spatial,
        values: out,
        layer_index: 0,
        power: p,
    })
}

/// `Σ_{h,w} |f[b, c, h, w]|^p`, giving `[B, C]`.
pub fn channel_attention<F: Real>(f: &Array4<F>, p: f64) -> Result<AttentionVector<F>> {
    check_power(p)?;
    let (b, c, h, w) = f.dim();
    let (pf, ip) = (F::of(p), integer_power(p));
    let mut out = Array2::<F>::zeros((b, c));
    let mut terms = vec![F::zero(); h * w];
    for i in 0..b {
        for ch in 0..c {
            for (t, &v) in terms.iter_mut().zip(f.slice(ndarray::s![i, ch, .., ..]).iter()) {
                *t = abs_pow(v, pf, ip);
            }
            out[[i, ch]] = sorted_sum(&mut terms);
        }
    }
    Ok(AttentionVector {
        kind: AttentionKind::Channel,
        values: out,
        layer_index: 0,
        power: p,
    })
}

pub fn attention<F: Real>(f: &Array4<F>, kind: AttentionKind, p: f64) -> Result<AttentionVector<F>> {
    match kind {
        AttentionKind::Spatial => spatial_attention(f, p),
        AttentionKind::Channel => channel_attention(f, p),
    }
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn normalize_rows<F: Real>(z: &Array2<F>, eps: f64) -> Array2<F> {
    let eps = F::of(eps);
    let mut out = z.clone();
    for mut row in out.outer_iter_mut() {
        let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
        if n > F::zero() {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Back-propagates `g` (gradient w.r.t. the normalized rows) to the raw rows `z`.
fn normalize_rows_backward<F: Real>(z: &Array2<F>, g: &Array2<F>, eps: f64) -> Array2<F> {
    let eps = F::of(eps);
    let mut out = Array2::<F>::zeros(z.raw_dim());
    for ((zr, gr), mut or) in z.outer_iter().zip(g.outer_iter()).zip(out.outer_iter_mut()) {
        let n = zr.iter().map(|&v| v * v).sum::<F>().sqrt();
        if n > eps {
            // d(z/‖z‖) = (g − u·(u·g)) / ‖z‖ with u = z/‖z‖.
            let ug: F = zr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
            for ((o, &zv), &gv) in or.iter_mut().zip(zr.iter()).zip(gr.iter()) {
                *o = (gv - zv / n * ug) / n;
            }
        } else if eps > F::zero() {
            or.zip_mut_with(&gr, |o, &gv| *o = gv / eps);
        }
    }
    out
}

/// Back-propagates `g` (gradient w.r.t. attention values) to the feature map.
fn attention_backward<F: Real>(f: &Array4<F>, kind: AttentionKind, p: f64, g: &Array2<F>) -> Array4<F> {
    let (pf, ip) = (F::of(p), integer_power(p));
    let (_, _, _, w) = f.dim();
    let mut df = Array4::<F>::zeros(f.raw_dim());
    for ((i, ch, y, x), o) in df.indexed_iter_mut() {
        let v = f[[i, ch, y, x]];
        let up = match kind {
            AttentionKind::Spatial => g[[i, y * w + x]],
            AttentionKind::Channel => g[[i, ch]],
        };
        *o = up * abs_pow_grad(v, pf, ip);
    }
    df
}

/// Hyperparameters of the intermediate-layer matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtomParams {
    pub p_s: f64,
    pub p_c: f64,
    pub mode: MatchMode,
    /// Relative weights of the spatial and channel terms in `both` mode.
    pub spatial_weight: f64,
    pub channel_weight: f64,
    pub eps: f64,
}

impl Default for AtomParams {
    fn default() -> Self {
        AtomParams {
            p_s: 4.0,
            p_c: 4.0,
            mode: MatchMode::Both,
            spatial_weight: 1.0,
            channel_weight: 1.0,
            eps: NORM_EPS,
        }
    }
}

impl AtomParams {
    /// `(kind, power, weight)` of every matched attention statistic.
    fn kinds(&self) -> Vec<(AttentionKind, f64, f64)> {
        match self.mode {
            MatchMode::Spatial => vec![(AttentionKind::Spatial, self.p_s, 1.0)],
            MatchMode::Channel => vec![(AttentionKind::Channel, self.p_c, 1.0)],
            MatchMode::Both => vec![
                (AttentionKind::Spatial, self.p_s, self.spatial_weight),
                (AttentionKind::Channel, self.p_c, self.channel_weight),
            ],
            MatchMode::FeatureMap => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_power(self.p_s)?;
        check_power(self.p_c)?;
        if !(self.eps >= 0.0) || self.spatial_weight < 0.0 || self.channel_weight < 0.0 {
            return Err(Error::param("eps and attention weights must be >= 0"));
        }
        Ok(())
    }
}

/// Batch mean of the normalized attention rows of one layer.
pub fn mean_normalized_attention<F: Real>(f: &Array4<F>, kind: AttentionKind, p: f64, eps: f64) -> Result<Array1<F>> {
    let z = attention(f, kind, p)?.values;
    Ok(normalize_rows(&z, eps).mean_axis(Axis(0)).unwrap())
}

/// What the real side of a class contributes: one target vector per matched statistic and layer.
#[derive(Debug, Clone)]
pub struct ClassTargets<F: Real> {
    /// `[layer][statistic]`.
    per_layer: Vec<Vec<Array1<F>>>,
    embedding: Array1<F>,
}

impl<F: Real> ClassTargets<F> {
    pub fn from_features(real: &FeatureStack<F>, params: &AtomParams) -> Result<Self> {
        let mut per_layer = Vec::with_capacity(real.per_layer.len());
        for f in &real.per_layer {
            let mut stats = Vec::new();
            if params.mode == MatchMode::FeatureMap {
                let n = f.shape()[0];
                let flat = f.view().into_shape_with_order((n, f.len() / n.max(1))).unwrap();
                stats.push(flat.mean_axis(Axis(0)).unwrap());
            }
            for (kind, p, _) in params.kinds() {
                stats.push(mean_normalized_attention(f, kind, p, params.eps)?);
            }
            per_layer.push(stats);
        }
        Ok(ClassTargets {
            per_layer,
            embedding: real.embedding.mean_axis(Axis(0)).unwrap(),
        })
    }
}

/// Loss of one class with gradients w.r.t. the synthetic features.
#[derive(Debug, Clone)]
pub struct ClassLoss<F: Real> {
    pub atom: f64,
    pub mmd: f64,
    pub per_layer: Vec<f64>,
    pub grad_layers: Vec<Array4<F>>,
    pub grad_embedding: Array2<F>,
}

fn sq_dist<F: Real>(a: &Array1<F>, b: &Array1<F>) -> F {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Matching loss of one class against precomputed real targets, with gradients.
///
/// `atom_scale` and `mmd_scale` multiply the respective gradients (e.g. 1 and λ).
pub fn class_loss<F: Real>(
    targets: &ClassTargets<F>,
    syn: &FeatureStack<F>,
    params: &AtomParams,
    atom_scale: f64,
    mmd_scale: f64,
) -> Result<ClassLoss<F>> {
    if targets.per_layer.len() != syn.per_layer.len() {
        return Err(Error::Contract(format!(
            "real stack has {} layers, synthetic stack has {}",
            targets.per_layer.len(),
            syn.per_layer.len()
        )));
    }
    if targets.embedding.len() != syn.embedding.ncols() {
        return Err(Error::Contract("embedding widths differ".into()));
    }
    let mut per_layer = Vec::with_capacity(syn.per_layer.len());
    let mut grad_layers = Vec::with_capacity(syn.per_layer.len());
    let two = F::of(2.0);
    for (f, tgt) in syn.per_layer.iter().zip(&targets.per_layer) {
        let n = f.shape()[0];
        let inv_n = F::of(1.0 / n as f64);
        let mut term = F::zero();
        let mut df = Array4::<F>::zeros(f.raw_dim());
        let mut t = tgt.iter();
        if params.mode == MatchMode::FeatureMap {
            let target = t.next().unwrap();
            let flat = f.view().into_shape_with_order((n, f.len() / n)).unwrap();
            let m = flat.mean_axis(Axis(0)).unwrap();
            term += sq_dist(target, &m);
            let g = (&m - target) * (two * inv_n * F::of(atom_scale));
            for mut row in df.view_mut().into_shape_with_order((n, f.len() / n)).unwrap().outer_iter_mut() {
                row.assign(&g);
            }
        }
        for (kind, p, weight) in params.kinds() {
            let target = t.next().unwrap();
            let z = attention(f, kind, p)?.values;
            let u = normalize_rows(&z, params.eps);
            let m = u.mean_axis(Axis(0)).unwrap();
            let wf = F::of(weight);
            term += wf * sq_dist(target, &m);
            let gm = (&m - target) * (two * inv_n * wf * F::of(atom_scale));
            let gu = Array2::from_shape_fn(u.raw_dim(), |(_, j)| gm[j]);
            let gz = normalize_rows_backward(&z, &gu, params.eps);
            df += &attention_backward(f, kind, p, &gz);
        }
        per_layer.push(term.f64());
        grad_layers.push(df);
    }
    let (mmd, grad_embedding) = mmd_class(targets.embedding.view(), syn.embedding.view(), mmd_scale);
    Ok(ClassLoss {
        atom: per_layer.iter().sum(),
        mmd,
        per_layer,
        grad_layers,
        grad_embedding,
    })
}

fn mmd_class<F: Real>(real_mean: ndarray::ArrayView1<'_, F>, syn: ArrayView2<'_, F>, scale: f64) -> (f64, Array2<F>) {
    let n = syn.nrows();
    let m = syn.mean_axis(Axis(0)).unwrap();
    let diff = &m - &real_mean;
    let loss: F = diff.iter().map(|&d| d * d).sum();
    let g = diff * F::of(2.0 * scale / n as f64);
    let grad = Array2::from_shape_fn(syn.raw_dim(), |(_, j)| g[j]);
    (loss.f64(), grad)
}

/// Intermediate-layer matching loss summed over classes, with per-layer terms.
///
/// `real[k]` and `syn[k]` are the feature stacks of class `k` from the same network.
pub fn atom_loss<F: Real>(real: &[FeatureStack<F>], syn: &[FeatureStack<F>], params: &AtomParams) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    if real.len() != syn.len() {
        return Err(Error::Contract(format!("{} real classes vs {} synthetic", real.len(), syn.len())));
    }
    let mut total = 0.0;
    let mut per_layer: Vec<f64> = Vec::new();
    for (r, s) in real.iter().zip(syn) {
        let t = ClassTargets::from_features(r, params)?;
        let cl = class_loss(&t, s, params, 1.0, 0.0)?;
        if per_layer.is_empty() {
            per_layer = vec![0.0; cl.per_layer.len()];
        }
        for (acc, v) in per_layer.iter_mut().zip(&cl.per_layer) {
            *acc += v;
        }
        total += cl.atom;
    }
    Ok((total, per_layer))
}

/// Linear-kernel MMD: squared distance of batch-mean embeddings, summed over classes.
pub fn mmd_loss<F: Real>(real: &[Array2<F>], syn: &[Array2<F>]) -> Result<f64> {
    if real.len() != syn.len() {
        return Err(Error::Contract(format!("{} real classes vs {} synthetic", real.len(), syn.len())));
    }
    let mut total = 0.0;
    for (r, s) in real.iter().zip(syn) {
        if r.ncols() != s.ncols() {
            return Err(Error::Contract(format!("embedding widths {} and {} differ", r.ncols(), s.ncols())));
        }
        let rm = r.mean_axis(Axis(0)).unwrap();
        total += mmd_class(rm.view(), s.view(), 1.0).0;
    }
    Ok(total)
}

/// Per-iteration loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub atom: f64,
    pub mmd: f64,
    pub total: f64,
    pub lambda: f64,
    pub per_layer: Vec<f64>,
}

/// `atom + λ·mmd`.
pub fn total_loss(atom: f64, mmd: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(LossBreakdown {
        atom,
        mmd,
        total: atom + lambda * mmd,
        lambda,
        per_layer: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(b: usize, c: usize, h: usize, w: usize, v: &[f64]) -> Array4<f64> {
        Array4::from_shape_vec((b, c, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn spatial_on_three_minus_four() {
        let a = spatial_attention(&fm(1, 2, 1, 1, &[3.0, -4.0]), 2.0).unwrap();
        assert_eq!(a.values.into_raw_vec_and_offset().0, vec![25.0]);
    }

    #[test]
    fn channel_on_three_minus_four() {
        let a = channel_attention(&fm(1, 1, 2, 1, &[3.0, -4.0]), 2.0).unwrap();
        assert_eq!(a.values.into_raw_vec_and_offset().0, vec![25.0]);
    }

    #[test]
    fn zero_features_give_zero_attention() {
        let f = Array4::<f64>::zeros((2, 3, 2, 2));
        assert!(spatial_attention(&f, 4.0).unwrap().values.iter().all(|&v| v == 0.0));
        let c = channel_attention(&f, 4.0).unwrap().values;
        assert_eq!(c.dim(), (2, 3));
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_p1_is_abs() {
        let v = [1.5, -2.0, 0.0, -0.25];
        let a = spatial_attention(&fm(1, 1, 2, 2, &v), 1.0).unwrap().values;
        assert_eq!(a.iter().copied().collect::<Vec<_>>(), vec![1.5, 2.0, 0.0, 0.25]);
    }

    #[test]
    fn power_below_one_is_rejected() {
        let f = Array4::<f64>::zeros((1, 1, 1, 1));
        assert!(matches!(spatial_attention(&f, 0.5), Err(Error::Param(_))));
        assert!(matches!(channel_attention(&f, 0.99), Err(Error::Param(_))));
    }

    #[test]
    fn normalize_rows_cases() {
        let z = Array2::from_shape_vec((2, 2), vec![3.0f64, 4.0, 0.0, 0.0]).unwrap();
        let u = normalize_rows(&z, 1e-6);
        assert!((u[[0, 0]] - 0.6).abs() < 1e-15 && (u[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(u[[1, 0]], 0.0);
        assert_eq!(u[[1, 1]], 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 2.0, 0.01).unwrap().total - 1.02).abs() < 1e-15);
        assert_eq!(total_loss(1.5, 7.0, 0.0).unwrap().total, 1.5);
        assert!(matches!(total_loss(1.0, 1.0, -0.1), Err(Error::Param(_))));
    }

    fn stack(f: Array4<f64>, emb: Vec<f64>, width: usize) -> FeatureStack<f64> {
        let n = f.shape()[0];
        FeatureStack {
            per_layer: vec![f],
            embedding: Array2::from_shape_vec((n, width), emb).unwrap(),
            logits: Array2::zeros((n, 1)),
        }
    }

    #[test]
    fn mmd_hand_value() {
        let r = vec![Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap()];
        let s = vec![Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap()];
        assert_eq!(mmd_loss(&r, &s).unwrap(), 2.0);
        let bad = vec![Array2::<f64>::zeros((1, 3))];
        assert!(matches!(mmd_loss(&r, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_layers_is_contract_error() {
        let a = stack(Array4::ones((1, 2, 1, 1)), vec![0.0], 1);
        let mut b = a.clone();
        b.per_layer.push(Array4::ones((1, 2, 1, 1)));
        let err = atom_loss(&[a], &[b], &AtomParams::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
