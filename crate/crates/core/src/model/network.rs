use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, NormCache};
use super::spec::{ConvNetSpec, Norm, Pooling};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{stream, Stream};

/// Where block features are read for matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapPoint {
    PrePool,
    #[default]
    PostPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F: Real> {
    pub conv_w: Array4<F>,
    pub conv_b: Array1<F>,
    pub norm: Option<NormParams<F>>,
}

/// A ConvNet: `depth` blocks of [conv 3×3, norm, activation, 2×2 pool], then a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<F: Real> {
    spec: ConvNetSpec,
    pub blocks: Vec<Block<F>>,
    /// `[K, E]`.
    pub classifier_w: Array2<F>,
    pub classifier_b: Array1<F>,
}

/// Intermediate block features, penultimate embedding and logits of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureStack<F: Real> {
    pub per_layer: Vec<Array4<F>>,
    pub embedding: Array2<F>,
    pub logits: Array2<F>,
}

/// Upstream gradients injected into a backward pass.
#[derive(Debug, Clone)]
pub struct FeatureGrads<F: Real> {
    pub per_layer: Vec<Option<Array4<F>>>,
    pub embedding: Option<Array2<F>>,
    pub logits: Option<Array2<F>>,
}

impl<F: Real> FeatureGrads<F> {
    pub fn empty(depth: usize) -> Self {
        FeatureGrads {
            per_layer: vec![None; depth],
            embedding: None,
            logits: None,
        }
    }
}

struct BlockTape<F: Real> {
    input: Array4<F>,
    norm: Option<NormCache<F>>,
    act_in: Array4<F>,
    act_out: Array4<F>,
    pool_arg: Vec<u8>,
}

/// Activations saved for a backward pass.
pub struct Tape<F: Real> {
    tap: TapPoint,
    mode: Mode,
    blocks: Vec<BlockTape<F>>,
    embedding: Array2<F>,
}

/// Gradients of every trainable tensor, in [`Network::parameters`] order.
#[derive(Debug, Clone)]
pub struct Gradients<F: Real>(pub Vec<ArrayD<F>>);

pub fn build_network<F: Real>(spec: &ConvNetSpec, seed: u64) -> Result<Network<F>> {
    spec.validate()?;
    let [c, _, _] = spec.input;
    let mut blocks = Vec::with_capacity(spec.depth);
    let mut cin = c;
    for _ in 0..spec.depth {
        let w = spec.width;
        blocks.push(Block {
            conv_w: Array4::zeros((w, cin, 3, 3)),
            conv_b: Array1::zeros(w),
            norm: (spec.norm != Norm::None).then(|| NormParams {
                gamma: Array1::ones(w),
                beta: Array1::zeros(w),
                running_mean: Array1::zeros(w),
                running_var: Array1::ones(w),
            }),
        });
        cin = w;
    }
    let mut net = Network {
        spec: *spec,
        blocks,
        classifier_w: Array2::zeros((spec.num_classes, spec.embedding_size())),
        classifier_b: Array1::zeros(spec.num_classes),
    };
    init_weights(&mut net, seed);
    Ok(net)
}

/// He-normal weights (`N(0, 2/fan_in)`), zero biases, unit norm scales.
pub fn init_weights<F: Real>(net: &mut Network<F>, seed: u64) {
    let mut rng = stream(seed, Stream::Network);
    let mut he = |a: &mut [F], fan_in: usize| {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        for v in a {
            *v = F::of(dist.sample(&mut rng));
        }
    };
    for b in &mut net.blocks {
        let fan_in = b.conv_w.shape()[1] * 9;
        he(b.conv_w.as_slice_mut().unwrap(), fan_in);
        b.conv_b.fill(F::zero());
        if let Some(n) = &mut b.norm {
            n.gamma.fill(F::one());
            n.beta.fill(F::zero());
            n.running_mean.fill(F::zero());
            n.running_var.fill(F::one());
        }
    }
    let fan_in = net.classifier_w.shape()[1];
    he(net.classifier_w.as_slice_mut().unwrap(), fan_in);
    net.classifier_b.fill(F::zero());
}

impl<F: Real> Network<F> {
    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn parameters(&self) -> Vec<ArrayViewD<'_, F>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.conv_w.view().into_dyn());
            out.push(b.conv_b.view().into_dyn());
            if let Some(n) = &b.norm {
                out.push(n.gamma.view().into_dyn());
                out.push(n.beta.view().into_dyn());
            }
        }
        out.push(self.classifier_w.view().into_dyn());
        out.push(self.classifier_b.view().into_dyn());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(b.conv_w.view_mut().into_dyn());
            out.push(b.conv_b.view_mut().into_dyn());
            if let Some(n) = &mut b.norm {
                out.push(n.gamma.view_mut().into_dyn());
                out.push(n.beta.view_mut().into_dyn());
            }
        }
        out.push(self.classifier_w.view_mut().into_dyn());
        out.push(self.classifier_b.view_mut().into_dyn());
        out
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if [c, h, w] != self.spec.input {
            return Err(Error::param(format!(
                "batch shape {:?} does not match network input {:?}",
                [c, h, w],
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Forward pass without saving activations.
    pub fn forward_features(&self, x: &Array4<F>, tap: TapPoint, mode: Mode) -> Result<FeatureStack<F>> {
        self.run(x, tap, mode, false).map(|(f, _)| f)
    }

    /// Forward pass that also returns the tape needed by [`Network::backward`].
    pub fn forward_with_tape(&self, x: &Array4<F>, tap: TapPoint, mode: Mode) -> Result<(FeatureStack<F>, Tape<F>)> {
        self.run(x, tap, mode, true).map(|(f, t)| (f, t.unwrap()))
    }

    fn run(&self, x: &Array4<F>, tap: TapPoint, mode: Mode, record: bool) -> Result<(FeatureStack<F>, Option<Tape<F>>)> {
        self.check_input(x)?;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        let mut tapes = Vec::new();
        let mut h = x.clone();
        for b in &self.blocks {
            let conv = layers::conv3x3(&h, &b.conv_w, &b.conv_b);
            let (normed, cache) = match (&b.norm, self.spec.norm) {
                (Some(p), Norm::Batch) => {
                    let running = (mode == Mode::Eval).then_some((&p.running_mean, &p.running_var));
                    let (y, c) = layers::batch_norm(&conv, &p.gamma, &p.beta, running);
                    (y, Some(c))
                }
                (Some(p), n) => {
                    let (y, c) = layers::group_norm(&conv, groups(n, self.spec.width), &p.gamma, &p.beta);
                    (y, Some(c))
                }
                (None, _) => (conv, None),
            };
            let act = layers::activate(&normed, self.spec.activation);
            let (out, arg) = match self.spec.pooling {
                Pooling::None => (act.clone(), Vec::new()),
                p => layers::pool2(&act, p),
            };
            per_layer.push(match tap {
                TapPoint::PostPool => out.clone(),
                TapPoint::PrePool => act.clone(),
            });
            if record {
                tapes.push(BlockTape {
                    input: h,
                    norm: cache,
                    act_in: normed,
                    act_out: act,
                    pool_arg: arg,
                });
            }
            h = out;
        }
        let n = h.shape()[0];
        let embedding = h.into_shape_with_order((n, self.spec.embedding_size())).unwrap();
        let mut logits = embedding.dot(&self.classifier_w.t());
        logits += &self.classifier_b;
        let tape = record.then(|| Tape {
            tap,
            mode,
            blocks: tapes,
            embedding: embedding.clone(),
        });
        Ok((
            FeatureStack {
                per_layer,
                embedding,
                logits,
            },
            tape,
        ))
    }

    /// Back-propagates the injected gradients to the input batch and, optionally, the parameters.
    pub fn backward(&self, tape: &Tape<F>, grads: &FeatureGrads<F>, want_params: bool) -> Result<(Array4<F>, Option<Gradients<F>>)> {
        if grads.per_layer.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "{} layer gradients for {} blocks",
                grads.per_layer.len(),
                self.blocks.len()
            )));
        }
        let n = tape.embedding.nrows();
        let e = self.spec.embedding_size();
        let mut d_emb = Array2::<F>::zeros((n, e));
        let mut lin_grads = None;
        if let Some(dl) = &grads.logits {
            d_emb += &dl.dot(&self.classifier_w);
            if want_params {
                lin_grads = Some((dl.t().dot(&tape.embedding), dl.sum_axis(Axis(0))));
            }
        }
        if let Some(de) = &grads.embedding {
            d_emb += de;
        }
        let last = self.spec.block_shapes()[self.blocks.len() - 1];
        let mut g = d_emb.into_shape_with_order((n, last[0], last[1], last[2])).unwrap();

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (l, (b, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let injected = grads.per_layer[l].as_ref();
            if tape.tap == TapPoint::PostPool {
                if let Some(d) = injected {
                    g += d;
                }
            }
            let mut d_act = match self.spec.pooling {
                Pooling::None => g,
                p => layers::pool2_backward(&g, p, &bt.pool_arg, (bt.act_out.shape()[2], bt.act_out.shape()[3])),
            };
            if tape.tap == TapPoint::PrePool {
                if let Some(d) = injected {
                    d_act += d;
                }
            }
            let d_norm = layers::activate_backward(&bt.act_in, &bt.act_out, &d_act, self.spec.activation);
            let (d_conv, norm_grads) = match (&b.norm, &bt.norm) {
                (Some(p), Some(cache)) if self.spec.norm == Norm::Batch => {
                    layers::batch_norm_backward(&d_norm, cache, &p.gamma, tape.mode == Mode::Eval, want_params)
                }
                (Some(p), Some(cache)) => layers::group_norm_backward(
                    &d_norm,
                    cache,
                    groups(self.spec.norm, self.spec.width),
                    &p.gamma,
                    want_params,
                ),
                _ => (d_norm, None),
            };
            let (dx, conv_grads) = layers::conv3x3_backward(&bt.input, &b.conv_w, &d_conv, want_params);
            block_grads.push((conv_grads, norm_grads));
            g = dx;
        }

        let params = want_params.then(|| {
            let mut out = Vec::new();
            for (conv, norm) in block_grads.into_iter().rev() {
                let (dw, db) = conv.unwrap();
                out.push(dw.into_dyn());
                out.push(db.into_dyn());
                if let Some((dg, dbeta)) = norm {
                    out.push(dg.into_dyn());
                    out.push(dbeta.into_dyn());
                }
            }
            let (dw, db) = lin_grads.unwrap_or_else(|| {
                (
                    Array2::zeros(self.classifier_w.raw_dim()),
                    Array1::zeros(self.classifier_b.raw_dim()),
                )
            });
            out.push(dw.into_dyn());
            out.push(db.into_dyn());
            Gradients(out)
        });
        Ok((g, params))
    }

    /// Exponential moving update of batch-norm running statistics from a training-mode tape.
    pub fn update_running_stats(&mut self, tape: &Tape<F>, momentum: f64) {
        if self.spec.norm != Norm::Batch || tape.mode != Mode::Train {
            return;
        }
        let m = F::of(momentum);
        for (b, bt) in self.blocks.iter_mut().zip(&tape.blocks) {
            let (Some(p), Some(cache)) = (&mut b.norm, &bt.norm) else {
                continue;
            };
            let (n, _, h, w) = bt.act_in.dim();
            let count = (n * h * w) as f64;
            let unbias = F::of(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
            for ch in 0..p.running_mean.len() {
                p.running_mean[ch] = (F::one() - m) * p.running_mean[ch] + m * cache.mean[ch];
                p.running_var[ch] = (F::one() - m) * p.running_var[ch] + m * cache.var[ch] * unbias;
            }
        }
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::of(v.f64()));
        Network {
            spec: self.spec,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    conv_w: b.conv_w.mapv(|v| G::of(v.f64())),
                    conv_b: c1(&b.conv_b),
                    norm: b.norm.as_ref().map(|n| NormParams {
                        gamma: c1(&n.gamma),
                        beta: c1(&n.beta),
                        running_mean: c1(&n.running_mean),
                        running_var: c1(&n.running_var),
                    }),
                })
                .collect(),
            classifier_w: self.classifier_w.mapv(|v| G::of(v.f64())),
            classifier_b: c1(&self.classifier_b),
        }
    }
}

fn groups(norm: Norm, width: usize) -> usize {
    match norm {
        Norm::Layer => 1,
        Norm::Instance => width,
        Norm::Group => Norm::GROUPS,
        Norm::None | Norm::Batch => unreachable!("no channel groups for {norm:?}"),
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy<F: Real>(logits: &Array2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let n = logits.nrows();
    let mut grad = Array2::<F>::zeros(logits.raw_dim());
    let mut loss = F::zero();
    let inv_n = F::of(1.0 / n as f64);
    for (i, row) in logits.outer_iter().enumerate() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: F = exps.iter().copied().sum();
        loss += (z.ln() + m - row[labels[i]]) * inv_n;
        for (j, &e) in exps.iter().enumerate() {
            let p = e / z;
            grad[[i, j]] = (p - if j == labels[i] { F::one() } else { F::zero() }) * inv_n;
        }
    }
    (loss, grad)
}
