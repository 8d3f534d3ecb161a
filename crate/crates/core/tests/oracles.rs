//! Library results against independent scalar-loop implementations.

use atom_distill::attention::{
    atom_loss, channel_attention, mmd_loss, spatial_attention, total_loss, AtomParams, MatchMode,
};
use atom_distill::data::{init_synthetic, toy_fixture_raw, ClassSampler, LabeledImageSet, PreprocessRecord};
use atom_distill::distill::{step, DistillConfig, DistillState};
use atom_distill::model::{
    build_network, Activation, ConvNetSpec, Encoder, FeatureStack, Mode, Norm, Pooling, TapPoint,
};
use atom_distill::nas::spearman;
use atom_distill::rng::{stream, Stream};
use ndarray::{Array2, Array4};
use rand::{Rng, RngCore};

mod common;
use common::{brute_channel, brute_mean_normalized, brute_spatial, stack};

#[test]
fn attention_examples() {
    let f = Array4::from_shape_vec((1, 2, 1, 1), vec![3.0, -4.0]).unwrap();
    assert_eq!(spatial_attention(&f, 2.0).unwrap().values[[0, 0]], 25.0);
    let g = Array4::from_shape_vec((1, 1, 2, 1), vec![3.0, -4.0]).unwrap();
    assert_eq!(channel_attention(&g, 2.0).unwrap().values[[0, 0]], 25.0);
    let single = Array4::from_shape_vec((1, 1, 2, 2), vec![1.5, -2.0, 0.0, -0.25]).unwrap();
    let a = spatial_attention(&single, 1.0).unwrap().values;
    assert_eq!(a.iter().copied().collect::<Vec<_>>(), vec![1.5, 2.0, 0.0, 0.25]);
}

#[test]
fn attention_matches_brute_force_on_small_tensors() {
    let mut rng = stream(1, Stream::Init);
    let shapes = [(1, 2, 2, 2), (2, 2, 1, 2), (1, 1, 2, 4), (2, 4, 1, 1), (1, 8, 1, 1), (1, 1, 1, 8)];
    for &(b, c, h, w) in &shapes {
        for p in 1..=4 {
            let f = Array4::from_shape_simple_fn((b, c, h, w), || rng.random_range(-2.0..2.0));
            let s = spatial_attention(&f, p as f64).unwrap().values;
            let ch = channel_attention(&f, p as f64).unwrap().values;
            let bs = brute_spatial(&f, p);
            let bc = brute_channel(&f, p);
            for n in 0..b {
                assert_eq!(s.row(n).to_vec(), bs[n], "spatial p={p} shape {:?}", (b, c, h, w));
                assert_eq!(ch.row(n).to_vec(), bc[n], "channel p={p} shape {:?}", (b, c, h, w));
            }
        }
    }
}

#[test]
fn atom_loss_matches_hand_computation() {
    // C=2, H=W=1: spatial rows are scalars (normalized to 1), channel rows are 2-vectors.
    let real = Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
    let syn = Array4::from_shape_vec((1, 2, 1, 1), vec![2.0, -1.0]).unwrap();
    let params = AtomParams {
        p_s: 2.0,
        p_c: 2.0,
        mode: MatchMode::Channel,
        ..AtomParams::default()
    };
    let (loss, _) = atom_loss(&[stack(real.clone())], &[stack(syn.clone())], &params).unwrap();
    // channel: real [1, 4]/√17, syn [4, 1]/√17 → squared distance 2·9/17.
    assert!((loss - 18.0 / 17.0).abs() < 1e-12);
    let both = AtomParams {
        mode: MatchMode::Both,
        ..params
    };
    let (loss, _) = atom_loss(&[stack(real)], &[stack(syn)], &both).unwrap();
    assert!((loss - 18.0 / 17.0).abs() < 1e-12);
}

#[test]
fn atom_loss_matches_brute_force_over_classes_and_layers() {
    let mut rng = stream(2, Stream::Init);
    let mut rand4 = |s: (usize, usize, usize, usize)| Array4::from_shape_simple_fn(s, || rng.random_range(-1.5..1.5));
    for p in [1, 2, 3, 4] {
        let mut real = Vec::new();
        let mut syn = Vec::new();
        for _ in 0..3 {
            let r = FeatureStack {
                per_layer: vec![rand4((3, 2, 2, 2)), rand4((3, 4, 1, 1))],
                embedding: Array2::zeros((3, 4)),
                logits: Array2::zeros((3, 1)),
            };
            let s = FeatureStack {
                per_layer: vec![rand4((2, 2, 2, 2)), rand4((2, 4, 1, 1))],
                embedding: Array2::zeros((2, 4)),
                logits: Array2::zeros((2, 1)),
            };
            real.push(r);
            syn.push(s);
        }
        let params = AtomParams {
            p_s: p as f64,
            p_c: p as f64,
            ..AtomParams::default()
        };
        let (loss, per_layer) = atom_loss(&real, &syn, &params).unwrap();
        let mut expect = 0.0;
        let mut expect_layers = vec![0.0; 2];
        for (r, s) in real.iter().zip(&syn) {
            for l in 0..2 {
                for brute in [brute_spatial, brute_channel] {
                    let mr = brute_mean_normalized(&brute(&r.per_layer[l], p));
                    let ms = brute_mean_normalized(&brute(&s.per_layer[l], p));
                    let d: f64 = mr.iter().zip(&ms).map(|(a, b)| (a - b).powi(2)).sum();
                    expect += d;
                    expect_layers[l] += d;
                }
            }
        }
        assert!((loss - expect).abs() < 1e-12, "p={p}: {loss} vs {expect}");
        for (a, b) in per_layer.iter().zip(&expect_layers) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mmd_and_total_examples() {
    let real = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
    let syn = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
    assert_eq!(mmd_loss(&[real.clone()], &[syn]).unwrap(), 2.0);
    assert_eq!(mmd_loss(&[real.clone()], &[real]).unwrap(), 0.0);
    let t = total_loss(1.0, 2.0, 0.01).unwrap();
    assert_eq!(t.total, 1.0 + 0.01 * 2.0);
    assert!((t.total - 1.02).abs() < 1e-15);
    assert_eq!(total_loss(1.5, 3.0, 0.0).unwrap().total, 1.5);
    assert!(total_loss(1.0, 1.0, -0.1).is_err());
}

#[test]
fn spearman_matches_formula() {
    assert!((spearman(&[1, 2, 3, 4], &[1, 3, 2, 4]).unwrap() - 0.8).abs() < 1e-12);
    let mut rng = stream(3, Stream::Init);
    for n in 2..9usize {
        let mut b: Vec<usize> = (1..=n).collect();
        for i in (1..n).rev() {
            b.swap(i, rng.random_range(0..=i));
        }
        let a: Vec<usize> = (1..=n).collect();
        let d2: usize = a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y).pow(2)).sum();
        let expect = 1.0 - 6.0 * d2 as f64 / (n * (n * n - 1)) as f64;
        assert!((spearman(&a, &b).unwrap() - expect).abs() < 1e-12);
    }
}

/// Scalar-loop forward, loss and gradient of one distillation step for a
/// 1-block ConvNet (conv 3×3, no norm, ReLU, 2×2 average pooling).
struct OracleNet {
    w: Vec<f64>,
    b: Vec<f64>,
    c_in: usize,
    c_out: usize,
    size: usize,
}

struct OracleForward {
    z: Vec<f64>,
    f: Vec<f64>,
}

impl OracleNet {
    fn widx(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + c) * 3 + ky) * 3 + kx
    }

    fn forward(&self, x: &[f64]) -> OracleForward {
        let (n, h) = (self.size, self.size / 2);
        let mut z = vec![0.0; self.c_out * n * n];
        for o in 0..self.c_out {
            for i in 0..n {
                for j in 0..n {
                    let mut s = self.b[o];
                    for c in 0..self.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (y, xx) = (i as i64 + ky as i64 - 1, j as i64 + kx as i64 - 1);
                                if y >= 0 && xx >= 0 && (y as usize) < n && (xx as usize) < n {
                                    s += self.w[self.widx(o, c, ky, kx)] * x[(c * n + y as usize) * n + xx as usize];
                                }
                            }
                        }
                    }
                    z[(o * n + i) * n + j] = s;
                }
            }
        }
        let mut f = vec![0.0; self.c_out * h * h];
        for o in 0..self.c_out {
            for p in 0..h {
                for q in 0..h {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += z[(o * n + 2 * p + di) * n + 2 * q + dj].max(0.0);
                        }
                    }
                    f[(o * h + p) * h + q] = 0.25 * s;
                }
            }
        }
        OracleForward { z, f }
    }

    /// Normalized spatial and channel attention with p = 4.
    fn attn(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let hw = (self.size / 2).pow(2);
        let mut s = vec![0.0; hw];
        let mut t = vec![0.0; self.c_out];
        for o in 0..self.c_out {
            for k in 0..hw {
                let v = f[o * hw + k].powi(4);
                s[k] += v;
                t[o] += v;
            }
        }
        let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        (
            s.iter().map(|v| v / ns).collect(),
            t.iter().map(|v| v / nt).collect(),
            s,
            t,
        )
    }

    /// Loss and input gradient for one class with single-image batches.
    fn class_step(&self, real: &[f64], syn: &[f64], lambda: f64) -> (f64, Vec<f64>) {
        let hw = (self.size / 2).pow(2);
        let fr = self.forward(real);
        let fs = self.forward(syn);
        let (ur, vr, _, _) = self.attn(&fr.f);
        let (us, vs, s, t) = self.attn(&fs.f);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let loss = sq(&us, &ur) + sq(&vs, &vr) + lambda * sq(&fs.f, &fr.f);

        // d/ds of ‖s/‖s‖ − u_r‖².
        let norm_back = |raw: &[f64], u: &[f64], target: &[f64]| -> Vec<f64> {
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            let gu: Vec<f64> = u.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            let dot: f64 = gu.iter().zip(u).map(|(g, v)| g * v).sum();
            gu.iter().zip(u).map(|(g, v)| (g - v * dot) / n).collect()
        };
        let gs = norm_back(&s, &us, &ur);
        let gt = norm_back(&t, &vs, &vr);
        let mut gf = vec![0.0; self.c_out * hw];
        for o in 0..self.c_out {
            for k in 0..hw {
                let i = o * hw + k;
                gf[i] = (gs[k] + gt[o]) * 4.0 * fs.f[i].powi(3) + lambda * 2.0 * (fs.f[i] - fr.f[i]);
            }
        }

        let (n, h) = (self.size, self.size / 2);
        let mut gz = vec![0.0; self.c_out * n * n];
        for o in 0..self.c_out {
            for i in 0..n {
                for j in 0..n {
                    let zi = (o * n + i) * n + j;
                    if fs.z[zi] > 0.0 {
                        gz[zi] = 0.25 * gf[(o * h + i / 2) * h + j / 2];
                    }
                }
            }
        }
        let mut gx = vec![0.0; self.c_in * n * n];
        for o in 0..self.c_out {
            for i in 0..n {
                for j in 0..n {
                    let g = gz[(o * n + i) * n + j];
                    for c in 0..self.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (y, xx) = (i as i64 + ky as i64 - 1, j as i64 + kx as i64 - 1);
                                if y >= 0 && xx >= 0 && (y as usize) < n && (xx as usize) < n {
                                    gx[(c * n + y as usize) * n + xx as usize] += self.w[self.widx(o, c, ky, kx)] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        (loss, gx)
    }
}

#[test]
fn one_step_matches_scalar_loop_oracle() {
    let (images, labels) = toy_fixture_raw::<f64>(3, 17);
    let real = LabeledImageSet::new(images, labels, 2, PreprocessRecord::identity([3, 8, 8])).unwrap();
    let mut cfg = DistillConfig::new(1);
    cfg.iterations = 1;
    cfg.batch_real = 1;
    cfg.augment = false;
    cfg.seed = 5;
    cfg.lr_images = Some(0.7);
    cfg.encoder = Encoder {
        depth: Some(1),
        width: 32,
        activation: Activation::Relu,
        norm: Norm::None,
        pooling: Pooling::Avg,
    };

    let spec = cfg.spec_for([3, 8, 8], 2);
    let net = build_network::<f64>(&spec, stream(cfg.seed, Stream::Network).next_u64()).unwrap();
    let oracle = OracleNet {
        w: net.blocks[0].conv_w.iter().copied().collect(),
        b: net.blocks[0].conv_b.to_vec(),
        c_in: 3,
        c_out: 32,
        size: 8,
    };
    let mut sampler = ClassSampler::new(2, stream(cfg.seed, Stream::Batch));
    let init = init_synthetic(&real, 1, cfg.seed).unwrap();

    let mut expected = Vec::new();
    let mut expected_loss = 0.0;
    let mut any_distinct = false;
    for k in 0..2 {
        let pos = sampler.next_positions(3, k, 1).unwrap()[0];
        let r: Vec<f64> = real.select(&[real.class_indices(k)[pos]]).iter().copied().collect();
        let s: Vec<f64> = init.images.index_axis(ndarray::Axis(0), k).iter().copied().collect();
        any_distinct |= r != s;
        let (loss, g) = oracle.class_step(&r, &s, cfg.lambda);
        expected_loss += loss;
        expected.extend(s.iter().zip(&g).map(|(x, gi)| x - 0.7 * gi));
    }
    assert!(any_distinct, "fixture should pair at least one class with a different real image");

    let mut state = DistillState::new(&cfg, &real).unwrap();
    let rec = step(&mut state, &cfg, &real).unwrap();
    assert!((rec.loss.total - expected_loss).abs() < 1e-10, "{} vs {expected_loss}", rec.loss.total);
    let got: Vec<f64> = state.synthetic.images.iter().copied().collect();
    let worst = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "max pixel deviation {worst}");
    for ((v, x1), x0) in state.momentum.iter().zip(&got).zip(init.images.iter()) {
        assert!((x0 - x1 - 0.7 * v).abs() < 1e-12);
    }
}

#[test]
fn network_shapes_follow_spec() {
    let spec = ConvNetSpec::default_for([3, 32, 32], 10);
    let shapes: Vec<usize> = spec.block_shapes().iter().map(|s| s[1]).collect();
    assert_eq!(shapes, vec![16, 8, 4]);
    assert_eq!(spec.embedding_size(), 128 * 4 * 4);
    let net = build_network::<f32>(&spec, 0).unwrap();
    let feats = net
        .forward_features(&Array4::zeros((2, 3, 32, 32)), TapPoint::PostPool, Mode::Eval)
        .unwrap();
    assert_eq!(feats.per_layer.len(), 3);
    assert_eq!(feats.embedding.dim(), (2, 2048));
    assert_eq!(feats.logits.dim(), (2, 10));
    assert_eq!(ConvNetSpec::default_for([3, 64, 64], 200).block_shapes().last().unwrap()[1], 4);
}
