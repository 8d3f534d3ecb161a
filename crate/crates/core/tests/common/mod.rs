#![allow(dead_code)]

use atom_distill::model::FeatureStack;
use ndarray::{Array2, Array4};

/// Attention sums are defined in ascending order of their terms.
pub fn ascending_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    let mut s = 0.0;
    for t in terms {
        s += t;
    }
    s
}

pub fn brute_spatial(f: &Array4<f64>, p: i32) -> Vec<Vec<f64>> {
    let (b, c, h, w) = f.dim();
    let mut out = vec![vec![0.0; h * w]; b];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut terms = Vec::new();
                for ch in 0..c {
                    terms.push(f[[n, ch, y, x]].abs().powi(p));
                }
                out[n][y * w + x] = ascending_sum(terms);
            }
        }
    }
    out
}

pub fn brute_channel(f: &Array4<f64>, p: i32) -> Vec<Vec<f64>> {
    let (b, c, h, w) = f.dim();
    let mut out = vec![vec![0.0; c]; b];
    for n in 0..b {
        for ch in 0..c {
            let mut terms = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    terms.push(f[[n, ch, y, x]].abs().powi(p));
                }
            }
            out[n][ch] = ascending_sum(terms);
        }
    }
    out
}

pub fn brute_mean_normalized(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        for (acc, v) in m.iter_mut().zip(r) {
            *acc += v / norm / rows.len() as f64;
        }
    }
    m
}

pub fn stack(f: Array4<f64>) -> FeatureStack<f64> {
    let n = f.shape()[0];
    let emb = f.clone().into_shape_with_order((n, f.len() / n)).unwrap();
    FeatureStack {
        per_layer: vec![f],
        embedding: emb,
        logits: Array2::zeros((n, 1)),
    }
}
