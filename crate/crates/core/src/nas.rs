//! Architecture ranking on a distilled proxy set.
//!
//! Each candidate ConvNet is trained on the proxy set and scored on a
//! validation split; the resulting ranking is compared with a reference
//! ranking (typically from training on full data) by Spearman's ρ.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledImageSet, SyntheticDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_images, EvalProtocol};
use crate::model::{Activation, ConvNetSpec, Norm, Pooling, DEPTHS, WIDTHS};
use crate::real::Real;

/// Accuracies closer than this count as tied.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Axes of a ConvNet grid; specs are enumerated depth-major in this field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub norms: Vec<Norm>,
    pub poolings: Vec<Pooling>,
}

impl SearchGrid {
    /// The full 4·4·3·5·3 grid.
    pub fn full() -> Self {
        SearchGrid {
            depths: DEPTHS.to_vec(),
            widths: WIDTHS.to_vec(),
            activations: Activation::ALL.to_vec(),
            norms: Norm::ALL.to_vec(),
            poolings: Pooling::ALL.to_vec(),
        }
    }

    /// Depth {2, 3} × width {32, 64} × ReLU × {instance, none} × avg.
    pub fn desk() -> Self {
        SearchGrid {
            depths: vec![2, 3],
            widths: vec![32, 64],
            activations: vec![Activation::Relu],
            norms: vec![Norm::Instance, Norm::None],
            poolings: vec![Pooling::Avg],
        }
    }

    pub fn len(&self) -> usize {
        self.depths.len() * self.widths.len() * self.activations.len() * self.norms.len() * self.poolings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn specs(&self, input: [usize; 3], num_classes: usize) -> Vec<ConvNetSpec> {
        let mut out = Vec::with_capacity(self.len());
        for &depth in &self.depths {
            for &width in &self.widths {
                for &activation in &self.activations {
                    for &norm in &self.norms {
                        for &pooling in &self.poolings {
                            out.push(ConvNetSpec {
                                depth,
                                width,
                                activation,
                                norm,
                                pooling,
                                input,
                                num_classes,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Every grid point for the given data shape, in canonical order.
pub fn enumerate_search_space(input: [usize; 3], num_classes: usize) -> Vec<ConvNetSpec> {
    SearchGrid::full().specs(input, num_classes)
}

/// `1 − 6Σd²/(n(n²−1))` for two tie-free rankings of `1..=n`.
pub fn spearman(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    let n = rank_a.len();
    if n != rank_b.len() {
        return Err(Error::param(format!("rankings have lengths {n} and {}", rank_b.len())));
    }
    if n < 2 {
        return Err(Error::param("spearman needs at least two ranked items"));
    }
    for r in [rank_a, rank_b] {
        let mut seen = vec![false; n + 1];
        for &x in r {
            if x == 0 || x > n || std::mem::replace(&mut seen[x], true) {
                return Err(Error::param(format!("{r:?} is not a permutation of 1..={n}")));
            }
        }
    }
    let d2: f64 = rank_a.iter().zip(rank_b).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Ranks by descending accuracy starting at 1; entries without an accuracy get no rank.
/// Accuracies within [`TIE_TOLERANCE`] are tied and resolved by list order.
/// Returns the ranks and whether each entry was involved in a tie.
pub fn assign_ranks(accs: &[Option<f64>]) -> (Vec<Option<usize>>, Vec<bool>) {
    let key = |a: f64| (a / TIE_TOLERANCE).round() as i64;
    let mut ok: Vec<(usize, i64)> = accs
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.filter(|v| v.is_finite()).map(|v| (i, key(v))))
        .collect();
    ok.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ranks = vec![None; accs.len()];
    let mut tied = vec![false; accs.len()];
    for (r, &(i, k)) in ok.iter().enumerate() {
        ranks[i] = Some(r + 1);
        tied[i] = ok.iter().filter(|&&(_, k2)| k2 == k).count() > 1;
    }
    (ranks, tied)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NasRecord {
    pub spec: String,
    pub proxy_acc: Option<f64>,
    pub ref_acc: Option<f64>,
    pub rank_proxy: Option<usize>,
    pub rank_ref: Option<usize>,
    /// `ok`, `tie` or `failed: <reason>`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NasResult {
    pub records: Vec<NasRecord>,
    /// Over specs that succeeded on both sides; `None` with fewer than two.
    pub spearman_rho: Option<f64>,
    pub proxy_seconds: f64,
}

impl NasResult {
    pub const CSV_HEADER: &'static str = "spec,proxy_acc,ref_acc,rank_proxy,rank_ref,status";

    /// One row per spec plus a `summary` row with ρ and total proxy time.
    pub fn to_csv(&self) -> String {
        let opt_f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let opt_u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let status = if r.status.contains(',') {
                format!("\"{}\"", r.status.replace('"', "'"))
            } else {
                r.status.clone()
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.spec,
                opt_f(r.proxy_acc),
                opt_f(r.ref_acc),
                opt_u(r.rank_proxy),
                opt_u(r.rank_ref),
                status
            );
        }
        let rho = self.spearman_rho.map(|r| format!("{r:.6}")).unwrap_or_else(|| "nan".into());
        let _ = writeln!(s, "summary,rho={rho},time_s={:.3},,,", self.proxy_seconds);
        s
    }
}

fn train_all<F: Real>(
    specs: &[ConvNetSpec],
    images: &ndarray::Array4<F>,
    labels: &[usize],
    val: &LabeledImageSet<F>,
    proto: &EvalProtocol,
) -> Vec<Result<f64>> {
    specs
        .iter()
        .map(|spec| evaluate_images(images, labels, val, proto, spec).map(|r| r.mean_acc))
        .collect()
}

/// Validation accuracy of every spec trained on a full labeled set; failures are `None`.
pub fn reference_accuracies<F: Real>(
    specs: &[ConvNetSpec],
    train: &LabeledImageSet<F>,
    val: &LabeledImageSet<F>,
    proto: &EvalProtocol,
) -> Vec<Option<f64>> {
    train_all(specs, train.images(), train.labels(), val, proto)
        .into_iter()
        .map(|r| r.ok())
        .collect()
}

/// Trains every spec on `proxy`, ranks them and, given reference accuracies, correlates the rankings.
///
/// A spec whose training fails is reported as failed and excluded from ρ.
pub fn rank_on_proxy<F: Real>(
    specs: &[ConvNetSpec],
    proxy: &SyntheticDataset<F>,
    val: &LabeledImageSet<F>,
    proto: &EvalProtocol,
    reference: Option<&[Option<f64>]>,
) -> Result<NasResult> {
    if specs.is_empty() {
        return Err(Error::param("no specs to rank"));
    }
    if let Some(r) = reference {
        if r.len() != specs.len() {
            return Err(Error::param(format!("{} reference accuracies for {} specs", r.len(), specs.len())));
        }
    }
    let started = Instant::now();
    let outcomes = train_all(specs, &proxy.images, proxy.labels(), val, proto);
    let proxy_seconds = started.elapsed().as_secs_f64();
    let proxy_accs: Vec<Option<f64>> = outcomes.iter().map(|r| r.as_ref().ok().copied()).collect();
    let ref_accs: Vec<Option<f64>> = reference.map(<[_]>::to_vec).unwrap_or_else(|| vec![None; specs.len()]);
    let (rank_proxy, tied) = assign_ranks(&proxy_accs);
    let (rank_ref, _) = assign_ranks(&ref_accs);

    let both: Vec<usize> = (0..specs.len())
        .filter(|&i| proxy_accs[i].is_some() && ref_accs[i].is_some())
        .collect();
    let spearman_rho = if both.len() >= 2 {
        let sub = |accs: &[Option<f64>]| -> Vec<usize> {
            let picked: Vec<Option<f64>> = both.iter().map(|&i| accs[i]).collect();
            assign_ranks(&picked).0.into_iter().map(|r| r.unwrap()).collect()
        };
        Some(spearman(&sub(&proxy_accs), &sub(&ref_accs))?)
    } else {
        None
    };

    let records = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| NasRecord {
            spec: spec.canonical(),
            proxy_acc: proxy_accs[i],
            ref_acc: ref_accs[i],
            rank_proxy: rank_proxy[i],
            rank_ref: rank_ref[i],
            status: match &outcomes[i] {
                Err(e) => format!("failed: {e}"),
                Ok(_) if tied[i] => "tie".into(),
                Ok(_) => "ok".into(),
            },
        })
        .collect();
    Ok(NasResult {
        records,
        spearman_rho,
        proxy_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn grid_sizes() {
        let all = enumerate_search_space([3, 32, 32], 10);
        assert_eq!(all.len(), 720);
        let names: HashSet<String> = all.iter().map(|s| s.canonical()).collect();
        assert_eq!(names.len(), 720);
        assert_eq!(SearchGrid::desk().specs([3, 8, 8], 2).len(), 8);
        let small = SearchGrid {
            depths: vec![1, 2],
            widths: vec![32, 64],
            activations: vec![Activation::Relu],
            norms: vec![Norm::None],
            poolings: vec![Pooling::Avg],
        };
        assert_eq!(small.specs([3, 8, 8], 2).len(), 4);
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(spearman(&[1, 2], &[2, 1]).unwrap(), -1.0);
        assert_eq!(spearman(&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1]).unwrap(), -1.0);
        assert!((spearman(&[1, 2, 3, 4, 5], &[2, 1, 4, 3, 5]).unwrap() - 0.8).abs() < 1e-15);
        assert!(spearman(&[1, 2], &[1, 2, 3]).is_err());
        assert!(spearman(&[1, 1, 2], &[1, 2, 3]).is_err());
    }

    #[test]
    fn ranks_with_ties_and_failures() {
        let (r, t) = assign_ranks(&[Some(50.0), None, Some(70.0), Some(50.0 + 1e-9)]);
        assert_eq!(r, vec![Some(2), None, Some(1), Some(3)]);
        assert_eq!(t, vec![true, false, false, true]);
    }

    #[test]
    fn csv_layout() {
        let res = NasResult {
            records: vec![NasRecord {
                spec: "D1-W32-relu-none-avg".into(),
                proxy_acc: Some(55.0),
                ref_acc: None,
                rank_proxy: Some(1),
                rank_ref: None,
                status: "ok".into(),
            }],
            spearman_rho: None,
            proxy_seconds: 1.5,
        };
        let csv = res.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], NasResult::CSV_HEADER);
        assert_eq!(lines[1], "D1-W32-relu-none-avg,55.0000,,1,,ok");
        assert!(lines[2].starts_with("summary,rho=nan"));
    }
}
