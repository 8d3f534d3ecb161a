//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use atom_distill::attention::{atom_loss, channel_attention, mmd_loss, spatial_attention, total_loss, AtomParams, MatchMode};
use atom_distill::data::{load_dataset_with, DatasetSplits, LoadOptions, SyntheticDataset};
use atom_distill::distill::{distill, moving_average, resume, step, DistillConfig, DistillState};
use atom_distill::eval::{evaluate, random_baseline, EvalProtocol, EvalReport};
use atom_distill::gradcheck::{run_gradcheck, GradcheckConfig};
use atom_distill::model::{FeatureStack, Norm};
use atom_distill::nas::{enumerate_search_space, spearman};
use atom_distill::rng::{stream, Stream};
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

mod common;
use common::{brute_channel, brute_mean_normalized, brute_spatial, stack};

type Outcome = Result<String, String>;

fn toy() -> DatasetSplits<f32> {
    load_dataset_with("toy-fixture", Path::new("."), &LoadOptions::default()).unwrap()
}

fn toy_config(seed: u64, mode: MatchMode) -> DistillConfig {
    let mut cfg = DistillConfig::new(1);
    cfg.iterations = 200;
    cfg.seed = seed;
    cfg.batch_real = 32;
    cfg.atom.mode = mode;
    cfg
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default().with_tolerance(1e-4)).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = report.suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    check(
        report.passed() && secs < 60.0 && report.suites.len() == 10,
        format!("{} suites, worst relative error {worst:.2e}, failing {:?}, {secs:.2}s", report.suites.len(), report.failing()),
    )
}

fn oracles() -> Outcome {
    let mut rng = stream(11, Stream::Init);
    let mut tensors = 0;
    for _ in 0..200 {
        let (b, c) = (rng.random_range(1..=2usize), rng.random_range(1..=4usize));
        let h = rng.random_range(1..=2usize);
        let w = rng.random_range(1..=(8 / (b * c * h)).max(1)).min(8 / (b * c * h).max(1)).max(1);
        if b * c * h * w > 8 {
            continue;
        }
        let f = Array4::from_shape_simple_fn((b, c, h, w), || rng.random_range(-3.0..3.0));
        for p in 1..=4 {
            let s = spatial_attention(&f, p as f64).unwrap().values;
            let ch = channel_attention(&f, p as f64).unwrap().values;
            let (bs, bc) = (brute_spatial(&f, p), brute_channel(&f, p));
            for n in 0..b {
                if s.row(n).to_vec() != bs[n] || ch.row(n).to_vec() != bc[n] {
                    return Err(format!("attention differs from the scalar loop on shape {:?}", f.dim()));
                }
            }
        }
        tensors += 1;
    }
    let v = Array4::from_shape_vec((1, 2, 1, 1), vec![3.0, -4.0]).unwrap();
    let a25 = spatial_attention(&v, 2.0).unwrap().values[[0, 0]];
    let v = Array4::from_shape_vec((1, 1, 1, 2), vec![3.0, -4.0]).unwrap();
    let c25 = channel_attention(&v, 2.0).unwrap().values[[0, 0]];
    if a25 != 25.0 || c25 != 25.0 {
        return Err(format!("attention on [3, -4] gave {a25} and {c25}"));
    }

    let mut worst_loss = 0.0f64;
    for trial in 0..100 {
        let p = 1 + trial % 4;
        let mut rand4 = |s: (usize, usize, usize, usize)| Array4::from_shape_simple_fn(s, || rng.random_range(-1.5..1.5));
        let mk = |per_layer: Vec<Array4<f64>>, emb: Array2<f64>| FeatureStack {
            per_layer,
            embedding: emb,
            logits: Array2::zeros((1, 1)),
        };
        let real: Vec<FeatureStack<f64>> = (0..2)
            .map(|_| mk(vec![rand4((3, 2, 2, 2)), rand4((3, 4, 1, 1))], rand4((3, 5, 1, 1)).into_shape_with_order((3, 5)).unwrap()))
            .collect();
        let syn: Vec<FeatureStack<f64>> = (0..2)
            .map(|_| mk(vec![rand4((2, 2, 2, 2)), rand4((2, 4, 1, 1))], rand4((2, 5, 1, 1)).into_shape_with_order((2, 5)).unwrap()))
            .collect();
        let params = AtomParams {
            p_s: p as f64,
            p_c: p as f64,
            mode: MatchMode::Both,
            ..AtomParams::default()
        };
        let (loss, _) = atom_loss(&real, &syn, &params).unwrap();
        let mut expect = 0.0;
        let mut expect_mmd = 0.0;
        for (r, s) in real.iter().zip(&syn) {
            for l in 0..2 {
                for brute in [brute_spatial, brute_channel] {
                    let mr = brute_mean_normalized(&brute(&r.per_layer[l], p as i32));
                    let ms = brute_mean_normalized(&brute(&s.per_layer[l], p as i32));
                    expect += mr.iter().zip(&ms).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
            }
            for j in 0..5 {
                let mr = r.embedding.column(j).iter().sum::<f64>() / 3.0;
                let ms = s.embedding.column(j).iter().sum::<f64>() / 2.0;
                expect_mmd += (mr - ms).powi(2);
            }
        }
        let emb = |v: &[FeatureStack<f64>]| v.iter().map(|s| s.embedding.clone()).collect::<Vec<_>>();
        let mmd = mmd_loss(&emb(&real), &emb(&syn)).unwrap();
        let total = total_loss(loss, mmd, 0.01).unwrap().total;
        worst_loss = worst_loss
            .max((loss - expect).abs())
            .max((mmd - expect_mmd).abs())
            .max((total - (expect + 0.01 * expect_mmd)).abs());
    }

    let rho = spearman(&[1, 2, 3, 4], &[1, 3, 2, 4]).unwrap();
    let mut worst_rho = (rho - 0.8).abs();
    for n in 2..20usize {
        let a: Vec<usize> = (1..=n).collect();
        let mut b = a.clone();
        b.shuffle(&mut rng);
        let d2: usize = a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y).pow(2)).sum();
        let expect = 1.0 - 6.0 * d2 as f64 / (n * (n * n - 1)) as f64;
        worst_rho = worst_rho.max((spearman(&a, &b).unwrap() - expect).abs());
    }
    check(
        worst_loss <= 1e-12 && worst_rho <= 1e-12,
        format!("{tensors} tensors exact, attention [3,-4] = 25, rho = {rho}, loss deviation {worst_loss:.1e}, rho deviation {worst_rho:.1e}"),
    )
}

fn random_features(rng: &mut impl Rng) -> Array4<f64> {
    let dims = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=4), rng.random_range(1..=4));
    let scale: f64 = rng.random_range(0.1..4.0);
    Array4::from_shape_simple_fn(dims, || rng.random_range(-scale..scale))
}

fn invariances() -> Outcome {
    const TRIALS: usize = 1000;
    let mut rng = stream(12, Stream::Init);
    let modes = [MatchMode::Spatial, MatchMode::Channel, MatchMode::Both];
    let mut drift = 0.0f64;
    for t in 0..TRIALS {
        let r = random_features(&mut rng);
        let (_, c, h, w) = r.dim();
        let s = Array4::from_shape_simple_fn((rng.random_range(1..=3), c, h, w), || rng.random_range(-2.0..2.0));
        let k: f64 = 10f64.powf(rng.random_range(-1.0..1.0));
        let params = AtomParams {
            mode: modes[t % 3],
            p_s: rng.random_range(1..=4) as f64,
            p_c: rng.random_range(1..=4) as f64,
            ..AtomParams::default()
        };
        let (a, _) = atom_loss(&[stack(r.clone())], &[stack(s.clone())], &params).unwrap();
        let (b, _) = atom_loss(&[stack(r.mapv(|v| v * k))], &[stack(s.mapv(|v| v * k))], &params).unwrap();
        drift = drift.max((a - b).abs());
    }

    let mut perm_failures = 0;
    for _ in 0..TRIALS {
        let f = random_features(&mut rng);
        let (b, c, h, w) = f.dim();
        let p = rng.random_range(1..=4) as f64;
        let mut sp: Vec<usize> = (0..h * w).collect();
        sp.shuffle(&mut rng);
        let g = Array4::from_shape_fn((b, c, h, w), |(i, ch, y, x)| f[[i, ch, sp[y * w + x] / w, sp[y * w + x] % w]]);
        if channel_attention(&f, p).unwrap().values != channel_attention(&g, p).unwrap().values {
            perm_failures += 1;
        }
        let mut cp: Vec<usize> = (0..c).collect();
        cp.shuffle(&mut rng);
        if spatial_attention(&f, p).unwrap().values != spatial_attention(&f.select(Axis(1), &cp), p).unwrap().values {
            perm_failures += 1;
        }
    }

    let mut zero = 0.0f64;
    for t in 0..TRIALS {
        let f = random_features(&mut rng);
        let params = AtomParams {
            mode: modes[t % 3],
            ..AtomParams::default()
        };
        zero = zero.max(atom_loss(&[stack(f.clone())], &[stack(f)], &params).unwrap().0.abs());
    }
    check(
        drift <= 1e-8 && perm_failures == 0 && zero <= 1e-10,
        format!("{TRIALS} trials each: scale drift {drift:.1e}, permutation mismatches {perm_failures}, identical-batch loss {zero:.1e}"),
    )
}

fn trend(data: &DatasetSplits<f32>) -> Outcome {
    let t = Instant::now();
    let cfg = toy_config(0, MatchMode::Both);
    let out = distill(&cfg, &data.train).map_err(|e| e.to_string())?;
    let ma = moving_average(&out.metrics, 100);
    let (first, last) = (ma[0], *ma.last().unwrap());
    let proto = EvalProtocol::default();
    let distilled = evaluate(&out.synthetic, &data.test, &proto).map_err(|e| e.to_string())?;
    let random = evaluate(&random_baseline(&data.train, 1, 0).unwrap(), &data.test, &proto).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let margin = distilled.mean_acc - random.mean_acc;
    check(
        last < first && margin > 0.0 && secs < 600.0 && distilled.per_model.len() == 5,
        format!(
            "loss {first:.4} -> {last:.4}, distilled {} vs random {}, margin {margin:+.2}, {secs:.1}s",
            distilled.summary(),
            random.summary()
        ),
    )
}

fn ablation(data: &DatasetSplits<f32>) -> Outcome {
    let mut means = Vec::new();
    for mode in [MatchMode::Spatial, MatchMode::Channel, MatchMode::Both] {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let out = distill(&toy_config(seed, mode), &data.train).map_err(|e| e.to_string())?;
            let proto = EvalProtocol {
                seed,
                ..EvalProtocol::default()
            };
            accs.push(evaluate(&out.synthetic, &data.test, &proto).map_err(|e| e.to_string())?.mean_acc);
        }
        means.push(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    let (s, c, b) = (means[0], means[1], means[2]);
    check(c >= s && b >= s, format!("spatial {s:.2}, channel {c:.2}, both {b:.2}"))
}

fn same_report(a: &EvalReport, b: &EvalReport) -> bool {
    a.mean_acc.to_bits() == b.mean_acc.to_bits()
        && a.std_acc.to_bits() == b.std_acc.to_bits()
        && a.per_model.iter().zip(&b.per_model).all(|(x, y)| x.to_bits() == y.to_bits())
        && (&a.config_hash, &a.spec, &a.origin) == (&b.config_hash, &b.spec, &b.origin)
}

fn determinism(data: &DatasetSplits<f32>) -> Outcome {
    let cfg = toy_config(3, MatchMode::Both);
    let run = |n: u64, state: &mut DistillState<f32>| -> Result<(), String> {
        for _ in 0..n {
            step(state, &cfg, &data.train).map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    let mut whole = DistillState::new(&cfg, &data.train).unwrap();
    run(200, &mut whole)?;

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("half.ckpt");
    let mut first = DistillState::new(&cfg, &data.train).unwrap();
    run(100, &mut first)?;
    first.save_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    drop(first);
    let mut resumed = resume::<f32>(&ckpt, &cfg).map_err(|e| e.to_string())?;
    run(100, &mut resumed)?;
    let resume_ok = whole.synthetic.to_bytes() == resumed.synthetic.to_bytes() && whole.to_bytes() == resumed.to_bytes();

    let again: SyntheticDataset<f32> = distill(&cfg, &data.train).map_err(|e| e.to_string())?.synthetic;
    let rerun_ok = again.to_bytes() == whole.synthetic.to_bytes();

    let proto = EvalProtocol {
        n_models: 2,
        ..EvalProtocol::default()
    };
    let r1 = evaluate(&again, &data.test, &proto).map_err(|e| e.to_string())?;
    let r2 = evaluate(&again, &data.test, &proto).map_err(|e| e.to_string())?;
    let report_ok = same_report(&r1, &r2);
    check(
        resume_ok && rerun_ok && report_ok,
        format!("resume bit-exact {resume_ok}, rerun container bit-exact {rerun_ok}, eval reports identical {report_ok}"),
    )
}

fn cost(data: &DatasetSplits<f32>) -> Outcome {
    let ch_cfg = toy_config(5, MatchMode::Channel);
    let both_cfg = toy_config(5, MatchMode::Both);
    let mut ch = DistillState::new(&ch_cfg, &data.train).unwrap();
    let mut both = DistillState::new(&both_cfg, &data.train).unwrap();
    for _ in 0..10 {
        step(&mut ch, &ch_cfg, &data.train).map_err(|e| e.to_string())?;
        step(&mut both, &both_cfg, &data.train).map_err(|e| e.to_string())?;
    }
    let (mut t_ch, mut t_both) = (0.0, 0.0);
    for i in 0..100 {
        if i % 2 == 0 {
            t_ch += step(&mut ch, &ch_cfg, &data.train).map_err(|e| e.to_string())?.step_ms;
            t_both += step(&mut both, &both_cfg, &data.train).map_err(|e| e.to_string())?.step_ms;
        } else {
            t_both += step(&mut both, &both_cfg, &data.train).map_err(|e| e.to_string())?.step_ms;
            t_ch += step(&mut ch, &ch_cfg, &data.train).map_err(|e| e.to_string())?.step_ms;
        }
    }
    let (ch_ms, both_ms) = (t_ch / 100.0, t_both / 100.0);
    check(ch_ms <= both_ms, format!("channel {ch_ms:.2} ms/step, both {both_ms:.2} ms/step over 100 steps"))
}

fn search_space() -> Outcome {
    let specs = enumerate_search_space([3, 32, 32], 10);
    let unique: HashSet<String> = specs.iter().map(|s| format!("{s:?}")).collect();
    let groups_ok = atom_distill::model::WIDTHS.iter().all(|w| w % Norm::GROUPS == 0);
    check(
        specs.len() == 720 && unique.len() == 720 && groups_ok,
        format!("{} specs, {} unique", specs.len(), unique.len()),
    )
}

fn main() {
    let data = toy();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(gradients)),
        ("oracle equivalence", Box::new(oracles)),
        ("invariance suite", Box::new(invariances)),
        ("toy distillation trend", Box::new(|| trend(&data))),
        ("ablation ordering", Box::new(|| ablation(&data))),
        ("determinism", Box::new(|| determinism(&data))),
        ("cost ordering", Box::new(|| cost(&data))),
        ("search-space cardinality", Box::new(search_space)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {name}: {tag} ({detail}) [{:.1}s]", i + 1, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
