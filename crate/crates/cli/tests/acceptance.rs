//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Runs in-process against the library and, for the file
//! and determinism criteria, against the built binary.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use actlens::metrics::{
    decile_profile, fvu, loss_recovered, min_max_normalize, pareto_frontier, LossRecoveredInputs,
    ProfileStatus,
};
use actlens::numerics::{cosine_sim, norm, Matrix};
use actlens::probe::{
    probe_loss, read_probe, train_probe, write_probe, ProbeModel, ProbeTrainConfig,
};
use actlens::sae::{
    evaluate_sae, lambda_schedule, lr_schedule, read_sae, sae_loss, train_sae, write_sae,
    SaeParams, SaeTrainConfig, SparseCodes, TokenCode,
};
use actlens::sda::{
    atoms_needed, geometric_grid, hardconcrete_sample, oracle, sda_loss_and_grads, sda_solve,
    sparsity_sweep, SdaProblem,
};
use actlens::steering::{
    apply_steering, caa_vector, random_vector_baseline, read_steering, write_steering, ApplySpec,
};
use actlens::store::{
    gen_synthetic_class_data, gen_synthetic_dictionary_data, random_class_means, sample_embeddings,
    BatchStream, ClassDataConfig, DictionaryDataConfig, Modality, ModalityFilter, Shard,
};
use actlens::{Precision, ScorePoint};
use common::*;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! require {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: &[Criterion] = &[
        ("gradient suite", gradient_suite),
        ("SAE recovery", sae_recovery),
        ("schedule exactness", schedule_exactness),
        ("SDA identity dictionary", sda_identity),
        ("planted vs random targets", planted_vs_random),
        ("steering causality", steering_causality),
        ("metric oracles", metric_oracles),
        ("format suite", format_suite),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Gradients

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-3;
const INSTANCES: usize = 20;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(FD_FLOOR)
}

fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gradient_suite() -> Check {
    let mut worst = [0.0f64; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut done = 0;
    while done < INSTANCES {
        let (d, m, n) = (
            rng.random_range(2..6),
            rng.random_range(3..9),
            rng.random_range(2..6),
        );
        let params = SaeParams::from_parts(
            uniform_matrix(&mut rng, m, d),
            uniform_vec(&mut rng, m),
            uniform_matrix(&mut rng, d, m),
            uniform_vec(&mut rng, d),
        )
        .map_err(|e| e.to_string())?;
        let batch = uniform_matrix(&mut rng, n, d);
        let lambda = rng.random_range(0.0..1.0);
        let near_kink = (0..n).any(|r| {
            let pre = params.w_enc.matvec(batch.row(r)).unwrap();
            pre.iter()
                .zip(&params.b_enc)
                .any(|(p, b)| (p + b).abs() < KINK_MARGIN)
        });
        if near_kink {
            continue;
        }
        let g = sae_loss(&params, &batch, lambda)
            .map_err(|e| e.to_string())?
            .grads;
        let loss = |p: &SaeParams| sae_loss(p, &batch, lambda).unwrap().loss;
        let blocks: [(Vec<f64>, Vec<f64>); 4] = [
            (
                g.w_enc.clone(),
                numeric_grad(params.w_enc.data(), |v| {
                    let mut p = params.clone();
                    p.w_enc.data_mut().copy_from_slice(v);
                    loss(&p)
                }),
            ),
            (
                g.b_enc.clone(),
                numeric_grad(&params.b_enc, |v| {
                    let mut p = params.clone();
                    p.b_enc.copy_from_slice(v);
                    loss(&p)
                }),
            ),
            (
                g.w_dec.clone(),
                numeric_grad(params.w_dec.data(), |v| {
                    let mut p = params.clone();
                    p.w_dec.data_mut().copy_from_slice(v);
                    loss(&p)
                }),
            ),
            (
                g.b_dec.clone(),
                numeric_grad(&params.b_dec, |v| {
                    let mut p = params.clone();
                    p.b_dec.copy_from_slice(v);
                    loss(&p)
                }),
            ),
        ];
        for (a, b) in &blocks {
            worst[0] = worst[0].max(rel_err(a, b));
        }
        done += 1;
    }

    for _ in 0..INSTANCES {
        let (c, d, n) = (
            rng.random_range(2..6),
            rng.random_range(1..6),
            rng.random_range(1..8),
        );
        let model = ProbeModel {
            w: uniform_matrix(&mut rng, c, d),
            b: uniform_vec(&mut rng, c),
            classes: (0..c as i32).collect(),
        };
        let xs = uniform_matrix(&mut rng, n, d);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let wd = rng.random_range(0.0..0.5);
        let out = probe_loss(&model, &xs, &targets, wd).map_err(|e| e.to_string())?;
        let fd_w = numeric_grad(model.w.data(), |v| {
            let mut m = model.clone();
            m.w.data_mut().copy_from_slice(v);
            probe_loss(&m, &xs, &targets, wd).unwrap().loss
        });
        let fd_b = numeric_grad(&model.b, |v| {
            let mut m = model.clone();
            m.b.copy_from_slice(v);
            probe_loss(&m, &xs, &targets, wd).unwrap().loss
        });
        worst[1] = worst[1]
            .max(rel_err(out.grad_w.data(), &fd_w))
            .max(rel_err(&out.grad_b, &fd_b));
    }

    let mut done = 0;
    while done < INSTANCES {
        let (d_model, d_dict) = (rng.random_range(2..6), rng.random_range(1..9));
        let mut problem = SdaProblem::new(
            uniform_vec(&mut rng, d_model),
            uniform_matrix(&mut rng, d_model, d_dict),
        );
        problem.lambda = rng.random_range(0.0..1.0);
        let x = uniform_vec(&mut rng, d_dict);
        let theta: Vec<f64> = (0..d_dict).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..d_dict).map(|_| rng.random_range(0.01..0.99)).collect();
        let (soft, _) = hardconcrete_sample(&theta, &u, problem.beta, problem.gamma, problem.zeta)
            .map_err(|e| e.to_string())?;
        let near_clamp = soft.iter().any(|s| {
            let p = s * (problem.zeta - problem.gamma) + problem.gamma;
            p.abs() < KINK_MARGIN || (p - 1.0).abs() < KINK_MARGIN
        });
        let eval = sda_loss_and_grads(&problem, &x, &theta, &u).map_err(|e| e.to_string())?;
        if near_clamp || eval.degenerate {
            continue;
        }
        let fd_x = numeric_grad(&x, |v| {
            sda_loss_and_grads(&problem, v, &theta, &u).unwrap().loss
        });
        let fd_t = numeric_grad(&theta, |v| {
            sda_loss_and_grads(&problem, &x, v, &u).unwrap().loss
        });
        worst[2] = worst[2]
            .max(rel_err(&eval.grad_x, &fd_x))
            .max(rel_err(&eval.grad_theta, &fd_t));
        done += 1;
    }
    let detail = format!(
        "worst relative error over {INSTANCES} instances each: SAE {:.1e}, probe {:.1e}, SDA {:.1e} (tol {FD_TOL:e})",
        worst[0], worst[1], worst[2]
    );
    require!(worst.iter().all(|&w| w < FD_TOL), "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// SAE

fn sae_recovery() -> Check {
    let data = gen_synthetic_dictionary_data(&DictionaryDataConfig {
        seed: 2024,
        ..DictionaryDataConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let config = SaeTrainConfig {
        lr: 1e-3,
        lambda_max: 0.1,
        total_tokens: 2_000_000,
        batch_size: 256,
        expansion_factor: 2,
        precision: Precision::F64,
        seed: 7,
        eval_interval: 500,
        ..SaeTrainConfig::default()
    };
    let shards = [data.shard];
    let stream =
        BatchStream::new(&shards, config.batch_size, config.seed).map_err(|e| e.to_string())?;
    let (params, _) = train_sae(&config, &stream).map_err(|e| e.to_string())?;
    let ev = evaluate_sae(&params, &shards[0]).map_err(|e| e.to_string())?;
    let dec = params.decoder_dictionary();
    let atoms: Vec<Vec<f64>> = (0..dec.cols()).map(|j| dec.column(j)).collect();
    let mut total = 0.0;
    for f in 0..data.dictionary.cols() {
        let truth = data.dictionary.column(f);
        let best = atoms
            .iter()
            .filter_map(|a| cosine_sim(&truth, a).ok())
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    let mean_max_cos = total / data.dictionary.cols() as f64;
    let detail = format!(
        "d_sae {} on 2e5 rows: mean max-cosine {mean_max_cos:.4} (need >= 0.9), FVU {:.4} (need <= 0.1), L0 {:.2}",
        params.d_sae(),
        ev.fvu,
        ev.mean_l0
    );
    require!(mean_max_cos >= 0.9 && ev.fvu <= 0.1, "{detail}");
    Ok(detail)
}

fn schedule_exactness() -> Check {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &total in &[100usize, 1000, 2000, 48_828] {
        for &(lambda_max, lr) in &[(5.0, 5e-5), (0.1, 1e-3)] {
            let warm = 0.05 * total as f64;
            let decay_start = 0.8 * total as f64;
            let want_lambda = |t: f64| lambda_max * (t / warm).min(1.0);
            let want_lr = |t: f64| {
                if t < decay_start {
                    lr
                } else {
                    lr * (total as f64 - t) / (total as f64 - decay_start)
                }
            };
            let steps = [
                0,
                (warm / 2.0) as usize,
                warm.round() as usize,
                warm.round() as usize + 1,
                decay_start.round() as usize,
                decay_start.round() as usize + 1,
                (0.9 * total as f64) as usize,
                total - 1,
                total,
            ];
            for &s in &steps {
                let t = s as f64;
                worst = worst
                    .max((lambda_schedule(s, total, lambda_max, 0.05) - want_lambda(t)).abs())
                    .max((lr_schedule(s, total, lr, 0.2) - want_lr(t)).abs());
                checked += 1;
            }
            let w = warm.round() as usize;
            let d = decay_start.round() as usize;
            require!(
                lambda_schedule(0, total, lambda_max, 0.05) == 0.0,
                "lambda at t = 0 is not 0 (T = {total})"
            );
            if (w as f64 - warm).abs() < 1e-9 {
                require!(
                    (lambda_schedule(w, total, lambda_max, 0.05) - lambda_max).abs() <= 1e-12,
                    "lambda at 0.05 T is not lambda_max (T = {total})"
                );
            }
            if (d as f64 - decay_start).abs() < 1e-9 {
                require!(
                    (lr_schedule(d, total, lr, 0.2) - lr).abs() <= 1e-12,
                    "lr at 0.8 T is not the base rate (T = {total})"
                );
            }
            require!(
                lr_schedule(total, total, lr, 0.2) == 0.0,
                "lr at T is not 0 (T = {total})"
            );
        }
    }
    let detail = format!(
        "{checked} breakpoint and interior evaluations, worst deviation {worst:.1e} (tol 1e-12)"
    );
    require!(worst <= 1e-12, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Sparse approximation

fn planted_target(rng: &mut ChaCha8Rng, dict: &Matrix, atoms: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; dict.rows()];
    for &i in atoms {
        let a = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for (r, vr) in v.iter_mut().enumerate() {
            *vr += a * dict.get(r, i);
        }
    }
    v
}

fn sda_identity() -> Check {
    let fixed = sda_solve(&SdaProblem::new(
        vec![0.0, 0.0, 1.0, 0.0],
        Matrix::identity(4),
    ))
    .map_err(|e| e.to_string())?;
    require!(
        fixed.support() == vec![2] && fixed.cosine >= 0.999,
        "identity(4), target e2: support {:?}, cosine {}",
        fixed.support(),
        fixed.cosine
    );
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut single = 0;
    let mut pairs = 0;
    let mut min_single_cos: f64 = 1.0;
    for t in 0..40u64 {
        let d = rng.random_range(2..=12);
        let dict = Matrix::identity(d);
        let k = rng.random_range(1..=2);
        let atoms = index::sample(&mut rng, d, k).into_vec();
        let v = planted_target(&mut rng, &dict, &atoms);
        let (support, _) = oracle::best_support(&dict, &v, 2, 1e-6).map_err(|e| e.to_string())?;
        let r = sda_solve(&SdaProblem::new(v, dict).with_seed(t)).map_err(|e| e.to_string())?;
        require!(
            r.support() == support,
            "instance {t} (d = {d}): support {:?}, oracle {support:?}",
            r.support()
        );
        if k == 1 {
            require!(
                r.cosine >= 0.999,
                "instance {t}: single-atom cosine {}",
                r.cosine
            );
            min_single_cos = min_single_cos.min(r.cosine);
            single += 1;
        } else {
            pairs += 1;
        }
    }
    Ok(format!(
        "identity(4)/e2 gives {{2}}; {single} single-atom and {pairs} two-atom instances on d_dict <= 12 match the exhaustive oracle; min single-atom cosine {min_single_cos:.6}"
    ))
}

fn planted_vs_random() -> Check {
    const D_MODEL: usize = 64;
    const D_DICT: usize = 256;
    let grid = geometric_grid(0.01, 30.0, 25).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let normal = rand_distr::StandardNormal;
        let mut dict = Matrix::from_fn(D_MODEL, D_DICT, |_, _| rng.sample::<f64, _>(normal));
        dict.normalize_columns();
        let atoms = index::sample(&mut rng, D_DICT, 5).into_vec();
        let planted = planted_target(&mut rng, &dict, &atoms);
        let random: Vec<f64> = (0..D_MODEL).map(|_| rng.sample::<f64, _>(normal)).collect();
        let need = |target: Vec<f64>| -> Result<Option<usize>, String> {
            let problem = SdaProblem::new(target, dict.clone()).with_seed(seed);
            let points = sparsity_sweep(&problem, &grid).map_err(|e| e.to_string())?;
            Ok(atoms_needed(&points, 0.95))
        };
        let p = need(planted)?;
        let r = need(random)?;
        let planted_ok = p.is_some_and(|n| n <= 10);
        let random_ok = r.is_none_or(|n| n > 30);
        ok &= planted_ok && random_ok;
        let show = |n: Option<usize>| n.map_or("none reach 0.95".to_string(), |n| n.to_string());
        lines.push(format!(
            "seed {seed}: planted {} random {}",
            show(p),
            show(r)
        ));
    }
    let detail = format!(
        "atoms to reach cosine 0.95 on 64x256, need planted <= 10 and random > 30; {}",
        lines.join("; ")
    );
    require!(ok, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Steering

fn steering_causality() -> Check {
    const D: usize = 64;
    let means = random_class_means(D, 2, 5.0, 11);
    let gap = norm(
        &means[0]
            .iter()
            .zip(&means[1])
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let sigma = 0.1 * gap;
    let mut cfg = ClassDataConfig::new(means, sigma, 200, 12);
    cfg.image_tokens_per_sample = 4;
    cfg.text_tokens_per_sample = 2;
    let shard = gen_synthetic_class_data(&cfg).map_err(|e| e.to_string())?;
    let pooled = sample_embeddings(&shard, ModalityFilter::Only(Modality::Image))
        .map_err(|e| e.to_string())?;
    let (probe, report) =
        train_probe(&ProbeTrainConfig::default(), &pooled.embeddings).map_err(|e| e.to_string())?;

    let caa = caa_vector(&shard, 1, 0).map_err(|e| e.to_string())?;
    let flip_rate = |sv: &actlens::SteeringVector| -> Result<f64, String> {
        let steered =
            apply_steering(&shard, sv, &ApplySpec::new(1.0)).map_err(|e| e.to_string())?;
        let emb = sample_embeddings(&steered.shard, ModalityFilter::Only(Modality::Image))
            .map_err(|e| e.to_string())?;
        let neg: Vec<_> = emb
            .embeddings
            .iter()
            .filter(|e| e.class_label == 0)
            .collect();
        let mut flipped = 0;
        for e in &neg {
            if probe.predict(&e.vector).map_err(|e| e.to_string())? == 1 {
                flipped += 1;
            }
        }
        Ok(flipped as f64 / neg.len() as f64)
    };
    let caa_rate = flip_rate(&caa)?;
    let mut random_worst: f64 = 0.0;
    for seed in 0..5 {
        let rv = random_vector_baseline(D, caa.norm(), 900 + seed).map_err(|e| e.to_string())?;
        random_worst = random_worst.max(flip_rate(&rv)?);
    }
    let detail = format!(
        "probe val accuracy {:.3}; CAA flips {:.1}% of negative samples (need >= 95%), equal-norm random vectors flip at most {:.1}% over 5 seeds (need <= 20%)",
        report.validation.accuracy,
        100.0 * caa_rate,
        100.0 * random_worst
    );
    require!(caa_rate >= 0.95 && random_worst <= 0.20, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Metrics

fn brute_force_frontier(points: &[ScorePoint]) -> Vec<(f64, f64)> {
    let mut keep: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| {
            !points.iter().any(|q| {
                q.coherence >= p.coherence
                    && q.steering >= p.steering
                    && (q.coherence > p.coherence || q.steering > p.steering)
            })
        })
        .map(|p| (p.coherence, p.steering))
        .collect();
    keep.sort_by(|a, b| a.partial_cmp(b).unwrap());
    keep
}

fn frontier_pairs(points: &[ScorePoint]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = pareto_frontier(points)
        .iter()
        .map(|p| (p.coherence, p.steering))
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

fn pts(xs: &[(f64, f64)]) -> Vec<ScorePoint> {
    xs.iter().map(|&(c, s)| ScorePoint::new(c, s)).collect()
}

fn codes_for(values: &[f64]) -> SparseCodes {
    SparseCodes {
        d_sae: 1,
        tokens: values
            .iter()
            .enumerate()
            .map(|(i, &a)| TokenCode {
                sample_id: i as u64,
                token_index: 0,
                modality: Modality::Image,
                features: if a > 0.0 {
                    vec![(0, a as f32)]
                } else {
                    Vec::new()
                },
            })
            .collect(),
    }
}

fn metric_oracles() -> Check {
    let lr = |c: f64, a: f64, s: f64| {
        loss_recovered(&LossRecoveredInputs {
            ce_clean: c,
            ce_ablated: a,
            ce_spliced: s,
        })
    };
    require!(
        lr(2.0, 6.0, 2.0).ok() == Some(1.0),
        "loss_recovered spliced = clean"
    );
    require!(
        lr(2.0, 6.0, 6.0).ok() == Some(0.0),
        "loss_recovered spliced = ablated"
    );
    require!(
        (lr(2.0, 6.0, 2.4).map_err(|e| e.to_string())? - 0.9).abs() < 1e-12,
        "loss_recovered 2/6/2.4"
    );
    require!(
        lr(3.0, 3.0, 1.0).is_err(),
        "loss_recovered zero denominator accepted"
    );

    let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).map_err(|e| e.to_string())?;
    require!(fvu(&x, &x).ok() == Some(0.0), "fvu x = x");
    let mean = Matrix::from_rows(&[vec![2.0, 4.0], vec![2.0, 4.0]]).unwrap();
    require!(
        (fvu(&x, &mean).unwrap() - 1.0).abs() < 1e-12,
        "fvu at the mean"
    );
    // Residuals (0,1) and (1,0) against total variance 1 + 4 + 1 + 4.
    let xh = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 6.0]]).unwrap();
    require!(
        (fvu(&x, &xh).unwrap() - 0.2).abs() < 1e-12,
        "fvu two-point hand value"
    );
    require!(fvu(&mean, &x).is_err(), "fvu constant batch accepted");

    require!(
        frontier_pairs(&pts(&[(1.0, 1.0), (0.0, 0.0)])) == vec![(1.0, 1.0)],
        "pareto dominance"
    );
    require!(
        frontier_pairs(&pts(&[(0.9, 0.2), (0.5, 0.8), (0.4, 0.3)])) == vec![(0.5, 0.8), (0.9, 0.2)],
        "pareto three-point example"
    );
    require!(
        pareto_frontier(&pts(&[(0.5, 0.5); 4])).len() == 4,
        "pareto all-equal points"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for set in 0..100 {
        let n = rng.random_range(0..=200);
        let coarse = rng.random_bool(0.5);
        let raw: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if coarse {
                    (
                        rng.random_range(0..10) as f64,
                        rng.random_range(0..10) as f64,
                    )
                } else {
                    (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
                }
            })
            .collect();
        let points = pts(&raw);
        require!(
            frontier_pairs(&points) == brute_force_frontier(&points),
            "pareto random set {set} differs from the quadratic filter"
        );
        let f = pareto_frontier(&points);
        require!(
            f.windows(2).all(|w| w[0].coherence >= w[1].coherence),
            "pareto random set {set} not ordered by coherence"
        );
    }

    require!(
        min_max_normalize(&[0.0, 5.0, 10.0]).ok() == Some(vec![0.0, 0.5, 1.0]),
        "min_max {{0,5,10}}"
    );
    require!(
        min_max_normalize(&[0.0, 1.0]).ok() == Some(vec![0.0, 1.0]),
        "min_max {{0,1}}"
    );
    require!(
        min_max_normalize(&[2.0, 2.0]).is_err(),
        "min_max constant accepted"
    );

    let ten: Vec<f64> = (1..=10).map(f64::from).collect();
    let p = decile_profile(&codes_for(&ten), 0, Modality::Image, 3).map_err(|e| e.to_string())?;
    require!(
        p.boundaries == ten && p.status == ProfileStatus::Full,
        "deciles of 1..10: {:?}",
        p.boundaries
    );
    require!(
        p.exemplars.iter().map(|e| e.activation).collect::<Vec<_>>() == vec![10.0, 9.0, 8.0],
        "top exemplars of 1..10"
    );
    let p = decile_profile(&codes_for(&[0.25; 30]), 0, Modality::Image, 3).unwrap();
    require!(
        p.boundaries == vec![0.25; 10],
        "constant deciles: {:?}",
        p.boundaries
    );
    let p = decile_profile(&codes_for(&[0.0; 5]), 0, Modality::Image, 3).unwrap();
    require!(
        p.status == ProfileStatus::Dead && p.boundaries.is_empty(),
        "dead feature not flagged"
    );
    Ok("loss_recovered, fvu, min_max_normalize and decile examples exact; Pareto equals the quadratic filter on 100 random sets".into())
}

// ---------------------------------------------------------------------------
// Files

fn format_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut cfg = ClassDataConfig::new(random_class_means(16, 3, 4.0, 1), 0.3, 5, 2);
    cfg.text_tokens_per_sample = 2;
    let shard = gen_synthetic_class_data(&cfg).map_err(|e| e.to_string())?;
    let mut a = Vec::new();
    shard.write_to(&mut a).map_err(|e| e.to_string())?;
    let back = Shard::read_from(&mut Cursor::new(&a)).map_err(|e| e.to_string())?;
    let mut b = Vec::new();
    back.write_to(&mut b).unwrap();
    require!(a == b && back == shard, "ACTS1 round trip differs");

    let empty = Shard::new(8, 3, Vec::new()).unwrap();
    let mut e = Vec::new();
    empty.write_to(&mut e).unwrap();
    require!(
        Shard::read_from(&mut Cursor::new(&e)).unwrap() == empty,
        "empty ACTS1 round trip"
    );

    let sae = SaeParams::init(16, 40, rng.random());
    let mut a = Vec::new();
    write_sae(&mut a, &sae).map_err(|e| e.to_string())?;
    let back = read_sae(&mut Cursor::new(&a)).map_err(|e| e.to_string())?;
    let mut b = Vec::new();
    write_sae(&mut b, &back).unwrap();
    require!(a == b, "SAE01 round trip differs");

    let sv = caa_vector(&shard, 2, 0).map_err(|e| e.to_string())?;
    let mut a = Vec::new();
    write_steering(&mut a, &sv).map_err(|e| e.to_string())?;
    let back = read_steering(&mut Cursor::new(&a)).map_err(|e| e.to_string())?;
    let mut b = Vec::new();
    write_steering(&mut b, &back).unwrap();
    require!(a == b && a.len() == 22 + 4 * 16, "STV01 round trip differs");

    let pooled = sample_embeddings(&shard, ModalityFilter::Only(Modality::Image)).unwrap();
    let config = ProbeTrainConfig {
        epochs: 3,
        ..ProbeTrainConfig::default()
    };
    let (probe, _) = train_probe(&config, &pooled.embeddings).map_err(|e| e.to_string())?;
    let mut a = Vec::new();
    write_probe(&mut a, &probe).map_err(|e| e.to_string())?;
    let back = read_probe(&mut Cursor::new(&a)).map_err(|e| e.to_string())?;
    let mut b = Vec::new();
    write_probe(&mut b, &back).unwrap();
    require!(a == b, "PRB01 round trip differs");

    let dir = tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let s = make_shards(root);
    let shard_bytes = fs::read(&s.dictionary).unwrap();
    let bad = |name: &str, edit: &dyn Fn(&mut Vec<u8>)| {
        let mut b = shard_bytes.clone();
        edit(&mut b);
        let path = root.join(name);
        fs::write(&path, b).unwrap();
        path
    };
    let fixtures = [
        bad("magic.acts", &|b| b[..5].copy_from_slice(b"XXXXX")),
        bad("truncated.acts", &|b| b.truncate(b.len() - 1)),
        bad("version.acts", &|b| b[5] = 9),
        bad("nan.acts", &|b| {
            b[44..48].copy_from_slice(&f32::NAN.to_le_bytes())
        }),
    ];
    let mut codes = BTreeMap::new();
    for f in &fixtures {
        let r = actlens(&["ablate", "--shard", &p(f), "--out", &p(&root.join("o"))]);
        codes.insert(
            f.file_name().unwrap().to_string_lossy().into_owned(),
            (r.code, r.category()),
        );
    }
    let usage = actlens(&[
        "ablate",
        "--shard",
        &p(&s.dictionary),
        "--bogus",
        "1",
        "--out",
        &p(&root.join("u")),
    ]);
    let numeric = actlens(&[
        "sda",
        "--target",
        &p(&fixture("e2.csv")),
        "--dictionary",
        &p(&fixture("identity4.csv")),
        "--optimizer",
        "sgd",
        "--lr",
        "1e300",
        "--out",
        &p(&root.join("n")),
    ]);
    require!(
        codes
            .values()
            .all(|(c, cat)| *c == 3 && cat.as_deref() == Some("data")),
        "corrupted shards: {codes:?}"
    );
    require!(
        usage.code == 2 && usage.category().as_deref() == Some("usage"),
        "bad flag: {}",
        usage.stderr
    );
    require!(
        numeric.code == 4 && numeric.category().as_deref() == Some("numeric"),
        "divergent run: {}",
        numeric.stderr
    );
    Ok(format!(
        "ACTS1/SAE01/STV01/PRB01 re-serialize bitwise; {} corrupted shards exit 3, bad flag exits 2, divergence exits 4",
        fixtures.len()
    ))
}

fn determinism() -> Check {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let s = make_shards(root);
    let sv = root.join("sv");
    ok(&[
        "steer-compute",
        "--shard",
        &p(&s.classes),
        "--pos-class",
        "1",
        "--neg-class",
        "0",
        "--out",
        &p(&sv),
    ]);
    let runs: Vec<Vec<String>> = vec![
        vec![
            "gen-synth".into(),
            "--rows".into(),
            "3000".into(),
            "--seed".into(),
            "4".into(),
        ],
        vec![
            "train-sae".into(),
            "--shards".into(),
            p(&s.dictionary),
            "--total-tokens".into(),
            "50000".into(),
            "--batch-size".into(),
            "256".into(),
            "--lr".into(),
            "1e-3".into(),
            "--lambda-max".into(),
            "0.05".into(),
            "--expansion-factor".into(),
            "2".into(),
            "--precision".into(),
            "f32".into(),
        ],
        vec![
            "probe-train".into(),
            "--shard".into(),
            p(&s.classes),
            "--epochs".into(),
            "10".into(),
        ],
        vec![
            "steer-compute".into(),
            "--method".into(),
            "random".into(),
            "--d-model".into(),
            "12".into(),
            "--seed".into(),
            "3".into(),
        ],
        vec![
            "sda".into(),
            "--target".into(),
            p(&sv.join("vector.stv")),
            "--iterations".into(),
            "500".into(),
        ],
        vec![
            "sweep".into(),
            "--target".into(),
            p(&sv.join("vector.stv")),
            "--lambda-count".into(),
            "5".into(),
            "--iterations".into(),
            "300".into(),
        ],
    ];
    let mut compared = 0;
    for (i, args) in runs.iter().enumerate() {
        let a = root.join(format!("run{i}"));
        let b = root.join(format!("rerun{i}"));
        let run = |out: &Path| -> Result<BTreeMap<String, Vec<u8>>, String> {
            let mut full = args.clone();
            full.extend(["--out".into(), p(out)]);
            let r = actlens(&full);
            require!(r.code == 0, "{} failed: {}", args[0], r.stderr);
            Ok(snapshot(out))
        };
        let sa = run(&a)?;
        require!(
            run(&a)? == sa,
            "{}: re-run in the same directory changed its outputs",
            args[0]
        );
        let sb = run(&b)?;
        require!(sa.len() > 1, "{} wrote nothing", args[0]);
        for (name, bytes) in &sa {
            if name == "resolved.conf" {
                continue;
            }
            require!(
                sb.get(name) == Some(bytes),
                "{}: {name} differs between two run directories",
                args[0]
            );
            compared += 1;
        }
    }
    require!(
        snapshot(&root.join("run1")).contains_key("sae.bin"),
        "no checkpoint written"
    );
    Ok(format!(
        "{} training subcommands re-run (same directory and a fresh one) give byte-identical outputs across {compared} files",
        runs.len()
    ))
}
