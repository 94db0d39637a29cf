//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rwn::ablation::{oracle_scenes, radius_sweep, steps_sweep, Diffusion};
use rwn::cli::{infer_image, InferOptions, StepSpec};
use rwn::config::Config;
use rwn::features::{normalized_features, FilterBankConfig};
use rwn::graph::{
    affinity_forward, build_sparsity, channel_distances, transition, AffinityMatrix, AffinityParams,
    TransitionMatrix,
};
use rwn::image::ImageTensor;
use rwn::solver::{
    bench_step_vs_solve, converge, dense_oracle_solve, diffuse_steps, diffuse_to_convergence,
    solve_closed_form, BenchOptions, SolveMode, SolverConfig,
};
use rwn::synth::generate;
use rwn::train::{moving_average, train, ModelCheckpoint};
use rwn::walk::{rw_step, UnaryPotentials};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
}

fn random_transition(rng: &mut ChaCha8Rng, h: usize, w: usize, r: usize) -> TransitionMatrix {
    let p = build_sparsity(h, w, r).unwrap();
    let wv = (0..p.num_edges()).map(|_| rng.gen_range(0.01..1.0)).collect();
    transition(&AffinityMatrix::from_values(p, wv).unwrap())
}

fn random_unaries(rng: &mut ChaCha8Rng, n: usize, m: usize) -> UnaryPotentials {
    UnaryPotentials::new(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn c1_row_stochasticity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let bank = FilterBankConfig { f1: 6, f2: 6, seed: 3 };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(2..20), rng.gen_range(2..20));
        let r = rng.gen_range(1..8);
        let stack = normalized_features(&random_image(&mut rng, h, w), &bank).unwrap();
        let pattern = build_sparsity(h, w, r).unwrap();
        let dist = channel_distances(&stack, &pattern).unwrap();
        let theta = (0..stack.k()).map(|_| rng.gen_range(-2.0..0.5)).collect();
        let a = transition(&affinity_forward(&dist, &AffinityParams { theta }).unwrap());
        for i in 0..h * w {
            worst = worst.max((a.row_sum(i) - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("max |row sum - 1| = {worst:.2e} over 100 configs in {elapsed:.2?} (tol 1e-9, < 10 s)"),
    )
}

fn c2_gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut errors = common::walk_gradient_errors();
    errors.extend(common::parameter_gradient_errors());
    let elapsed = start.elapsed();
    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let list: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("relative errors [{}] in {elapsed:.2?} (tol 1e-4, < 30 s)", list.join(", ")),
    )
}

/// Dense `y = M x` for an `n x n` matrix and `n x m` columns.
fn dense_apply(mat: &[f64], x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..n {
            let a = mat[i * n + j];
            if a != 0.0 {
                for c in 0..m {
                    y[i * m + c] += a * x[j * m + c];
                }
            }
        }
    }
    y
}

fn c3_recurrence_series() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let r = rng.gen_range(1..4);
        let a = random_transition(&mut rng, 4, 4, r);
        let f = random_unaries(&mut rng, 16, 3);
        let alpha = rng.gen_range(0.01..0.99);
        let dense = a.to_dense();
        for t in 0..=10 {
            // (alpha A)^t f + (1 - alpha) sum_{i<t} (alpha A)^i f
            let mut power = f.values().to_vec();
            let mut sum = vec![0.0; power.len()];
            for _ in 0..t {
                sum.iter_mut().zip(&power).for_each(|(s, p)| *s += (1.0 - alpha) * p);
                power = dense_apply(&dense, &power, 16, 3).into_iter().map(|v| alpha * v).collect();
            }
            let series: Vec<f64> = sum.iter().zip(&power).map(|(s, p)| s + p).collect();
            let iterated = diffuse_steps(&a, &f, alpha, t).unwrap();
            for (x, y) in iterated.values().iter().zip(&series) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    check(
        worst <= 1e-10,
        format!("max |iterate - series| = {worst:.2e} over 20 instances, t = 0..10 (tol 1e-10)"),
    )
}

fn c4_convergence_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut argmax_mismatch = 0usize;
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(2..33), rng.gen_range(2..33));
        let r = rng.gen_range(1..6);
        let a = random_transition(&mut rng, h, w, r);
        let m = rng.gen_range(2..5);
        let f = random_unaries(&mut rng, h * w, m);
        let cfg = SolverConfig {
            alpha: rng.gen_range(0.01..0.95),
            tolerance: 1e-13,
            ..SolverConfig::default()
        };
        let scale = 1.0 - cfg.alpha;
        let neumann = solve_closed_form(&a, &f, &cfg).unwrap();
        let (fixed, _) = diffuse_to_convergence(&a, &f, &cfg).unwrap();
        let dense = dense_oracle_solve(&a, &f, cfg.alpha).unwrap();
        for ((n, x), d) in neumann.values().iter().zip(fixed.values()).zip(dense.values()) {
            worst = worst.max((scale * n - x).abs()).max((scale * d - x).abs()).max((scale * n - scale * d).abs());
        }
        let reference = fixed.argmax();
        for other in [&neumann, &dense] {
            argmax_mismatch += other.argmax().iter().zip(&reference).filter(|(p, q)| p != q).count();
        }
    }
    check(
        worst <= 1e-8 && argmax_mismatch == 0,
        format!("max scaled disagreement {worst:.2e} (tol 1e-8), argmax mismatches {argmax_mismatch} over 50 instances"),
    )
}

fn bits(u: &UnaryPotentials) -> Vec<u64> {
    u.values().iter().map(|v| v.to_bits()).collect()
}

fn c5_identity_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let a = random_transition(&mut rng, 7, 5, 2);
    let f = random_unaries(&mut rng, 35, 3);
    let want = bits(&f);
    let mut failures = Vec::new();
    let mut paths = 0;
    let mut record = |name: &str, y: UnaryPotentials| {
        paths += 1;
        if bits(&y) != want {
            failures.push(name.to_string());
        }
    };
    let base = SolverConfig {
        alpha: 0.0,
        ..SolverConfig::default()
    };
    record("rw_step", rw_step(&a, &f, &f, 0.0).unwrap());
    record("diffuse_steps", diffuse_steps(&a, &f, 0.0, 5).unwrap());
    record("fixed point", diffuse_to_convergence(&a, &f, &base).unwrap().0);
    record("neumann", solve_closed_form(&a, &f, &base).unwrap());
    record("dense", dense_oracle_solve(&a, &f, 0.0).unwrap());
    for mode in [SolveMode::Iterate, SolveMode::Neumann, SolveMode::DenseOracle] {
        record(mode.name(), converge(&a, &f, &SolverConfig { mode, ..base }).unwrap());
    }
    // full inference path on a model with random unary weights
    let bank = FilterBankConfig { f1: 3, f2: 3, seed: 5 };
    let mut model = ModelCheckpoint::init(bank, 3);
    model.unary.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
    let image = random_image(&mut rng, 6, 6);
    let mut opts = InferOptions {
        steps: StepSpec::Count(0),
        radius: 2,
        solver: base,
    };
    let (_, f_img) = infer_image(&model, &image, &opts).unwrap();
    let want_img = bits(&f_img);
    paths += 2;
    for steps in [StepSpec::Count(3), StepSpec::Converge] {
        opts.steps = steps;
        if bits(&infer_image(&model, &image, &opts).unwrap().1) != want_img {
            failures.push(format!("infer {steps:?}"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("alpha = 0 returns f bit-exactly on {paths} inference paths")
        } else {
            format!("paths differing from f: {}", failures.join(", "))
        },
    )
}

fn points(x: f64) -> f64 {
    100.0 * x
}

fn c6_diffusion_benefit(cfg: &Config) -> Outcome {
    let start = Instant::now();
    let scenes = oracle_scenes(&cfg.scene, &cfg.ablate).unwrap();
    let rows = steps_sweep(&scenes, cfg).unwrap();
    let base = &rows[0].score;
    let conv = &rows.last().unwrap().score;
    let gain = points(conv.mean_iou - base.mean_iou);
    let decreasing = base.trimap.iter().zip(&conv.trimap).all(|(b, c)| c.1 < b.1);
    let elapsed = start.elapsed();
    let trimap: Vec<String> = base
        .trimap
        .iter()
        .zip(&conv.trimap)
        .map(|(b, c)| format!("{}:{:.3}->{:.3}", b.0, b.1, c.1))
        .collect();
    check(
        gain >= 5.0 && decreasing && elapsed < Duration::from_secs(120),
        format!(
            "mean IOU {:.2} -> {:.2} (gain {gain:.2} points, need >= 5); trimap error lower at every width: {decreasing} [{}]; {elapsed:.2?}",
            points(base.mean_iou),
            points(conv.mean_iou),
            trimap.join(" ")
        ),
    )
}

fn c7_steps_ablation(cfg: &Config) -> Outcome {
    let scenes = oracle_scenes(&cfg.scene, &cfg.ablate).unwrap();
    let rows = steps_sweep(&scenes, cfg).unwrap();
    let ious: Vec<f64> = rows.iter().map(|r| points(r.score.mean_iou)).collect();
    let worst_drop = ious.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let peak = ious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let at_convergence = *ious.last().unwrap();
    assert_eq!(rows.last().unwrap().steps, Diffusion::Converge);
    let curve: Vec<String> = rows
        .iter()
        .zip(&ious)
        .map(|(r, v)| format!("{}:{v:.2}", r.steps.label()))
        .collect();
    check(
        worst_drop <= 0.5 && at_convergence >= peak,
        format!(
            "largest step-to-step drop {worst_drop:.2} points (tol 0.5); converged {at_convergence:.2} vs peak {peak:.2} [{}]",
            curve.join(" ")
        ),
    )
}

fn c8_radius_ablation(cfg: &Config) -> Outcome {
    let scenes = oracle_scenes(&cfg.scene, &cfg.ablate).unwrap();
    let rows = radius_sweep(&scenes, cfg).unwrap();
    let converged: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.steps == Diffusion::Converge)
        .map(|r| (r.radius, points(r.score.mean_iou)))
        .collect();
    let hi = converged.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = converged.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let r5 = converged.iter().find(|c| c.0 == 5).map(|c| c.1).unwrap();
    let single = rows.last().unwrap();
    let single_iou = points(single.score.mean_iou);
    let list: Vec<String> = converged.iter().map(|(r, v)| format!("R{r}:{v:.2}")).collect();
    check(
        hi - lo < 2.0 && r5 >= single_iou - 1.0,
        format!(
            "converged spread {:.2} points over [{}] (tol < 2); converge R5 {r5:.2} vs single step R{} {single_iou:.2} (need >= -1)",
            hi - lo,
            list.join(" "),
            single.radius
        ),
    )
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn c9_runtime_shape() -> Outcome {
    let cfg = SolverConfig::default();
    let dense = bench_step_vs_solve(&[(64, 64)], 5, &cfg, &BenchOptions::default()).unwrap();
    let row = &dense.rows[0];
    let ratio = row.dense_ms.unwrap() / row.step_ms;

    let sizes = [(32, 32), (48, 48), (64, 64), (96, 96), (128, 128), (160, 160)];
    let opts = BenchOptions {
        run_dense: false,
        ..BenchOptions::default()
    };
    let scaling = bench_step_vs_solve(&sizes, 5, &cfg, &opts).unwrap();
    let nnz: Vec<f64> = scaling.rows.iter().map(|r| r.nnz as f64).collect();
    let ms: Vec<f64> = scaling.rows.iter().map(|r| r.step_ms).collect();
    let r2 = r_squared(&nnz, &ms);
    check(
        ratio >= 50.0 && r2 > 0.95,
        format!(
            "64x64 R5: step {:.4} ms vs dense {:.1} ms, ratio {ratio:.0} (need >= 50); step time vs nnz over {} sizes R^2 = {r2:.4} (need > 0.95)",
            row.step_ms,
            row.dense_ms.unwrap(),
            sizes.len()
        ),
    )
}

fn c10_training_smoke() -> Outcome {
    let cfg = Config::preset("smoke").unwrap();
    let data = generate(&cfg.scene, cfg.data.train_count).unwrap();
    let run = || train(&data, &cfg.features, cfg.scene.num_classes, &cfg.train).unwrap();
    let a = run();
    let b = run();
    let (s20, a20) = moving_average(&a.log, 20, 20).unwrap();
    let (s200, a200) = moving_average(&a.log, 200, 20).unwrap();
    let identical = a.model.to_bytes().unwrap() == b.model.to_bytes().unwrap() && a.log == b.log;
    check(
        s200 < s20 && a200 < a20 && identical,
        format!(
            "20-step averages: seg {s20:.4} -> {s200:.4}, aff {a20:.4} -> {a200:.4}; seeded reruns bit-identical: {identical}"
        ),
    )
}

fn c11_parameter_count() -> Outcome {
    let bank = FilterBankConfig::default();
    let image = ImageTensor::new(2, 2, 3, vec![0.5; 12]).unwrap();
    let k = normalized_features(&image, &bank).unwrap().k();
    let model = ModelCheckpoint::init(bank, 2);
    let n = model.theta.num_parameters();
    check(
        n == 131 && k == 131,
        format!("affinity head has {n} parameters over a {k}-channel stack (need 131)"),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let cfg = Config::default();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 row-stochasticity", Box::new(c1_row_stochasticity)),
        ("2 gradient exactness", Box::new(c2_gradient_exactness)),
        ("3 recurrence/series identity", Box::new(c3_recurrence_series)),
        ("4 convergence equivalence", Box::new(c4_convergence_equivalence)),
        ("5 identity degeneracy", Box::new(c5_identity_degeneracy)),
        ("6 diffusion benefit", Box::new(|| c6_diffusion_benefit(&cfg))),
        ("7 steps ablation", Box::new(|| c7_steps_ablation(&cfg))),
        ("8 radius ablation", Box::new(|| c8_radius_ablation(&cfg))),
        ("9 runtime shape", Box::new(c9_runtime_shape)),
        ("10 training smoke", Box::new(c10_training_smoke)),
        ("11 parameter count", Box::new(c11_parameter_count)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = run();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        if !outcome.pass {
            failed += 1;
        }
        println!("[{tag}] {name}: {}", outcome.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
