//! Shared fixtures and finite-difference oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rwn::features::FilterBankConfig;
use rwn::graph::{build_sparsity, transition, AffinityMatrix, TransitionMatrix};
use rwn::image::{ImageTensor, LabelMap};
use rwn::train::{loss_and_gradients, objective, ModelCheckpoint, PreparedSample, TrainConfig};
use rwn::walk::{rw_backward_a, rw_backward_f, rw_forward, UnaryPotentials};

pub const FD_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn central_difference(mut eval: impl FnMut(f64) -> f64) -> f64 {
    (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
}

/// A 6x6 three-class scene: left band class 0, a square of class 1, a
/// diagonal strip of class 2, with colors loosely tied to the labels.
pub fn six_by_six() -> (ImageTensor, LabelMap) {
    let (h, w) = (6, 6);
    let mut labels = vec![0u32; h * w];
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let l = if (2..5).contains(&y) && (2..5).contains(&x) {
                1
            } else if x + y == 6 || x + y == 7 {
                2
            } else {
                0
            };
            labels[y * w + x] = l;
            let jitter = ((y * 7 + x * 3) % 5) as f64 * 0.03;
            let base = [[0.2, 0.3, 0.4], [0.8, 0.2, 0.1], [0.1, 0.7, 0.6]][l as usize];
            data.extend(base.iter().map(|c| c + jitter));
        }
    }
    (
        ImageTensor::new(h, w, 3, data).unwrap(),
        LabelMap::new(h, w, labels).unwrap(),
    )
}

/// The gradient-check instance: 6x6, 3 classes, R = 2, alpha = 0.01, default
/// filter banks, parameters perturbed away from their initial values so no
/// gradient term vanishes by symmetry.
pub fn grad_check_instance() -> (PreparedSample, ModelCheckpoint, TrainConfig) {
    let (image, labels) = six_by_six();
    let bank = FilterBankConfig::default();
    let sample = PreparedSample::new(&image, &labels, &bank, 2).unwrap();
    let mut model = ModelCheckpoint::init(bank, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for t in &mut model.theta.theta {
        *t += rng.gen_range(-0.02..0.02);
    }
    for v in model.unary.weights.iter_mut().chain(model.unary.biases.iter_mut()) {
        *v = rng.gen_range(-0.5..0.5);
    }
    let cfg = TrainConfig {
        alpha: 0.01,
        train_radius: 2,
        ..TrainConfig::default()
    };
    (sample, model, cfg)
}

/// Relative errors of the analytic gradients of the full training objective
/// for theta, unary weights and unary biases.
pub fn parameter_gradient_errors() -> Vec<(&'static str, f64)> {
    let (sample, model, cfg) = grad_check_instance();
    let (_, grads) = loss_and_gradients(&sample, &model, &cfg).unwrap();
    let total = |m: &ModelCheckpoint| objective(&sample, m, &cfg).unwrap().total;

    let theta_fd: Vec<f64> = (0..model.k())
        .map(|c| {
            central_difference(|d| {
                let mut m = model.clone();
                m.theta.theta[c] += d;
                total(&m)
            })
        })
        .collect();
    let weights_fd: Vec<f64> = (0..model.unary.weights.len())
        .map(|i| {
            central_difference(|d| {
                let mut m = model.clone();
                m.unary.weights[i] += d;
                total(&m)
            })
        })
        .collect();
    let biases_fd: Vec<f64> = (0..model.unary.biases.len())
        .map(|i| {
            central_difference(|d| {
                let mut m = model.clone();
                m.unary.biases[i] += d;
                total(&m)
            })
        })
        .collect();
    vec![
        ("theta", rel_err(&grads.theta, &theta_fd)),
        ("unary_weights", rel_err(&grads.unary.weights, &weights_fd)),
        ("unary_biases", rel_err(&grads.unary.biases, &biases_fd)),
    ]
}

/// Random positive affinities on a 6x6 grid at radius 2.
pub fn random_transition(seed: u64) -> TransitionMatrix {
    let p = build_sparsity(6, 6, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..p.num_edges()).map(|_| rng.gen_range(0.1..2.0)).collect();
    transition(&AffinityMatrix::from_values(p, w).unwrap())
}

pub fn random_potentials(n: usize, m: usize, seed: u64) -> UnaryPotentials {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    UnaryPotentials::new(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Dense `y = A f` followed by the mean cross-entropy, written out directly
/// so it shares no code with the sparse layer.
fn dense_walk_loss(a: &[f64], f: &[f64], n: usize, m: usize, labels: &[u32]) -> f64 {
    let mut loss = 0.0;
    for i in 0..n {
        let y: Vec<f64> = (0..m)
            .map(|c| (0..n).map(|j| a[i * n + j] * f[j * m + c]).sum())
            .collect();
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + y.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - y[labels[i] as usize];
    }
    loss / n as f64
}

/// Relative errors of the walk layer's `dL/df = A^T dL/dy` and
/// `dL/dA = dL/dy f^T` (on the pattern) for `L = CE(A f)`.
pub fn walk_gradient_errors() -> Vec<(&'static str, f64)> {
    let (_, labels) = six_by_six();
    let a = random_transition(5);
    let (n, m) = (36, 3);
    let f = random_potentials(n, m, 6);
    let y = rw_forward(&a, &f).unwrap();
    let (_, dy) = rwn::train::softmax_loss_grad(&y, &labels).unwrap();
    let df = rw_backward_f(&a, &dy).unwrap();
    let da = rw_backward_a(&dy, &f, a.pattern()).unwrap();

    let dense = a.to_dense();
    let l = labels.data();
    let df_fd: Vec<f64> = (0..n * m)
        .map(|idx| {
            central_difference(|d| {
                let mut fv = f.values().to_vec();
                fv[idx] += d;
                dense_walk_loss(&dense, &fv, n, m, l)
            })
        })
        .collect();
    let da_fd: Vec<f64> = a
        .pattern()
        .edges()
        .map(|(_, i, j)| {
            central_difference(|d| {
                let mut av = dense.clone();
                av[i * n + j] += d;
                dense_walk_loss(&av, f.values(), n, m, l)
            })
        })
        .collect();
    vec![
        ("dL/df", rel_err(df.values(), &df_fd)),
        ("dL/dA", rel_err(&da, &da_fd)),
    ]
}
