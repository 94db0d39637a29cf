//! Joint end-to-end training of the unary classifier and the affinity head
//! through a single damped random walk step.
//!
//! The forward pass per sample is: features -> unary scores `f`; features ->
//! affinities `W` -> transition `A`; `y = alpha A f + (1 - alpha) f`; softmax
//! cross-entropy on `y` plus a Euclidean loss between `W` and the
//! ground-truth affinities. Both losses send gradient into `theta`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{normalized_features, FeatureStack, FilterBankConfig};
use crate::graph::{
    affinity_backward_streamed, affinity_forward_streamed, build_sparsity, ground_truth_affinity,
    transition, transition_backward, AffinityParams, SparsityPattern,
};
use crate::image::{ImageTensor, LabelMap};
use crate::walk::{rw_backward_a, rw_backward_f, rw_step, UnaryPotentials};

/// Per-pixel linear classifier, `f_i = weights . x_i + biases`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryParams {
    m: usize,
    k: usize,
    /// Row-major `m x k`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl UnaryParams {
    pub fn zeros(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            weights: vec![0.0; m * k],
            biases: vec![0.0; m],
        }
    }

    pub fn new(m: usize, k: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != m * k || biases.len() != m {
            return Err(Error::invalid(format!(
                "unary parameters need {m}x{k} weights and {m} biases"
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite unary parameter"));
        }
        Ok(Self {
            m,
            k,
            weights,
            biases,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_parameters(&self) -> usize {
        self.m * (self.k + 1)
    }
}

pub fn unary_forward(stack: &FeatureStack, params: &UnaryParams) -> Result<UnaryPotentials> {
    if stack.k() != params.k {
        return Err(Error::invalid(format!(
            "feature stack has {} channels, unary params expect {}",
            stack.k(),
            params.k
        )));
    }
    let (m, k) = (params.m, params.k);
    let mut values = Vec::with_capacity(stack.num_pixels() * m);
    for i in 0..stack.num_pixels() {
        let x = stack.pixel(i);
        for c in 0..m {
            let row = &params.weights[c * k..(c + 1) * k];
            let s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            values.push(s + params.biases[c]);
        }
    }
    UnaryPotentials::new(stack.num_pixels(), m, values)
}

/// Gradient of a loss with respect to the unary parameters given `dL/df`.
pub fn unary_backward(stack: &FeatureStack, params: &UnaryParams, df: &UnaryPotentials) -> Result<UnaryParams> {
    if stack.k() != params.k || df.m() != params.m || df.num_pixels() != stack.num_pixels() {
        return Err(Error::invalid("inconsistent shapes in unary backward"));
    }
    let (m, k) = (params.m, params.k);
    let mut grad = UnaryParams::zeros(m, k);
    for i in 0..stack.num_pixels() {
        let x = stack.pixel(i);
        for (c, &g) in df.row(i).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.biases[c] += g;
            for (acc, v) in grad.weights[c * k..(c + 1) * k].iter_mut().zip(x) {
                *acc += g * v;
            }
        }
    }
    Ok(grad)
}

/// Mean per-pixel cross-entropy after a row-wise softmax, and its gradient
/// `(softmax(y) - onehot) / num_pixels`.
pub fn softmax_loss_grad(y: &UnaryPotentials, labels: &LabelMap) -> Result<(f64, UnaryPotentials)> {
    if labels.num_pixels() != y.num_pixels() {
        return Err(Error::invalid(format!(
            "label map has {} pixels, scores have {}",
            labels.num_pixels(),
            y.num_pixels()
        )));
    }
    labels.check_classes(y.m())?;
    let n = y.num_pixels();
    let mut dy = y.softmax();
    let mut loss = 0.0;
    for (i, &l) in labels.data().iter().enumerate() {
        let row = y.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[l as usize];
        let g = dy.row_mut(i);
        g[l as usize] -= 1.0;
        for v in g.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok((loss / n as f64, dy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub base_learning_rate: f64,
    /// Scales `base_learning_rate`; the effective rate is their product.
    pub lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub train_radius: usize,
    pub alpha: f64,
    pub seg_loss_weight: f64,
    pub aff_loss_weight: f64,
    pub seed: u64,
    pub augment_hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_learning_rate: 1e-5,
            lr_multiplier: 1e3,
            momentum: 0.9,
            weight_decay: 5e-5,
            batch_size: 15,
            iterations: 2000,
            train_radius: 40,
            alpha: 0.01,
            seg_loss_weight: 1.0,
            aff_loss_weight: 1.0,
            seed: 1,
            augment_hflip: true,
        }
    }
}

impl TrainConfig {
    /// The literal recipe with no learning-rate scaling.
    pub fn paper() -> Self {
        Self {
            lr_multiplier: 1.0,
            ..Self::default()
        }
    }

    /// A few hundred cheap iterations at a small radius.
    pub fn smoke() -> Self {
        Self {
            batch_size: 4,
            iterations: 200,
            train_radius: 3,
            ..Self::default()
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.base_learning_rate * self.lr_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("base_learning_rate", self.base_learning_rate),
            ("lr_multiplier", self.lr_multiplier),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("seg_loss_weight", self.seg_loss_weight),
            ("aff_loss_weight", self.aff_loss_weight),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

const MAGIC_PREFIX: &[u8; 7] = b"RWNCKPT";
const VERSION: u8 = b'1';

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub bank: FilterBankConfig,
    pub theta: AffinityParams,
    pub unary: UnaryParams,
    pub iteration: u32,
}

impl ModelCheckpoint {
    /// Fresh model: `theta = -1/k`, zero unary classifier.
    pub fn init(bank: FilterBankConfig, m: usize) -> Self {
        let k = bank.num_channels();
        Self {
            bank,
            theta: AffinityParams::init(k),
            unary: UnaryParams::zeros(m, k),
            iteration: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.theta.k()
    }

    pub fn m(&self) -> usize {
        self.unary.m
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let fields = [self.k(), self.m(), self.bank.f1, self.bank.f2];
        let mut out = Vec::with_capacity(8 + 24 + 8 * (self.k() + self.unary.num_parameters()));
        out.extend_from_slice(MAGIC_PREFIX);
        out.push(VERSION);
        for v in fields {
            let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.bank.seed.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        for v in self.theta.theta.iter().chain(&self.unary.weights).chain(&self.unary.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..7] != MAGIC_PREFIX {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        if bytes[7] != VERSION {
            return Err(Error::UnsupportedVersion {
                found: String::from_utf8_lossy(&bytes[7..8]).into_owned(),
                expected: (VERSION as char).to_string(),
            });
        }
        let header = bytes
            .get(8..32)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let u = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
        let (k, m, f1, f2, seed, iteration) = (
            u(0) as usize,
            u(1) as usize,
            u(2) as usize,
            u(3) as usize,
            u(4),
            u(5),
        );
        let bank = FilterBankConfig { f1, f2, seed };
        if bank.num_channels() != k {
            return Err(Error::Format(format!(
                "checkpoint k = {k} disagrees with filter banks {f1} + {f2}"
            )));
        }
        let count = k + m * k + m;
        let body = &bytes[32..];
        if body.len() != count * 8 {
            return Err(Error::Format(format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                count * 8
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let theta: Vec<f64> = values.by_ref().take(k).collect();
        let weights: Vec<f64> = values.by_ref().take(m * k).collect();
        let biases: Vec<f64> = values.collect();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite affinity parameter in checkpoint".into()));
        }
        let unary = UnaryParams::new(m, k, weights, biases).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            bank,
            theta: AffinityParams { theta },
            unary,
            iteration,
        })
    }
}

pub fn save_checkpoint(path: &Path, model: &ModelCheckpoint) -> Result<()> {
    fs::write(path, model.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

/// Gradients (or momentum buffers) shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub theta: Vec<f64>,
    pub unary: UnaryParams,
}

impl Gradients {
    pub fn zeros_like(model: &ModelCheckpoint) -> Self {
        Self {
            theta: vec![0.0; model.k()],
            unary: UnaryParams::zeros(model.m(), model.k()),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.theta.iter().chain(&self.unary.weights).chain(&self.unary.biases)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.theta
            .iter_mut()
            .chain(self.unary.weights.iter_mut())
            .chain(self.unary.biases.iter_mut())
    }

    fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelCheckpoint,
    pub velocity: Gradients,
}

impl TrainState {
    pub fn new(model: ModelCheckpoint) -> Self {
        let velocity = Gradients::zeros_like(&model);
        Self { model, velocity }
    }
}

/// A sample with its normalized features and neighborhood pattern attached.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub features: FeatureStack,
    pub labels: LabelMap,
    pub pattern: Arc<SparsityPattern>,
}

impl PreparedSample {
    pub fn new(image: &ImageTensor, labels: &LabelMap, bank: &FilterBankConfig, radius: usize) -> Result<Self> {
        let pattern = build_sparsity(image.height(), image.width(), radius)?;
        Self::with_pattern(image, labels, bank, pattern)
    }

    fn with_pattern(
        image: &ImageTensor,
        labels: &LabelMap,
        bank: &FilterBankConfig,
        pattern: Arc<SparsityPattern>,
    ) -> Result<Self> {
        if image.height() != labels.height() || image.width() != labels.width() {
            return Err(Error::invalid("image and label map differ in size"));
        }
        Ok(Self {
            features: normalized_features(image, bank)?,
            labels: labels.clone(),
            pattern,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub seg: f64,
    pub aff: f64,
    pub total: f64,
}

impl LossTerms {
    fn new(seg: f64, aff: f64, cfg: &TrainConfig) -> Self {
        Self {
            seg,
            aff,
            total: cfg.seg_loss_weight * seg + cfg.aff_loss_weight * aff,
        }
    }

    fn is_finite(&self) -> bool {
        self.seg.is_finite() && self.aff.is_finite() && self.total.is_finite()
    }
}

struct Forward {
    f: UnaryPotentials,
    w: crate::graph::AffinityMatrix,
    a: crate::graph::TransitionMatrix,
    dy: UnaryPotentials,
    aff_residual: Vec<f64>,
    losses: LossTerms,
}

fn forward(sample: &PreparedSample, model: &ModelCheckpoint, cfg: &TrainConfig) -> Result<Forward> {
    if model.m() == 0 {
        return Err(Error::invalid("model has no classes"));
    }
    sample.labels.check_classes(model.m())?;
    let f = unary_forward(&sample.features, &model.unary)?;
    let w = affinity_forward_streamed(&sample.features, &sample.pattern, &model.theta)?;
    let a = transition(&w);
    let y = rw_step(&a, &f, &f, cfg.alpha)?;
    let (seg, dy) = softmax_loss_grad(&y, &sample.labels)?;
    let targets = ground_truth_affinity(&sample.labels, &sample.pattern)?;
    // Euclidean loss, averaged over edges so it stays commensurate with the
    // per-pixel mean cross-entropy at any radius
    let edges = w.values().len().max(1) as f64;
    let aff_residual: Vec<f64> = w.values().iter().zip(targets.values()).map(|(w, t)| w - t).collect();
    let aff = 0.5 * aff_residual.iter().map(|r| r * r).sum::<f64>() / edges;
    Ok(Forward {
        f,
        w,
        a,
        dy,
        aff_residual,
        losses: LossTerms::new(seg, aff, cfg),
    })
}

/// Losses of one sample without gradients.
pub fn objective(sample: &PreparedSample, model: &ModelCheckpoint, cfg: &TrainConfig) -> Result<LossTerms> {
    Ok(forward(sample, model, cfg)?.losses)
}

/// Losses of one sample and the gradient of
/// `seg_loss_weight * L_seg + aff_loss_weight * L_aff` for every parameter.
pub fn loss_and_gradients(
    sample: &PreparedSample,
    model: &ModelCheckpoint,
    cfg: &TrainConfig,
) -> Result<(LossTerms, Gradients)> {
    let fw = forward(sample, model, cfg)?;
    let alpha = cfg.alpha;
    let mut dy = fw.dy;
    for v in dy.values_mut() {
        *v *= cfg.seg_loss_weight;
    }

    // y = alpha A f + (1 - alpha) f
    let mut df = rw_backward_f(&fw.a, &dy)?;
    for (d, g) in df.values_mut().iter_mut().zip(dy.values()) {
        *d = alpha * *d + (1.0 - alpha) * g;
    }
    let mut da = rw_backward_a(&dy, &fw.f, &sample.pattern)?;
    for v in &mut da {
        *v *= alpha;
    }
    let mut dw = transition_backward(&fw.w, &fw.a, &da)?;
    let scale = cfg.aff_loss_weight / fw.aff_residual.len().max(1) as f64;
    for (d, r) in dw.iter_mut().zip(&fw.aff_residual) {
        *d += scale * r;
    }
    let theta = affinity_backward_streamed(&sample.features, &model.theta, &fw.w, &dw)?;
    let unary = unary_backward(&sample.features, &model.unary, &df)?;
    Ok((fw.losses, Gradients { theta, unary }))
}

/// Momentum SGD with decoupled weight decay: parameters first shrink by
/// `1 - lr * wd`, then move along the velocity `v = mu v - lr g`.
pub fn apply_update(state: &mut TrainState, grads: &Gradients, cfg: &TrainConfig) {
    let lr = cfg.learning_rate();
    let shrink = 1.0 - lr * cfg.weight_decay;
    let mut params = Gradients {
        theta: std::mem::take(&mut state.model.theta.theta),
        unary: std::mem::replace(&mut state.model.unary, UnaryParams::zeros(0, 0)),
    };
    for ((p, v), g) in params
        .values_mut()
        .zip(state.velocity.values_mut())
        .zip(grads.values())
    {
        *v = cfg.momentum * *v - lr * g;
        *p = *p * shrink + *v;
    }
    state.model.theta.theta = params.theta;
    state.model.unary = params.unary;
}

/// One optimization step on a minibatch: mean losses and gradients over the
/// batch, then one parameter update.
pub fn train_step(state: &mut TrainState, batch: &[&PreparedSample], cfg: &TrainConfig) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    let iteration = state.model.iteration as usize + 1;
    let mut sum = Gradients::zeros_like(&state.model);
    let (mut seg, mut aff) = (0.0, 0.0);
    for sample in batch {
        let (losses, grads) = match loss_and_gradients(sample, &state.model, cfg) {
            Ok(r) => r,
            Err(Error::InvalidInput(msg)) if msg.contains("overflow") || msg.contains("non-finite") => {
                return Err(Error::Divergence { iteration })
            }
            Err(e) => return Err(e),
        };
        seg += losses.seg;
        aff += losses.aff;
        sum.add_scaled(&grads, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    let losses = LossTerms::new(seg * inv, aff * inv, cfg);
    let mut mean = Gradients::zeros_like(&state.model);
    mean.add_scaled(&sum, inv);
    if !losses.is_finite() || mean.values().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { iteration });
    }
    apply_update(state, &mean, cfg);
    if state.model.theta.theta.iter().any(|v| !v.is_finite())
        || state.model.unary.weights.iter().chain(&state.model.unary.biases).any(|v| !v.is_finite())
    {
        return Err(Error::Divergence { iteration });
    }
    state.model.iteration += 1;
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub seg: f64,
    pub aff: f64,
}

pub const LOSS_CSV_HEADER: &str = "iter,seg_loss,aff_loss";

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in log {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.seg, r.aff));
    }
    out
}

/// Mean of the `window` records ending at 1-based iteration `at`.
pub fn moving_average(log: &[LossRecord], at: usize, window: usize) -> Option<(f64, f64)> {
    if window == 0 || at < window || at > log.len() {
        return None;
    }
    let slice = &log[at - window..at];
    let n = window as f64;
    Some((
        slice.iter().map(|r| r.seg).sum::<f64>() / n,
        slice.iter().map(|r| r.aff).sum::<f64>() / n,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelCheckpoint,
    pub log: Vec<LossRecord>,
}

/// Runs `cfg.iterations` steps over seeded shuffled minibatches. Each epoch is
/// a fresh permutation; a batch never holds more samples than the dataset.
/// With augmentation on, each drawn sample is mirrored with probability 1/2.
pub fn train(
    dataset: &[(ImageTensor, LabelMap)],
    bank: &FilterBankConfig,
    m: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(ModelCheckpoint::init(*bank, m), dataset, cfg)
}

pub fn train_from(
    model: ModelCheckpoint,
    dataset: &[(ImageTensor, LabelMap)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let bank = model.bank;
    let mut patterns: HashMap<(usize, usize), Arc<SparsityPattern>> = HashMap::new();
    let mut prepared = Vec::with_capacity(dataset.len());
    for (image, labels) in dataset {
        labels.check_classes(model.m())?;
        let key = (image.height(), image.width());
        let pattern = match patterns.get(&key) {
            Some(p) => Arc::clone(p),
            None => {
                let p = build_sparsity(key.0, key.1, cfg.train_radius)?;
                patterns.insert(key, Arc::clone(&p));
                p
            }
        };
        let plain = PreparedSample::with_pattern(image, labels, &bank, Arc::clone(&pattern))?;
        let flipped = if cfg.augment_hflip {
            Some(PreparedSample::with_pattern(
                &image.flip_horizontal(),
                &labels.flip_horizontal(),
                &bank,
                pattern,
            )?)
        } else {
            None
        };
        prepared.push((plain, flipped));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let batch_size = cfg.batch_size.min(prepared.len());
    let mut state = TrainState::new(model);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().unwrap();
            let (plain, flipped) = &prepared[idx];
            let sample = match flipped {
                Some(f) if rng.gen_bool(0.5) => f,
                _ => plain,
            };
            batch.push(sample);
        }
        let losses = train_step(&mut state, &batch, cfg).map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence { iteration: it },
            other => other,
        })?;
        log.push(LossRecord {
            iteration: it,
            seg: losses.seg,
            aff: losses.aff,
        });
    }
    Ok(TrainOutcome {
        model: state.model,
        log,
    })
}
