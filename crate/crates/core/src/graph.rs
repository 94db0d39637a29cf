//! Sparse pixel-affinity graph: neighborhood pattern, per-channel distance
//! tensor, the learned affinity head `W = exp(F · theta)`, ground-truth
//! affinity targets with their Euclidean loss, and the row-stochastic
//! transition matrix `A = D^-1 W`, together with the backward passes of each
//! step.
//!
//! Every per-edge quantity is a flat array aligned with one shared
//! [`SparsityPattern`], stored in compressed row form. Edge `e` of row `i`
//! lives at `pattern.row_range(i)`.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::image::LabelMap;

/// Per-edge values aligned with a pattern's edge order.
pub type EdgeValues = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborhoodMetric {
    #[default]
    Euclidean,
    Chebyshev,
}

impl NeighborhoodMetric {
    fn contains(self, dy: isize, dx: isize, radius: usize) -> bool {
        let r = radius as isize;
        match self {
            NeighborhoodMetric::Euclidean => dy * dy + dx * dx <= r * r,
            NeighborhoodMetric::Chebyshev => dy.abs() <= r && dx.abs() <= r,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NeighborhoodMetric::Euclidean => "euclidean",
            NeighborhoodMetric::Chebyshev => "chebyshev",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" => Some(NeighborhoodMetric::Euclidean),
            "chebyshev" => Some(NeighborhoodMetric::Chebyshev),
            _ => None,
        }
    }
}

/// Symmetric, self-loop-free neighborhood structure over an `h x w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    height: usize,
    width: usize,
    radius: usize,
    metric: NeighborhoodMetric,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    /// `reverse[e]` is the index of the edge `(j, i)` for edge `e = (i, j)`.
    reverse: Vec<usize>,
}

impl SparsityPattern {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn metric(&self) -> NeighborhoodMetric {
        self.metric
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Number of directed edges.
    pub fn num_edges(&self) -> usize {
        self.cols.len()
    }

    pub fn row_range(&self, i: usize) -> Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Neighbors of pixel `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.cols[self.row_range(i)]
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn reverse_edge(&self, e: usize) -> usize {
        self.reverse[e]
    }

    /// Index of edge `(i, j)` if present.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let range = self.row_range(i);
        self.cols[range.clone()]
            .binary_search(&j)
            .ok()
            .map(|off| range.start + off)
    }

    /// Iterates `(edge, i, j)` in storage order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.num_pixels()).flat_map(move |i| self.row_range(i).map(move |e| (e, i, self.cols[e])))
    }
}

fn same_pattern(a: &Arc<SparsityPattern>, b: &Arc<SparsityPattern>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

pub fn build_sparsity(height: usize, width: usize, radius: usize) -> Result<Arc<SparsityPattern>> {
    build_sparsity_with_metric(height, width, radius, NeighborhoodMetric::Euclidean)
}

pub fn build_sparsity_with_metric(
    height: usize,
    width: usize,
    radius: usize,
    metric: NeighborhoodMetric,
) -> Result<Arc<SparsityPattern>> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("zero-sized grid {height}x{width}")));
    }
    if radius == 0 {
        return Err(Error::invalid("radius must be at least 1"));
    }
    // Lexicographic (dy, dx) order gives ascending column indices because
    // in-bounds offsets always have |dx| < width.
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| (dy, dx) != (0, 0) && metric.contains(dy, dx, radius))
        .collect();

    let (h, w) = (height as isize, width as isize);
    let mut row_ptr = Vec::with_capacity(height * width + 1);
    let mut cols = Vec::new();
    row_ptr.push(0);
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if (0..h).contains(&ny) && (0..w).contains(&nx) {
                    cols.push((ny * w + nx) as usize);
                }
            }
            row_ptr.push(cols.len());
        }
    }
    let mut pattern = SparsityPattern {
        height,
        width,
        radius,
        metric,
        row_ptr,
        cols,
        reverse: Vec::new(),
    };
    let reverse = pattern
        .edges()
        .map(|(_, i, j)| pattern.find(j, i).expect("neighborhood is symmetric"))
        .collect();
    pattern.reverse = reverse;
    Ok(Arc::new(pattern))
}

/// Per-edge, per-channel L1 distances; `values[e * k + c]`.
#[derive(Debug, Clone)]
pub struct ChannelDistanceTensor {
    pattern: Arc<SparsityPattern>,
    k: usize,
    values: Vec<f64>,
}

impl ChannelDistanceTensor {
    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn edge(&self, e: usize) -> &[f64] {
        &self.values[e * self.k..(e + 1) * self.k]
    }
}

pub fn channel_distances(
    stack: &FeatureStack,
    pattern: &Arc<SparsityPattern>,
) -> Result<ChannelDistanceTensor> {
    if stack.height() != pattern.height() || stack.width() != pattern.width() {
        return Err(Error::invalid(format!(
            "feature stack {}x{} does not match pattern {}x{}",
            stack.height(),
            stack.width(),
            pattern.height(),
            pattern.width()
        )));
    }
    let k = stack.k();
    let mut values = Vec::with_capacity(pattern.num_edges() * k);
    for (_, i, j) in pattern.edges() {
        let (a, b) = (stack.pixel(i), stack.pixel(j));
        values.extend(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
    }
    Ok(ChannelDistanceTensor {
        pattern: Arc::clone(pattern),
        k,
        values,
    })
}

/// Weights of the bias-free `1x1xk` affinity convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityParams {
    pub theta: Vec<f64>,
}

impl AffinityParams {
    /// `-1/k` per channel, so initial affinities lie in `(0, 1]`.
    pub fn init(k: usize) -> Self {
        let v = if k > 0 { -1.0 / k as f64 } else { 0.0 };
        Self { theta: vec![v; k] }
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.theta.len()
    }
}

#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pattern: Arc<SparsityPattern>,
    w: EdgeValues,
}

impl AffinityMatrix {
    pub fn from_values(pattern: Arc<SparsityPattern>, w: EdgeValues) -> Result<Self> {
        if w.len() != pattern.num_edges() {
            return Err(Error::invalid("affinity values do not match the pattern"));
        }
        if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::invalid(format!("affinity {v} is not finite and positive")));
        }
        Ok(Self { pattern, w })
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    /// `"i j value"` lines, one per stored edge.
    pub fn to_triplets(&self) -> String {
        triplets(&self.pattern, &self.w)
    }
}

/// `W_ij = exp(sum_c theta_c * F(i,j,c))`.
pub fn affinity_forward(f: &ChannelDistanceTensor, params: &AffinityParams) -> Result<AffinityMatrix> {
    if f.k != params.k() {
        return Err(Error::invalid(format!(
            "distance tensor has {} channels, params have {}",
            f.k,
            params.k()
        )));
    }
    if params.theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("non-finite affinity parameter"));
    }
    let w: EdgeValues = (0..f.pattern.num_edges())
        .map(|e| {
            let z: f64 = f.edge(e).iter().zip(&params.theta).map(|(d, t)| d * t).sum();
            z.exp()
        })
        .collect();
    if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::invalid("affinity overflowed or underflowed"));
    }
    Ok(AffinityMatrix {
        pattern: Arc::clone(&f.pattern),
        w,
    })
}

/// `dtheta_c = sum_e dW_e * W_e * F(e, c)`, accumulated in edge order.
pub fn affinity_backward(
    f: &ChannelDistanceTensor,
    params: &AffinityParams,
    w: &AffinityMatrix,
    dw: &[f64],
) -> Result<Vec<f64>> {
    if f.k != params.k() || dw.len() != w.w.len() || !same_pattern(&f.pattern, &w.pattern) {
        return Err(Error::invalid("inconsistent shapes in affinity backward"));
    }
    let mut dtheta = vec![0.0; f.k];
    for (e, (&g, &wv)) in dw.iter().zip(&w.w).enumerate() {
        let s = g * wv;
        if s == 0.0 {
            continue;
        }
        for (acc, d) in dtheta.iter_mut().zip(f.edge(e)) {
            *acc += s * d;
        }
    }
    Ok(dtheta)
}

fn check_stack(stack: &FeatureStack, pattern: &SparsityPattern, params: &AffinityParams) -> Result<()> {
    if stack.height() != pattern.height() || stack.width() != pattern.width() || stack.k() != params.k() {
        return Err(Error::invalid("feature stack, pattern and params disagree"));
    }
    Ok(())
}

/// Same result as `affinity_forward(channel_distances(stack, pattern), params)`
/// without materializing the `nnz x k` distance tensor, which at large radii
/// would not fit in memory.
pub fn affinity_forward_streamed(
    stack: &FeatureStack,
    pattern: &Arc<SparsityPattern>,
    params: &AffinityParams,
) -> Result<AffinityMatrix> {
    check_stack(stack, pattern, params)?;
    if params.theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("non-finite affinity parameter"));
    }
    let w: EdgeValues = pattern
        .edges()
        .map(|(_, i, j)| {
            let z: f64 = stack
                .pixel(i)
                .iter()
                .zip(stack.pixel(j))
                .zip(&params.theta)
                .map(|((a, b), t)| (a - b).abs() * t)
                .sum();
            z.exp()
        })
        .collect();
    if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::invalid("affinity overflowed or underflowed"));
    }
    Ok(AffinityMatrix {
        pattern: Arc::clone(pattern),
        w,
    })
}

/// Streaming counterpart of [`affinity_backward`].
pub fn affinity_backward_streamed(
    stack: &FeatureStack,
    params: &AffinityParams,
    w: &AffinityMatrix,
    dw: &[f64],
) -> Result<Vec<f64>> {
    check_stack(stack, &w.pattern, params)?;
    if dw.len() != w.w.len() {
        return Err(Error::invalid("inconsistent shapes in affinity backward"));
    }
    let mut dtheta = vec![0.0; params.k()];
    for (e, i, j) in w.pattern.edges() {
        let s = dw[e] * w.w[e];
        if s == 0.0 {
            continue;
        }
        for ((acc, a), b) in dtheta.iter_mut().zip(stack.pixel(i)).zip(stack.pixel(j)) {
            *acc += s * (a - b).abs();
        }
    }
    Ok(dtheta)
}

/// Ground-truth affinities: 1 for same-label pairs inside the pattern, else 0.
#[derive(Debug, Clone)]
pub struct AffinityTargets {
    pattern: Arc<SparsityPattern>,
    t: EdgeValues,
}

impl AffinityTargets {
    pub fn values(&self) -> &[f64] {
        &self.t
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }
}

pub fn ground_truth_affinity(labels: &LabelMap, pattern: &Arc<SparsityPattern>) -> Result<AffinityTargets> {
    if labels.num_pixels() != pattern.num_pixels() {
        return Err(Error::invalid("label map does not match the pattern"));
    }
    let l = labels.data();
    let t = pattern
        .edges()
        .map(|(_, i, j)| if l[i] == l[j] { 1.0 } else { 0.0 })
        .collect();
    Ok(AffinityTargets {
        pattern: Arc::clone(pattern),
        t,
    })
}

/// Euclidean loss `1/2 sum_e (W_e - t_e)^2` and its gradient `W_e - t_e`.
pub fn affinity_loss_grad(w: &AffinityMatrix, targets: &AffinityTargets) -> Result<(f64, EdgeValues)> {
    if !same_pattern(&w.pattern, &targets.pattern) {
        return Err(Error::invalid("affinity and targets use different patterns"));
    }
    let dw: EdgeValues = w.w.iter().zip(&targets.t).map(|(w, t)| w - t).collect();
    let loss = 0.5 * dw.iter().map(|d| d * d).sum::<f64>();
    Ok((loss, dw))
}

/// Row-stochastic random walk matrix `A = D^-1 W`.
///
/// Pixels without neighbors keep an empty row and a zero degree.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pattern: Arc<SparsityPattern>,
    a: EdgeValues,
    degree: Vec<f64>,
}

impl TransitionMatrix {
    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.a
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn num_pixels(&self) -> usize {
        self.pattern.num_pixels()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.a[self.pattern.row_range(i)].iter().sum()
    }

    /// Dense `n x n` copy, row-major. Only for small oracles and debugging.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.num_pixels();
        let mut dense = vec![0.0; n * n];
        for (e, i, j) in self.pattern.edges() {
            dense[i * n + j] = self.a[e];
        }
        dense
    }

    pub fn to_triplets(&self) -> String {
        triplets(&self.pattern, &self.a)
    }
}

pub fn transition(w: &AffinityMatrix) -> TransitionMatrix {
    let p = &w.pattern;
    let mut a = vec![0.0; w.w.len()];
    let mut degree = vec![0.0; p.num_pixels()];
    for (i, d) in degree.iter_mut().enumerate() {
        let range = p.row_range(i);
        *d = w.w[range.clone()].iter().sum();
        for e in range {
            a[e] = w.w[e] / *d;
        }
    }
    TransitionMatrix {
        pattern: Arc::clone(p),
        a,
        degree,
    }
}

/// Jacobian-transpose of row normalization:
/// `dW_ij = (dA_ij - sum_j' dA_ij' A_ij') / D_ii`.
pub fn transition_backward(w: &AffinityMatrix, a: &TransitionMatrix, da: &[f64]) -> Result<EdgeValues> {
    if !same_pattern(&w.pattern, &a.pattern) || da.len() != a.a.len() {
        return Err(Error::invalid("inconsistent shapes in transition backward"));
    }
    let p = &a.pattern;
    let mut dw = vec![0.0; da.len()];
    for i in 0..p.num_pixels() {
        let range = p.row_range(i);
        if range.is_empty() {
            continue;
        }
        let inner: f64 = range.clone().map(|e| da[e] * a.a[e]).sum();
        let d = a.degree[i];
        for e in range {
            dw[e] = (da[e] - inner) / d;
        }
    }
    Ok(dw)
}

fn triplets(pattern: &SparsityPattern, values: &[f64]) -> String {
    let mut out = String::new();
    for (e, i, j) in pattern.edges() {
        let _ = writeln!(out, "{i} {j} {}", values[e]);
    }
    out
}
