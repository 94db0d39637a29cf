//! Test-time diffusion to convergence.
//!
//! Three routes to the same quantity:
//! - [`diffuse_to_convergence`] iterates `y = alpha A y + (1 - alpha) f` to its
//!   fixed point `(1 - alpha)(I - alpha A)^-1 f`;
//! - [`solve_closed_form`] sums the Neumann series `sum_i (alpha A)^i f`,
//!   i.e. `(I - alpha A)^-1 f` without the `(1 - alpha)` factor;
//! - [`dense_oracle_solve`] eliminates the dense system, for verification at
//!   small sizes.
//!
//! Since `A` is row-stochastic, `||alpha A||_inf = alpha < 1` and both
//! iterative routes contract geometrically.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_sparsity, transition, AffinityMatrix, TransitionMatrix};
use crate::walk::{check_alpha, damped_matvec_into, rw_step, UnaryPotentials};

/// Largest system the dense oracle accepts.
pub const DENSE_MAX_PIXELS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMode {
    #[default]
    Iterate,
    Neumann,
    DenseOracle,
}

impl SolveMode {
    pub fn name(self) -> &'static str {
        match self {
            SolveMode::Iterate => "iterate",
            SolveMode::Neumann => "neumann",
            SolveMode::DenseOracle => "dense_oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "iterate" => Some(SolveMode::Iterate),
            "neumann" => Some(SolveMode::Neumann),
            "dense_oracle" => Some(SolveMode::DenseOracle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub alpha: f64,
    /// Max-abs change per sweep (or max-abs appended Neumann term).
    pub tolerance: f64,
    pub max_iterations: usize,
    pub mode: SolveMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            tolerance: 1e-6,
            max_iterations: 10_000,
            mode: SolveMode::Iterate,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha, false)?;
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid(format!("tolerance {} must be positive", self.tolerance)));
        }
        Ok(())
    }
}

fn check_shapes(a: &TransitionMatrix, f: &UnaryPotentials) -> Result<()> {
    if a.num_pixels() != f.num_pixels() {
        return Err(Error::invalid(format!(
            "transition matrix has {} pixels, potentials have {}",
            a.num_pixels(),
            f.num_pixels()
        )));
    }
    Ok(())
}

/// Iterates the damped step from `y0 = f` until successive iterates differ by
/// less than the tolerance in max-abs. Returns the iterate and the number of
/// sweeps taken.
pub fn diffuse_to_convergence(
    a: &TransitionMatrix,
    f: &UnaryPotentials,
    cfg: &SolverConfig,
) -> Result<(UnaryPotentials, usize)> {
    cfg.validate()?;
    check_shapes(a, f)?;
    if cfg.alpha == 0.0 {
        return Ok((f.clone(), 1));
    }
    let mut prev = f.clone();
    let mut next = UnaryPotentials::zeros(f.num_pixels(), f.m());
    let mut change = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        damped_matvec_into(a, &prev, f, cfg.alpha, 1.0 - cfg.alpha, &mut next);
        change = next.max_abs_diff(&prev);
        std::mem::swap(&mut prev, &mut next);
        if change < cfg.tolerance {
            return Ok((prev, it));
        }
    }
    Err(Error::Convergence {
        iterations: cfg.max_iterations,
        residual: change,
    })
}

/// Applies `steps` damped steps starting from `y0 = f`.
pub fn diffuse_steps(
    a: &TransitionMatrix,
    f: &UnaryPotentials,
    alpha: f64,
    steps: usize,
) -> Result<UnaryPotentials> {
    let mut y = f.clone();
    for _ in 0..steps {
        y = rw_step(a, f, &y, alpha)?;
    }
    Ok(y)
}

/// `(I - alpha A)^-1 f` by truncated Neumann series.
pub fn solve_closed_form(
    a: &TransitionMatrix,
    f: &UnaryPotentials,
    cfg: &SolverConfig,
) -> Result<UnaryPotentials> {
    solve_closed_form_traced(a, f, cfg).map(|(y, _)| y)
}

/// Like [`solve_closed_form`], also returning the max-abs norm of every
/// appended term (including the leading `f`).
pub fn solve_closed_form_traced(
    a: &TransitionMatrix,
    f: &UnaryPotentials,
    cfg: &SolverConfig,
) -> Result<(UnaryPotentials, Vec<f64>)> {
    cfg.validate()?;
    check_shapes(a, f)?;
    let mut norms = vec![f.max_abs()];
    if cfg.alpha == 0.0 {
        return Ok((f.clone(), norms));
    }
    let mut sum = f.clone();
    let mut term = f.clone();
    let mut next = UnaryPotentials::zeros(f.num_pixels(), f.m());
    for _ in 0..cfg.max_iterations {
        damped_matvec_into(a, &term, f, cfg.alpha, 0.0, &mut next);
        std::mem::swap(&mut term, &mut next);
        for (s, t) in sum.values_mut().iter_mut().zip(term.values()) {
            *s += t;
        }
        let norm = term.max_abs();
        norms.push(norm);
        if norm < cfg.tolerance {
            return Ok((sum, norms));
        }
    }
    Err(Error::Convergence {
        iterations: cfg.max_iterations,
        residual: *norms.last().unwrap_or(&f64::INFINITY),
    })
}

/// Exact dense solve of `(I - alpha A) y = f` by Gaussian elimination with
/// partial pivoting.
pub fn dense_oracle_solve(a: &TransitionMatrix, f: &UnaryPotentials, alpha: f64) -> Result<UnaryPotentials> {
    check_shapes(a, f)?;
    check_alpha(alpha, false)?;
    let n = a.num_pixels();
    if n > DENSE_MAX_PIXELS {
        return Err(Error::invalid(format!(
            "dense solve limited to {DENSE_MAX_PIXELS} pixels, got {n}"
        )));
    }
    if alpha == 0.0 {
        return Ok(f.clone());
    }
    let m = f.m();
    let stride = n + m;
    // augmented [I - alpha A | f]
    let mut aug = vec![0.0; n * stride];
    let pattern = a.pattern();
    for i in 0..n {
        let row = &mut aug[i * stride..(i + 1) * stride];
        row[i] = 1.0;
        for e in pattern.row_range(i) {
            row[pattern.cols()[e]] -= alpha * a.values()[e];
        }
        row[n..].copy_from_slice(f.row(i));
    }
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&x, &y| aug[x * stride + k].abs().total_cmp(&aug[y * stride + k].abs()))
            .unwrap_or(k);
        if aug[pivot * stride + k] == 0.0 {
            return Err(Error::invalid("singular system in dense solve"));
        }
        if pivot != k {
            for c in 0..stride {
                aug.swap(k * stride + c, pivot * stride + c);
            }
        }
        let (head, tail) = aug.split_at_mut((k + 1) * stride);
        let pivot_row = &head[k * stride..];
        let p = pivot_row[k];
        for row in tail.chunks_exact_mut(stride) {
            let factor = row[k] / p;
            if factor == 0.0 {
                continue;
            }
            for (x, y) in row[k..].iter_mut().zip(&pivot_row[k..]) {
                *x -= factor * y;
            }
        }
    }
    let mut y = UnaryPotentials::zeros(n, m);
    for i in (0..n).rev() {
        let row = &aug[i * stride..(i + 1) * stride];
        for c in 0..m {
            let mut acc = row[n + c];
            for (j, &r) in row.iter().enumerate().take(n).skip(i + 1) {
                acc -= r * y.row(j)[c];
            }
            y.row_mut(i)[c] = acc / row[i];
        }
    }
    Ok(y)
}

/// The converged prediction in the fixed-point scale
/// `(1 - alpha)(I - alpha A)^-1 f`, computed by the configured route.
pub fn converge(a: &TransitionMatrix, f: &UnaryPotentials, cfg: &SolverConfig) -> Result<UnaryPotentials> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        check_shapes(a, f)?;
        return Ok(f.clone());
    }
    let unscaled = match cfg.mode {
        SolveMode::Iterate => return diffuse_to_convergence(a, f, cfg).map(|(y, _)| y),
        SolveMode::Neumann => solve_closed_form(a, f, cfg)?,
        SolveMode::DenseOracle => dense_oracle_solve(a, f, cfg.alpha)?,
    };
    let scale = 1.0 - cfg.alpha;
    let mut y = unscaled;
    y.values_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_pixels: usize,
    pub radius: usize,
    pub nnz: usize,
    pub step_ms: f64,
    pub solve_ms: f64,
    pub dense_ms: Option<f64>,
    pub iters: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const BENCH_CSV_HEADER: &str = "n_pixels,radius,nnz,step_ms,solve_ms,dense_ms,iters";

impl BenchReport {
    /// CSV with [`BENCH_CSV_HEADER`]; `dense_ms` is empty where the dense
    /// solve was skipped.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let dense = r.dense_ms.map(|d| format!("{d:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{}",
                r.n_pixels, r.radius, r.nnz, r.step_ms, r.solve_ms, dense, r.iters
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub classes: usize,
    pub seed: u64,
    /// Minimum wall-clock spent timing each sparse step measurement.
    pub min_step_time_ms: f64,
    pub run_dense: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            classes: 3,
            seed: 0,
            min_step_time_ms: 50.0,
            run_dense: true,
        }
    }
}

pub fn bench_step_vs_solve(
    sizes: &[(usize, usize)],
    radius: usize,
    cfg: &SolverConfig,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if sizes.is_empty() {
        return Err(Error::invalid("no benchmark sizes given"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &(h, w) in sizes {
        let pattern = build_sparsity(h, w, radius)?;
        let weights = (0..pattern.num_edges()).map(|_| rng.gen_range(0.05..1.0)).collect();
        let a = transition(&AffinityMatrix::from_values(Arc::clone(&pattern), weights)?);
        let n = h * w;
        let f = UnaryPotentials::new(
            n,
            opts.classes,
            (0..n * opts.classes).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )?;

        let step_ms = time_step(&a, &f, cfg.alpha, opts.min_step_time_ms)?;

        let start = Instant::now();
        let (_, iters) = diffuse_to_convergence(&a, &f, cfg)?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;

        let dense_ms = if opts.run_dense && n <= DENSE_MAX_PIXELS {
            let start = Instant::now();
            dense_oracle_solve(&a, &f, cfg.alpha.max(f64::MIN_POSITIVE))?;
            Some(start.elapsed().as_secs_f64() * 1e3)
        } else {
            None
        };
        rows.push(BenchRow {
            n_pixels: n,
            radius,
            nnz: pattern.num_edges(),
            step_ms,
            solve_ms,
            dense_ms,
            iters,
        });
    }
    Ok(BenchReport { rows })
}

/// Median wall-clock of one sparse damped step, in milliseconds.
fn time_step(a: &TransitionMatrix, f: &UnaryPotentials, alpha: f64, min_total_ms: f64) -> Result<f64> {
    let mut out = UnaryPotentials::zeros(f.num_pixels(), f.m());
    let alpha = alpha.max(f64::MIN_POSITIVE);
    check_alpha(alpha, true)?;
    // warm-up
    damped_matvec_into(a, f, f, alpha, 1.0 - alpha, &mut out);
    let mut samples = Vec::new();
    let budget = Instant::now();
    while samples.len() < 7 || (budget.elapsed().as_secs_f64() * 1e3 < min_total_ms && samples.len() < 10_000) {
        let start = Instant::now();
        damped_matvec_into(a, f, f, alpha, 1.0 - alpha, &mut out);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&out);
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SparsityPattern;

    fn swap() -> TransitionMatrix {
        let p = build_sparsity(1, 2, 1).unwrap();
        transition(&AffinityMatrix::from_values(p, vec![1.0, 1.0]).unwrap())
    }

    fn random_case(h: usize, w: usize, r: usize, m: usize, seed: u64) -> (TransitionMatrix, UnaryPotentials) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Arc<SparsityPattern> = build_sparsity(h, w, r).unwrap();
        let wv = (0..p.num_edges()).map(|_| rng.gen_range(0.01..1.0)).collect();
        let a = transition(&AffinityMatrix::from_values(p, wv).unwrap());
        let f = UnaryPotentials::new(h * w, m, (0..h * w * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (a, f)
    }

    fn cfg(alpha: f64) -> SolverConfig {
        SolverConfig {
            alpha,
            tolerance: 1e-12,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn alpha_zero_returns_f_in_one_iteration() {
        let (a, f) = random_case(3, 3, 1, 2, 1);
        let (y, iters) = diffuse_to_convergence(&a, &f, &cfg(0.0)).unwrap();
        assert_eq!((y, iters), (f.clone(), 1));
        assert_eq!(solve_closed_form(&a, &f, &cfg(0.0)).unwrap(), f);
        assert_eq!(dense_oracle_solve(&a, &f, 0.0).unwrap(), f);
    }

    #[test]
    fn swap_graph_fixed_point() {
        // (1 - a)(I - aA)^-1 with a = 1/2 on the swap is [[2/3, 1/3], [1/3, 2/3]]
        let a = swap();
        let f = UnaryPotentials::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (y, _) = diffuse_to_convergence(&a, &f, &cfg(0.5)).unwrap();
        let expected = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (v, e) in y.values().iter().zip(expected) {
            assert!((v - e).abs() < 1e-11, "{v} vs {e}");
        }
    }

    #[test]
    fn constants_are_fixed_points() {
        let (a, _) = random_case(4, 4, 2, 2, 3);
        let f = UnaryPotentials::new(16, 2, [0.25, -2.0].repeat(16)).unwrap();
        for alpha in [0.01, 0.5, 0.9] {
            let (y, _) = diffuse_to_convergence(&a, &f, &cfg(alpha)).unwrap();
            assert!(y.max_abs_diff(&f) < 1e-10);
        }
    }

    #[test]
    fn routes_agree() {
        for seed in 0..5 {
            let (a, f) = random_case(5, 5, 2, 3, seed);
            let alpha = 0.3 + 0.1 * seed as f64;
            let neumann = solve_closed_form(&a, &f, &cfg(alpha)).unwrap();
            let dense = dense_oracle_solve(&a, &f, alpha).unwrap();
            assert!(neumann.max_abs_diff(&dense) < 1e-8);
            let (fixed, _) = diffuse_to_convergence(&a, &f, &cfg(alpha)).unwrap();
            assert_eq!(fixed.argmax(), neumann.argmax());
        }
    }

    #[test]
    fn residual_contract() {
        let (a, f) = random_case(6, 6, 2, 3, 9);
        let c = SolverConfig { alpha: 0.8, tolerance: 1e-6, ..SolverConfig::default() };
        let (y, _) = diffuse_to_convergence(&a, &f, &c).unwrap();
        let ay = crate::walk::rw_forward(&a, &y).unwrap();
        let residual = y
            .values()
            .iter()
            .zip(ay.values())
            .zip(f.values())
            .map(|((y, ay), f)| (y - c.alpha * ay - (1.0 - c.alpha) * f).abs())
            .fold(0.0, f64::max);
        assert!(residual < c.tolerance * (1.0 + f.max_abs()));
    }

    #[test]
    fn neumann_terms_contract_by_alpha() {
        let (a, f) = random_case(6, 5, 2, 2, 4);
        let (_, norms) = solve_closed_form_traced(&a, &f, &cfg(0.7)).unwrap();
        assert!(norms.len() > 3);
        for pair in norms.windows(2) {
            assert!(pair[1] <= 0.7 * pair[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn convergence_failure_reports_residual() {
        let (a, f) = random_case(4, 4, 1, 2, 2);
        let c = SolverConfig { alpha: 0.99, tolerance: 1e-12, max_iterations: 3, mode: SolveMode::Iterate };
        match diffuse_to_convergence(&a, &f, &c) {
            Err(Error::Convergence { iterations: 3, residual }) => assert!(residual > 0.0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(solve_closed_form(&a, &f, &c), Err(Error::Convergence { .. })));
    }

    #[test]
    fn config_validation() {
        let (a, f) = random_case(2, 2, 1, 2, 2);
        assert!(diffuse_to_convergence(&a, &f, &cfg(1.0)).is_err());
        let bad_tol = SolverConfig { tolerance: 0.0, ..SolverConfig::default() };
        assert!(solve_closed_form(&a, &f, &bad_tol).is_err());
    }

    #[test]
    fn dense_guard_and_single_pixel() {
        let p = build_sparsity(1, 1, 3).unwrap();
        let a = transition(&AffinityMatrix::from_values(p, vec![]).unwrap());
        let f = UnaryPotentials::new(1, 2, vec![0.4, -0.1]).unwrap();
        for alpha in [0.0, 0.5, 0.99] {
            // isolated pixel: (I - alpha A) is the identity
            assert_eq!(dense_oracle_solve(&a, &f, alpha).unwrap(), f);
        }
        let big = build_sparsity(65, 64, 1).unwrap();
        let a = transition(&AffinityMatrix::from_values(Arc::clone(&big), vec![1.0; big.num_edges()]).unwrap());
        let f = UnaryPotentials::zeros(65 * 64, 1);
        assert!(matches!(dense_oracle_solve(&a, &f, 0.5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn converge_modes_share_scale() {
        let (a, f) = random_case(5, 4, 2, 3, 11);
        let mut c = cfg(0.4);
        let mut outs = Vec::new();
        for mode in [SolveMode::Iterate, SolveMode::Neumann, SolveMode::DenseOracle] {
            c.mode = mode;
            outs.push(converge(&a, &f, &c).unwrap());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) < 1e-10);
        assert!(outs[1].max_abs_diff(&outs[2]) < 1e-10);
    }

    #[test]
    fn bench_csv_shape() {
        let opts = BenchOptions { min_step_time_ms: 1.0, ..BenchOptions::default() };
        let report = bench_step_vs_solve(&[(8, 8), (12, 10)], 2, &SolverConfig::default(), &opts).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(BENCH_CSV_HEADER));
        assert_eq!(lines.count(), 2);
        for r in &report.rows {
            assert!(r.step_ms > 0.0 && r.solve_ms > 0.0 && r.dense_ms.unwrap() > 0.0);
        }
        assert!(bench_step_vs_solve(&[], 2, &SolverConfig::default(), &opts).is_err());
    }
}
