//! The random walk layer: one diffusion step `y = A f`, the damped step
//! `y' = alpha A y + (1 - alpha) f`, and both analytic backward passes
//! (`dL/df = A^T dL/dy` and `dL/dA = dL/dy f^T` restricted to the pattern).
//!
//! The layer holds no state; everything is a free function over `(A, f)`.

use crate::error::{Error, Result};
use crate::graph::{EdgeValues, SparsityPattern, TransitionMatrix};

/// `num_pixels x m` class scores, row-major. Also used for diffused
/// predictions and for gradients with respect to either.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryPotentials {
    num_pixels: usize,
    m: usize,
    values: Vec<f64>,
}

impl UnaryPotentials {
    pub fn new(num_pixels: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_pixels * m {
            return Err(Error::invalid(format!(
                "potentials length {} does not match {num_pixels}x{m}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite potential"));
        }
        Ok(Self {
            num_pixels,
            m,
            values,
        })
    }

    pub fn zeros(num_pixels: usize, m: usize) -> Self {
        Self {
            num_pixels,
            m,
            values: vec![0.0; num_pixels * m],
        }
    }

    /// One-hot rows for a label vector.
    pub fn one_hot(labels: &[u32], m: usize) -> Result<Self> {
        let mut out = Self::zeros(labels.len(), m);
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= m {
                return Err(Error::invalid(format!("label {l} out of range for {m} classes")));
            }
            out.values[i * m + l as usize] = 1.0;
        }
        Ok(out)
    }

    pub fn num_pixels(&self) -> usize {
        self.num_pixels
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.m..(i + 1) * self.m]
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<u32> {
        self.values
            .chunks_exact(self.m)
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }

    /// Row-wise softmax.
    pub fn softmax(&self) -> UnaryPotentials {
        let mut out = self.clone();
        for row in out.values.chunks_exact_mut(self.m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &UnaryPotentials) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    fn same_shape(&self, other: &UnaryPotentials) -> Result<()> {
        if self.num_pixels != other.num_pixels || self.m != other.m {
            return Err(Error::invalid(format!(
                "potentials shape mismatch: {}x{} vs {}x{}",
                self.num_pixels, self.m, other.num_pixels, other.m
            )));
        }
        Ok(())
    }
}

fn check_pixels(a: &TransitionMatrix, f: &UnaryPotentials) -> Result<()> {
    if a.num_pixels() != f.num_pixels {
        return Err(Error::invalid(format!(
            "transition matrix has {} pixels, potentials have {}",
            a.num_pixels(),
            f.num_pixels
        )));
    }
    Ok(())
}

/// `out = scale * A y + shift * base`, written into `out`. Pixels with an
/// empty row keep their own value in place of `A y`.
pub(crate) fn damped_matvec_into(
    a: &TransitionMatrix,
    y: &UnaryPotentials,
    base: &UnaryPotentials,
    scale: f64,
    shift: f64,
    out: &mut UnaryPotentials,
) {
    let p = a.pattern();
    let m = y.m;
    let cols = p.cols();
    let av = a.values();
    for i in 0..y.num_pixels {
        let range = p.row_range(i);
        let dst = &mut out.values[i * m..(i + 1) * m];
        if range.is_empty() {
            dst.copy_from_slice(y.row(i));
        } else {
            dst.fill(0.0);
            for e in range {
                let w = av[e];
                let src = &y.values[cols[e] * m..(cols[e] + 1) * m];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        if scale != 1.0 || shift != 0.0 {
            for (d, b) in dst.iter_mut().zip(base.row(i)) {
                *d = scale * *d + shift * b;
            }
        }
    }
}

/// One random walk step, `y = A f`.
pub fn rw_forward(a: &TransitionMatrix, f: &UnaryPotentials) -> Result<UnaryPotentials> {
    check_pixels(a, f)?;
    let mut out = UnaryPotentials::zeros(f.num_pixels, f.m);
    damped_matvec_into(a, f, f, 1.0, 0.0, &mut out);
    Ok(out)
}

/// `y_{t+1} = alpha A y_t + (1 - alpha) f`.
pub fn rw_step(
    a: &TransitionMatrix,
    f: &UnaryPotentials,
    y_t: &UnaryPotentials,
    alpha: f64,
) -> Result<UnaryPotentials> {
    check_alpha(alpha, true)?;
    check_pixels(a, f)?;
    f.same_shape(y_t)?;
    if alpha == 0.0 {
        return Ok(f.clone());
    }
    let mut out = UnaryPotentials::zeros(f.num_pixels, f.m);
    damped_matvec_into(a, y_t, f, alpha, 1.0 - alpha, &mut out);
    Ok(out)
}

pub(crate) fn check_alpha(alpha: f64, allow_one: bool) -> Result<()> {
    let ok = alpha >= 0.0 && (alpha < 1.0 || (allow_one && alpha == 1.0));
    if !ok {
        let range = if allow_one { "[0, 1]" } else { "[0, 1)" };
        return Err(Error::invalid(format!("alpha {alpha} outside {range}")));
    }
    Ok(())
}

/// `dL/df = A^T dL/dy`, scattered row by row in edge order.
pub fn rw_backward_f(a: &TransitionMatrix, dy: &UnaryPotentials) -> Result<UnaryPotentials> {
    check_pixels(a, dy)?;
    let p = a.pattern();
    let m = dy.m;
    let mut df = UnaryPotentials::zeros(dy.num_pixels, m);
    for (e, i, j) in p.edges() {
        let w = a.values()[e];
        let (src, dst) = (i * m, j * m);
        for c in 0..m {
            df.values[dst + c] += w * dy.values[src + c];
        }
    }
    // empty rows act as identity in the forward pass
    for i in 0..dy.num_pixels {
        if p.row_range(i).is_empty() {
            for c in 0..m {
                df.values[i * m + c] += dy.values[i * m + c];
            }
        }
    }
    Ok(df)
}

/// `dL/dA_ij = <dy_i, f_j>` for each `(i, j)` in the pattern.
pub fn rw_backward_a(
    dy: &UnaryPotentials,
    f: &UnaryPotentials,
    pattern: &SparsityPattern,
) -> Result<EdgeValues> {
    dy.same_shape(f)?;
    if pattern.num_pixels() != f.num_pixels {
        return Err(Error::invalid("pattern does not match potentials"));
    }
    Ok(pattern
        .edges()
        .map(|(_, i, j)| dy.row(i).iter().zip(f.row(j)).map(|(a, b)| a * b).sum())
        .collect())
}
