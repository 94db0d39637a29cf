//! Low-level per-pixel feature stack feeding the affinity branch.
//!
//! Channels are `[RGB | bank1 | bank2]`. The two banks are fixed 3x3 filter
//! banks drawn from a seeded generator, applied at stride 1 with reflective
//! padding and rectified; bank2 consumes bank1's responses (or RGB when bank1
//! is empty). Spatial resolution is never reduced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterBankConfig {
    pub f1: usize,
    pub f2: usize,
    pub seed: u32,
}

impl Default for FilterBankConfig {
    fn default() -> Self {
        Self {
            f1: 64,
            f2: 64,
            seed: 7,
        }
    }
}

impl FilterBankConfig {
    /// Channel count of the resulting stack, `3 + f1 + f2`.
    pub fn num_channels(&self) -> usize {
        3 + self.f1 + self.f2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    height: usize,
    width: usize,
    k: usize,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(height: usize, width: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * k {
            return Err(Error::invalid(format!(
                "feature data length {} does not match {height}x{width}x{k}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Self {
            height,
            width,
            k,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector of pixel `i` (row-major index).
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(c).step_by(self.k).copied()
    }
}

/// A bank of `count` 3x3 filters over `in_channels` inputs, weights laid out
/// `[filter][dy][dx][in_channel]`.
struct FilterBank {
    count: usize,
    in_channels: usize,
    weights: Vec<f64>,
}

impl FilterBank {
    fn random(count: usize, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        // zero-mean uniform with variance 1/fan_in
        let scale = (3.0 / (9 * in_channels) as f64).sqrt();
        let weights = (0..count * 9 * in_channels)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Self {
            count,
            in_channels,
            weights,
        }
    }

    /// Rectified responses, channel-last.
    fn apply(&self, input: &[f64], height: usize, width: usize) -> Vec<f64> {
        let cin = self.in_channels;
        let mut out = vec![0.0; height * width * self.count];
        let mut patch = vec![0.0; 9 * cin];
        for y in 0..height {
            for x in 0..width {
                for dy in 0..3 {
                    let sy = reflect(y as isize + dy as isize - 1, height);
                    for dx in 0..3 {
                        let sx = reflect(x as isize + dx as isize - 1, width);
                        let src = (sy * width + sx) * cin;
                        let dst = (dy * 3 + dx) * cin;
                        patch[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                    }
                }
                let base = (y * width + x) * self.count;
                for (f, w) in self.weights.chunks_exact(9 * cin).enumerate() {
                    let r: f64 = w.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    out[base + f] = r.max(0.0);
                }
            }
        }
        out
    }
}

/// Reflect-101 padding; falls back to clamping on a 1-pixel axis.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

pub fn extract_features(image: &ImageTensor, bank: &FilterBankConfig) -> Result<FeatureStack> {
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(Error::invalid("zero-sized image"));
    }
    if image.channels() != 3 {
        return Err(Error::invalid(format!(
            "expected an RGB image, got {} channels",
            image.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(bank.seed));
    let bank1 = FilterBank::random(bank.f1, 3, &mut rng);
    let bank2_in = if bank.f1 > 0 { bank.f1 } else { 3 };
    let bank2 = FilterBank::random(bank.f2, bank2_in, &mut rng);

    let rgb = image.data();
    let r1 = bank1.apply(rgb, h, w);
    let r2 = if bank.f1 > 0 {
        bank2.apply(&r1, h, w)
    } else {
        bank2.apply(rgb, h, w)
    };

    let k = bank.num_channels();
    let mut data = Vec::with_capacity(h * w * k);
    for i in 0..h * w {
        data.extend_from_slice(&rgb[i * 3..i * 3 + 3]);
        data.extend_from_slice(&r1[i * bank.f1..(i + 1) * bank.f1]);
        data.extend_from_slice(&r2[i * bank.f2..(i + 1) * bank.f2]);
    }
    FeatureStack::new(h, w, k, data)
}

/// Affinely rescales each channel to `[0, 1]`; constant channels become 0.
pub fn per_channel_normalize(stack: &FeatureStack) -> FeatureStack {
    let k = stack.k;
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for px in stack.data.chunks_exact(k) {
        for c in 0..k {
            lo[c] = lo[c].min(px[c]);
            hi[c] = hi[c].max(px[c]);
        }
    }
    let mut data = stack.data.clone();
    for px in data.chunks_exact_mut(k) {
        for c in 0..k {
            let range = hi[c] - lo[c];
            px[c] = if range > 0.0 {
                (px[c] - lo[c]) / range
            } else {
                0.0
            };
        }
    }
    FeatureStack { data, ..*stack }
}

/// Extraction followed by per-channel normalization, the form every
/// downstream consumer uses.
pub fn normalized_features(image: &ImageTensor, bank: &FilterBankConfig) -> Result<FeatureStack> {
    Ok(per_channel_normalize(&extract_features(image, bank)?))
}
