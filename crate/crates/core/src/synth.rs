//! Deterministic synthetic scenes: overlapping textured shapes on a class-0
//! background, plus the controlled unary corruptions and oracle affinities
//! used to measure what diffusion buys.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::TrimapBand;
use crate::graph::{AffinityMatrix, SparsityPattern};
use crate::image::{ImageTensor, LabelMap};
use crate::walk::UnaryPotentials;

/// Cross-label affinity of the oracle graph; keeps every degree positive.
pub const ORACLE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Polygon,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Polygon => "polygon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ellipse" => Some(ShapeKind::Ellipse),
            "rectangle" => Some(ShapeKind::Rectangle),
            "polygon" => Some(ShapeKind::Polygon),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shape_types: Vec<ShapeKind>,
    /// Base RGB per class; index 0 is the background.
    pub colors: Vec<[f64; 3]>,
    pub texture_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.25, 0.20],
    [0.20, 0.65, 0.30],
    [0.25, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.75],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
];

/// Deterministic default color for class `c`.
pub fn default_color(c: usize) -> [f64; 3] {
    if c < PALETTE.len() {
        PALETTE[c]
    } else {
        let t = c as f64 * 0.618_033_988_75;
        [(t * 1.3).fract(), (t * 2.1).fract(), (t * 3.7).fract()]
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        let num_classes = 4;
        Self {
            height: 24,
            width: 24,
            num_classes,
            min_shapes: 2,
            max_shapes: 4,
            shape_types: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Polygon],
            colors: (0..num_classes).map(default_color).collect(),
            texture_sigma: 0.05,
            noise_sigma: 0.03,
            seed: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("scenes need at least 2 classes"));
        }
        if self.num_classes > 256 {
            return Err(Error::invalid("at most 256 classes fit a PGM label map"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid("scene dimensions must be at least 16"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid("need 1 <= min_shapes <= max_shapes"));
        }
        if self.shape_types.is_empty() {
            return Err(Error::invalid("no shape types enabled"));
        }
        if self.colors.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} colors for {} classes",
                self.colors.len(),
                self.num_classes
            )));
        }
        if !(self.texture_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        Ok(())
    }

    /// Same spec with `count` classes and the default palette.
    pub fn with_classes(mut self, count: usize) -> Self {
        self.num_classes = count;
        self.colors = (0..count).map(default_color).collect();
        self
    }
}

struct Shape {
    kind: ShapeKind,
    class: u32,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    vertices: Vec<(f64, f64)>,
    texture_freq: (f64, f64),
    texture_phase: f64,
}

impl Shape {
    fn random(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (spec.height as f64, spec.width as f64);
        let scale = h.min(w);
        let kind = *spec.shape_types.choose(rng).expect("validated non-empty");
        let class = rng.gen_range(1..spec.num_classes) as u32;
        let cy = rng.gen_range(0.15 * h..0.85 * h);
        let cx = rng.gen_range(0.15 * w..0.85 * w);
        let ry = rng.gen_range(0.12 * scale..0.3 * scale);
        let rx = rng.gen_range(0.12 * scale..0.3 * scale);
        let vertices = if kind == ShapeKind::Polygon {
            let n = rng.gen_range(3..=6);
            let start = rng.gen_range(0.0..std::f64::consts::TAU);
            (0..n)
                .map(|k| {
                    let ang = start + std::f64::consts::TAU * k as f64 / n as f64;
                    let rad = rng.gen_range(0.6..1.0);
                    (cy + ry * rad * ang.sin(), cx + rx * rad * ang.cos())
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            kind,
            class,
            cy,
            cx,
            ry,
            rx,
            vertices,
            texture_freq: (rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.35)),
            texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self.kind {
            ShapeKind::Ellipse => {
                let dy = (y - self.cy) / self.ry;
                let dx = (x - self.cx) / self.rx;
                dy * dy + dx * dx <= 1.0
            }
            ShapeKind::Rectangle => (y - self.cy).abs() <= self.ry && (x - self.cx).abs() <= self.rx,
            ShapeKind::Polygon => {
                // even-odd rule
                let mut inside = false;
                let n = self.vertices.len();
                for k in 0..n {
                    let (ay, ax) = self.vertices[k];
                    let (by, bx) = self.vertices[(k + 1) % n];
                    if (ay > y) != (by > y) && x < ax + (y - ay) * (bx - ax) / (by - ay) {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    fn texture(&self, y: f64, x: f64) -> f64 {
        (std::f64::consts::TAU * (self.texture_freq.0 * y + self.texture_freq.1 * x) + self.texture_phase).sin()
    }
}

fn render(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, LabelMap)> {
    let (h, w) = (spec.height, spec.width);
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(spec, rng)).collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let bg_texture = Shape {
        kind: ShapeKind::Rectangle,
        class: 0,
        cy: 0.0,
        cx: 0.0,
        ry: 0.0,
        rx: 0.0,
        vertices: Vec::new(),
        texture_freq: (0.07, 0.11),
        texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };

    let mut labels = LabelMap::filled(h, w, 0);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            // later shapes are drawn on top
            let top = shapes.iter().rev().find(|s| s.contains(py, px)).unwrap_or(&bg_texture);
            labels.set(y, x, top.class);
            let base = spec.colors[top.class as usize];
            let tex = spec.texture_sigma * top.texture(py, px);
            for b in base {
                let v = b + tex + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok((ImageTensor::new(h, w, 3, data)?, labels))
}

fn has_two_classes(labels: &LabelMap) -> bool {
    let first = labels.data()[0];
    labels.data().iter().any(|&l| l != first)
}

/// Generates `count` scenes. Scene `i` depends only on `(spec, i)`; scenes
/// that would show a single class are redrawn from the same stream.
pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<(ImageTensor, LabelMap)>> {
    spec.validate()?;
    (0..count).map(|i| generate_one(spec, i)).collect()
}

pub fn generate_one(spec: &SceneSpec, index: usize) -> Result<(ImageTensor, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    loop {
        let scene = render(spec, &mut rng)?;
        if has_two_classes(&scene.1) {
            return Ok(scene);
        }
    }
}

/// Corrupts clean unaries inside `band`: each band pixel is replaced by a
/// wrong-class one-hot with probability `flip_prob`, then band pixels are
/// box-blurred (radius `blur_radius`, window clipped at the border) and
/// renormalized. Pixels outside the band are left untouched.
pub fn corrupt_unaries(
    f_clean: &UnaryPotentials,
    band: &TrimapBand,
    flip_prob: f64,
    blur_radius: usize,
    seed: u64,
) -> Result<UnaryPotentials> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::invalid(format!("flip probability {flip_prob} outside [0,1]")));
    }
    let (h, w) = (band.height_px, band.width_px);
    if f_clean.num_pixels() != h * w || band.mask.len() != h * w {
        return Err(Error::invalid("band does not match potentials"));
    }
    let m = f_clean.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = f_clean.argmax();
    let mut flipped = f_clean.clone();
    for (i, &t) in truth.iter().enumerate() {
        // draw for every pixel so the stream does not depend on the band
        let flip = rng.gen_bool(flip_prob);
        let offset = if m > 1 { rng.gen_range(1..m) } else { 0 };
        if band.mask[i] && flip && m > 1 {
            let wrong = (t as usize + offset) % m;
            let row = flipped.row_mut(i);
            row.fill(0.0);
            row[wrong] = 1.0;
        }
    }
    let mut out = flipped.clone();
    let r = blur_radius as isize;
    for i in (0..h * w).filter(|&i| band.mask[i]) {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let mut acc = vec![0.0; m];
        let mut n = 0usize;
        for ny in (y - r).max(0)..=(y + r).min(h as isize - 1) {
            for nx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                let src = flipped.row(ny as usize * w + nx as usize);
                acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                n += 1;
            }
        }
        let row = out.row_mut(i);
        for (o, a) in row.iter_mut().zip(&acc) {
            *o = a / n as f64;
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(out)
}

/// Affinities straight from ground truth: 1 within a label, epsilon across.
pub fn oracle_affinity(labels: &LabelMap, pattern: &Arc<SparsityPattern>) -> Result<AffinityMatrix> {
    if labels.num_pixels() != pattern.num_pixels() {
        return Err(Error::invalid("label map does not match the pattern"));
    }
    let l = labels.data();
    let w = pattern
        .edges()
        .map(|(_, i, j)| if l[i] == l[j] { 1.0 } else { ORACLE_EPSILON })
        .collect();
    AffinityMatrix::from_values(Arc::clone(pattern), w)
}
