//! Segmentation metrics: mean and overall IOU, trimap boundary-band error,
//! and boundary precision/recall (max F-score and average precision).
//!
//! Boundary pixels of a label map are the pixels with at least one
//! 4-neighbor carrying a different label, so a straight edge between two
//! regions yields a boundary two pixels wide.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::walk::UnaryPotentials;

pub fn mean_iou(pred: &LabelMap, gt: &LabelMap, m: usize) -> Result<f64> {
    pred.same_shape(gt)?;
    let (inter, union) = class_counts(pred, gt, m);
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if ious.is_empty() {
        return Err(Error::invalid("no classes present in prediction or ground truth"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Class-agnostic IOU: total intersection over total union, pooled across
/// classes.
pub fn overall_iou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    pred.same_shape(gt)?;
    let m = pred.num_classes_present().max(gt.num_classes_present());
    let (inter, union) = class_counts(pred, gt, m);
    let u: usize = union.iter().sum();
    if u == 0 {
        return Err(Error::invalid("empty label maps"));
    }
    Ok(inter.iter().sum::<usize>() as f64 / u as f64)
}

/// Intersections and unions pooled over many images, so each class IOU is
/// computed over the whole set rather than averaged per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IouAccumulator {
    inter: Vec<usize>,
    union: Vec<usize>,
}

impl IouAccumulator {
    pub fn new(m: usize) -> Self {
        Self {
            inter: vec![0; m],
            union: vec![0; m],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        pred.same_shape(gt)?;
        let (inter, union) = class_counts(pred, gt, self.inter.len());
        self.inter.iter_mut().zip(inter).for_each(|(a, b)| *a += b);
        self.union.iter_mut().zip(union).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Mean over classes with a nonempty union.
    pub fn mean_iou(&self) -> Result<f64> {
        let ious: Vec<f64> = self
            .inter
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            return Err(Error::invalid("no classes observed"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn overall_iou(&self) -> Result<f64> {
        let u: usize = self.union.iter().sum();
        if u == 0 {
            return Err(Error::invalid("no pixels observed"));
        }
        Ok(self.inter.iter().sum::<usize>() as f64 / u as f64)
    }
}

/// Per-class intersection and union counts for labels below `m`.
fn class_counts(pred: &LabelMap, gt: &LabelMap, m: usize) -> (Vec<usize>, Vec<usize>) {
    let mut inter = vec![0usize; m];
    let mut union = vec![0usize; m];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            if p < m {
                inter[p] += 1;
                union[p] += 1;
            }
        } else {
            if p < m {
                union[p] += 1;
            }
            if g < m {
                union[g] += 1;
            }
        }
    }
    (inter, union)
}

pub fn label_boundary(labels: &LabelMap) -> Vec<bool> {
    let (h, w) = (labels.height(), labels.width());
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(y, x);
            out[y * w + x] = (x > 0 && labels.get(y, x - 1) != l)
                || (x + 1 < w && labels.get(y, x + 1) != l)
                || (y > 0 && labels.get(y - 1, x) != l)
                || (y + 1 < h && labels.get(y + 1, x) != l);
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel (separable lower-envelope transform). `f64::INFINITY` if none.
pub fn squared_distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut buf = Vec::new();
    for x in 0..w {
        buf.clear();
        buf.extend((0..h).map(|y| grid[y * w + x]));
        let col = dt_1d(&buf);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    for y in 0..h {
        let row = dt_1d(&grid[y * w..(y + 1) * w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return vec![f64::INFINITY; n];
    }
    // lower envelope of parabolas rooted at finite sites
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = intersect(q, p);
            if v.len() > 1 && s <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.clear();
            z.push(f64::NEG_INFINITY);
        } else {
            let s = intersect(q, *v.last().unwrap());
            v.push(q);
            z.push(s);
        }
    }
    z.push(f64::INFINITY);
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

/// Pixels within `width` of a ground-truth boundary: those whose distance
/// to the nearest boundary pixel is below `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimapBand {
    pub width: usize,
    pub height_px: usize,
    pub width_px: usize,
    pub mask: Vec<bool>,
}

impl TrimapBand {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Band covering every pixel.
    pub fn everything(height_px: usize, width_px: usize) -> Self {
        Self {
            width: usize::MAX,
            height_px,
            width_px,
            mask: vec![true; height_px * width_px],
        }
    }
}

pub fn trimap_band(gt: &LabelMap, width: usize) -> TrimapBand {
    let (h, w) = (gt.height(), gt.width());
    let dist = squared_distance_transform(&label_boundary(gt), h, w);
    band_from_distances(&dist, width, h, w)
}

fn band_from_distances(dist: &[f64], width: usize, h: usize, w: usize) -> TrimapBand {
    let limit = (width * width) as f64;
    TrimapBand {
        width,
        height_px: h,
        width_px: w,
        mask: dist.iter().map(|&d| d < limit).collect(),
    }
}

/// Misclassified and total pixel counts inside the band of each width.
pub fn trimap_counts(pred: &LabelMap, gt: &LabelMap, widths: &[usize]) -> Result<Vec<(usize, usize, usize)>> {
    pred.same_shape(gt)?;
    if widths.contains(&0) {
        return Err(Error::invalid("trimap widths must be at least 1"));
    }
    let (h, w) = (gt.height(), gt.width());
    let dist = squared_distance_transform(&label_boundary(gt), h, w);
    Ok(widths
        .iter()
        .map(|&width| {
            let band = band_from_distances(&dist, width, h, w);
            let mut wrong = 0;
            let mut total = 0;
            for (i, _) in band.mask.iter().enumerate().filter(|(_, &b)| b) {
                total += 1;
                if pred.data()[i] != gt.data()[i] {
                    wrong += 1;
                }
            }
            (width, wrong, total)
        })
        .collect())
}

/// Fraction of band pixels where prediction and ground truth disagree; 0 for
/// an empty band.
pub fn trimap_error(pred: &LabelMap, gt: &LabelMap, widths: &[usize]) -> Result<Vec<(usize, f64)>> {
    Ok(trimap_counts(pred, gt, widths)?
        .into_iter()
        .map(|(w, wrong, total)| (w, if total == 0 { 0.0 } else { wrong as f64 / total as f64 }))
        .collect())
}

pub fn trimap_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("width,error\n");
    for (w, e) in curve {
        let _ = writeln!(out, "{w},{e}");
    }
    out
}

/// Soft boundary map: at each pixel, the largest total-variation distance
/// between its class distribution and a 4-neighbor's. Rows with negative
/// entries go through softmax, other rows are divided by their sum.
pub fn extract_boundary_strength(prob: &UnaryPotentials, h: usize, w: usize) -> Result<Vec<f64>> {
    if prob.num_pixels() != h * w {
        return Err(Error::invalid("probability map does not match shape"));
    }
    let m = prob.m();
    let mut p = prob.clone();
    for i in 0..h * w {
        let row = p.row_mut(i);
        if row.iter().any(|&v| v < 0.0) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / m as f64);
        }
    }
    let tv = |i: usize, j: usize| {
        let overlap: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a.min(*b)).sum();
        (1.0 - overlap).clamp(0.0, 1.0)
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut s: f64 = 0.0;
            if x > 0 {
                s = s.max(tv(i, i - 1));
            }
            if x + 1 < w {
                s = s.max(tv(i, i + 1));
            }
            if y > 0 {
                s = s.max(tv(i, i - w));
            }
            if y + 1 < h {
                s = s.max(tv(i, i + w));
            }
            out[i] = s;
        }
    }
    Ok(out)
}

/// One-to-one matching of predicted to ground-truth boundary pixels within
/// Euclidean `tolerance`. Candidate pairs are first taken greedily in order of
/// increasing distance (ties by predicted then ground-truth index); augmenting
/// paths then grow the result to a maximum-cardinality matching, so a boundary
/// shifted by up to `tolerance` still matches completely.
pub fn match_boundaries(pred: &[bool], gt: &[bool], h: usize, w: usize, tolerance: f64) -> Vec<(usize, usize)> {
    let r = tolerance.floor() as isize;
    let tol2 = tolerance * tolerance;
    let pred_idx: Vec<usize> = (0..pred.len()).filter(|&i| pred[i]).collect();
    // adjacency per predicted pixel, nearest first
    let adj: Vec<Vec<usize>> = pred_idx
        .iter()
        .map(|&i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            let mut near = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = dy * dy + dx * dx;
                    let (ny, nx) = (y + dy, x + dx);
                    if d2 as f64 <= tol2 && ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        let j = ny as usize * w + nx as usize;
                        if gt[j] {
                            near.push((d2, j));
                        }
                    }
                }
            }
            near.sort_unstable();
            near.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    const NONE: usize = usize::MAX;
    let mut pred_match = vec![NONE; pred_idx.len()];
    let mut gt_match = vec![NONE; gt.len()];

    let mut candidates: Vec<(isize, usize, usize)> = Vec::new();
    for (p, &i) in pred_idx.iter().enumerate() {
        for &j in &adj[p] {
            let dy = (i / w) as isize - (j / w) as isize;
            let dx = (i % w) as isize - (j % w) as isize;
            candidates.push((dy * dy + dx * dx, p, j));
        }
    }
    candidates.sort_unstable();
    for (_, p, j) in candidates {
        if pred_match[p] == NONE && gt_match[j] == NONE {
            pred_match[p] = j;
            gt_match[j] = p;
        }
    }

    // Kuhn augmentation with an explicit stack
    for root in 0..pred_idx.len() {
        if pred_match[root] != NONE || adj[root].is_empty() {
            continue;
        }
        let mut visited = vec![false; gt.len()];
        // (predicted node, next adjacency slot); `via[k]` is the gt node that led to stack[k]
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        let mut via: Vec<usize> = vec![NONE];
        let mut found = NONE;
        while let Some(&mut (p, ref mut slot)) = stack.last_mut() {
            if *slot >= adj[p].len() {
                stack.pop();
                via.pop();
                continue;
            }
            let j = adj[p][*slot];
            *slot += 1;
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if gt_match[j] == NONE {
                found = j;
                break;
            }
            stack.push((gt_match[j], 0));
            via.push(j);
        }
        if found != NONE {
            // flip the alternating path from the top of the stack down
            let mut j = found;
            for k in (0..stack.len()).rev() {
                let p = stack[k].0;
                let prev = pred_match[p];
                pred_match[p] = j;
                gt_match[j] = p;
                j = prev;
                debug_assert!(k == 0 || via[k] == prev);
            }
        }
    }

    pred_idx
        .iter()
        .enumerate()
        .filter(|&(p, _)| pred_match[p] != NONE)
        .map(|(p, &i)| (i, pred_match[p]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPr {
    pub max_f: f64,
    pub average_precision: f64,
    pub curve: Vec<PrPoint>,
}

impl BoundaryPr {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.curve {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        out
    }
}

/// Sweeps thresholds `k / levels` for `k = 1..=levels`; a pixel is a predicted
/// boundary when its strength reaches the threshold. Precision is 1 when
/// nothing is predicted. AP integrates precision over recall by trapezoids,
/// anchored at recall 0 with the first point's precision.
pub fn boundary_pr(
    strength: &[f64],
    gt_boundary: &[bool],
    h: usize,
    w: usize,
    tolerance: f64,
    levels: usize,
) -> Result<BoundaryPr> {
    if strength.len() != h * w || gt_boundary.len() != h * w {
        return Err(Error::invalid("boundary maps do not match shape"));
    }
    if levels == 0 {
        return Err(Error::invalid("need at least one threshold"));
    }
    let n_gt = gt_boundary.iter().filter(|&&b| b).count();
    if n_gt == 0 {
        return Err(Error::UndefinedRecall);
    }
    let mut curve = Vec::with_capacity(levels);
    for k in (1..=levels).rev() {
        let threshold = k as f64 / levels as f64;
        let pred: Vec<bool> = strength.iter().map(|&s| s >= threshold).collect();
        let n_pred = pred.iter().filter(|&&b| b).count();
        let matched = match_boundaries(&pred, gt_boundary, h, w, tolerance).len();
        let precision = if n_pred == 0 { 1.0 } else { matched as f64 / n_pred as f64 };
        let recall = matched as f64 / n_gt as f64;
        curve.push(PrPoint {
            threshold,
            precision,
            recall,
        });
    }
    let max_f = curve
        .iter()
        .map(|p| {
            if p.precision + p.recall > 0.0 {
                2.0 * p.precision * p.recall / (p.precision + p.recall)
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);

    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut ap = 0.0;
    let (mut r0, mut p0) = (0.0, pts[0].1);
    for &(r, p) in &pts {
        ap += (r - r0) * (p + p0) / 2.0;
        r0 = r;
        p0 = p;
    }
    Ok(BoundaryPr {
        max_f,
        average_precision: ap,
        curve,
    })
}

/// Boundary MF/AP of a soft prediction against ground-truth labels.
pub fn boundary_scores(prob: &UnaryPotentials, gt: &LabelMap, tolerance: f64, levels: usize) -> Result<BoundaryPr> {
    let (h, w) = (gt.height(), gt.width());
    let strength = extract_boundary_strength(prob, h, w)?;
    boundary_pr(&strength, &label_boundary(gt), h, w, tolerance, levels)
}
