//! Oracle-affinity experiments on synthetic scenes.
//!
//! Ground-truth label maps are turned into one-hot unaries, corrupted inside
//! a boundary band, and diffused with the oracle transition matrix. Sweeps
//! over the number of walk steps and over the neighborhood radius measure how
//! much diffusion repairs the corruption.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::config::{AblateConfig, Config};
use crate::error::{Error, Result};
use crate::eval::{trimap_band, trimap_counts, IouAccumulator};
use crate::graph::{build_sparsity, transition, SparsityPattern, TransitionMatrix};
use crate::image::LabelMap;
use crate::solver::{converge, diffuse_steps, SolverConfig};
use crate::synth::{corrupt_unaries, generate, oracle_affinity, SceneSpec};
use crate::walk::UnaryPotentials;

#[derive(Debug, Clone)]
pub struct OracleScene {
    pub labels: LabelMap,
    pub corrupted: UnaryPotentials,
}

/// Generated scenes; see [`oracle_scenes_from_labels`].
pub fn oracle_scenes(spec: &SceneSpec, ablate: &AblateConfig) -> Result<Vec<OracleScene>> {
    let labels = generate(spec, ablate.scenes)?.into_iter().map(|(_, l)| l).collect();
    oracle_scenes_from_labels(labels, spec.num_classes, ablate)
}

/// One-hot unaries from each label map, corrupted in the configured band.
/// Scene `i` is corrupted with seed `ablate.seed + i`.
pub fn oracle_scenes_from_labels(labels: Vec<LabelMap>, m: usize, ablate: &AblateConfig) -> Result<Vec<OracleScene>> {
    labels
        .into_iter()
        .enumerate()
        .map(|(i, labels)| {
            let clean = UnaryPotentials::one_hot(labels.data(), m)?;
            let band = trimap_band(&labels, ablate.band_width);
            let corrupted = corrupt_unaries(
                &clean,
                &band,
                ablate.flip_prob,
                ablate.blur_radius,
                ablate.seed.wrapping_add(i as u64),
            )?;
            Ok(OracleScene { labels, corrupted })
        })
        .collect()
}

/// How the corrupted unaries are processed before taking the argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diffusion {
    Baseline,
    Steps(usize),
    Converge,
}

impl Diffusion {
    pub fn label(self) -> String {
        match self {
            Diffusion::Baseline => "0".into(),
            Diffusion::Steps(t) => t.to_string(),
            Diffusion::Converge => "converge".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub mean_iou: f64,
    pub overall_iou: f64,
    pub pixel_accuracy: f64,
    /// Trimap error per width, pooled over all scenes.
    pub trimap: Vec<(usize, f64)>,
}

pub fn score(preds: &[LabelMap], scenes: &[OracleScene], m: usize, widths: &[usize]) -> Result<Score> {
    if preds.len() != scenes.len() || scenes.is_empty() {
        return Err(Error::invalid("need one prediction per scene"));
    }
    let mut acc = IouAccumulator::new(m);
    let (mut correct, mut total) = (0usize, 0usize);
    let mut wrong_by_width = vec![0usize; widths.len()];
    let mut total_by_width = vec![0usize; widths.len()];
    for (pred, scene) in preds.iter().zip(scenes) {
        acc.add(pred, &scene.labels)?;
        correct += pred
            .data()
            .iter()
            .zip(scene.labels.data())
            .filter(|(a, b)| a == b)
            .count();
        total += pred.num_pixels();
        for (k, (_, wrong, n)) in trimap_counts(pred, &scene.labels, widths)?.into_iter().enumerate() {
            wrong_by_width[k] += wrong;
            total_by_width[k] += n;
        }
    }
    let trimap = widths
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let n = total_by_width[k];
            (w, if n == 0 { 0.0 } else { wrong_by_width[k] as f64 / n as f64 })
        })
        .collect();
    Ok(Score {
        mean_iou: acc.mean_iou()?,
        overall_iou: acc.overall_iou()?,
        pixel_accuracy: correct as f64 / total as f64,
        trimap,
    })
}

/// Oracle transition matrices for every scene at one radius.
pub fn oracle_transitions(scenes: &[OracleScene], radius: usize) -> Result<Vec<TransitionMatrix>> {
    let mut patterns: HashMap<(usize, usize), Arc<SparsityPattern>> = HashMap::new();
    scenes
        .iter()
        .map(|s| {
            let key = (s.labels.height(), s.labels.width());
            let pattern = match patterns.get(&key) {
                Some(p) => Arc::clone(p),
                None => {
                    let p = build_sparsity(key.0, key.1, radius)?;
                    patterns.insert(key, Arc::clone(&p));
                    p
                }
            };
            Ok(transition(&oracle_affinity(&s.labels, &pattern)?))
        })
        .collect()
}

pub fn diffuse_all(
    scenes: &[OracleScene],
    transitions: &[TransitionMatrix],
    how: Diffusion,
    solver: &SolverConfig,
) -> Result<Vec<LabelMap>> {
    scenes
        .iter()
        .zip(transitions)
        .map(|(s, a)| {
            let y = match how {
                Diffusion::Baseline => s.corrupted.clone(),
                Diffusion::Steps(t) => diffuse_steps(a, &s.corrupted, solver.alpha, t)?,
                Diffusion::Converge => converge(a, &s.corrupted, solver)?,
            };
            LabelMap::new(s.labels.height(), s.labels.width(), y.argmax())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub steps: Diffusion,
    pub radius: usize,
    pub score: Score,
}

pub const ABLATION_CSV_HEADER: &str = "setting,steps,radius,mean_iou,overall_iou,pixel_accuracy";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.setting,
            r.steps.label(),
            r.radius,
            r.score.mean_iou,
            r.score.overall_iou,
            r.score.pixel_accuracy
        );
    }
    out
}

fn run(
    scenes: &[OracleScene],
    transitions: &[TransitionMatrix],
    setting: &str,
    how: Diffusion,
    radius: usize,
    cfg: &Config,
) -> Result<AblationRow> {
    let preds = diffuse_all(scenes, transitions, how, &cfg.solver)?;
    Ok(AblationRow {
        setting: setting.into(),
        steps: how,
        radius,
        score: score(&preds, scenes, cfg.scene.num_classes, &cfg.eval.widths())?,
    })
}

/// Baseline, then `1..=max_steps` damped steps, then convergence, all at the
/// test radius.
pub fn steps_sweep(scenes: &[OracleScene], cfg: &Config) -> Result<Vec<AblationRow>> {
    let r = cfg.test_radius;
    let transitions = oracle_transitions(scenes, r)?;
    let mut rows = vec![run(scenes, &transitions, "baseline", Diffusion::Baseline, r, cfg)?];
    for t in 1..=cfg.ablate.max_steps {
        rows.push(run(scenes, &transitions, "steps", Diffusion::Steps(t), r, cfg)?);
    }
    rows.push(run(scenes, &transitions, "steps", Diffusion::Converge, r, cfg)?);
    Ok(rows)
}

/// Convergence at every configured radius, then a single damped step at the
/// large training radius.
pub fn radius_sweep(scenes: &[OracleScene], cfg: &Config) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &r in &cfg.ablate.radii {
        let transitions = oracle_transitions(scenes, r)?;
        rows.push(run(scenes, &transitions, "radius", Diffusion::Converge, r, cfg)?);
    }
    let r = cfg.ablate.single_step_radius;
    let transitions = oracle_transitions(scenes, r)?;
    rows.push(run(scenes, &transitions, "single_step", Diffusion::Steps(1), r, cfg)?);
    Ok(rows)
}
