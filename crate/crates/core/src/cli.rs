//! Command implementations behind the `rwn` binary.
//!
//! Datasets on disk are a directory of PPM images and PGM label maps plus a
//! manifest: one `image labels` pair per line, paths relative to the
//! manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ablation::{oracle_scenes, oracle_scenes_from_labels, radius_sweep, steps_sweep, AblationRow};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{boundary_scores, mean_iou, overall_iou, trimap_counts, trimap_csv, BoundaryPr, IouAccumulator};
use crate::features::normalized_features;
use crate::graph::{affinity_forward_streamed, build_sparsity, transition};
use crate::image::{ImageTensor, LabelMap};
use crate::pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::solver::{bench_step_vs_solve, converge, diffuse_steps, BenchOptions, BenchReport, SolverConfig};
use crate::synth::generate_one;
use crate::train::{load_checkpoint, loss_log_csv, save_checkpoint, train, LossRecord, ModelCheckpoint};
use crate::walk::UnaryPotentials;

/// Test scenes draw from generator streams disjoint from the training ones.
const TEST_STREAM_OFFSET: usize = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
}

impl ManifestEntry {
    /// File stem of the label map, used to name per-image outputs.
    pub fn stem(&self) -> String {
        self.labels
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(img), Some(lab), None) => Ok(ManifestEntry {
                    image: base.join(img),
                    labels: base.join(lab),
                }),
                _ => Err(Error::Format(format!(
                    "{} line {}: expected `image labels`",
                    path.display(),
                    n + 1
                ))),
            }
        })
        .collect()
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<(ImageTensor, LabelMap)>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            require(&e.image)?;
            require(&e.labels)?;
            let image = read_ppm(&e.image)?;
            let labels = read_pgm(&e.labels)?;
            if (image.height(), image.width()) != (labels.height(), labels.width()) {
                return Err(Error::Format(format!(
                    "{} and {} differ in size",
                    e.image.display(),
                    e.labels.display()
                )));
            }
            Ok((image, labels))
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train: usize,
    pub test: usize,
}

/// Writes `data.train_count` training and `data.test_count` test scenes under
/// `out_dir/{train,test}/` with manifests `train.txt` and `test.txt`.
pub fn cmd_generate(cfg: &Config, out_dir: &Path) -> Result<GenerateSummary> {
    cfg.scene.validate()?;
    let mut manifests = Vec::new();
    for (split, count, offset) in [
        ("train", cfg.data.train_count, 0),
        ("test", cfg.data.test_count, TEST_STREAM_OFFSET),
    ] {
        let dir = out_dir.join(split);
        create_dir(&dir)?;
        let mut manifest = String::new();
        for i in 0..count {
            let (image, labels) = generate_one(&cfg.scene, offset + i)?;
            let name = format!("{i:05}");
            write_ppm(&dir.join(format!("{name}.ppm")), &image)?;
            write_pgm(&dir.join(format!("{name}.pgm")), &labels)?;
            let _ = writeln!(manifest, "{split}/{name}.ppm {split}/{name}.pgm");
        }
        let path = out_dir.join(format!("{split}.txt"));
        write_text(&path, &manifest)?;
        manifests.push(path);
    }
    let test_manifest = manifests.pop().unwrap_or_default();
    let train_manifest = manifests.pop().unwrap_or_default();
    Ok(GenerateSummary {
        train_manifest,
        test_manifest,
        train: cfg.data.train_count,
        test: cfg.data.test_count,
    })
}

/// One line naming every training hyperparameter.
pub fn run_header(cfg: &Config) -> String {
    let t = &cfg.train;
    format!(
        "run: lr={:e} momentum={} weight_decay={:e} batch={} iterations={} alpha={} train_radius={} \
         seg_loss_weight={} aff_loss_weight={} seed={} hflip={} k={} m={}",
        t.learning_rate(),
        t.momentum,
        t.weight_decay,
        t.batch_size,
        t.iterations,
        t.alpha,
        t.train_radius,
        t.seg_loss_weight,
        t.aff_loss_weight,
        t.seed,
        t.augment_hflip,
        cfg.features.num_channels(),
        cfg.scene.num_classes
    )
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub header: String,
    pub log: Vec<LossRecord>,
    pub model: ModelCheckpoint,
}

/// Trains on the manifest's samples, then writes the checkpoint, the loss
/// log CSV and a run file holding the header and the full configuration.
pub fn cmd_train(cfg: &Config, manifest: &Path, checkpoint: &Path, loss_csv: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_dataset(manifest)?;
    let header = run_header(cfg);
    let outcome = train(&data, &cfg.features, cfg.scene.num_classes, &cfg.train)?;
    save_checkpoint(checkpoint, &outcome.model)?;
    write_text(loss_csv, &loss_log_csv(&outcome.log))?;
    write_text(
        &checkpoint.with_extension("run.txt"),
        &format!("{header}\n{}", cfg.to_text()),
    )?;
    Ok(TrainReport {
        header,
        log: outcome.log,
        model: outcome.model,
    })
}

/// Number of walk steps at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSpec {
    Count(usize),
    Converge,
}

impl FromStr for StepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "converge" {
            return Ok(StepSpec::Converge);
        }
        s.parse()
            .map(StepSpec::Count)
            .map_err(|_| Error::invalid(format!("steps must be a count or \"converge\", got {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub steps: StepSpec,
    pub radius: usize,
    pub solver: SolverConfig,
}

impl InferOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            steps: StepSpec::Converge,
            radius: cfg.test_radius,
            solver: cfg.solver,
        }
    }
}

/// Unary scores, the learned transition matrix at `opts.radius`, and the
/// diffused scores. Returns the label map and the diffused scores.
pub fn infer_image(model: &ModelCheckpoint, image: &ImageTensor, opts: &InferOptions) -> Result<(LabelMap, UnaryPotentials)> {
    let stack = normalized_features(image, &model.bank)?;
    let f = crate::train::unary_forward(&stack, &model.unary)?;
    let y = match opts.steps {
        StepSpec::Count(0) => f,
        steps => {
            let pattern = build_sparsity(image.height(), image.width(), opts.radius)?;
            let a = transition(&affinity_forward_streamed(&stack, &pattern, &model.theta)?);
            match steps {
                StepSpec::Count(n) => diffuse_steps(&a, &f, opts.solver.alpha, n)?,
                StepSpec::Converge => converge(&a, &f, &opts.solver)?,
            }
        }
    };
    let labels = LabelMap::new(image.height(), image.width(), y.argmax())?;
    Ok((labels, y))
}

/// Writes the raw little-endian probability dump and its `h w m` sidecar.
pub fn write_probabilities(path: &Path, probs: &UnaryPotentials, h: usize, w: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(probs.values().len() * 8);
    for v in probs.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_text(&sidecar(path), &format!("{h} {w} {}\n", probs.m()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".txt");
    PathBuf::from(name)
}

pub fn read_probabilities(path: &Path) -> Result<(UnaryPotentials, usize, usize)> {
    let side = sidecar(path);
    require(path)?;
    require(&side)?;
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let dims: Vec<usize> = text
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::Format(format!("bad sidecar {}", side.display()))))
        .collect::<Result<_>>()?;
    let [h, w, m] = <[usize; 3]>::try_from(dims)
        .map_err(|_| Error::Format(format!("sidecar {} needs `h w m`", side.display())))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != h * w * m * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            h * w * m * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let probs = UnaryPotentials::new(h * w, m, values).map_err(|e| Error::Format(e.to_string()))?;
    Ok((probs, h, w))
}

/// Runs inference on each `(image, name)` and writes `out_dir/name.pgm`
/// plus `out_dir/name.prob` with its sidecar.
pub fn cmd_infer(checkpoint: &Path, inputs: &[(PathBuf, String)], out_dir: &Path, opts: &InferOptions) -> Result<usize> {
    opts.solver.validate()?;
    let model = load_checkpoint(checkpoint)?;
    create_dir(out_dir)?;
    for (image_path, name) in inputs {
        require(image_path)?;
        let image = read_ppm(image_path)?;
        let (labels, y) = infer_image(&model, &image, opts)?;
        write_pgm(&out_dir.join(format!("{name}.pgm")), &labels)?;
        write_probabilities(&out_dir.join(format!("{name}.prob")), &y.softmax(), image.height(), image.width())?;
    }
    Ok(inputs.len())
}

/// Inference inputs for every manifest entry, named after its label file.
pub fn manifest_inputs(manifest: &Path) -> Result<Vec<(PathBuf, String)>> {
    Ok(read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let name = e.stem();
            (e.image, name)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub mean_iou: f64,
    pub overall_iou: f64,
    /// `None` where the ground truth has no boundary.
    pub mf: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Pooled over the whole set, `mf`/`ap` averaged over images where defined.
    pub total: EvalRow,
    pub trimap: Vec<(usize, f64)>,
}

pub const EVAL_CSV_HEADER: &str = "image,mean_iou,overall_iou,mf,ap";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_CSV_HEADER}\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.image,
                r.mean_iou,
                r.overall_iou,
                opt(r.mf),
                opt(r.ap)
            );
        }
        out
    }
}

/// Compares `pred_dir/<name>.pgm` against every manifest label map. Soft
/// boundaries come from `pred_dir/<name>.prob` when present, otherwise from
/// the hard labels.
pub fn cmd_eval(pred_dir: &Path, manifest: &Path, cfg: &Config) -> Result<EvalReport> {
    let entries = read_manifest(manifest)?;
    let widths = cfg.eval.widths();
    let mut pairs = Vec::with_capacity(entries.len());
    for e in &entries {
        let pred_path = pred_dir.join(format!("{}.pgm", e.stem()));
        require(&e.labels)?;
        require(&pred_path)?;
        pairs.push((e.stem(), pred_path, e.labels.clone()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut loaded = Vec::with_capacity(pairs.len());
    let mut m = 0;
    for (name, pred_path, gt_path) in &pairs {
        let pred = read_pgm(pred_path)?;
        let gt = read_pgm(gt_path)?;
        pred.same_shape(&gt).map_err(|_| {
            Error::Format(format!("{} and {} differ in size", pred_path.display(), gt_path.display()))
        })?;
        m = m.max(pred.num_classes_present()).max(gt.num_classes_present());
        loaded.push((name.clone(), pred_path.with_extension("prob"), pred, gt));
    }
    let mut acc = IouAccumulator::new(m);
    let mut wrong = vec![0usize; widths.len()];
    let mut total = vec![0usize; widths.len()];
    let (mut mf_sum, mut ap_sum, mut defined) = (0.0, 0.0, 0usize);
    for (name, prob_path, pred, gt) in &loaded {
        acc.add(pred, gt)?;
        for (k, (_, w, n)) in trimap_counts(pred, gt, &widths)?.into_iter().enumerate() {
            wrong[k] += w;
            total[k] += n;
        }
        let probs = if prob_path.exists() {
            let (p, h, w) = read_probabilities(prob_path)?;
            if (h, w) != (gt.height(), gt.width()) {
                return Err(Error::Format(format!("{} has the wrong size", prob_path.display())));
            }
            p
        } else {
            UnaryPotentials::one_hot(pred.data(), m)?
        };
        let pr = match boundary_scores(&probs, gt, cfg.eval.boundary_tolerance, cfg.eval.pr_levels) {
            Ok(pr) => Some(pr),
            Err(Error::UndefinedRecall) => None,
            Err(e) => return Err(e),
        };
        if let Some(BoundaryPr {
            max_f,
            average_precision,
            ..
        }) = &pr
        {
            mf_sum += max_f;
            ap_sum += average_precision;
            defined += 1;
        }
        rows.push(EvalRow {
            image: name.clone(),
            mean_iou: mean_iou(pred, gt, m)?,
            overall_iou: overall_iou(pred, gt)?,
            mf: pr.as_ref().map(|p| p.max_f),
            ap: pr.as_ref().map(|p| p.average_precision),
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("manifest lists no images"));
    }
    let mean = |s: f64| (defined > 0).then(|| s / defined as f64);
    let total_row = EvalRow {
        image: "all".into(),
        mean_iou: acc.mean_iou()?,
        overall_iou: acc.overall_iou()?,
        mf: mean(mf_sum),
        ap: mean(ap_sum),
    };
    let trimap = widths
        .iter()
        .enumerate()
        .map(|(k, &w)| (w, if total[k] == 0 { 0.0 } else { wrong[k] as f64 / total[k] as f64 }))
        .collect();
    Ok(EvalReport {
        rows,
        total: total_row,
        trimap,
    })
}

/// Writes `metrics.csv` and `trimap.csv` into `out_dir`.
pub fn write_eval_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    write_text(&out_dir.join("metrics.csv"), &report.to_csv())?;
    write_text(&out_dir.join("trimap.csv"), &trimap_csv(&report.trimap))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Steps,
    Radius,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(Sweep::Steps),
            "radius" => Ok(Sweep::Radius),
            _ => Err(Error::invalid(format!("sweep must be steps or radius, got {s:?}"))),
        }
    }
}

/// Oracle-affinity sweep over generated scenes, or over the label maps of a
/// manifest when one is given.
pub fn cmd_ablate(cfg: &Config, manifest: Option<&Path>, sweep: Sweep) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let scenes = match manifest {
        Some(path) => {
            let labels = load_dataset(path)?.into_iter().map(|(_, l)| l).collect();
            oracle_scenes_from_labels(labels, cfg.scene.num_classes, &cfg.ablate)?
        }
        None => oracle_scenes(&cfg.scene, &cfg.ablate)?,
    };
    if scenes.is_empty() {
        return Err(Error::invalid("ablation needs at least one scene"));
    }
    match sweep {
        Sweep::Steps => steps_sweep(&scenes, cfg),
        Sweep::Radius => radius_sweep(&scenes, cfg),
    }
}

/// Square images of each side length, at every radius.
pub fn cmd_bench(cfg: &Config, sides: &[usize], radii: &[usize], run_dense: bool) -> Result<BenchReport> {
    if sides.is_empty() || radii.is_empty() {
        return Err(Error::invalid("bench needs at least one size and one radius"));
    }
    let sizes: Vec<(usize, usize)> = sides.iter().map(|&s| (s, s)).collect();
    let opts = BenchOptions {
        classes: cfg.scene.num_classes,
        seed: cfg.scene.seed,
        run_dense,
        ..BenchOptions::default()
    };
    let mut report = BenchReport::default();
    for &r in radii {
        report.rows.extend(bench_step_vs_solve(&sizes, r, &cfg.solver, &opts)?.rows);
    }
    Ok(report)
}

/// Parses `"a,b,c"` into counts.
pub fn parse_counts(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("expected a comma-separated list of counts, got {s:?}")))
        })
        .collect()
}
