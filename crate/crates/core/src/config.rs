//! Flat `section.key = value` configuration covering every pipeline stage.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! malformed values are rejected. [`Config::to_text`] writes every key in a
//! fixed order, so parsing its output reproduces the same text.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FilterBankConfig;
use crate::solver::{SolveMode, SolverConfig};
use crate::synth::{ShapeKind, SceneSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 100,
            test_count: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Trimap widths `1..=trimap_max_width`.
    pub trimap_max_width: usize,
    pub boundary_tolerance: f64,
    pub pr_levels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trimap_max_width: 10,
            boundary_tolerance: 2.0,
            pr_levels: 100,
        }
    }
}

impl EvalConfig {
    pub fn widths(&self) -> Vec<usize> {
        (1..=self.trimap_max_width).collect()
    }
}

/// Oracle-affinity ablation setup: scenes, unary corruption and sweep ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub scenes: usize,
    pub band_width: usize,
    pub flip_prob: f64,
    pub blur_radius: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub radii: Vec<usize>,
    pub single_step_radius: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            scenes: 20,
            band_width: 4,
            flip_prob: 0.3,
            blur_radius: 1,
            seed: 3,
            max_steps: 10,
            radii: vec![3, 5, 10, 20],
            single_step_radius: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub solver: SolverConfig,
    /// Radius used at inference and evaluation time.
    pub test_radius: usize,
    pub scene: SceneSpec,
    pub features: FilterBankConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            test_radius: 5,
            scene: SceneSpec::default(),
            features: FilterBankConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["default", "paper", "smoke"];

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "paper" => Ok(Self {
                train: TrainConfig::paper(),
                ..Self::default()
            }),
            "smoke" => Ok(Self {
                train: TrainConfig::smoke(),
                scene: SceneSpec {
                    height: 16,
                    width: 16,
                    ..SceneSpec::default()
                },
                features: FilterBankConfig {
                    f1: 8,
                    f2: 8,
                    ..FilterBankConfig::default()
                },
                data: DataConfig {
                    train_count: 20,
                    test_count: 5,
                },
                ..Self::default()
            }),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.solver.validate()?;
        self.scene.validate()?;
        if self.eval.trimap_max_width == 0 || self.eval.pr_levels == 0 {
            return Err(Error::invalid("eval widths and levels must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ablate.flip_prob) {
            return Err(Error::invalid("ablate.flip_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected `section.key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override {assignment:?} lacks `=`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.solver;
        let sc = &mut self.scene;
        let a = &mut self.ablate;
        match key {
            "train.base_learning_rate" => t.base_learning_rate = num(key, value)?,
            "train.lr_multiplier" => t.lr_multiplier = num(key, value)?,
            "train.momentum" => t.momentum = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.iterations" => t.iterations = num(key, value)?,
            "train.train_radius" => t.train_radius = num(key, value)?,
            "train.alpha" => t.alpha = num(key, value)?,
            "train.seg_loss_weight" => t.seg_loss_weight = num(key, value)?,
            "train.aff_loss_weight" => t.aff_loss_weight = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "train.augment_hflip" => t.augment_hflip = num(key, value)?,
            "solver.alpha" => s.alpha = num(key, value)?,
            "solver.tolerance" => s.tolerance = num(key, value)?,
            "solver.max_iterations" => s.max_iterations = num(key, value)?,
            "solver.mode" => {
                s.mode = SolveMode::parse(value)
                    .ok_or_else(|| Error::invalid(format!("{key}: unknown mode {value:?}")))?
            }
            "solver.radius" => self.test_radius = num(key, value)?,
            "scene.height" => sc.height = num(key, value)?,
            "scene.width" => sc.width = num(key, value)?,
            "scene.num_classes" => {
                let m: usize = num(key, value)?;
                if m != sc.num_classes {
                    *sc = sc.clone().with_classes(m);
                }
            }
            "scene.min_shapes" => sc.min_shapes = num(key, value)?,
            "scene.max_shapes" => sc.max_shapes = num(key, value)?,
            "scene.shape_types" => sc.shape_types = parse_shapes(key, value)?,
            "scene.colors" => sc.colors = parse_colors(key, value)?,
            "scene.texture_sigma" => sc.texture_sigma = num(key, value)?,
            "scene.noise_sigma" => sc.noise_sigma = num(key, value)?,
            "scene.seed" => sc.seed = num(key, value)?,
            "features.f1" => self.features.f1 = num(key, value)?,
            "features.f2" => self.features.f2 = num(key, value)?,
            "features.seed" => self.features.seed = num(key, value)?,
            "data.train_count" => self.data.train_count = num(key, value)?,
            "data.test_count" => self.data.test_count = num(key, value)?,
            "eval.trimap_max_width" => self.eval.trimap_max_width = num(key, value)?,
            "eval.boundary_tolerance" => self.eval.boundary_tolerance = num(key, value)?,
            "eval.pr_levels" => self.eval.pr_levels = num(key, value)?,
            "ablate.scenes" => a.scenes = num(key, value)?,
            "ablate.band_width" => a.band_width = num(key, value)?,
            "ablate.flip_prob" => a.flip_prob = num(key, value)?,
            "ablate.blur_radius" => a.blur_radius = num(key, value)?,
            "ablate.seed" => a.seed = num(key, value)?,
            "ablate.max_steps" => a.max_steps = num(key, value)?,
            "ablate.radii" => a.radii = parse_list(key, value)?,
            "ablate.single_step_radius" => a.single_step_radius = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.solver;
        let sc = &self.scene;
        let a = &self.ablate;
        let shapes: Vec<&str> = sc.shape_types.iter().map(|k| k.name()).collect();
        let colors: Vec<String> = sc
            .colors
            .iter()
            .map(|c| format!("{},{},{}", c[0], c[1], c[2]))
            .collect();
        let radii: Vec<String> = a.radii.iter().map(|r| r.to_string()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("train.base_learning_rate", t.base_learning_rate.to_string()),
            ("train.lr_multiplier", t.lr_multiplier.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.train_radius", t.train_radius.to_string()),
            ("train.alpha", t.alpha.to_string()),
            ("train.seg_loss_weight", t.seg_loss_weight.to_string()),
            ("train.aff_loss_weight", t.aff_loss_weight.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.augment_hflip", t.augment_hflip.to_string()),
            ("solver.alpha", s.alpha.to_string()),
            ("solver.tolerance", s.tolerance.to_string()),
            ("solver.max_iterations", s.max_iterations.to_string()),
            ("solver.mode", s.mode.name().to_string()),
            ("solver.radius", self.test_radius.to_string()),
            ("scene.height", sc.height.to_string()),
            ("scene.width", sc.width.to_string()),
            ("scene.num_classes", sc.num_classes.to_string()),
            ("scene.min_shapes", sc.min_shapes.to_string()),
            ("scene.max_shapes", sc.max_shapes.to_string()),
            ("scene.shape_types", shapes.join(",")),
            ("scene.colors", colors.join(";")),
            ("scene.texture_sigma", sc.texture_sigma.to_string()),
            ("scene.noise_sigma", sc.noise_sigma.to_string()),
            ("scene.seed", sc.seed.to_string()),
            ("features.f1", self.features.f1.to_string()),
            ("features.f2", self.features.f2.to_string()),
            ("features.seed", self.features.seed.to_string()),
            ("data.train_count", self.data.train_count.to_string()),
            ("data.test_count", self.data.test_count.to_string()),
            ("eval.trimap_max_width", self.eval.trimap_max_width.to_string()),
            ("eval.boundary_tolerance", self.eval.boundary_tolerance.to_string()),
            ("eval.pr_levels", self.eval.pr_levels.to_string()),
            ("ablate.scenes", a.scenes.to_string()),
            ("ablate.band_width", a.band_width.to_string()),
            ("ablate.flip_prob", a.flip_prob.to_string()),
            ("ablate.blur_radius", a.blur_radius.to_string()),
            ("ablate.seed", a.seed.to_string()),
            ("ablate.max_steps", a.max_steps.to_string()),
            ("ablate.radii", radii.join(",")),
            ("ablate.single_step_radius", a.single_step_radius.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn parse_shapes(key: &str, value: &str) -> Result<Vec<ShapeKind>> {
    value
        .split(',')
        .map(|v| {
            ShapeKind::parse(v.trim()).ok_or_else(|| Error::invalid(format!("{key}: unknown shape {v:?}")))
        })
        .collect()
}

fn parse_colors(key: &str, value: &str) -> Result<Vec<[f64; 3]>> {
    value
        .split(';')
        .map(|rgb| {
            let parts: Vec<f64> = rgb
                .split(',')
                .map(|v| num(key, v.trim()))
                .collect::<Result<_>>()?;
            <[f64; 3]>::try_from(parts)
                .map_err(|_| Error::invalid(format!("{key}: color {rgb:?} needs three components")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        for name in PRESETS {
            let cfg = Config::preset(name).unwrap();
            let text = cfg.to_text();
            let back = Config::parse(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn partial_file_with_comments() {
        let cfg = Config::parse("# tweak\n\ntrain.iterations = 7\nsolver.mode = neumann\n").unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.solver.mode, SolveMode::Neumann);
        assert_eq!(cfg.scene, SceneSpec::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Config::parse("train.nope = 1").is_err());
        assert!(Config::parse("train.iterations = many").is_err());
        assert!(Config::parse("just text").is_err());
        assert!(Config::parse("train.batch_size = 0").is_err());
        assert!(Config::preset("huge").is_err());
    }

    #[test]
    fn overrides_and_class_count() {
        let mut cfg = Config::default();
        cfg.apply_override("scene.num_classes=6").unwrap();
        assert_eq!(cfg.scene.colors.len(), 6);
        cfg.apply_override("ablate.radii=1,2").unwrap();
        assert_eq!(cfg.ablate.radii, vec![1, 2]);
        assert!(cfg.apply_override("ablate.radii").is_err());
    }

    #[test]
    fn paper_preset_is_literal() {
        let t = Config::preset("paper").unwrap().train;
        assert_eq!(t.learning_rate(), 1e-5);
        assert_eq!((t.momentum, t.weight_decay, t.batch_size), (0.9, 5e-5, 15));
        assert_eq!((t.iterations, t.alpha, t.train_radius), (2000, 0.01, 40));
    }
}
