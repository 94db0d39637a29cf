use std::fs;
use std::path::Path;
use std::process::Command;

use rwn::cli::{
    cmd_ablate, cmd_bench, cmd_eval, cmd_generate, cmd_infer, infer_image, manifest_inputs, read_manifest,
    read_probabilities, InferOptions, StepSpec, Sweep, EVAL_CSV_HEADER,
};
use rwn::config::Config;
use rwn::features::normalized_features;
use rwn::graph::{affinity_forward_streamed, build_sparsity, transition};
use rwn::pnm::{read_pgm, read_ppm, write_pgm};
use rwn::solver::{dense_oracle_solve, BENCH_CSV_HEADER};
use rwn::train::{save_checkpoint, train, unary_forward};
use rwn::Error;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rwn"))
}

fn smoke() -> Config {
    Config::preset("smoke").unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "test"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(split)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn generate_defaults_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Config::default();
    let s = cmd_generate(&cfg, tmp.path()).unwrap();
    assert_eq!((s.train, s.test), (100, 20));
    assert_eq!(read_manifest(&s.train_manifest).unwrap().len(), 100);
    assert_eq!(read_manifest(&s.test_manifest).unwrap().len(), 20);

    let other = tempfile::tempdir().unwrap();
    cmd_generate(&cfg, other.path()).unwrap();
    let strip = |v: Vec<(String, Vec<u8>)>, root: &Path| -> Vec<(String, Vec<u8>)> {
        v.into_iter()
            .map(|(p, b)| (p.replace(&root.display().to_string(), ""), b))
            .collect()
    };
    assert_eq!(
        strip(dir_bytes(tmp.path()), tmp.path()),
        strip(dir_bytes(other.path()), other.path())
    );
}

#[test]
fn generate_zero_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.data.train_count = 0;
    cfg.data.test_count = 0;
    let s = cmd_generate(&cfg, tmp.path()).unwrap();
    assert!(read_manifest(&s.train_manifest).unwrap().is_empty());
    assert_eq!(fs::read_to_string(&s.test_manifest).unwrap(), "");
}

#[test]
fn smoke_training_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let st = bin().args(["--preset", "smoke", "generate", "--out"]).arg(&data).output().unwrap().status;
    assert!(st.success());
    let ckpt = tmp.path().join("model.ckpt");
    let out = bin()
        .args(["--preset", "smoke", "train", "--manifest"])
        .arg(data.join("train.txt"))
        .arg("--checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("model.loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,seg_loss,aff_loss"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 200);
    let avg = |range: std::ops::Range<usize>, col: usize| rows[range].iter().map(|r| r[col]).sum::<f64>() / 20.0;
    assert!(avg(180..200, 1) < avg(0..20, 1));
    assert!(avg(180..200, 2) < avg(0..20, 2));
}

#[test]
fn paper_preset_header() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    bin()
        .args(["--preset", "smoke", "--set", "data.train_count=2", "generate", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    let out = bin()
        .args(["--preset", "paper", "--set", "train.iterations=1", "--set", "train.train_radius=2"])
        .args(["--set", "features.f1=2", "--set", "features.f2=2", "train", "--manifest"])
        .arg(data.join("train.txt"))
        .arg("--checkpoint")
        .arg(tmp.path().join("p.ckpt"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let header = stdout.lines().next().unwrap();
    for field in ["lr=1e-5", "momentum=0.9", "weight_decay=5e-5", "batch=15", "alpha=0.01"] {
        assert!(header.contains(field), "{header}");
    }
    let paper = Config::preset("paper").unwrap();
    let full = rwn::cli::run_header(&paper);
    assert!(full.contains("iterations=2000") && full.contains("train_radius=40"), "{full}");
}

#[test]
fn divergence_exit_code_names_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    bin().args(["--preset", "smoke", "generate", "--out"]).arg(&data).output().unwrap();
    let out = bin()
        .args(["--preset", "smoke", "--set", "train.base_learning_rate=1e6", "--set", "train.lr_multiplier=1"])
        .args(["train", "--manifest"])
        .arg(data.join("train.txt"))
        .arg("--checkpoint")
        .arg(tmp.path().join("d.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration"));
}

#[test]
fn usage_and_format_exit_codes() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(
        bin().args(["--set", "train.nope=1", "show-config"]).output().unwrap().status.code(),
        Some(1)
    );
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"garbage").unwrap();
    let img = tmp.path().join("x.ppm");
    fs::write(&img, b"P6\n1 1\n255\n\0\0\0").unwrap();
    let out = bin()
        .args(["infer", "--checkpoint"])
        .arg(&bad)
        .arg("--image")
        .arg(&img)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_show_config_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("rwn.conf");
    fs::write(&path, "# sweep\nsolver.alpha = 0.5\n").unwrap();
    let out = bin().arg("--config").arg(&path).arg("show-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = Config::parse(&text).unwrap();
    assert_eq!(cfg.solver.alpha, 0.5);
    assert_eq!(cfg.to_text(), text);
}

/// A small trained model and a generated test set on disk.
fn trained_fixture(dir: &Path) -> (Config, std::path::PathBuf, std::path::PathBuf) {
    let mut cfg = smoke();
    cfg.train.iterations = 30;
    cfg.data.train_count = 6;
    cfg.data.test_count = 3;
    let s = cmd_generate(&cfg, dir).unwrap();
    let data = rwn::cli::load_dataset(&s.train_manifest).unwrap();
    let model = train(&data, &cfg.features, cfg.scene.num_classes, &cfg.train).unwrap().model;
    let ckpt = dir.join("m.ckpt");
    save_checkpoint(&ckpt, &model).unwrap();
    (cfg, ckpt, s.test_manifest)
}

#[test]
fn infer_bypass_converge_and_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, ckpt, test) = trained_fixture(tmp.path());
    let model = rwn::train::load_checkpoint(&ckpt).unwrap();
    let entry = &read_manifest(&test).unwrap()[0];
    let image = read_ppm(&entry.image).unwrap();
    let mut opts = InferOptions::from_config(&cfg);
    opts.solver.alpha = 0.9;

    let stack = normalized_features(&image, &model.bank).unwrap();
    let f = unary_forward(&stack, &model.unary).unwrap();
    opts.steps = StepSpec::Count(0);
    let (labels, _) = infer_image(&model, &image, &opts).unwrap();
    assert_eq!(labels.data(), f.argmax().as_slice());

    let pattern = build_sparsity(image.height(), image.width(), opts.radius).unwrap();
    let a = transition(&affinity_forward_streamed(&stack, &pattern, &model.theta).unwrap());
    let exact = dense_oracle_solve(&a, &f, opts.solver.alpha).unwrap();
    opts.steps = StepSpec::Converge;
    let (labels, _) = infer_image(&model, &image, &opts).unwrap();
    assert_eq!(labels.data(), exact.argmax().as_slice());

    let out = tmp.path().join("pred");
    let n = cmd_infer(&ckpt, &manifest_inputs(&test).unwrap(), &out, &opts).unwrap();
    assert_eq!(n, 3);
    let pred = read_pgm(&out.join(format!("{}.pgm", entry.stem()))).unwrap();
    assert_eq!((pred.height(), pred.width()), (image.height(), image.width()));
    let (probs, h, w) = read_probabilities(&out.join(format!("{}.prob", entry.stem()))).unwrap();
    assert_eq!((h, w, probs.m()), (image.height(), image.width(), cfg.scene.num_classes));
    for i in 0..probs.num_pixels() {
        assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn eval_identity_missing_pair_and_header() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.data.train_count = 0;
    cfg.data.test_count = 3;
    let s = cmd_generate(&cfg, tmp.path()).unwrap();
    let pred = tmp.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for e in read_manifest(&s.test_manifest).unwrap() {
        write_pgm(&pred.join(format!("{}.pgm", e.stem())), &read_pgm(&e.labels).unwrap()).unwrap();
    }
    let report = cmd_eval(&pred, &s.test_manifest, &cfg).unwrap();
    let csv = report.to_csv();
    assert_eq!(csv.lines().next(), Some(EVAL_CSV_HEADER));
    assert_eq!(EVAL_CSV_HEADER, "image,mean_iou,overall_iou,mf,ap");
    for r in report.rows.iter().chain([&report.total]) {
        assert_eq!((r.mean_iou, r.overall_iou), (1.0, 1.0));
        assert_eq!((r.mf, r.ap), (Some(1.0), Some(1.0)));
    }
    assert!(report.trimap.iter().all(|(_, e)| *e == 0.0));

    let gone = pred.join("00001.pgm");
    fs::remove_file(&gone).unwrap();
    match cmd_eval(&pred, &s.test_manifest, &cfg) {
        Err(Error::MissingFile(p)) => assert_eq!(p, gone),
        other => panic!("expected a missing-file error, got {other:?}"),
    }
}

#[test]
fn ablate_from_manifest_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.data.train_count = 4;
    cfg.data.test_count = 0;
    cfg.ablate.max_steps = 2;
    let s = cmd_generate(&cfg, tmp.path()).unwrap();
    let rows = cmd_ablate(&cfg, Some(&s.train_manifest), Sweep::Steps).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.last().unwrap().score.mean_iou >= rows[0].score.mean_iou);
}

#[test]
fn bench_csv_shape() {
    let cfg = Config::default();
    let report = cmd_bench(&cfg, &[8, 12], &[2, 3], true).unwrap();
    let csv = report.to_csv();
    assert_eq!(csv.lines().next(), Some(BENCH_CSV_HEADER));
    assert_eq!(csv.lines().count(), 5);
    for r in &report.rows {
        assert!(r.step_ms > 0.0 && r.solve_ms > 0.0 && r.dense_ms.unwrap() > 0.0);
    }
}
