use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rwn::ablation::ablation_csv;
use rwn::cli::{
    cmd_ablate, cmd_bench, cmd_eval, cmd_generate, cmd_infer, cmd_train, manifest_inputs, parse_counts,
    run_header, write_eval_report, InferOptions, StepSpec, Sweep,
};
use rwn::config::Config;
use rwn::{Error, Result};

#[derive(Parser)]
#[command(name = "rwn", version, about = "Convolutional random walk label diffusion")]
struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset applied before the file: default, paper or smoke.
    #[arg(long, global = true, default_value = "default")]
    preset: String,
    /// Override one key, `section.key=value`; repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/test scenes and their manifests.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train jointly and write a checkpoint and loss log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Loss log path; defaults to `<checkpoint>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Label images with a trained model.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Walk steps, or `converge`.
        #[arg(long, default_value = "converge")]
        steps: String,
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score predictions against a manifest's label maps.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for metrics.csv and trimap.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Oracle-affinity sweep over walk steps or radius.
    Ablate {
        #[arg(long)]
        sweep: String,
        /// Use these label maps instead of generated scenes.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time a sparse walk step against converged and dense solves.
    Bench {
        /// Square image side lengths, comma separated.
        #[arg(long, default_value = "16,32,64")]
        sizes: String,
        #[arg(long, default_value = "5")]
        radii: String,
        #[arg(long)]
        no_dense: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration in canonical form.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        if !path.exists() {
            return Err(Error::MissingFile(path.clone()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            cfg.apply_override(line)?;
        }
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate { out } => {
            let s = cmd_generate(&cfg, &out)?;
            println!("generated {} train and {} test scenes", s.train, s.test);
            println!("manifests: {} {}", s.train_manifest.display(), s.test_manifest.display());
        }
        Command::Train {
            manifest,
            checkpoint,
            loss_csv,
        } => {
            println!("{}", run_header(&cfg));
            let loss_csv = loss_csv.unwrap_or_else(|| checkpoint.with_extension("loss.csv"));
            let report = cmd_train(&cfg, &manifest, &checkpoint, &loss_csv)?;
            if let Some(last) = report.log.last() {
                println!(
                    "iteration {}: seg_loss {:.6} aff_loss {:.6}",
                    last.iteration, last.seg, last.aff
                );
            }
            println!("checkpoint: {}", checkpoint.display());
        }
        Command::Infer {
            checkpoint,
            image,
            manifest,
            out,
            steps,
            radius,
            alpha,
        } => {
            let mut opts = InferOptions::from_config(&cfg);
            opts.steps = steps.parse::<StepSpec>()?;
            if let Some(r) = radius {
                opts.radius = r;
            }
            if let Some(a) = alpha {
                opts.solver.alpha = a;
            }
            let inputs = match (image, manifest) {
                (Some(img), _) => {
                    let name = img
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "image".into());
                    vec![(img, name)]
                }
                (None, Some(m)) => manifest_inputs(&m)?,
                (None, None) => return Err(Error::InvalidInput("give --image or --manifest".into())),
            };
            let n = cmd_infer(&checkpoint, &inputs, &out, &opts)?;
            println!("labeled {n} image(s) into {}", out.display());
        }
        Command::Eval { pred, manifest, out } => {
            let report = cmd_eval(&pred, &manifest, &cfg)?;
            match out {
                Some(dir) => {
                    write_eval_report(&report, &dir)?;
                    println!("wrote {}", dir.join("metrics.csv").display());
                }
                None => print!("{}", report.to_csv()),
            }
        }
        Command::Ablate { sweep, manifest, out } => {
            let rows = cmd_ablate(&cfg, manifest.as_deref(), sweep.parse::<Sweep>()?)?;
            emit(&ablation_csv(&rows), out.as_deref())?;
        }
        Command::Bench {
            sizes,
            radii,
            no_dense,
            out,
        } => {
            let report = cmd_bench(&cfg, &parse_counts(&sizes)?, &parse_counts(&radii)?, !no_dense)?;
            emit(&report.to_csv(), out.as_deref())?;
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
