//! `sgcd` command line: synthetic data generation, cross-validated training
//! with JSON-lines step logging, checkpoint evaluation, single-bag inference
//! and the finite-difference verification suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use sgcd_core::backbone::SlideBag;
use sgcd_core::bagio;
use sgcd_core::checkpoint::{load_model, save_model};
use sgcd_core::config::TrainConfig;
use sgcd_core::diagnostics::gradcheck_suite;
use sgcd_core::matrix::Matrix;
use sgcd_core::metrics::evaluate_metrics;
use sgcd_core::synth::{generate_synthetic_dataset, load_dataset, SyntheticSpec};
use sgcd_core::trainer::{infer_slide, run_cv, train_collaborative, ArmSelect};

#[derive(Parser)]
#[command(name = "sgcd", version, about = "Slide-graph collaborative distillation trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bag dataset from a generator spec
    GenData {
        /// Path to the generator spec JSON
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for bag files and manifest.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training; emits per-step JSON lines and a final report
    Train {
        /// Dataset directory containing manifest.json
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON (defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; when set, a final model is trained on the full
        /// dataset and saved here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Which arm(s) to train: mil | slidegcd | both
        #[arg(long, default_value = "both")]
        arm: String,
    },
    /// Evaluate a checkpoint on a dataset via graph-branch inference
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Classify one bag file
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bag: PathBuf,
    },
    /// Run the finite-difference verification suite
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<sgcd_core::Error> for CliError {
    fn from(e: sgcd_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn parse_arm(arm: &str) -> Result<ArmSelect, CliError> {
    match arm {
        "mil" => Ok(ArmSelect::MilOnly),
        "slidegcd" => Ok(ArmSelect::SlideGcd),
        "both" => Ok(ArmSelect::Both),
        other => Err(CliError::Usage(format!(
            "unknown arm `{other}` (expected mil, slidegcd or both)"
        ))),
    }
}

fn load_config_for(data_classes: usize, data_dim: usize, path: &Option<PathBuf>) -> Result<TrainConfig, CliError> {
    let cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if cfg.classes != data_classes {
        return Err(CliError::Runtime(format!(
            "config declares {} classes, dataset has {}",
            cfg.classes, data_classes
        )));
    }
    if cfg.d_p != data_dim {
        return Err(CliError::Runtime(format!(
            "config declares d_p = {}, dataset features have width {}",
            cfg.d_p, data_dim
        )));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = SyntheticSpec::load(&spec)?;
            let manifest = generate_synthetic_dataset(&spec, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out.display().to_string(),
                    "slides": manifest.entries.len(),
                    "classes": manifest.classes,
                    "feature_dim": manifest.feature_dim,
                })
            );
            Ok(())
        }
        Command::Train { data, config, out, arm } => {
            let arms = parse_arm(&arm)?;
            let (manifest, bags) = load_dataset(&data)?;
            let cfg = load_config_for(manifest.classes, manifest.feature_dim, &config)?;
            cfg.validate()?;

            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            let report = run_cv(&bags, &cfg, arms, &mut |event| {
                writeln!(lock, "{}", event.to_log_json()).expect("stdout");
            })?;
            let report_json =
                serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(lock, "{report_json}").expect("stdout");

            if let Some(ckpt) = out {
                let refs: Vec<&SlideBag<f64>> = bags.iter().collect();
                let model = train_collaborative(&refs, &cfg, cfg.seed, None, &mut |event| {
                    writeln!(lock, "{}", event.to_log_json()).expect("stdout");
                })?;
                save_model(&ckpt, &model)?;
                writeln!(
                    lock,
                    "{}",
                    serde_json::json!({"checkpoint": ckpt.display().to_string()})
                )
                .expect("stdout");
            }
            Ok(())
        }
        Command::Eval { ckpt, data } => {
            let model = load_model(&ckpt)?;
            let (manifest, bags) = load_dataset(&data)?;
            if manifest.classes != model.config.classes {
                return Err(CliError::Runtime(format!(
                    "checkpoint expects {} classes, dataset has {}",
                    model.config.classes, manifest.classes
                )));
            }
            let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
            let mut scores = Matrix::zeros(bags.len(), model.config.classes);
            for (r, bag) in bags.iter().enumerate() {
                let (_, probs) = infer_slide(bag, &model)?;
                scores.row_mut(r).copy_from_slice(&probs);
            }
            let metrics = evaluate_metrics(&scores, &labels, model.config.classes)?;
            println!(
                "{}",
                serde_json::to_string(&metrics).map_err(|e| CliError::Runtime(e.to_string()))?
            );
            Ok(())
        }
        Command::Infer { ckpt, bag } => {
            let model = load_model(&ckpt)?;
            let instances = bagio::read_bag(&bag)?;
            let bag = SlideBag::new(bag.display().to_string(), instances, 0)?;
            let (class, probs) = infer_slide(&bag, &model)?;
            println!("{}", serde_json::json!({"class": class, "probs": probs}));
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let mut all_pass = true;
            for (name, report) in gradcheck_suite(seed)? {
                println!("== {name} ==");
                print!("{}", report.table());
                all_pass &= report.pass;
            }
            if all_pass {
                Ok(())
            } else {
                Err(CliError::Runtime("gradient check failed".into()))
            }
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{e}");
                    std::process::exit(1);
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}
