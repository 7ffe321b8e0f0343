//! Command-line front end: synthetic dataset generation, two-stage GZSL
//! training, evaluation, parameter counting, and embedding export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use avca_core::dataio::{generate_synthetic, DataError, DatasetBundle, SynthConfig};
use avca_core::model::{init_params, param_count, EvalOutput, ModelError};
use avca_core::protocol::{
    evaluate, export_embeddings, load_checkpoint, run_two_stage, save_checkpoint, train_stage,
    CheckpointMeta, EpochPoint, EvalSides, ProtocolError, StoredCalibration, TrainConfig,
    ValidationSplit,
};

#[derive(Parser)]
#[command(
    name = "avca",
    version,
    about = "Audio-visual generalised zero-shot learning: synthetic benchmarks, two-stage training, calibrated-stacking evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutputFlag {
    ThetaV,
    ThetaA,
    Sum,
    Min,
}

impl From<OutputFlag> for EvalOutput {
    fn from(value: OutputFlag) -> Self {
        match value {
            OutputFlag::ThetaV => EvalOutput::ThetaV,
            OutputFlag::ThetaA => EvalOutput::ThetaA,
            OutputFlag::Sum => EvalOutput::Sum,
            OutputFlag::Min => EvalOutput::Min,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual GZSL dataset bundle.
    GenSynth {
        /// Generator configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the bundle.
        #[arg(long)]
        out: PathBuf,
        /// Seed override (flag > config > AVCA_SEED > 42).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset bundle (two-stage protocol by default).
    Train {
        /// Path to manifest.json of the bundle.
        #[arg(long)]
        manifest: PathBuf,
        /// Training configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints, traces, and the report.
        #[arg(long)]
        out: PathBuf,
        /// Which stage to run; stage 2 needs stage1.avck in the output dir.
        #[arg(long, value_enum, default_value = "both")]
        stage: Stage,
        /// Seed override (flag > config > AVCA_SEED > 42).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the bundle's test subsets.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Calibration constant; defaults to the checkpoint's stored value.
        #[arg(long)]
        gamma: Option<f32>,
        /// Classifier output variant; defaults to the checkpoint's config.
        #[arg(long, value_enum)]
        output: Option<OutputFlag>,
        /// Report only the ZSL score (unseen search space, no calibration).
        #[arg(long)]
        zsl_only: bool,
    },
    /// Print the exact learnable-parameter count of a model configuration.
    ParamCount {
        /// Training configuration (JSON, `model` section used).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export per-sample and per-class embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Subset to embed: tr, val_seen, val_unseen, test_seen, test_unseen.
        #[arg(long)]
        subset: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

/// Exit codes: 2 usage/config, 3 data or format, 4 numeric failure.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<ProtocolError>() {
            return match p {
                ProtocolError::NumericFailure { .. } => 4,
                ProtocolError::Config { .. } => 2,
                ProtocolError::Model(ModelError::InvalidConfig { .. }) => 2,
                _ => 3,
            };
        }
        if let Some(d) = cause.downcast_ref::<DataError>() {
            return match d {
                DataError::Split { .. } => 2,
                _ => 3,
            };
        }
        if cause.downcast_ref::<ModelError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn env_seed() -> Option<u64> {
    std::env::var("AVCA_SEED").ok().and_then(|s| s.parse().ok())
}

/// Seed precedence: flag > config file > AVCA_SEED > 42.
fn resolve_seed(flag: Option<u64>, file_seed: Option<u64>) -> u64 {
    flag.or(file_seed).or_else(env_seed).unwrap_or(42)
}

/// Parses a JSON config file, reporting whether it sets its own seed.
fn load_config<T: serde::de::DeserializeOwned>(
    path: Option<&Path>,
) -> Result<(Option<T>, Option<u64>)> {
    let Some(path) = path else {
        return Ok((None, None));
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let file_seed = value.get("seed").and_then(|v| v.as_u64());
    let config: T = serde_json::from_value(value)
        .with_context(|| format!("interpreting config {}", path.display()))?;
    Ok((Some(config), file_seed))
}

fn load_bundle(manifest: &Path) -> Result<DatasetBundle> {
    DatasetBundle::load(manifest)
        .with_context(|| format!("loading dataset bundle {}", manifest.display()))
}

/// The checkpoint's model dims must match the bundle's feature and
/// embedding dims.
fn check_dims(bundle: &DatasetBundle, meta: &CheckpointMeta) -> Result<()> {
    for (what, expected, found) in [
        ("audio features", meta.config.k_input, bundle.audio_dim),
        ("visual features", meta.config.k_input, bundle.visual_dim),
        ("label embeddings", meta.config.k_w2v, bundle.embed_dim()),
    ] {
        if expected != found {
            return Err(DataError::DimMismatch {
                context: format!("checkpoint expects {expected}-dim {what}"),
                expected,
                found,
            }
            .into());
        }
    }
    Ok(())
}

fn stage1_trace_csv(trace: &[EpochPoint]) -> String {
    let mut out = String::from("epoch,loss,val_S,val_U,val_HM,gamma\n");
    for p in trace {
        let v = p.val.expect("stage-1 trace carries validation metrics");
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.epoch, p.loss, v.s, v.u, v.hm, v.gamma
        )
        .unwrap();
    }
    out
}

fn stage2_trace_csv(trace: &[EpochPoint]) -> String {
    let mut out = String::from("epoch,loss\n");
    for p in trace {
        writeln!(out, "{},{}", p.epoch, p.loss).unwrap();
    }
    out
}

fn test_sides<'a>(bundle: &'a DatasetBundle, stage2_seen: &'a [u32]) -> EvalSides<'a> {
    EvalSides {
        seen_samples: &bundle.test_seen,
        unseen_samples: &bundle.test_unseen,
        seen_classes: stage2_seen,
        unseen_classes: &bundle.manifest.partitions.test_unseen,
    }
}

fn stage2_seen_classes(bundle: &DatasetBundle) -> Vec<u32> {
    let parts = &bundle.manifest.partitions;
    let mut seen = parts.seen.clone();
    seen.extend_from_slice(&parts.val_unseen);
    seen
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth { config, out, seed } => {
            let (file_config, file_seed) = load_config::<SynthConfig>(config.as_deref())?;
            let mut synth = file_config.unwrap_or_default();
            synth.seed = resolve_seed(seed, file_seed);
            synth.validate()?;
            let dataset = generate_synthetic(&synth)?;
            let manifest_path = dataset.write_to_dir(&out)?;
            let oracle = dataset.oracle_accuracy();
            let records: usize = dataset.bundle.subsets().iter().map(|s| s.len()).sum();
            println!(
                "wrote {} ({} records, {} classes); oracle unseen accuracy {:.1}%",
                manifest_path.display(),
                records,
                dataset.bundle.embeddings.len(),
                100.0 * oracle.per_subset["test_unseen"]
            );
            Ok(())
        }
        Command::Train {
            manifest,
            config,
            out,
            stage,
            seed,
        } => {
            let (file_config, file_seed) = load_config::<TrainConfig>(config.as_deref())?;
            let mut train_config = file_config.unwrap_or_default();
            train_config.seed = resolve_seed(seed, file_seed);
            train_config.validate()?;
            let bundle = load_bundle(&manifest)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating output dir {}", out.display()))?;
            match stage {
                Stage::Both => cmd_train_both(&bundle, &train_config, &out),
                Stage::One => cmd_train_stage1(&bundle, &train_config, &out),
                Stage::Two => cmd_train_stage2(&bundle, &train_config, &out),
            }
        }
        Command::Evaluate {
            manifest,
            checkpoint,
            gamma,
            output,
            zsl_only,
        } => {
            let bundle = load_bundle(&manifest)?;
            let (meta, mut params) = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            check_dims(&bundle, &meta)?;
            let mut config = TrainConfig {
                model: meta.config.clone(),
                seed: meta.seed,
                ..TrainConfig::default()
            };
            if let Some(flag) = output {
                config.model.eval_output = flag.into();
            }
            config.model.validate()?;
            let gamma = match gamma.or(meta.calibration.map(|c| c.gamma)) {
                Some(g) if g >= 0.0 => g,
                Some(g) => bail!(ProtocolError::Config {
                    reason: format!("gamma {g} must be non-negative"),
                }),
                None => bail!(ProtocolError::Config {
                    reason: "checkpoint stores no calibration constant; pass --gamma".into(),
                }),
            };
            let seen2 = stage2_seen_classes(&bundle);
            let report = evaluate(
                &mut params,
                &config,
                &bundle.embeddings,
                test_sides(&bundle, &seen2),
                gamma,
            )?;
            if zsl_only {
                println!("{}", serde_json::json!({ "ZSL": report.zsl }));
                eprintln!("ZSL {:.2} (output {:?})", report.zsl, config.model.eval_output);
            } else {
                println!("{}", serde_json::to_string(&report)?);
                eprintln!("{}", report.summary());
            }
            Ok(())
        }
        Command::ParamCount { config } => {
            let (file_config, _) = load_config::<TrainConfig>(config.as_deref())?;
            let train_config = file_config.unwrap_or_default();
            train_config.model.validate()?;
            println!("{}", param_count(&train_config.model));
            Ok(())
        }
        Command::ExportEmbeddings {
            manifest,
            checkpoint,
            subset,
            out,
        } => {
            let bundle = load_bundle(&manifest)?;
            let (meta, mut params) = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            check_dims(&bundle, &meta)?;
            let records = bundle.subset(&subset).ok_or_else(|| ProtocolError::Config {
                reason: format!(
                    "unknown subset {subset}; expected tr, val_seen, val_unseen, test_seen, or test_unseen"
                ),
            })?;
            export_embeddings(
                &mut params,
                &meta.config,
                records,
                &bundle.embeddings,
                TrainConfig::default().batch_size,
                &out,
            )?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn cmd_train_both(bundle: &DatasetBundle, config: &TrainConfig, out: &Path) -> Result<()> {
    let result = run_two_stage(bundle, config)?;
    let calibration = StoredCalibration {
        gamma: result.calibration.best_gamma,
        hm: result.calibration.best_hm,
        selected_epochs: result.calibration.selected_epochs,
    };
    save_checkpoint(
        &out.join("stage1.avck"),
        &CheckpointMeta {
            config: config.model.clone(),
            seed: config.seed,
            stage: 1,
            calibration: Some(calibration),
        },
        &result.stage1.params,
    )?;
    save_checkpoint(
        &out.join("stage2.avck"),
        &CheckpointMeta {
            config: config.model.clone(),
            seed: config.seed,
            stage: 2,
            calibration: Some(calibration),
        },
        &result.stage2.params,
    )?;
    std::fs::write(out.join("stage1_trace.csv"), stage1_trace_csv(&result.stage1.trace))?;
    std::fs::write(out.join("stage2_trace.csv"), stage2_trace_csv(&result.stage2.trace))?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&result.report)?,
    )?;
    println!("{}", result.report.summary());
    Ok(())
}

fn cmd_train_stage1(bundle: &DatasetBundle, config: &TrainConfig, out: &Path) -> Result<()> {
    let parts = &bundle.manifest.partitions;
    let mut params = init_params(&config.model, config.seed)?;
    let trace = train_stage(
        &mut params,
        config,
        &bundle.tr,
        &bundle.embeddings,
        config.stage1_epochs,
        Some(ValidationSplit {
            val_seen: &bundle.val_seen,
            val_unseen: &bundle.val_unseen,
            seen_classes: &parts.seen,
            unseen_classes: &parts.val_unseen,
        }),
    )?;
    let best = trace
        .iter()
        .max_by(|a, b| {
            let (ha, hb) = (a.val.unwrap().hm, b.val.unwrap().hm);
            ha.partial_cmp(&hb).unwrap().then(b.epoch.cmp(&a.epoch))
        })
        .expect("at least one epoch");
    save_checkpoint(
        &out.join("stage1.avck"),
        &CheckpointMeta {
            config: config.model.clone(),
            seed: config.seed,
            stage: 1,
            calibration: Some(StoredCalibration {
                gamma: best.val.unwrap().gamma,
                hm: best.val.unwrap().hm,
                selected_epochs: best.epoch,
            }),
        },
        &params,
    )?;
    std::fs::write(out.join("stage1_trace.csv"), stage1_trace_csv(&trace))?;
    println!(
        "stage 1 done: best val HM {:.2} at epoch {} (gamma {:.2})",
        best.val.unwrap().hm,
        best.epoch,
        best.val.unwrap().gamma
    );
    Ok(())
}

fn cmd_train_stage2(bundle: &DatasetBundle, config: &TrainConfig, out: &Path) -> Result<()> {
    let stage1_path = out.join("stage1.avck");
    let (meta, _) = load_checkpoint(&stage1_path).with_context(|| {
        format!(
            "stage 2 needs the stage-1 checkpoint at {}",
            stage1_path.display()
        )
    })?;
    let calibration = meta.calibration.ok_or_else(|| ProtocolError::Config {
        reason: "stage-1 checkpoint stores no calibration result".into(),
    })?;
    let mut training = bundle.tr.clone();
    training.extend_from_slice(&bundle.val_seen);
    training.extend_from_slice(&bundle.val_unseen);
    let mut params = init_params(&config.model, config.seed)?;
    let trace = train_stage(
        &mut params,
        config,
        &training,
        &bundle.embeddings,
        calibration.selected_epochs,
        None,
    )?;
    save_checkpoint(
        &out.join("stage2.avck"),
        &CheckpointMeta {
            config: config.model.clone(),
            seed: config.seed,
            stage: 2,
            calibration: Some(calibration),
        },
        &params,
    )?;
    std::fs::write(out.join("stage2_trace.csv"), stage2_trace_csv(&trace))?;
    let seen2 = stage2_seen_classes(bundle);
    let report = evaluate(
        &mut params,
        config,
        &bundle.embeddings,
        test_sides(bundle, &seen2),
        calibration.gamma,
    )?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("{}", report.summary());
    Ok(())
}
