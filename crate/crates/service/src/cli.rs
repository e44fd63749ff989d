//! The `cxr` command line.
//!
//! Exit status: 0 on success, 1 when a command fails, 2 on a usage error.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use cxr_core::bundle::{load_bundle, save_bundle, ModelBundle};
use cxr_core::classifier::{
    build_model, evaluate_accuracy, standard_factors, train, tune_training, ArchWidth, TrainConfig,
};
use cxr_core::dataset::{self, BinaryDataset, ManifestRecord};
use cxr_core::evaluation::{error_analysis, per_model_accuracy, simulate_error_analysis, strict_system_accuracy, LabeledTriple};
use cxr_core::imaging::{encode_pgm, ImageFormat, Segment};
use cxr_core::optimizer::{OptimizerConfig, OptimizerKind};
use cxr_core::pipeline::{predict_pipeline_as, predict_preprocessed, sniff_format};
use cxr_core::{Abnormality, ExecMode, MasterText};

use crate::server::{self, ServerConfig, DEFAULT_MAX_BODY_BYTES};

type CliResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

#[derive(Parser, Debug)]
#[command(name = "cxr", version, about = "Chest X-ray multi-model classification and report generation")]
struct Cli {
    /// Run batch work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize an image and optionally write the full image and segments as PGM.
    Preprocess {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        format: Option<ImageFormat>,
        #[arg(long, value_name = "DIR")]
        dump_segments: Option<PathBuf>,
    },
    /// Build train/test manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one abnormality model and store it in a bundle.
    Train(TrainArgs),
    /// One-factor-at-a-time sweep over learning rate, optimizer and width.
    Tune(TuneArgs),
    /// Accuracy of one model, or of the whole system with --system.
    Evaluate(EvaluateArgs),
    /// Predict a report for one image.
    Predict {
        #[arg(long, env = "CXR_BUNDLE")]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        format: Option<ImageFormat>,
        /// Print the full JSON response.
        #[arg(long)]
        json: bool,
    },
    /// Joint-correct and any-error probabilities from per-model accuracies.
    AnalyzeErrors {
        /// Three comma-separated accuracies: cardiomegaly, effusion, consolidation.
        #[arg(long, value_name = "A,B,C")]
        acc: String,
        /// Also run a Monte Carlo check with this many trials.
        #[arg(long, value_name = "N")]
        simulate: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "CXR_BUNDLE")]
        bundle: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value_t = DEFAULT_MAX_BODY_BYTES)]
        max_body_bytes: usize,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Sample a balanced per-abnormality dataset and split it.
    Build(BuildArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// NIH-style label file (`Image Index`, `Finding Labels`).
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    nih_csv: Option<PathBuf>,
    /// Native manifest to sample from instead of an NIH label file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory holding the images named in the NIH file.
    #[arg(long, default_value = ".")]
    image_root: PathBuf,
    /// Image ids to drop, one per line; repeatable.
    #[arg(long)]
    exclude: Vec<PathBuf>,
    /// Native manifest whose labels replace those of matching ids.
    #[arg(long)]
    overrides: Option<PathBuf>,
    #[arg(long)]
    abnormality: Abnormality,
    #[arg(long)]
    n_pos: usize,
    #[arg(long)]
    n_neg: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    split: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct Hyper {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    abnormality: Abnormality,
    /// Bundle to update; created if missing.
    #[arg(long, env = "CXR_BUNDLE")]
    bundle: PathBuf,
    /// Master text used when a new bundle is created.
    #[arg(long)]
    master_text: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = OptimizerKind::Adam)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = ArchWidth::Small)]
    width: ArchWidth,
    /// Write per-epoch loss and accuracy as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    abnormality: Abnormality,
    #[command(flatten)]
    hyper: Hyper,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, env = "CXR_BUNDLE")]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required_unless_present = "system", conflicts_with = "system")]
    abnormality: Option<Abnormality>,
    /// Strict three-label evaluation of the full pipeline.
    #[arg(long)]
    system: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
                if e.kind() == clap::error::ErrorKind::InvalidSubcommand
                    || e.kind() == clap::error::ErrorKind::MissingSubcommand
                    || e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
                {
                    let _ = write!(err, "\n{}", Cli::command().render_help());
                }
            }
            return if code == 0 { 0 } else { 2 };
        }
    };
    let exec = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    };
    match execute(cli.command, exec, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<(), String> {
    std::fs::write(path, data).map_err(|e| format!("{}: {e}", path.display()))
}

/// Relative image paths in a manifest are relative to the manifest itself.
fn load_manifest_file(path: &Path) -> Result<Vec<ManifestRecord>, Box<dyn std::error::Error + Send + Sync>> {
    let mut records = dataset::load_manifest(&read_text(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    dataset::resolve_paths(&mut records, path.parent().unwrap_or(Path::new(".")));
    Ok(records)
}

fn absolute(path: &Path) -> PathBuf {
    std::fs::canonicalize(path).unwrap_or_else(|_| std::env::current_dir().map(|d| d.join(path)).unwrap_or(path.to_path_buf()))
}

fn load_examples(path: &Path, abnormality: Abnormality, exec: ExecMode) -> Result<Vec<cxr_core::classifier::Example>, Box<dyn std::error::Error + Send + Sync>> {
    let ds = BinaryDataset::from_records(abnormality, &load_manifest_file(path)?);
    Ok(dataset::load_examples(&ds, exec)?)
}

fn image_format(bytes: &[u8], explicit: Option<ImageFormat>) -> Result<ImageFormat, cxr_core::imaging::ImagingError> {
    explicit.map_or_else(|| sniff_format(bytes), Ok)
}

fn parse_acc(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let vals: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| format!("--acc: {p:?} is not a number")))
        .collect::<Result<_, _>>()?;
    vals.try_into().map_err(|v: Vec<f64>| format!("--acc needs three values, got {}", v.len()))
}

fn execute(command: Command, exec: ExecMode, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match command {
        Command::Preprocess {
            image,
            format,
            dump_segments,
        } => {
            let bytes = read(&image)?;
            let pre = cxr_core::imaging::preprocess(&bytes, image_format(&bytes, format)?)?;
            writeln!(out, "full {}x{}", pre.full.width(), pre.full.height())?;
            for seg in Segment::ALL {
                let img = pre.segment(seg);
                let rows = seg.row_range();
                writeln!(out, "segment {seg} {}x{} rows {}..{}", img.width(), img.height(), rows.start, rows.end)?;
            }
            if let Some(dir) = dump_segments {
                std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                write_file(&dir.join("full.pgm"), encode_pgm(&pre.full))?;
                for (seg, name) in Segment::ALL.into_iter().zip(["seg1.pgm", "seg2.pgm", "seg3.pgm"]) {
                    write_file(&dir.join(name), encode_pgm(pre.segment(seg)))?;
                }
            }
        }
        Command::Dataset(DatasetCommand::Build(a)) => {
            let mut records = match (&a.nih_csv, &a.manifest) {
                (Some(nih), _) => dataset::ingest_nih_labels(&read_text(nih)?, &absolute(&a.image_root))?,
                (None, Some(m)) => {
                    let mut r = load_manifest_file(m)?;
                    for rec in &mut r {
                        rec.path = absolute(&rec.path);
                    }
                    r
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            if let Some(o) = &a.overrides {
                let overrides = dataset::load_manifest(&read_text(o)?)?;
                for id in dataset::apply_overrides(&mut records, &overrides) {
                    writeln!(err, "warning: override for unknown id {id}")?;
                }
            }
            for ex in &a.exclude {
                let result = dataset::apply_exclusions(records, &read_text(ex)?);
                for id in result.unknown_ids {
                    writeln!(err, "warning: excluded id {id} not in the label file")?;
                }
                records = result.records;
            }
            let sample = dataset::balanced_sample(&records, a.abnormality, a.n_pos, a.n_neg, a.seed)?;
            let (tr, te) = dataset::split(&sample, a.split, a.seed)?;
            std::fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
            write_file(&a.out.join("train.csv"), dataset::write_manifest(&tr.records())?)?;
            write_file(&a.out.join("test.csv"), dataset::write_manifest(&te.records())?)?;
            writeln!(
                out,
                "{}: {} records, sampled {} (+{} / -{}), train {}, test {}",
                a.abnormality,
                records.len(),
                sample.len(),
                sample.positives(),
                sample.len() - sample.positives(),
                tr.len(),
                te.len()
            )?;
        }
        Command::Train(a) => {
            let train_set = load_examples(&a.train, a.abnormality, exec)?;
            let test_set = load_examples(&a.test, a.abnormality, exec)?;
            let config = TrainConfig {
                epochs: a.hyper.epochs,
                batch_size: a.hyper.batch_size,
                seed: a.hyper.seed,
                optimizer: OptimizerConfig::adam(a.lr).with_kind(a.optimizer),
                arch_width: a.width,
            };
            config.validate()?;
            let net = build_model(config.arch_width, config.seed);
            let (model, history) = train(a.abnormality, net, &train_set, &test_set, &config)?;
            for h in &history {
                writeln!(
                    out,
                    "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}",
                    h.epoch, h.mean_loss, h.train_accuracy, h.test_accuracy
                )?;
            }
            if let Some(path) = &a.history {
                let mut csv = String::from("epoch,mean_loss,train_acc,test_acc\n");
                for h in &history {
                    csv.push_str(&format!("{},{},{},{}\n", h.epoch, h.mean_loss, h.train_accuracy, h.test_accuracy));
                }
                write_file(path, csv)?;
            }
            let mut bundle = if a.bundle.exists() {
                load_bundle(&a.bundle)?
            } else {
                match &a.master_text {
                    Some(p) => ModelBundle::new(MasterText::parse(&read_text(p)?)?),
                    None => ModelBundle::default(),
                }
            };
            bundle.insert(model);
            save_bundle(&bundle, &a.bundle)?;
            writeln!(out, "saved {} model to {}", a.abnormality, a.bundle.display())?;
            let missing = bundle.missing();
            if !missing.is_empty() {
                let names: Vec<&str> = missing.iter().map(|m| m.as_str()).collect();
                writeln!(err, "note: bundle still lacks {}", names.join(", "))?;
            }
        }
        Command::Tune(a) => {
            let train_set = load_examples(&a.train, a.abnormality, exec)?;
            let test_set = load_examples(&a.test, a.abnormality, exec)?;
            let base = TrainConfig {
                epochs: a.hyper.epochs,
                batch_size: a.hyper.batch_size,
                seed: a.hyper.seed,
                ..TrainConfig::default()
            };
            let report = tune_training(a.abnormality, &standard_factors(), &train_set, &test_set, &base, exec)?;
            let csv = report.to_csv();
            match &a.out {
                Some(p) => write_file(p, &csv)?,
                None => write!(out, "{csv}")?,
            }
            let winners: Vec<String> = report.final_assignment.iter().map(|v| v.to_string()).collect();
            writeln!(err, "selected: {}", winners.join(", "))?;
        }
        Command::Evaluate(a) => {
            let bundle = load_bundle(&a.bundle)?;
            let records = load_manifest_file(&a.manifest)?;
            if let Some(abn) = a.abnormality {
                let model = bundle.model(abn).ok_or_else(|| format!("bundle has no {abn} model"))?;
                let examples = dataset::load_examples(&BinaryDataset::from_records(abn, &records), exec)?;
                writeln!(out, "{abn} accuracy {}", evaluate_accuracy(model, &examples)?)?;
            } else {
                evaluate_system(&bundle, &records, exec, out)?;
            }
        }
        Command::Predict {
            bundle,
            image,
            format,
            json,
        } => {
            let bundle = load_bundle(&bundle)?;
            let bytes = read(&image)?;
            let response = predict_pipeline_as(&bundle, &bytes, image_format(&bytes, format)?)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&response)?)?;
            } else {
                writeln!(out, "Result code: {}", response.result_code)?;
                writeln!(out, "{}", response.report_text)?;
            }
        }
        Command::AnalyzeErrors {
            acc,
            simulate,
            seed,
            json,
        } => {
            let p = parse_acc(&acc)?;
            let exact = error_analysis(p)?;
            let sim = simulate.map(|n| simulate_error_analysis(p, n, seed)).transpose()?;
            if json {
                let v = serde_json::json!({"analysis": exact, "simulation": sim});
                writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
            } else {
                write!(out, "{}", exact.render())?;
                if let (Some(s), Some(n)) = (sim, simulate) {
                    writeln!(out, "\nMonte Carlo, {n} trials, seed {seed}")?;
                    write!(out, "{}", s.render())?;
                }
            }
        }
        Command::Serve {
            bundle,
            bind,
            max_body_bytes,
        } => {
            let bundle = load_bundle(&bundle)?;
            if !bundle.is_complete() {
                let names: Vec<&str> = bundle.missing().iter().map(|m| m.as_str()).collect();
                return Err(format!("bundle lacks {}", names.join(", ")).into());
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(bundle, bind, ServerConfig { max_body_bytes }))?;
        }
    }
    Ok(())
}

fn evaluate_system(bundle: &ModelBundle, records: &[ManifestRecord], exec: ExecMode, out: &mut dyn Write) -> CliResult {
    let preds = exec.map(records, |r| -> Result<LabeledTriple, String> {
        let pre = dataset::load_image(&r.path).map_err(|e| e.to_string())?;
        Ok(predict_preprocessed(bundle, &pre).map_err(|e| e.to_string())?.labels())
    });
    let preds: Vec<LabeledTriple> = preds.into_iter().collect::<Result<_, _>>()?;
    let truths: Vec<LabeledTriple> = records.iter().map(|r| r.labels).collect();
    let per_model = per_model_accuracy(&preds, &truths)?;
    for abn in Abnormality::ALL {
        writeln!(out, "{:<16}{}", abn.to_string(), per_model[abn.index()])?;
    }
    writeln!(out, "{:<16}{}", "strict", strict_system_accuracy(&preds, &truths)?)?;
    writeln!(out)?;
    write!(out, "{}", error_analysis(per_model.map(|r| r.value()))?.render())?;
    Ok(())
}
