use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use shipdet::checkpoint::{read_checkpoint, write_checkpoint, write_loss_curve};
use shipdet::convert::{convert_dataset, ConvertOptions, SourceFormat};
use shipdet::infer::run_inference;
use shipdet::jsonl;
use shipdet::maskio::{write_masks, ManifestLine};
use shipdet::predio::{load_ground_truth, load_predictions, write_predictions};
use shipdet::report::{pr_curves_svg, read_report, write_report};
use shipdet::scripted::load_scripted;
use shipdet::snapshot::{
    resolve_seed, snapshot_path_for_dir, snapshot_path_for_file, write_snapshot,
};
use shipdet_core::codec::Task;
use shipdet_core::eval::{
    evaluate, format_report, format_rows_csv, format_rows_table, ConfidenceScorer,
    ConstantScorer, EmbedScorer, EvalReport, ReportStyle,
};
use shipdet_core::fusion::{
    dataset_loss, train_stage, AnswerSource, Stage, ToyModel, ToyModelConfig, TrainConfig,
    TrainSample,
};
use shipdet_core::labeling::{ClassFilter, Modality};
use shipdet_core::raster::decode_pgm;
use shipdet_core::seg::{
    boxes_to_prompts, segment, BoxFillSegmenter, Segmenter, ThresholdSegmenter,
};

/// Multi-source ship-detection toolkit: dataset conversion, toy-model
/// training, inference, AP evaluation, box-prompted segmentation, and
/// report generation. Every command writes a config snapshot next to its
/// outputs and is deterministic given (inputs, seed, snapshot).
#[derive(Parser)]
#[command(name = "shipdet", version)]
struct Cli {
    /// Random seed (precedence: this flag, then SHIPDET_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Dota,
    HbbJson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Hbb,
    Obb,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Hbb => Task::Hbb,
            TaskArg::Obb => Task::Obb,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    Optical,
    Sar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Alignment,
    Ship,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScorerArg {
    /// Pooled-feature cosine similarity against a fixed ship embedding.
    Default,
    /// The same confidence for every box (input-order ranking).
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SegmenterArg {
    Boxfill,
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormatArg {
    Table,
    Csv,
    Svg,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an annotated image directory into instruction records
    Convert {
        /// Annotation format of the source dataset
        #[arg(long, value_enum)]
        format: FormatArg,
        /// Target geometry for the emitted answers
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Directory of .pgm images
        #[arg(long)]
        images: PathBuf,
        /// Directory of annotation files (.txt for dota, .json for hbb-json)
        #[arg(long)]
        annotations: PathBuf,
        /// Output JSONL of instruction records
        #[arg(long)]
        out: PathBuf,
        /// Dataset label stored in every record (default: annotations dir name)
        #[arg(long)]
        dataset_name: Option<String>,
        /// Imaging modality stored in every record
        #[arg(long, value_enum, default_value = "optical")]
        modality: ModalityArg,
        /// Drop images with zero ships instead of emitting an empty answer
        #[arg(long)]
        drop_empty: bool,
        /// Fail when an annotation file has malformed lines and no valid objects
        #[arg(long)]
        strict: bool,
    },
    /// Train the toy multimodal model on an instruction-record file
    TrainToy {
        /// Instruction records JSONL; image paths resolve relative to it
        #[arg(long)]
        data: PathBuf,
        /// Training stage: alignment (adapters + projection) or ship
        /// (adds bias/scale tuning)
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Optional JSON config (model and optimizer settings)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to continue from (e.g. ship stage on an alignment
        /// checkpoint)
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output checkpoint; a loss curve CSV is written next to it
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect ships in a directory of .pgm images
    Infer {
        /// Model checkpoint to decode with
        #[arg(long, conflicts_with = "scripted", required_unless_present = "scripted")]
        model: Option<PathBuf>,
        /// Scripted instruction-to-answer JSONL instead of a model
        #[arg(long)]
        scripted: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "default")]
        scorer: ScorerArg,
        /// Output predictions JSONL
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth (AP at IoU thresholds)
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Comma-separated IoU thresholds
        #[arg(long, default_value = "0.4,0.5,0.6")]
        iou: String,
        /// Output report JSON
        #[arg(long)]
        out: PathBuf,
        /// Method name shown in report rows
        #[arg(long, default_value = "shipdet-toy")]
        method: String,
        /// Dataset name shown in report rows (default: gt file stem)
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Segment predicted boxes into per-box masks
    Segment {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_enum, default_value = "threshold")]
        segmenter: SegmenterArg,
        /// Output directory: <image_id>/<box_index>.pgm plus manifest.jsonl
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge evaluation reports into a comparison table, CSV, or PR-curve SVG
    Report {
        /// Report JSON files produced by eval
        #[arg(long = "eval", required = true, num_args = 1..)]
        eval: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormatArg,
        /// Output path; table/csv print to stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = resolve_seed(cli.seed);
    match cli.command {
        Command::Convert {
            format,
            task,
            images,
            annotations,
            out,
            dataset_name,
            modality,
            drop_empty,
            strict,
        } => cmd_convert(
            format,
            task.into(),
            images,
            annotations,
            out,
            dataset_name,
            modality,
            drop_empty,
            strict,
            seed,
        ),
        Command::TrainToy {
            data,
            stage,
            config,
            init,
            out,
        } => cmd_train_toy(data, stage, config, init, out, cli.seed, seed),
        Command::Infer {
            model,
            scripted,
            images,
            task,
            scorer,
            out,
        } => cmd_infer(model, scripted, images, task.into(), scorer, out, seed),
        Command::Eval {
            preds,
            gt,
            task,
            iou,
            out,
            method,
            dataset,
        } => cmd_eval(preds, gt, task.into(), &iou, out, method, dataset, seed),
        Command::Segment {
            preds,
            images,
            segmenter,
            out,
        } => cmd_segment(preds, images, segmenter, out, seed),
        Command::Report { eval, format, out } => cmd_report(eval, format, out, seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_convert(
    format: FormatArg,
    task: Task,
    images: PathBuf,
    annotations: PathBuf,
    out: PathBuf,
    dataset_name: Option<String>,
    modality: ModalityArg,
    drop_empty: bool,
    strict: bool,
    seed: u64,
) -> Result<ExitCode> {
    let source_dataset = dataset_name.unwrap_or_else(|| {
        annotations
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| String::from("dataset"))
    });
    let opts = ConvertOptions {
        format: match format {
            FormatArg::Dota => SourceFormat::Dota,
            FormatArg::HbbJson => SourceFormat::HbbJson,
        },
        task,
        images_dir: images.clone(),
        annotations_dir: annotations.clone(),
        out_path: out.clone(),
        source_dataset: source_dataset.clone(),
        modality: match modality {
            ModalityArg::Optical => Modality::Optical,
            ModalityArg::Sar => Modality::Sar,
        },
        keep_empty: !drop_empty,
        strict,
        class_filter: ClassFilter::default(),
    };
    let stats = convert_dataset(&opts)?;

    write_snapshot(
        &snapshot_path_for_file(&out),
        "convert",
        seed,
        json!({
            "format": match format { FormatArg::Dota => "dota", FormatArg::HbbJson => "hbb-json" },
            "task": task.as_str(),
            "images": images.display().to_string(),
            "annotations": annotations.display().to_string(),
            "out": out.display().to_string(),
            "dataset_name": source_dataset,
            "drop_empty": drop_empty,
            "strict": strict,
        }),
    )?;

    println!("records emitted:  {}", stats.records_emitted);
    println!("objects dropped:  {}", stats.objects_dropped);
    println!("images skipped:   {}", stats.images_skipped);
    for (reason, count) in &stats.reasons {
        println!("  {reason}: {count}");
    }
    let partial =
        stats.objects_dropped > 0 || stats.images_skipped > 0 || !stats.reasons.is_empty();
    Ok(if partial { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

#[derive(Serialize, Deserialize, Default)]
struct TrainFileConfig {
    #[serde(default)]
    model: Option<ToyModelConfig>,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    learning_rate: Option<f64>,
    #[serde(default)]
    min_lr_fraction: Option<f64>,
    #[serde(default)]
    weight_decay: Option<f64>,
}

fn cmd_train_toy(
    data: PathBuf,
    stage: StageArg,
    config: Option<PathBuf>,
    init: Option<PathBuf>,
    out: PathBuf,
    seed_flag: Option<u64>,
    seed: u64,
) -> Result<ExitCode> {
    let file_cfg: TrainFileConfig = match &config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{}: bad config", path.display()))?
        }
        None => TrainFileConfig::default(),
    };

    let records = shipdet::convert::load_records(&data)?;
    if records.is_empty() {
        bail!("{}: no records", data.display());
    }
    let data_dir = data.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(records.len());
    for record in records {
        let image_path = data_dir.join(&record.image);
        let bytes = std::fs::read(&image_path)
            .with_context(|| format!("reading {}", image_path.display()))?;
        let image = decode_pgm(&bytes)
            .map_err(|e| anyhow::anyhow!("{}: {e}", image_path.display()))?;
        samples.push(TrainSample { record, image });
    }

    let mut model = match &init {
        Some(path) => read_checkpoint(path)?,
        None => {
            let mut model_cfg = file_cfg.model.clone().unwrap_or_default();
            // flag/env seed overrides the config file's model seed
            if seed_flag.is_some() || std::env::var(shipdet::snapshot::SEED_ENV).is_ok() {
                model_cfg.seed = seed;
            }
            ToyModel::new(model_cfg).map_err(|e| anyhow::anyhow!("invalid model config: {e}"))?
        }
    };

    let stage = match stage {
        StageArg::Alignment => Stage::Alignment,
        StageArg::Ship => Stage::ShipAdaption,
    };
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        steps: file_cfg.steps.unwrap_or(defaults.steps),
        batch_size: file_cfg.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: file_cfg.learning_rate.unwrap_or(defaults.learning_rate),
        min_lr_fraction: file_cfg
            .min_lr_fraction
            .unwrap_or(defaults.min_lr_fraction),
        weight_decay: file_cfg.weight_decay.unwrap_or(defaults.weight_decay),
        seed,
    };

    let initial = dataset_loss(&model, &samples)
        .map_err(|e| anyhow::anyhow!("initial loss: {e}"))?;
    let run = train_stage(&mut model, &samples, stage, &train_cfg)
        .map_err(|e| anyhow::anyhow!("training failed: {e}"))?;
    let final_loss = dataset_loss(&model, &samples)
        .map_err(|e| anyhow::anyhow!("final loss: {e}"))?;

    write_checkpoint(&out, &model)?;
    let mut curve_path = out.file_name().unwrap_or_default().to_os_string();
    curve_path.push(".loss.csv");
    write_loss_curve(&out.with_file_name(curve_path), &run.losses)?;

    write_snapshot(
        &snapshot_path_for_file(&out),
        "train-toy",
        seed,
        json!({
            "data": data.display().to_string(),
            "stage": run.stage.as_str(),
            "config": config.as_ref().map(|p| p.display().to_string()),
            "init": init.as_ref().map(|p| p.display().to_string()),
            "out": out.display().to_string(),
            "steps": train_cfg.steps,
            "batch_size": train_cfg.batch_size,
            "learning_rate": train_cfg.learning_rate,
        }),
    )?;

    println!("stage:        {}", run.stage.as_str());
    println!("samples:      {}", samples.len());
    println!("steps:        {}", train_cfg.steps);
    println!("initial loss: {initial:.4}");
    println!("final loss:   {final_loss:.4}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(
    model: Option<PathBuf>,
    scripted: Option<PathBuf>,
    images: PathBuf,
    task: Task,
    scorer: ScorerArg,
    out: PathBuf,
    seed: u64,
) -> Result<ExitCode> {
    let loaded_model;
    let loaded_script;
    let source = match (&model, &scripted) {
        (Some(path), None) => {
            loaded_model = read_checkpoint(path)?;
            AnswerSource::Model(&loaded_model)
        }
        (None, Some(path)) => {
            loaded_script = load_scripted(path)?;
            AnswerSource::Scripted(&loaded_script)
        }
        _ => bail!("exactly one of --model and --scripted is required"),
    };

    let embed_scorer;
    let constant_scorer;
    let scorer_ref: &dyn ConfidenceScorer = match scorer {
        ScorerArg::Default => {
            embed_scorer = EmbedScorer::new(seed);
            &embed_scorer
        }
        ScorerArg::Constant => {
            constant_scorer = ConstantScorer(0.5);
            &constant_scorer
        }
    };

    let (detections, stats) = run_inference(&source, &images, task, scorer_ref)?;
    write_predictions(&out, &detections, task)?;

    write_snapshot(
        &snapshot_path_for_file(&out),
        "infer",
        seed,
        json!({
            "model": model.as_ref().map(|p| p.display().to_string()),
            "scripted": scripted.as_ref().map(|p| p.display().to_string()),
            "images": images.display().to_string(),
            "task": task.as_str(),
            "scorer": match scorer { ScorerArg::Default => "default", ScorerArg::Constant => "constant" },
            "out": out.display().to_string(),
        }),
    )?;

    println!("images:         {}", stats.images);
    println!("boxes:          {}", stats.boxes);
    println!("parse warnings: {}", stats.parse_warnings);
    println!("truncated:      {}", stats.truncated_answers);
    println!("failed images:  {}", stats.failed_images);
    Ok(if stats.failed_images > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    preds_path: PathBuf,
    gt_path: PathBuf,
    task: Task,
    iou: &str,
    out: PathBuf,
    method: String,
    dataset: Option<String>,
    seed: u64,
) -> Result<ExitCode> {
    let thresholds: Vec<f64> = iou
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| anyhow::anyhow!("bad IoU threshold '{t}'"))
        })
        .collect::<Result<_>>()?;
    let preds = load_predictions(&preds_path, task)?;
    let gts = load_ground_truth(&gt_path, task)?;
    let dataset = dataset.unwrap_or_else(|| {
        gt_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| String::from("dataset"))
    });

    let entries = evaluate(&preds, &gts, task, &thresholds)
        .map_err(|e| anyhow::anyhow!("evaluation failed: {e}"))?;
    let num_ground_truth = gts.values().map(Vec::len).sum();
    let report = EvalReport::new(
        &method,
        &dataset,
        task,
        entries,
        gts.len(),
        preds.len(),
        num_ground_truth,
    );
    write_report(&out, &report)?;
    write_snapshot(
        &snapshot_path_for_file(&out),
        "eval",
        seed,
        json!({
            "preds": preds_path.display().to_string(),
            "gt": gt_path.display().to_string(),
            "task": task.as_str(),
            "iou": thresholds,
            "out": out.display().to_string(),
            "method": method,
            "dataset": dataset,
        }),
    )?;
    print!("{}", format_report(&report, ReportStyle::Table));
    Ok(ExitCode::SUCCESS)
}

fn cmd_segment(
    preds_path: PathBuf,
    images: PathBuf,
    segmenter: SegmenterArg,
    out: PathBuf,
    seed: u64,
) -> Result<ExitCode> {
    // the prediction file carries its task on every line
    let first: Vec<shipdet::predio::PredictionLine> = jsonl::read_lines(&preds_path)?;
    if first.is_empty() {
        bail!("{}: no predictions", preds_path.display());
    }
    let task = first[0].task;
    if first.iter().any(|l| l.task != task) {
        bail!("{}: mixed tasks", preds_path.display());
    }
    let preds = load_predictions(&preds_path, task)?;

    let mut grouped: BTreeMap<String, Vec<shipdet_core::eval::GeomBox>> = BTreeMap::new();
    for p in &preds {
        grouped.entry(p.image_id.clone()).or_default().push(p.bbox.clone());
    }

    let seg: &dyn Segmenter = match segmenter {
        SegmenterArg::Boxfill => &BoxFillSegmenter,
        SegmenterArg::Threshold => &ThresholdSegmenter::default(),
    };

    std::fs::create_dir_all(&out)?;
    let mut manifest: Vec<ManifestLine> = Vec::new();
    let mut failures = 0usize;
    for (image_id, boxes) in &grouped {
        let image_path = images.join(format!("{image_id}.pgm"));
        let image = match std::fs::read(&image_path)
            .ok()
            .and_then(|b| decode_pgm(&b).ok())
        {
            Some(img) => img,
            None => {
                eprintln!("warning: skipping unreadable image {}", image_path.display());
                failures += 1;
                continue;
            }
        };
        let prompts = boxes_to_prompts(boxes, image.width(), image.height());
        let (masks, box_failures) = segment(&image, &prompts, seg);
        for e in &box_failures {
            eprintln!("warning: {image_id}: {e}");
        }
        failures += box_failures.len();
        manifest.extend(write_masks(&out, image_id, &prompts.boxes, &masks)?);
    }
    jsonl::write_lines(&out.join("manifest.jsonl"), &manifest)?;

    write_snapshot(
        &snapshot_path_for_dir(&out),
        "segment",
        seed,
        json!({
            "preds": preds_path.display().to_string(),
            "images": images.display().to_string(),
            "segmenter": match segmenter {
                SegmenterArg::Boxfill => "boxfill",
                SegmenterArg::Threshold => "threshold",
            },
            "out": out.display().to_string(),
        }),
    )?;

    println!("images segmented: {}", grouped.len());
    println!("masks written:    {}", manifest.len());
    Ok(if failures > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_report(
    eval_paths: Vec<PathBuf>,
    format: ReportFormatArg,
    out: Option<PathBuf>,
    seed: u64,
) -> Result<ExitCode> {
    let reports: Vec<EvalReport> = eval_paths
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<_>>()?;
    let first = &reports[0];
    for r in &reports[1..] {
        if r.task != first.task {
            bail!("reports mix tasks {} and {}", first.task, r.task);
        }
        if r.thresholds() != first.thresholds() {
            bail!("reports use different IoU thresholds");
        }
    }
    let thresholds = first.thresholds();

    // rows sorted by AP at the threshold nearest 0.5, best first
    let sort_col = thresholds
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (*a - 0.5).abs().partial_cmp(&(*b - 0.5).abs()).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut rows: Vec<_> = reports.iter().map(EvalReport::summary_row).collect();
    rows.sort_by(|a, b| b.aps[sort_col].partial_cmp(&a.aps[sort_col]).unwrap());

    let text = match format {
        ReportFormatArg::Table => format_rows_table(&thresholds, &rows),
        ReportFormatArg::Csv => format_rows_csv(&thresholds, &rows),
        ReportFormatArg::Svg => pr_curves_svg(&reports),
    };
    match &out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, &text)?;
            write_snapshot(
                &snapshot_path_for_file(path),
                "report",
                seed,
                json!({
                    "eval": eval_paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                    "format": match format {
                        ReportFormatArg::Table => "table",
                        ReportFormatArg::Csv => "csv",
                        ReportFormatArg::Svg => "svg",
                    },
                    "out": path.display().to_string(),
                }),
            )?;
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
