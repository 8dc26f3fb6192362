//! Command-line front end for `voxdet-core`.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure.

pub mod config;
pub mod records;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use voxdet_core::gradcheck::{gradcheck, LossTerm};
use voxdet_core::metrics::{classification_report, froc, ClassificationReport};
use voxdet_core::synthetic::{
    detect_volume, generate_volume, lesion_classification_scores, prepare_dataset, train_toy, ToyScorer,
};
use voxdet_core::{aggregate, assign_anchors, generate_anchors, AnchorSpec, MetricsReport, VolumeResult};

pub use config::ToolkitConfig;
use records::{
    jsonl_bytes, read_jsonl, write_file, write_json, Dataset, DetectionRecord, GtRecord, Manifest, ManifestEntry,
    GT_FILE, MANIFEST,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io { .. } => 2,
        }
    }
}

impl From<voxdet_core::Error> for CliError {
    fn from(e: voxdet_core::Error) -> Self {
        CliError::Invalid(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "voxdet", version, about = "3D lesion detection toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file; every section is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Configuration override, e.g. `--set loss.lambda=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantom volumes with lesion boxes.
    SynthGen {
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the anchor grid for a volume shape as JSON lines.
    Anchors {
        /// Volume shape `X,Y,Z`; defaults to the synthetic volume shape.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 3]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label the anchors of every volume in a dataset.
    Assign {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic loss gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        batches: Option<usize>,
        /// Relative tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Test hook: perturb one term's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<LossTerm>,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy scorer on a generated dataset.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `model.json` and `history.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tiled detection pipeline over a dataset.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Detections file (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against lesion boxes.
    Eval {
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity and FPs per volume over score thresholds.
    Froc {
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Comma-separated ascending thresholds; defaults to 0, 0.05, ..., 1.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// CSV output: threshold,fps_per_volume,sensitivity.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|_| "expected three comma-separated integers".to_string())
}

/// Trained scorer together with the anchors it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub anchor: AnchorSpec,
    pub scorer: ToyScorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub table_row: String,
    pub metrics: MetricsReport,
    /// Absent when the hit lesions do not cover both classes.
    pub classification: Option<ClassificationReport>,
}

/// Runs one command, writing human-readable progress to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<(), CliError> {
    let mut cfg = ToolkitConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(seed) = cli.common.seed {
        cfg.set_seed(seed);
    }
    let mut out = String::new();
    match cli.command {
        Command::SynthGen { count, out: dir } => synth_gen(&cfg, count, &dir, &mut out)?,
        Command::Anchors { shape, out: path } => anchors(&cfg, shape, &path, &mut out)?,
        Command::Assign { data, out: path } => assign(&cfg, &data, &path, &mut out)?,
        Command::Gradcheck {
            batches,
            tolerance,
            corrupt,
            out: path,
        } => {
            // Print what was found before reporting failure.
            let result = grad_check(&cfg, batches, tolerance, corrupt, path.as_deref(), &mut out);
            stdout.write_all(out.as_bytes()).ok();
            return result;
        }
        Command::TrainToy { data, out: dir } => train(&cfg, &data, &dir, &mut out)?,
        Command::Infer { model, data, out: path } => infer(&cfg, &model, &data, &path, &mut out)?,
        Command::Eval { gts, detections, out: path } => eval(&cfg, &gts, &detections, &path, &mut out)?,
        Command::Froc {
            gts,
            detections,
            thresholds,
            out: path,
        } => froc_curve(&cfg, &gts, &detections, thresholds, &path, &mut out)?,
    }
    stdout.write_all(out.as_bytes()).ok();
    Ok(())
}

fn synth_gen(cfg: &ToolkitConfig, count: usize, dir: &Path, out: &mut String) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let spec = &cfg.synthetic;
    let mut entries = Vec::with_capacity(count);
    let mut gts = Vec::with_capacity(count);
    for i in 0..count {
        let seed = spec.volume_seed(i);
        let (vol, lesions) = generate_volume(spec, seed)?;
        let volume_id = format!("vol_{i:04}");
        let file = format!("{volume_id}.vox");
        write_file(&dir.join(&file), &vol.to_bytes())?;
        gts.push(GtRecord {
            volume_id: volume_id.clone(),
            voxel_spacing: vol.spacing,
            gts: lesions,
        });
        entries.push(ManifestEntry { volume_id, file, seed });
    }
    write_file(&dir.join(GT_FILE), &jsonl_bytes(&gts))?;
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            seed: spec.seed,
            count,
            spec: spec.clone(),
            gt_file: GT_FILE.into(),
            volumes: entries,
        },
    )?;
    let lesions: usize = gts.iter().map(|g| g.gts.len()).sum();
    writeln!(out, "wrote {count} volumes with {lesions} lesions to {} (seed {})", dir.display(), spec.seed).ok();
    Ok(())
}

#[derive(Serialize)]
struct AnchorRecord {
    index: usize,
    #[serde(rename = "box")]
    bbox: voxdet_core::Box3,
}

fn anchors(cfg: &ToolkitConfig, shape: Option<[usize; 3]>, path: &Path, out: &mut String) -> Result<(), CliError> {
    let shape = shape.unwrap_or(cfg.synthetic.volume_shape);
    let grid = cfg.anchor.feature_shape(shape);
    let anchors = generate_anchors(&cfg.anchor, grid)?;
    let records: Vec<AnchorRecord> = anchors
        .into_iter()
        .enumerate()
        .map(|(index, bbox)| AnchorRecord { index, bbox })
        .collect();
    write_file(path, &jsonl_bytes(&records))?;
    writeln!(
        out,
        "{} anchors ({} per cell on a {}x{}x{} grid)",
        records.len(),
        cfg.anchor.anchors_per_cell(),
        grid[0],
        grid[1],
        grid[2]
    )
    .ok();
    Ok(())
}

#[derive(Serialize)]
struct PositiveRecord {
    anchor_index: usize,
    gt_index: usize,
    iou: f64,
}

#[derive(Serialize)]
struct AssignRecord {
    volume_id: String,
    n_anchors: usize,
    n_positive: usize,
    n_negative: usize,
    n_ignore: usize,
    positives: Vec<PositiveRecord>,
}

fn assign(cfg: &ToolkitConfig, data: &Path, path: &Path, out: &mut String) -> Result<(), CliError> {
    let ds = Dataset::open(data)?;
    let mut records = Vec::with_capacity(ds.gts.len());
    for (i, rec) in ds.gts.iter().enumerate() {
        let vol = ds.load_volume(i)?;
        let anchors = generate_anchors(&cfg.anchor, cfg.anchor.feature_shape(vol.shape))?;
        let labels = assign_anchors(&anchors, &rec.gts, &cfg.assignment)?;
        let positives: Vec<PositiveRecord> = labels
            .iter()
            .filter_map(|a| {
                a.gt_index().map(|g| PositiveRecord {
                    anchor_index: a.anchor_index,
                    gt_index: g,
                    iou: a.iou,
                })
            })
            .collect();
        let n_negative = labels.iter().filter(|a| a.is_negative()).count();
        records.push(AssignRecord {
            volume_id: rec.volume_id.clone(),
            n_anchors: anchors.len(),
            n_positive: positives.len(),
            n_negative,
            n_ignore: anchors.len() - positives.len() - n_negative,
            positives,
        });
    }
    write_file(path, &jsonl_bytes(&records))?;
    let pos: usize = records.iter().map(|r| r.n_positive).sum();
    writeln!(out, "labeled {} volumes, {pos} positive anchors", records.len()).ok();
    Ok(())
}

fn grad_check(
    cfg: &ToolkitConfig,
    batches: Option<usize>,
    tolerance: Option<f64>,
    corrupt: Option<LossTerm>,
    path: Option<&Path>,
    out: &mut String,
) -> Result<(), CliError> {
    let mut gc = cfg.gradcheck.clone();
    if let Some(b) = batches {
        gc.n_batches = b;
    }
    if let Some(t) = tolerance {
        if !(t > 0.0) {
            return Err(CliError::Invalid(format!("tolerance must be positive, got {t}")));
        }
        gc.rel_tol = t;
    }
    gc.corrupt = corrupt;
    if gc.n_batches == 0 {
        eprintln!("warning: 0 batches requested; the check passes vacuously");
    }
    let report = gradcheck(&cfg.loss, &gc)?;
    for t in &report.terms {
        writeln!(
            out,
            "{:<6} max_rel_error {:.3e} at batch {} {} ({} components) {}",
            t.term.name(),
            t.max_rel_error,
            t.worst_batch,
            t.worst_component,
            t.components_checked,
            if t.passed { "PASS" } else { "FAIL" }
        )
        .ok();
    }
    if let Some(p) = path {
        write_json(p, &report)?;
    }
    let failing: Vec<String> = report
        .terms
        .iter()
        .filter(|t| !t.passed)
        .map(|t| format!("{} at {} (batch {})", t.term, t.worst_component, t.worst_batch))
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("gradient check failed: {}", failing.join("; "))))
    }
}

fn train(cfg: &ToolkitConfig, data: &Path, dir: &Path, out: &mut String) -> Result<(), CliError> {
    let ds = Dataset::open(data)?;
    let volumes = ds.load_all()?;
    let prepared = prepare_dataset(&volumes, &cfg.anchor, &cfg.assignment)?;
    let scorer = ToyScorer::for_dataset(&prepared, cfg.train.embed_dim, cfg.train.seed)?;
    let outcome = train_toy(&prepared, scorer, &cfg.loss, &cfg.train)?;
    write_json(
        &dir.join("model.json"),
        &ModelFile {
            anchor: cfg.anchor.clone(),
            scorer: outcome.scorer,
        },
    )?;
    let mut csv = String::from("step,l_rpn,l_cls,l_reg,l_sim\n");
    for h in &outcome.history {
        writeln!(csv, "{},{},{},{},{}", h.step, h.l_rpn, h.l_cls, h.l_reg, h.l_sim).ok();
    }
    write_file(&dir.join("history.csv"), csv.as_bytes())?;
    match (outcome.history.first(), outcome.history.last()) {
        (Some(a), Some(b)) => writeln!(out, "trained {} steps: l_rpn {:.4} -> {:.4}", outcome.history.len(), a.l_rpn, b.l_rpn),
        _ => writeln!(out, "trained 0 steps"),
    }
    .ok();
    Ok(())
}

fn infer(cfg: &ToolkitConfig, model: &Path, data: &Path, path: &Path, out: &mut String) -> Result<(), CliError> {
    let model: ModelFile = records::read_json(model)?;
    model.scorer.validate()?;
    let ds = Dataset::open(data)?;
    let mut records = Vec::new();
    for (i, rec) in ds.gts.iter().enumerate() {
        let vol = ds.load_volume(i)?;
        let dets = detect_volume(
            &model.scorer,
            &vol,
            Some(&rec.gts),
            &model.anchor,
            &cfg.pipeline,
            cfg.eval.fusion_weight,
        )?;
        records.extend(dets.iter().map(|d| DetectionRecord::from_detection(&rec.volume_id, d)));
    }
    write_file(path, &jsonl_bytes(&records))?;
    writeln!(out, "{} detections over {} volumes", records.len(), ds.gts.len()).ok();
    Ok(())
}

/// Joins detections to their volumes. Detections naming unknown volumes are an error.
fn load_results(gts: &Path, detections: &Path) -> Result<Vec<VolumeResult>, CliError> {
    let gt_records: Vec<GtRecord> = read_jsonl(gts)?;
    let det_records: Vec<DetectionRecord> = read_jsonl(detections)?;
    let mut results: Vec<VolumeResult> = gt_records
        .into_iter()
        .map(|g| VolumeResult::new(g.volume_id, g.gts, Vec::new(), g.voxel_spacing))
        .collect();
    let mut unknown: Vec<String> = Vec::new();
    for (line, rec) in det_records.iter().enumerate() {
        rec.validate()
            .map_err(|e| CliError::Invalid(format!("{}:{}: {e}", detections.display(), line + 1)))?;
        match results.iter_mut().find(|r| r.volume_id == rec.volume_id) {
            Some(r) => r.detections.push(rec.to_detection()),
            None if !unknown.contains(&rec.volume_id) => unknown.push(rec.volume_id.clone()),
            None => {}
        }
    }
    if !unknown.is_empty() {
        return Err(CliError::Invalid(format!(
            "{}: detections refer to volumes missing from {}: {}",
            detections.display(),
            gts.display(),
            unknown.join(", ")
        )));
    }
    Ok(results)
}

fn eval(cfg: &ToolkitConfig, gts: &Path, detections: &Path, path: &Path, out: &mut String) -> Result<(), CliError> {
    let results = load_results(gts, detections)?;
    let metrics = aggregate(&results, &cfg.eval.matching)?;
    let (scores, labels) = lesion_classification_scores(&results, &cfg.eval.matching);
    let classification = classification_report(&scores, &labels, cfg.eval.classification_threshold).ok();
    let report = EvalReport {
        table_row: metrics.table_row(),
        metrics,
        classification,
    };
    write_json(path, &report)?;
    writeln!(out, "mIoU(%) FPs Sensitivity(%)").ok();
    writeln!(out, "{}", report.table_row).ok();
    if let Some(c) = &report.classification {
        writeln!(
            out,
            "accuracy {:.4} sensitivity {:.4} specificity {:.4} auc {:.4}",
            c.accuracy, c.sensitivity, c.specificity, c.auc
        )
        .ok();
    }
    Ok(())
}

fn froc_curve(
    cfg: &ToolkitConfig,
    gts: &Path,
    detections: &Path,
    thresholds: Option<Vec<f64>>,
    path: &Path,
    out: &mut String,
) -> Result<(), CliError> {
    let results = load_results(gts, detections)?;
    let thresholds = thresholds.unwrap_or_else(|| (0..=20).map(|i| i as f64 / 20.0).collect());
    let points = froc(&results, &thresholds, &cfg.eval.matching)?;
    let mut csv = String::from("threshold,fps_per_volume,sensitivity\n");
    for p in &points {
        writeln!(csv, "{},{},{}", p.threshold, p.fps_per_volume, p.sensitivity).ok();
    }
    write_file(path, csv.as_bytes())?;
    writeln!(out, "{} FROC points", points.len()).ok();
    Ok(())
}
