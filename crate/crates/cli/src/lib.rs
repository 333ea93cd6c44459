//! `koa` subcommands. Each `cmd_*` function does the work of one subcommand and
//! returns what it wrote so tests can drive it without a subprocess.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use koa_core::classify::{ClassifierBackend, ConstantClassifier, ExternalClassifier, FileClassifier};
use koa_core::detect::{parse_detection_document, DetectionDocument};
use koa_core::eval::{evaluate, read_ratings, EvaluationReport};
use koa_core::fuse::{
    accuracy, load_model, model_hash, read_dataset, save_model, train_forest, ForestParams, TreeAudit,
};
use koa_core::ingest::{encode_pgm, parse_dicom, parse_portable, preprocess, Sidecar};
use koa_core::jsd::{calibrate_thresholds, read_measurements, Calibration, ThresholdSet};
use koa_core::overlay::{render, Annotation};
use koa_core::phantom::{emit_backend_fixtures, generate, parse_specs, KneeTruth};
use koa_core::pipeline::{
    grade_study, Backends, DetectionBackend, FileDetector, HeuristicDetector, KneeOutcome, PipelineConfig, StudyReport,
};
use koa_core::segment::{ExternalSegmenter, FileSegmenter, MaskDocument, SegmentationBackend, DEFAULT_SHARPEN_RATIO};
use koa_core::{NormalizedImage, RandomForestModel};
use rayon::prelude::*;

#[derive(Debug, Parser)]
#[command(name = "koa", version, about = "Knee osteoarthritis grading from knee radiographs")]
pub struct Cli {
    /// JSON file supplying defaults for backend, model and threshold flags.
    #[arg(long, env = "KOA_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grade every knee in a study (or a directory of studies) and render overlays.
    Grade(GradeArgs),
    /// Score predictions against labels and tabulate rater agreement.
    Evaluate(EvaluateArgs),
    /// Derive JSN boundaries from a table of joint-space distances.
    Calibrate(CalibrateArgs),
    /// Train the fusion forest on a feature table.
    TrainFusion(TrainArgs),
    /// Render phantom studies and matching backend documents.
    Phantom(PhantomArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GradeArgs {
    /// DICOM file, PGM/PNG with a JSON sidecar, or a directory of either.
    #[arg(long)]
    pub input: PathBuf,
    /// Sidecar for portable images; defaults to the input path with a .json extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Detection document, or `heuristic`.
    #[arg(long)]
    pub backend_detections: Option<String>,
    /// Mask document, or `exec:<program> [args]`.
    #[arg(long)]
    pub backend_masks: Option<String>,
    /// Probability document, `uniform`, or `exec:<program> [args]`.
    #[arg(long)]
    pub backend_probs: Option<String>,
    /// Fusion forest document written by `train-fusion`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSN thresholds document; the published boundaries when absent.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Laplacian sharpening strength in [0, 1]; 0.3 when absent.
    #[arg(long)]
    pub sharpen_ratio: Option<f64>,
    /// Directory for reports, overlays and annotations.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Ratings table: `case_id` plus one column per rater or model.
    #[arg(long)]
    pub input: PathBuf,
    /// Reference table: `case_id` plus one label column.
    #[arg(long)]
    pub labels: PathBuf,
    /// Directory for metrics.json and agreement.dot; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Table with `med_px` and `lat_px` columns.
    #[arg(long)]
    pub input: PathBuf,
    /// Thresholds document to write; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Table with `p0..p4, med_px, lat_px, kl` columns.
    #[arg(long)]
    pub input: PathBuf,
    /// Master seed for bootstrap and feature sampling; 0 when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long, default_value_t = 8)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 2)]
    pub min_leaf: usize,
    #[arg(long, default_value_t = 2)]
    pub features_per_split: usize,
    /// Model document to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    /// One phantom spec or a list of specs.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Defaults read from the `--config` file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend_detections: Option<String>,
    pub backend_masks: Option<String>,
    pub backend_probs: Option<String>,
    pub model: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
    pub sharpen_ratio: Option<f64>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.model.as_mut().map(resolve);
        cfg.thresholds.as_mut().map(resolve);
        for spec in [&mut cfg.backend_detections, &mut cfg.backend_masks, &mut cfg.backend_probs]
            .into_iter()
            .flatten()
        {
            if !is_keyword(spec) && Path::new(spec.as_str()).is_relative() {
                *spec = base.join(&*spec).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }
}

fn is_keyword(spec: &str) -> bool {
    spec == "heuristic" || spec == "uniform" || spec.starts_with("exec:")
}

fn exec_parts(spec: &str) -> Option<(String, Vec<String>)> {
    let rest = spec.strip_prefix("exec:")?;
    let mut parts = rest.split_whitespace().map(str::to_string);
    let program = parts.next()?;
    Some((program, parts.collect()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes via a sibling temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// File-name-safe version of a source id.
pub fn file_stem(source_id: &str) -> String {
    source_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

/// Reads a DICOM file, or a portable image with its sidecar, and applies Step 1.
pub fn load_study(input: &Path, sidecar: Option<&Path>) -> Result<NormalizedImage> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let is_dicom = bytes.get(128..132) == Some(b"DICM".as_slice())
        || input.extension().is_some_and(|e| e.eq_ignore_ascii_case("dcm"));
    let raw = if is_dicom {
        parse_dicom(&bytes)?
    } else {
        let side = sidecar.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("json"));
        let meta = Sidecar::from_json(&read(&side)?)?;
        parse_portable(&bytes, &meta)?
    };
    Ok(preprocess(&raw)?)
}

fn detector(spec: &str) -> Result<Box<dyn DetectionBackend>> {
    if spec == "heuristic" {
        return Ok(Box::new(HeuristicDetector));
    }
    let doc: DetectionDocument = parse_detection_document(&read(Path::new(spec))?)?;
    Ok(Box::new(FileDetector::new(doc, file_label(spec))))
}

fn classifier(spec: &str) -> Result<Box<dyn ClassifierBackend>> {
    if spec == "uniform" {
        return Ok(Box::new(ConstantClassifier::uniform()));
    }
    if let Some((program, args)) = exec_parts(spec) {
        return Ok(Box::new(ExternalClassifier::spawn(&program, &args)?));
    }
    Ok(Box::new(FileClassifier::from_json(&read(Path::new(spec))?, file_label(spec))?))
}

fn segmenter(spec: &str) -> Result<Box<dyn SegmentationBackend>> {
    if let Some((program, args)) = exec_parts(spec) {
        return Ok(Box::new(ExternalSegmenter::spawn(&program, &args)?));
    }
    Ok(Box::new(FileSegmenter::from_json(&read(Path::new(spec))?, file_label(spec))?))
}

/// Backend ids carry only the file name so reports do not depend on where inputs live.
fn file_label(spec: &str) -> String {
    Path::new(spec)
        .file_name()
        .map_or_else(|| spec.to_string(), |n| n.to_string_lossy().into_owned())
}

#[derive(Debug)]
pub struct GradeOutput {
    pub report: StudyReport,
    pub report_path: PathBuf,
    pub overlay_path: PathBuf,
    pub annotations_path: PathBuf,
    pub annotations: Vec<Annotation>,
}

impl GradeOutput {
    pub fn all_failed(&self) -> bool {
        self.report.graded_count() == 0
    }
}

/// Backends, model and configuration resolved once and shared across studies.
pub struct GradeSession {
    detector: Box<dyn DetectionBackend>,
    classifier: Box<dyn ClassifierBackend>,
    segmenter: Box<dyn SegmentationBackend>,
    model: RandomForestModel,
    config: PipelineConfig,
    out: PathBuf,
}

impl GradeSession {
    pub fn new(args: &GradeArgs, cfg: &FileConfig) -> Result<Self> {
        let det_spec = args
            .backend_detections
            .clone()
            .or_else(|| cfg.backend_detections.clone())
            .unwrap_or_else(|| "heuristic".into());
        let prob_spec = args
            .backend_probs
            .clone()
            .or_else(|| cfg.backend_probs.clone())
            .unwrap_or_else(|| "uniform".into());
        let Some(mask_spec) = args.backend_masks.clone().or_else(|| cfg.backend_masks.clone()) else {
            bail!("no segmentation backend: pass --backend-masks or set it in the config file");
        };
        let Some(model_path) = args.model.clone().or_else(|| cfg.model.clone()) else {
            bail!("no model: pass --model or set it in the config file");
        };
        let thresholds = match args.thresholds.clone().or_else(|| cfg.thresholds.clone()) {
            Some(p) => ThresholdSet::from_json(&read(&p)?)?,
            None => ThresholdSet::published(),
        };
        Ok(Self {
            detector: detector(&det_spec)?,
            classifier: classifier(&prob_spec)?,
            segmenter: segmenter(&mask_spec)?,
            model: load_model(&read(&model_path)?)?,
            config: PipelineConfig {
                thresholds,
                sharpen_ratio: args
                    .sharpen_ratio
                    .or(cfg.sharpen_ratio)
                    .unwrap_or(DEFAULT_SHARPEN_RATIO),
            },
            out: args.out.clone(),
        })
    }

    /// Grades one study and writes its report, overlay and annotations.
    pub fn grade(&self, input: &Path, sidecar: Option<&Path>) -> Result<GradeOutput> {
        let img = load_study(input, sidecar)?;
        let backends = Backends {
            detector: self.detector.as_ref(),
            classifier: self.classifier.as_ref(),
            segmenter: self.segmenter.as_ref(),
        };
        let result = grade_study(&img, &backends, &self.model, &self.config)?;
        let overlay = render(&img, &result.artifacts);

        let stem = file_stem(img.source_id());
        let report_path = self.out.join(format!("{stem}.report.json"));
        let overlay_path = self.out.join(format!("{stem}.overlay.png"));
        let annotations_path = self.out.join(format!("{stem}.annotations.json"));
        write_atomic(&report_path, result.report.to_json().as_bytes())?;
        write_atomic(&overlay_path, &overlay.to_png()?)?;
        write_atomic(&annotations_path, to_json(&overlay.annotations).as_bytes())?;
        Ok(GradeOutput {
            report: result.report,
            report_path,
            overlay_path,
            annotations_path,
            annotations: overlay.annotations,
        })
    }
}

pub fn cmd_grade(args: &GradeArgs, cfg: &FileConfig) -> Result<GradeOutput> {
    GradeSession::new(args, cfg)?.grade(&args.input, args.sidecar.as_deref())
}

/// Study files in a directory: DICOM, PGM and PNG, sorted by path.
pub fn study_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("dcm" | "pgm" | "png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Grades every study in `args.input` (a directory) concurrently. Portable
/// images use their `.json` sidecars. Results keep directory order.
pub fn cmd_grade_batch(args: &GradeArgs, cfg: &FileConfig) -> Result<Vec<(PathBuf, Result<GradeOutput>)>> {
    let session = GradeSession::new(args, cfg)?;
    let files = study_files(&args.input)?;
    Ok(files
        .into_par_iter()
        .map(|f| {
            let r = session.grade(&f, None);
            (f, r)
        })
        .collect())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluationReport> {
    let predictions = read_ratings(read(&args.input)?.as_bytes())?;
    let labels = read_ratings(read(&args.labels)?.as_bytes())?;
    let [label_col]: [BTreeMap<String, u8>; 1] = labels
        .into_values()
        .collect::<Vec<_>>()
        .try_into()
        .map_err(|_| anyhow::anyhow!("labels table must have exactly one grade column"))?;
    let report = evaluate(&predictions, &label_col)?;
    match &args.out {
        Some(dir) => {
            write_atomic(&dir.join("metrics.json"), to_json(&report).as_bytes())?;
            write_atomic(&dir.join("agreement.dot"), report.agreement.to_dot().as_bytes())?;
        }
        None => print!("{}", to_json(&report)),
    }
    Ok(report)
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<(Calibration, ThresholdSet)> {
    let rows = read_measurements(read(&args.input)?.as_bytes())?;
    let cal = calibrate_thresholds(&rows)?;
    let thresholds = cal.thresholds()?;
    match &args.out {
        Some(p) => write_atomic(p, (thresholds.to_json() + "\n").as_bytes())?,
        None => println!("{}", thresholds.to_json()),
    }
    Ok((cal, thresholds))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub rows: usize,
    pub training_accuracy: f64,
    pub audit: TreeAudit,
    pub model_hash: String,
}

pub fn cmd_train_fusion(args: &TrainArgs, cfg: &FileConfig) -> Result<TrainSummary> {
    let rows = read_dataset(read(&args.input)?.as_bytes())?;
    let params = ForestParams {
        n_trees: args.trees,
        max_depth: args.max_depth,
        min_leaf: args.min_leaf,
        features_per_split: args.features_per_split,
        master_seed: args.seed.or(cfg.seed).unwrap_or(0),
    };
    let model = train_forest(&rows, params)?;
    write_atomic(&args.out, save_model(&model).as_bytes())?;
    Ok(TrainSummary {
        rows: rows.len(),
        training_accuracy: accuracy(&model, &rows)?,
        audit: model.audit(),
        model_hash: model_hash(&model),
    })
}

/// Truth per knee without the mask rasters (those go to the mask document).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KneeTruthSummary<'a> {
    pub source_id: &'a str,
    #[serde(flatten)]
    pub fields: BTreeMap<&'static str, serde_json::Value>,
}

fn truth_summary<'a>(source_id: &'a str, k: &KneeTruth) -> KneeTruthSummary<'a> {
    let mut fields = BTreeMap::new();
    let mut put = |key: &'static str, v: serde_json::Value| {
        fields.insert(key, v);
    };
    put("slot", serde_json::json!(k.slot));
    put("center", serde_json::json!(k.center));
    put("image_side", serde_json::json!(k.image_side));
    put("medial_side", serde_json::json!(k.side_map.medial));
    put("condyle_shape", serde_json::json!(k.condyle_shape));
    put("lowest_med", serde_json::json!(k.lowest_med));
    put("lowest_lat", serde_json::json!(k.lowest_lat));
    put("d_avg_med_px", serde_json::json!(k.d_avg_med));
    put("d_avg_lat_px", serde_json::json!(k.d_avg_lat));
    put("gap_table", serde_json::json!(k.gap_table));
    KneeTruthSummary { source_id, fields }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomOutput {
    pub studies: Vec<PathBuf>,
    pub detections_path: PathBuf,
    pub masks_path: PathBuf,
    pub truth_path: PathBuf,
}

pub fn cmd_phantom(args: &PhantomArgs) -> Result<PhantomOutput> {
    let specs = parse_specs(&read(&args.input)?)?;
    if specs.is_empty() {
        bail!("no phantom specs in {}", args.input.display());
    }
    let mut masks = MaskDocument::new();
    let mut dets = DetectionDocument::new();
    let mut truths = Vec::new();
    let mut studies = Vec::new();
    for spec in &specs {
        if masks.contains_key(&spec.source_id) {
            bail!("duplicate phantom source_id `{}`", spec.source_id);
        }
        let (img, truth) = generate(spec).with_context(|| format!("phantom `{}`", spec.source_id))?;
        let stem = file_stem(&spec.source_id);
        let pgm = args.out.join(format!("{stem}.pgm"));
        write_atomic(&pgm, &encode_pgm(&img.to_raw_8bit()?))?;
        let sidecar = Sidecar::new(img.spacing_mm(), spec.laterality, spec.source_id.clone());
        write_atomic(&args.out.join(format!("{stem}.json")), to_json(&sidecar).as_bytes())?;
        let (m, d) = emit_backend_fixtures(&truth);
        masks.extend(m);
        dets.extend(d);
        truths.push(truth);
        studies.push(pgm);
    }
    let summary: Vec<KneeTruthSummary> = truths
        .iter()
        .flat_map(|t| t.knees.iter().map(|k| truth_summary(&t.source_id, k)))
        .collect();
    let out = PhantomOutput {
        studies,
        detections_path: args.out.join("detections.json"),
        masks_path: args.out.join("masks.json"),
        truth_path: args.out.join("truth.json"),
    };
    write_atomic(&out.detections_path, to_json(&dets).as_bytes())?;
    write_atomic(&out.masks_path, serde_json::to_string(&masks)?.as_bytes())?;
    write_atomic(&out.truth_path, to_json(&summary).as_bytes())?;
    Ok(out)
}

fn print_grade(out: &GradeOutput) {
    for k in &out.report.knees {
        match &k.outcome {
            KneeOutcome::Graded(g) => println!(
                "  {} knee: KL {} (JSN med {} lat {}, JSD med {:.2} mm lat {:.2} mm)",
                k.slot, g.assessment.kl_grade, g.jsn.med, g.jsn.lat, g.jsd.med_mm, g.jsd.lat_mm
            ),
            KneeOutcome::Failed(f) => println!(
                "  {} knee: failed at stage {}: {}",
                k.slot,
                format!("{:?}", f.stage).to_lowercase(),
                f.error
            ),
        }
    }
    if let Some(f) = &out.report.detection_failure {
        println!("  detection failed: {}", f.error);
    }
    println!("  report: {}", out.report_path.display());
    println!("  overlay: {}", out.overlay_path.display());
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Grade(a) => {
            if a.input.is_dir() {
                let results = cmd_grade_batch(&a, &cfg)?;
                if results.is_empty() {
                    bail!("no studies in {}", a.input.display());
                }
                let mut code = 0;
                for (path, r) in results {
                    println!("{}:", path.display());
                    match r {
                        Ok(out) => {
                            print_grade(&out);
                            if out.all_failed() {
                                code = 2;
                            }
                        }
                        Err(e) => {
                            println!("  error: {e:#}");
                            code = 2;
                        }
                    }
                }
                return Ok(code);
            }
            let out = cmd_grade(&a, &cfg)?;
            print_grade(&out);
            Ok(if out.all_failed() { 2 } else { 0 })
        }
        Command::Evaluate(a) => {
            let r = cmd_evaluate(&a)?;
            for e in &r.raters {
                eprintln!(
                    "{}: accuracy {:.4}, balanced {:.4}, weighted F1 {:.4}, binary accuracy {:.4}, kappa {:.4}",
                    e.rater,
                    e.summary.accuracy,
                    e.summary.balanced_accuracy,
                    e.summary.weighted_f1,
                    e.binary.accuracy,
                    e.qwk
                );
            }
            Ok(0)
        }
        Command::Calibrate(a) => {
            let (cal, _) = cmd_calibrate(&a)?;
            for (name, side) in [("medial", &cal.med), ("lateral", &cal.lat)] {
                eprintln!(
                    "{name}: boundaries {:?}, occupancy {:?}",
                    side.boundaries, side.occupancy
                );
            }
            Ok(0)
        }
        Command::TrainFusion(a) => {
            let s = cmd_train_fusion(&a, &cfg)?;
            println!("rows: {}", s.rows);
            println!("training accuracy: {:.4}", s.training_accuracy);
            println!(
                "audit: max depth {}, min leaf samples {}, leaves {}",
                s.audit.max_depth, s.audit.min_leaf_samples, s.audit.leaves
            );
            println!("model hash: {}", s.model_hash);
            Ok(0)
        }
        Command::Phantom(a) => {
            let out = cmd_phantom(&a)?;
            for s in &out.studies {
                println!("study: {}", s.display());
            }
            println!("detections: {}", out.detections_path.display());
            println!("masks: {}", out.masks_path.display());
            println!("truth: {}", out.truth_path.display());
            Ok(0)
        }
    }
}
