//! Command-line interface.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use featpipe_core::cas::{CasConfig, KMeansConfig};
use featpipe_core::detect::{BoxOptions, Connectivity, DetectionMode};
use featpipe_core::featurize::{pca_rgb, upsample, FeatureMap, Featurizer, UpsampleMode, UpsampleOptions};
use featpipe_core::fmap::{self, write_atomic, Dtype};
use featpipe_core::geometry::TransformSet;
use featpipe_core::pipeline::{FeatureSource, UnsupConfig};
use featpipe_core::pixelclf::{
    decode_classifier, encode_classifier, ClassicalRecipe, LabelMask, TrainConfig, DEFAULT_SCALES,
};
use featpipe_core::store::{conform, ingest, Layout};
use featpipe_core::synthetic::blob_dataset;
use featpipe_core::{Image, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::{self, BackendParams, BackendSpec};
use crate::error::{invalid, is_invalid};
use crate::report::{detect_one, score, BenchImage, BenchmarkReport, ImageDetection};
use crate::work::{self, SmoothOptions, TrainItem};

#[derive(Debug, Parser)]
#[command(name = "featpipe", version, about = "Dense feature upsampling, unsupervised detection and weakly supervised segmentation")]
pub struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Upsample one image's features to pixel resolution and write an FMAP.
    Upsample(UpsampleArgs),
    /// Render the first three principal components of an FMAP as a PNG.
    Pca(PcaArgs),
    /// Boxes from the unsupervised segmentation of images or a dataset.
    UnsupDetect(UnsupDetectArgs),
    /// Saliency masks from the unsupervised segmentation.
    UnsupSaliency(UnsupSaliencyArgs),
    /// CorLoc and saliency IoU over a dataset, as JSON and markdown.
    Benchmark(BenchmarkArgs),
    /// Train a pixel classifier from sparse labels.
    WeakTrain(WeakTrainArgs),
    /// Apply a pixel classifier to images.
    WeakApply(WeakApplyArgs),
    /// Time and peak memory of upsampling across image sizes, as CSV.
    Profile(ProfileArgs),
    /// Run the labeling HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// synthetic:patch-mean, synthetic:patch-mean+center-attention,
    /// precomputed:<features.fmap>[,<attention.fmap>] or external:<program>.
    #[arg(long, default_value = "synthetic:patch-mean")]
    pub backend: BackendSpec,
    #[arg(long, default_value_t = 8)]
    pub patch_size: u32,
    #[arg(long, default_value_t = 4)]
    pub stride: u32,
    /// Feature width; required for external backends.
    #[arg(long)]
    pub hidden_dim: Option<u32>,
    /// Image sides must be multiples of this; defaults to the stride.
    #[arg(long)]
    pub input_multiple: Option<u32>,
    /// Model file handed to an external backend.
    #[arg(long)]
    pub model_path: Option<PathBuf>,
    #[arg(long, default_value = "pixel_values")]
    pub input_name: String,
    /// Extra argument for the external program (repeatable).
    #[arg(long = "runtime-arg")]
    pub runtime_args: Vec<String>,
    /// identity, standard, shifts, flips, or a JSON transform-set file.
    #[arg(long = "set", default_value = "standard")]
    pub set: String,
}

impl BackendArgs {
    fn params(&self) -> BackendParams {
        BackendParams {
            patch_size: self.patch_size,
            stride: self.stride,
            hidden_dim: self.hidden_dim,
            input_multiple: self.input_multiple,
            model: self.model_path.clone(),
            input_name: self.input_name.clone(),
            args: self.runtime_args.clone(),
        }
    }

    fn build(&self) -> anyhow::Result<(Arc<dyn Featurizer>, TransformSet)> {
        let backend = backend::build(&self.backend, &self.params())?;
        let set = backend::transform_set(&self.set, backend.descriptor().stride)?;
        Ok((backend, set))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Sequential,
    Batched,
}

impl From<ModeArg> for UpsampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sequential => UpsampleMode::Sequential,
            ModeArg::Batched => UpsampleMode::Batched,
        }
    }
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// Feature FMAP to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub attention_out: Option<PathBuf>,
    /// Also write a PCA rendering of the features.
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sequential")]
    pub mode: ModeArg,
    #[arg(long)]
    pub l2_normalize: bool,
    /// Store values as half floats.
    #[arg(long)]
    pub f16: bool,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct UnsupArgs {
    /// Merge threshold multiplier.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Smallest component kept, in pixels; defaults to 0.1% of the image.
    #[arg(long)]
    pub min_area: Option<usize>,
    /// 4 or 8.
    #[arg(long, default_value_t = 8)]
    pub connectivity: u8,
}

impl UnsupArgs {
    fn config(&self, mode: DetectionMode) -> anyhow::Result<UnsupConfig> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(invalid(format!("--lambda must be positive, got {}", self.lambda)));
        }
        let connectivity = match self.connectivity {
            4 => Connectivity::Four,
            8 => Connectivity::Eight,
            c => return Err(invalid(format!("--connectivity must be 4 or 8, got {c}"))),
        };
        let mut kmeans = KMeansConfig {
            seed: self.seed,
            ..Default::default()
        };
        if let Some(c) = self.clusters {
            if c < 2 {
                return Err(invalid("--clusters must be at least 2"));
            }
            kmeans.clusters = c;
        }
        Ok(UnsupConfig {
            cas: CasConfig {
                kmeans,
                lambda: self.lambda,
                ..Default::default()
            },
            boxes: BoxOptions {
                min_area: self.min_area,
                connectivity,
                mode,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DetectModeArg {
    Single,
    Multi,
}

impl From<DetectModeArg> for DetectionMode {
    fn from(m: DetectModeArg) -> Self {
        match m {
            DetectModeArg::Single => DetectionMode::Single,
            DetectModeArg::Multi => DetectionMode::Multi,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Flat,
    VocLike,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Flat => Layout::Flat,
            LayoutArg::VocLike => Layout::VocLike,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Image files (repeatable).
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Dataset directory, instead of --input.
    #[arg(long, conflicts_with = "inputs")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "flat")]
    pub layout: LayoutArg,
    /// Fail on unreadable dataset files instead of skipping them.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct UnsupDetectArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub unsup: UnsupArgs,
    #[arg(long, value_enum, default_value = "multi")]
    pub mode: DetectModeArg,
    /// JSON output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UnsupSaliencyArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub unsup: UnsupArgs,
    /// Directory for `<id>.saliency.png` masks.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Dataset directory with ground-truth boxes and/or masks.
    #[arg(long, required_unless_present = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// Generate this many synthetic single-blob images instead.
    #[arg(long, conflicts_with = "dataset")]
    pub synthetic: Option<usize>,
    /// Side of the synthetic images.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, value_enum, default_value = "flat")]
    pub layout: LayoutArg,
    #[arg(long)]
    pub strict: bool,
    #[command(flatten)]
    pub unsup: UnsupArgs,
    #[arg(long, value_enum, default_value = "single")]
    pub mode: DetectModeArg,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Markdown report.
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Deep,
    Classical,
    Hybrid,
}

impl From<SourceArg> for FeatureSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Deep => FeatureSource::Deep,
            SourceArg::Classical => FeatureSource::Classical,
            SourceArg::Hybrid => FeatureSource::Hybrid,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassifierArg {
    Logistic,
    RandomForest,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("{s:?}: expected HxW"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

#[derive(Debug, Args)]
pub struct WeakTrainArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Training image (repeatable; pairs with --labels in order).
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    /// Indexed PNG or run-length JSON labels; 0 is unlabeled.
    #[arg(long = "labels", required = true)]
    pub labels: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "deep")]
    pub source: SourceArg,
    #[arg(long, value_enum, default_value = "logistic")]
    pub classifier: ClassifierArg,
    /// Filter-bank scales for classical and hybrid features.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Inverse regularization strength of the logistic model.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub trees: Option<usize>,
    /// Resize images to HxW before featurizing.
    #[arg(long, value_parser = parse_size)]
    pub target: Option<(usize, usize)>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WeakApplyArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Image to segment (repeatable).
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    /// Receives `<stem>.pred.png` and, with --probabilities, `<stem>.prob.fmap`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub probabilities: bool,
    #[arg(long, default_value_t = 0)]
    pub smooth_radius: usize,
    #[arg(long, default_value_t = 1)]
    pub smooth_iterations: usize,
    #[arg(long, value_parser = parse_size)]
    pub target: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileModeArg {
    Sequential,
    Batched,
    Both,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Image edge lengths.
    #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
    pub lengths: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ProfileModeArg,
    /// Runs per point; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured bind address.
    #[arg(long)]
    pub bind: Option<String>,
}

/// Parses the arguments, runs the command and returns the exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_invalid(&e) {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Upsample(a) => cmd_upsample(a),
        Command::Pca(a) => cmd_pca(a),
        Command::UnsupDetect(a) => cmd_unsup_detect(a),
        Command::UnsupSaliency(a) => cmd_unsup_saliency(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::WeakTrain(a) => cmd_weak_train(a),
        Command::WeakApply(a) => cmd_weak_apply(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> anyhow::Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    match path {
        Some(p) => write_out(p, &json),
        None => Ok(std::io::stdout().write_all(&json)?),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn cmd_upsample(a: UpsampleArgs) -> anyhow::Result<()> {
    let (backend, set) = a.backend.build()?;
    let image = work::load_image(&a.input)?;
    let opts = UpsampleOptions {
        mode: a.mode.into(),
        l2_normalize: a.l2_normalize,
        image_id: Some(stem(&a.input)),
    };
    let c = conform(&image, backend.descriptor(), None).map_err(|e| invalid(e.to_string()))?;
    let (mut fm, mut am) = upsample(backend.as_ref(), &c.image, &set, &opts)?;
    fm.data = c.map.restore(&fm.data);
    am.data = c.map.restore(&am.data);
    let dtype = if a.f16 { Dtype::F16 } else { Dtype::F32 };
    write_out(&a.out, &fm.to_fmap_bytes(dtype))?;
    if let Some(p) = &a.attention_out {
        write_out(p, &am.to_fmap_bytes(dtype))?;
    }
    if let Some(p) = &a.pca {
        write_out(p, &work::encode_png(&pca_rgb(&fm)?))?;
    }
    log::info!(
        "upsampled {} to {}x{}x{} with {} transforms",
        a.input.display(),
        fm.height(),
        fm.width(),
        fm.dim(),
        set.len()
    );
    Ok(())
}

fn cmd_pca(a: PcaArgs) -> anyhow::Result<()> {
    let f = fmap::read(&a.features).map_err(|e| invalid(format!("{}: {e}", a.features.display())))?;
    let fm = FeatureMap::new(f.raster);
    let img = pca_rgb(&fm).map_err(|e| invalid(e.to_string()))?;
    write_out(&a.out, &work::encode_png(&img))
}

/// Images named on the command line or listed by a dataset, with any ground truth.
fn gather(inputs: &InputArgs) -> anyhow::Result<Vec<BenchImage>> {
    if let Some(root) = &inputs.dataset {
        let ds = ingest(root, inputs.layout.into(), inputs.strict).map_err(|e| invalid(e.to_string()))?;
        for w in &ds.warnings {
            log::warn!("{w}");
        }
        return ds
            .entries
            .iter()
            .map(|e| {
                let image = work::load_image(&e.image)?;
                let boxes = e.ground_truth().map_err(|e| invalid(e.to_string()))?.map(|g| g.boxes);
                let mask = match &e.mask {
                    Some(p) => {
                        let m = work::load_labels(p, image.height(), image.width())?;
                        Some(m.labels.iter().map(|&l| l != 0).collect())
                    }
                    None => None,
                };
                Ok(BenchImage {
                    id: e.id.clone(),
                    image,
                    boxes,
                    mask,
                })
            })
            .collect();
    }
    if inputs.inputs.is_empty() {
        return Err(invalid("give --input images or a --dataset"));
    }
    inputs
        .inputs
        .iter()
        .map(|p| {
            Ok(BenchImage {
                id: stem(p),
                image: work::load_image(p)?,
                boxes: None,
                mask: None,
            })
        })
        .collect()
}

fn detect_all(
    backend: &dyn Featurizer,
    set: &TransformSet,
    images: &[BenchImage],
    cfg: &UnsupConfig,
) -> anyhow::Result<Vec<ImageDetection>> {
    let opts = UpsampleOptions::default();
    images
        .iter()
        .map(|i| detect_one(backend, set, &i.id, &i.image, &opts, cfg).with_context(|| format!("image {}", i.id)))
        .collect()
}

fn cmd_unsup_detect(a: UnsupDetectArgs) -> anyhow::Result<()> {
    let cfg = a.unsup.config(a.mode.into())?;
    let (backend, set) = a.backend.build()?;
    let images = gather(&a.inputs)?;
    let dets = detect_all(backend.as_ref(), &set, &images, &cfg)?;
    write_json(a.out.as_deref(), &dets)
}

fn cmd_unsup_saliency(a: UnsupSaliencyArgs) -> anyhow::Result<()> {
    let cfg = a.unsup.config(DetectionMode::Multi)?;
    let (backend, set) = a.backend.build()?;
    let images = gather(&a.inputs)?;
    let dets = detect_all(backend.as_ref(), &set, &images, &cfg)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (img, det) in images.iter().zip(&dets) {
        let mask = LabelMask::new(det.height, det.width, det.saliency.iter().map(|&s| s as u32).collect())?;
        write_out(&a.out_dir.join(format!("{}.saliency.png", det.id)), &mask.to_png()?)?;
        if let Some(gt) = &img.mask {
            let iou = featpipe_core::detect::mask_iou(&det.saliency, gt)?;
            println!("{}\t{iou:.4}", det.id);
        }
    }
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> anyhow::Result<()> {
    let cfg = a.unsup.config(a.mode.into())?;
    let (backend, set) = a.backend.build()?;
    let (name, images) = match (a.synthetic, &a.dataset) {
        (Some(n), _) => {
            if n == 0 || a.size < 8 {
                return Err(invalid("--synthetic needs at least one image of side ≥ 8"));
            }
            let images = blob_dataset(n, a.size, a.data_seed)
                .into_iter()
                .map(|s| BenchImage {
                    id: s.id,
                    image: s.image,
                    boxes: Some(vec![s.bbox]),
                    mask: Some(s.mask),
                })
                .collect();
            (format!("synthetic blobs (n={n}, size={}, seed={})", a.size, a.data_seed), images)
        }
        (None, Some(root)) => {
            let inputs = InputArgs {
                inputs: Vec::new(),
                dataset: Some(root.clone()),
                layout: a.layout,
                strict: a.strict,
            };
            (root.display().to_string(), gather(&inputs)?)
        }
        (None, None) => return Err(invalid("give --dataset or --synthetic")),
    };
    let start = Instant::now();
    let dets = detect_all(backend.as_ref(), &set, &images, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let (corloc, per_image) = score(&images, &dets)?;
    let ious: Vec<f64> = per_image.iter().filter_map(|s| s.saliency_iou).collect();
    let report = BenchmarkReport {
        dataset: name,
        images: images.len(),
        mode: format!("{:?}", DetectionMode::from(a.mode)).to_lowercase(),
        backend: backend.descriptor().clone(),
        transform_set: set.doc().clone(),
        lambda: a.unsup.lambda,
        corloc,
        saliency_iou_mean: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
        saliency_iou_min: ious.iter().copied().reduce(f64::min),
        seconds,
        per_image,
    };
    write_json(Some(&a.out), &report)?;
    if let Some(md) = &a.markdown {
        write_out(md, report.to_markdown().as_bytes())?;
    }
    println!("{}", report.to_markdown());
    Ok(())
}

fn classical_recipe(sigmas: Option<&[f64]>) -> anyhow::Result<ClassicalRecipe> {
    ClassicalRecipe::standard(sigmas.unwrap_or(&DEFAULT_SCALES)).map_err(|e| invalid(format!("--sigmas: {e}")))
}

fn cmd_weak_train(a: WeakTrainArgs) -> anyhow::Result<()> {
    if a.images.len() != a.labels.len() {
        return Err(invalid(format!(
            "{} --image but {} --labels; give one labels file per image",
            a.images.len(),
            a.labels.len()
        )));
    }
    let source: FeatureSource = a.source.into();
    let mut config = match a.classifier {
        ClassifierArg::Logistic => TrainConfig::logistic(),
        ClassifierArg::RandomForest => TrainConfig::random_forest(),
    };
    if let Some(c) = a.c {
        if !(c > 0.0) {
            return Err(invalid("--c must be positive"));
        }
        config.logistic.c_reg = c;
    }
    if let Some(t) = a.trees {
        if t == 0 {
            return Err(invalid("--trees must be positive"));
        }
        config.forest.trees = t;
    }
    let classical = classical_recipe(a.sigmas.as_deref())?;
    let backend = if work::needs_deep(source) { Some(a.backend.build()?) } else { None };

    let mut prepared = Vec::with_capacity(a.images.len());
    for (img_path, lab_path) in a.images.iter().zip(&a.labels) {
        let image = work::load_image(img_path)?;
        let labels = work::load_labels(lab_path, image.height(), image.width())?;
        let (conformed, deep) = match &backend {
            Some((b, set)) => {
                let f = work::featurize(b.as_ref(), set, &image, a.target, None, &UpsampleOptions::default())?;
                (f.conformed, Some(f.features))
            }
            None => {
                let m = a.backend.input_multiple.unwrap_or(1);
                let desc = featpipe_core::featurize::BackendDescriptor {
                    name: "none".into(),
                    patch_size: 1,
                    stride: 1,
                    hidden_dim: 1,
                    input_multiple: m,
                };
                (conform(&image, &desc, a.target).map_err(|e| invalid(e.to_string()))?, None)
            }
        };
        let features = work::features_for(source, &conformed.image, deep.as_ref(), &classical)?;
        prepared.push((conformed, features, labels));
    }
    let items: Vec<TrainItem> = prepared
        .iter()
        .map(|(c, f, l)| TrainItem {
            conformed: c,
            features: f.clone(),
            labels: l,
        })
        .collect();
    let clf = work::train_on(&items, &config)?;
    write_out(&a.out, &encode_classifier(&clf))?;
    let summary = serde_json::json!({
        "classes": clf.classes,
        "kind": clf.kind,
        "channels": clf.dim(),
        "recipe_checksum": clf.recipe_checksum,
        "final_loss": clf.training_report().and_then(|r| r.loss_history.last().copied()),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_weak_apply(a: WeakApplyArgs) -> anyhow::Result<()> {
    let bytes = std::fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let clf = decode_classifier(&bytes).map_err(|e| invalid(format!("{}: {e}", a.model.display())))?;
    let (source, classical) = match &clf.recipe {
        featpipe_core::pixelclf::FeatureRecipe::Deep(_) => (FeatureSource::Deep, ClassicalRecipe::standard(&DEFAULT_SCALES)?),
        featpipe_core::pixelclf::FeatureRecipe::Classical(r) => (FeatureSource::Classical, r.clone()),
        featpipe_core::pixelclf::FeatureRecipe::Hybrid { classical, .. } => (FeatureSource::Hybrid, classical.clone()),
    };
    let backend = if work::needs_deep(source) { Some(a.backend.build()?) } else { None };
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let smoothing = SmoothOptions {
        radius: a.smooth_radius,
        iterations: a.smooth_iterations,
    };
    for path in &a.images {
        let image = work::load_image(path)?;
        let (conformed, deep) = match &backend {
            Some((b, set)) => {
                let f = work::featurize(b.as_ref(), set, &image, a.target, None, &UpsampleOptions::default())?;
                (f.conformed, Some(f.features))
            }
            None => {
                let desc = featpipe_core::featurize::BackendDescriptor {
                    name: "none".into(),
                    patch_size: 1,
                    stride: 1,
                    hidden_dim: 1,
                    input_multiple: a.backend.input_multiple.unwrap_or(1),
                };
                (conform(&image, &desc, a.target).map_err(|e| invalid(e.to_string()))?, None)
            }
        };
        let features = work::features_for(source, &conformed.image, deep.as_ref(), &classical)?;
        let pred = work::apply_classifier(&clf, &conformed, &features, smoothing)
            .with_context(|| format!("applying {} to {}", a.model.display(), path.display()))?;
        let s = stem(path);
        write_out(&a.out_dir.join(format!("{s}.pred.png")), &pred.labels.to_png()?)?;
        if a.probabilities {
            write_out(&a.out_dir.join(format!("{s}.prob.fmap")), &fmap::encode(&pred.probabilities, Dtype::F32, None))?;
        }
    }
    Ok(())
}

/// One profile measurement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub length: usize,
    pub mode: &'static str,
    pub wall_ms: f64,
    pub peak_bytes: Option<usize>,
}

fn noise_image(length: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::from_fn(length, length, 3, |_, _, _| rng.gen())
}

fn cmd_profile(a: ProfileArgs) -> anyhow::Result<()> {
    if a.lengths.is_empty() || a.repeats == 0 {
        return Err(invalid("--lengths and --repeats must be non-empty and positive"));
    }
    let (backend, set) = a.backend.build()?;
    let modes: &[(&str, UpsampleMode)] = match a.mode {
        ProfileModeArg::Sequential => &[("sequential", UpsampleMode::Sequential)],
        ProfileModeArg::Batched => &[("batched", UpsampleMode::Batched)],
        ProfileModeArg::Both => &[("sequential", UpsampleMode::Sequential), ("batched", UpsampleMode::Batched)],
    };
    let desc = backend.descriptor().clone();
    let mut rows = Vec::new();
    for &length in &a.lengths {
        let m = desc.input_multiple.max(1) as usize;
        if length < desc.patch_size as usize || length % m != 0 {
            return Err(invalid(format!("--lengths: {length} is not a multiple of {m} of at least one patch")));
        }
        let image = noise_image(length, length as u64);
        for &(name, mode) in modes {
            let opts = UpsampleOptions {
                mode,
                ..Default::default()
            };
            let mut best = f64::INFINITY;
            let mut peak = 0;
            for _ in 0..a.repeats {
                let base = crate::alloc::reset_peak();
                let start = Instant::now();
                let out = upsample(backend.as_ref(), &image, &set, &opts)?;
                best = best.min(start.elapsed().as_secs_f64() * 1e3);
                peak = peak.max(crate::alloc::peak_bytes().saturating_sub(base));
                drop(out);
            }
            log::info!("length {length} {name}: {best:.1} ms");
            rows.push(ProfileRow {
                length,
                mode: name,
                wall_ms: best,
                peak_bytes: crate::alloc::installed().then_some(peak),
            });
        }
    }
    let mut csv = String::from("length,mode,wall_ms,peak_bytes\n");
    for r in &rows {
        let peak = r.peak_bytes.map_or(String::new(), |p| p.to_string());
        csv.push_str(&format!("{},{},{:.3},{}\n", r.length, r.mode, r.wall_ms, peak));
    }
    match &a.out {
        Some(p) => write_out(p, csv.as_bytes()),
        None => Ok(std::io::stdout().write_all(csv.as_bytes())?),
    }
}

fn cmd_serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut cfg = crate::config::ApiConfig::load(a.config.as_deref(), std::env::vars())?;
    if let Some(b) = a.bind {
        cfg.bind = b;
        cfg.validate()?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(crate::http::serve(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("518x518").unwrap(), (518, 518));
        assert!(parse_size("518").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        cmd.clone().debug_assert();
        for sub in cmd.get_subcommands() {
            sub.clone().debug_assert();
        }
    }
}
