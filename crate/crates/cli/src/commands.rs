use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use patchgrid_core::ingest::{build_manifest, read_subarea_list, split_by_subarea};
use patchgrid_core::tiler::{build_patch_dataset, patch_index, patch_index_jsonl, PatchCounts};
use patchgrid_core::{GridSpec, ImageBuffer, Manifest, Split, Taxonomy, TaxonomyMode};
use patchgrid_nn::Checkpoint;
use patchgrid_pipeline::embed::{embedded_points, extract_features, scatter_plot, subsample, tsne, TsneConfig};
use patchgrid_pipeline::infer::{classify_frame, render_overlay, Palette, DEFAULT_ALPHA};
use patchgrid_pipeline::synth::SynthSpec;
use patchgrid_pipeline::traineval::checkpoint_config;
use patchgrid_pipeline::{
    cross_validate, load_model, metrics, run_evaluation, train, train_validation_split, PatchSet, TrainConfig,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{resolve, ConfigFile, Flags};
use crate::{CliError, Command, GlobalArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(global: &GlobalArgs, command: Command) -> Result<()> {
    let file = match &global.config {
        Some(path) => ConfigFile::read(path)?,
        None => ConfigFile::default(),
    };
    match command {
        Command::Synth(a) => synth(global, &file, a),
        Command::Prepare(a) => prepare(global, &file, a),
        Command::Train(a) => train_cmd(global, &file, a),
        Command::Eval(a) => eval(global, &file, a),
        Command::Cv(a) => cv(global, &file, a),
        Command::Embed(a) => embed(global, &file, a),
        Command::Infer(a) => infer(global, &file, a),
        Command::Config(a) => show_config(global, &file, a),
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| data_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// `dir/name.ext` -> `dir/name.run.json`.
fn run_record_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("run.json")
}

fn seeded(global: &GlobalArgs) -> Flags {
    let mut flags = Flags::default();
    flags.set("seed", global.seed);
    flags
}

fn train_config(global: &GlobalArgs, file: &ConfigFile, mut flags: Flags) -> Result<TrainConfig> {
    flags.set("seed", global.seed).set("threads", global.threads);
    let config = resolve(&TrainConfig::default(), &file.train, &flags)?;
    config.validate()?;
    Ok(config)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).map_err(|e| data_err(path, e))
}

/// Image root: the flag, else the root `prepare` recorded next to the
/// manifest, else the manifest's directory.
fn default_root(manifest: &Path, root: Option<PathBuf>) -> PathBuf {
    root.or_else(|| {
        let text = fs::read_to_string(run_record_path(manifest)).ok()?;
        let record: Value = serde_json::from_str(&text).ok()?;
        Some(PathBuf::from(record.get("root")?.as_str()?))
    })
    .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| data_err(path, e))
}

/// Training flags shared by `train` and `cv`.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// none | flip | geometric | color | both
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long, alias = "epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    pub initial_lr: Option<f64>,
    /// Model input as HxW, e.g. 64x64
    #[arg(long)]
    pub input_size: Option<String>,
    /// small_vgg | vgg16 | residual
    #[arg(long)]
    pub backbone: Option<String>,
    /// dense_dropout | two_layer | knn
    #[arg(long)]
    pub head: Option<String>,
    /// Neighbours for the knn head
    #[arg(long)]
    pub knn_k: Option<usize>,
    /// Grid as ROWSxCOLS
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub validation_folds: Option<usize>,
    /// Stop once evaluation-mode training accuracy reaches this value
    #[arg(long)]
    pub target_train_accuracy: Option<f64>,
}

impl TrainFlags {
    fn flags(&self) -> Flags {
        let mut f = Flags::default();
        f.set("augment", self.augment.clone())
            .set("max_epochs", self.max_epochs)
            .set("batch_size", self.batch_size)
            .set("initial_lr", self.initial_lr)
            .set("input_size", self.input_size.clone())
            .set("backbone", self.backbone.clone())
            .set("head", self.head.clone())
            .set("k", self.knn_k)
            .set("grid", self.grid.clone())
            .set("validation_folds", self.validation_folds)
            .set("target_train_accuracy", self.target_train_accuracy);
        f
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for the survey tree
    #[arg(long)]
    pub out: PathBuf,
    /// four | five
    #[arg(long)]
    pub taxonomy: Option<String>,
    #[arg(long)]
    pub sub_areas: Option<usize>,
    #[arg(long)]
    pub images_per_sub_area: Option<usize>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Per-sub-area brightness offsets are drawn from U(-shift, shift)
    #[arg(long)]
    pub brightness_shift: Option<f64>,
    /// Class with a second, visually distinct sub-population
    #[arg(long)]
    pub split_class: Option<usize>,
}

fn synth(global: &GlobalArgs, file: &ConfigFile, a: SynthArgs) -> Result<()> {
    let mut flags = seeded(global);
    flags
        .set("taxonomy", a.taxonomy)
        .set("sub_areas", a.sub_areas)
        .set("images_per_sub_area", a.images_per_sub_area)
        .set("width", a.width)
        .set("height", a.height)
        .set("brightness_shift", a.brightness_shift)
        .set("split_class", a.split_class);
    let spec = resolve(&SynthSpec::default(), &file.synth, &flags)?;
    let manifest = spec.generate(&a.out)?;
    let path = a.out.join("manifest.json");
    manifest.save(&path).map_err(|e| data_err(&path, e))?;
    write_json(&a.out.join("synth.run.json"), &json!({ "config": spec, "seed": spec.seed }))?;
    log::info!("synth records={} root={}", manifest.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Survey tree laid out as ROOT/<class>/<sub_area>/<image>
    #[arg(long)]
    pub root: PathBuf,
    /// four | five
    #[arg(long, default_value = "four")]
    pub taxonomy: String,
    /// File listing held-out sub-areas, one per line
    #[arg(long, conflicts_with = "test_sites")]
    pub test_subareas: Option<PathBuf>,
    /// Comma-separated held-out sub-areas
    #[arg(long, value_delimiter = ',')]
    pub test_sites: Option<Vec<String>>,
    /// Manifest output path
    #[arg(long)]
    pub out: PathBuf,
    /// Patch index output (JSON lines); defaults next to the manifest
    #[arg(long)]
    pub patch_index: Option<PathBuf>,
    /// Grid as ROWSxCOLS
    #[arg(long)]
    pub grid: Option<String>,
}

fn prepare(global: &GlobalArgs, file: &ConfigFile, a: PrepareArgs) -> Result<()> {
    let mut flags = Flags::default();
    flags.set("grid", a.grid.clone());
    let config = train_config(global, file, flags)?;
    let mode: TaxonomyMode = a.taxonomy.parse()?;
    let taxonomy = Taxonomy::new(mode);
    let manifest = build_manifest(&a.root, taxonomy).map_err(|e| data_err(&a.root, e))?;
    let held_out: BTreeSet<String> = match (&a.test_subareas, a.test_sites) {
        (Some(path), _) => read_subarea_list(path).map_err(|e| data_err(path, e))?,
        (None, Some(sites)) => sites.into_iter().map(|s| s.trim().to_string()).collect(),
        (None, None) => BTreeSet::new(),
    };
    let manifest = split_by_subarea(&manifest, &held_out).map_err(|e| data_err(&a.root, e))?;
    manifest.save(&a.out).map_err(|e| data_err(&a.out, e))?;
    log::info!("wrote {}", a.out.display());

    let entries = patch_index(&manifest, &config.grid);
    let index_path = a.patch_index.unwrap_or_else(|| a.out.with_extension("patches.jsonl"));
    write_text(&index_path, &patch_index_jsonl(&entries)?)?;
    log::info!("wrote {} ({} patches)", index_path.display(), entries.len());

    let mut counts = PatchCounts::empty(taxonomy);
    for e in &entries {
        counts.add(e.label, e.split);
    }
    write_json(
        &run_record_path(&a.out),
        &json!({
            "config": config,
            "seed": config.seed,
            "root": absolute(&a.root),
            "taxonomy": mode,
            "test_subareas": held_out,
            "records": manifest.len(),
            "counts": counts,
        }),
    )?;
    print!("{counts}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image root; defaults to the manifest's directory
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn train_cmd(global: &GlobalArgs, file: &ConfigFile, a: TrainArgs) -> Result<()> {
    let config = train_config(global, file, a.train.flags())?;
    let manifest = load_manifest(&a.manifest)?;
    let root = default_root(&a.manifest, a.root);
    log::info!("train manifest={} config={}", a.manifest.display(), serde_json::to_string(&config).unwrap_or_default());
    let mut outcome = train(&manifest, &root, &config)?;
    outcome.checkpoint.meta["seed"] = json!(config.seed);
    outcome.checkpoint.meta["manifest"] = json!(absolute(&a.manifest));
    outcome.checkpoint.meta["root"] = json!(absolute(&root));
    outcome.checkpoint.save(&a.out).map_err(|e| data_err(&a.out, e))?;
    log::info!("wrote {} best_epoch={:?} stop={:?}", a.out.display(), outcome.history.best_epoch, outcome.history.stop);
    print!("{}", outcome.validation.table(manifest.taxonomy.names()));
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Manifest and image root: explicit flags, else the paths recorded at
/// training time.
fn recorded_data(ckpt: &Checkpoint, manifest: Option<PathBuf>, root: Option<PathBuf>) -> Result<(Manifest, PathBuf)> {
    let recorded = |key: &str| ckpt.meta.get(key).and_then(Value::as_str).map(PathBuf::from);
    let path = manifest
        .or_else(|| recorded("manifest"))
        .ok_or_else(|| CliError::Usage("checkpoint records no manifest; pass --manifest".into()))?;
    let root = root
        .or_else(|| if path == recorded("manifest").unwrap_or_default() { recorded("root") } else { None })
        .unwrap_or_else(|| default_root(&path, None));
    Ok((load_manifest(&path)?, root))
}

fn parse_split(text: &str) -> Result<Split> {
    match text {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("split must be train or test, got `{other}`"))),
    }
}

/// The patches of `split` plus, for a knn checkpoint, its training bank.
fn split_patches(
    ckpt: &Checkpoint,
    config: &TrainConfig,
    manifest: &Manifest,
    root: &Path,
    split: Split,
) -> Result<(PatchSet, Option<PatchSet>)> {
    if manifest.taxonomy.mode() != ckpt.taxonomy {
        return Err(CliError::Data(format!(
            "checkpoint taxonomy {:?} does not match manifest taxonomy {:?}",
            ckpt.taxonomy,
            manifest.taxonomy.mode()
        )));
    }
    let dataset = build_patch_dataset(manifest, root, &config.grid).map_err(|e| data_err(root, e))?;
    let patches = PatchSet::from_dataset(&dataset, split, config.input_size)?;
    if patches.is_empty() {
        return Err(CliError::Data(format!("manifest has no {split:?} patches")));
    }
    let bank = match config.head {
        patchgrid_nn::Head::Knn { .. } => Some(train_validation_split(manifest, root, config)?.0),
        _ => None,
    };
    Ok((patches, bank))
}

/// Training config stored in the checkpoint with `threads`, `batch_size`
/// and `seed` overridable.
fn checkpoint_run_config(global: &GlobalArgs, ckpt: &Checkpoint, batch_size: Option<usize>) -> Result<TrainConfig> {
    let mut config = checkpoint_config(ckpt).unwrap_or_default();
    if let Some(t) = global.threads {
        config.threads = t;
    }
    if let Some(b) = batch_size {
        config.batch_size = b;
    }
    let (h, w, _) = ckpt.network.spec().input_size;
    config.input_size = (h, w);
    config.validate()?;
    Ok(config)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// train | test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// JSON report path; the table is always printed
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Defaults to the manifest recorded in the checkpoint
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

fn eval(global: &GlobalArgs, _file: &ConfigFile, a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let config = checkpoint_run_config(global, &ckpt, a.batch_size)?;
    let (manifest, root) = recorded_data(&ckpt, a.manifest, a.root)?;
    let (patches, bank) = split_patches(&ckpt, &config, &manifest, &root, split)?;
    let model = load_model(&ckpt, bank.as_ref())?;
    let evaluation = run_evaluation(&model, &patches, config.batch_size, config.threads)?;
    let report = metrics(&evaluation.confusion)?.rounded();
    log::info!(
        "eval split={} patches={} loss={:.6} accuracy={:.3}",
        a.split,
        patches.len(),
        evaluation.loss,
        report.accuracy
    );
    print!("{}", report.table(manifest.taxonomy.names()));
    if let Some(path) = a.report {
        write_json(
            &path,
            &json!({
                "config": config,
                "seed": ckpt.seed,
                "checkpoint": absolute(&a.ckpt),
                "classes": manifest.taxonomy.names(),
                "selection": ckpt.meta.get("selection"),
                "validation": ckpt.meta.get("validation"),
                "split": a.split,
                "patches": patches.len(),
                "loss": evaluation.loss,
                "precision": report.precision,
                "recall": report.recall,
                "accuracy": report.accuracy,
                "confusion": evaluation.confusion.counts,
                "metrics": report,
            }),
        )?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// JSON report path
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn cv(global: &GlobalArgs, file: &ConfigFile, a: CvArgs) -> Result<()> {
    let config = train_config(global, file, a.train.flags())?;
    let manifest = load_manifest(&a.manifest)?;
    let root = default_root(&a.manifest, a.root);
    let report = cross_validate(&manifest, &root, &config, a.k)?;
    for f in &report.folds {
        println!("fold {} accuracy {:.3}", f.fold, f.metrics.accuracy);
    }
    println!("mean accuracy {:.3}", report.mean.accuracy);
    if let Some(path) = a.report {
        write_json(
            &path,
            &json!({
                "config": config,
                "seed": config.seed,
                "classes": manifest.taxonomy.names(),
                "k": a.k,
                "folds": report.folds,
                "mean": report.mean,
            }),
        )?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// train | test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Embedding output: JSON array of {id, label, x, y}
    #[arg(long)]
    pub out: PathBuf,
    /// Optional scatter plot PNG
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub max_points: Option<usize>,
}

fn embed(global: &GlobalArgs, file: &ConfigFile, a: EmbedArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let mut flags = seeded(global);
    flags.set("perplexity", a.perplexity).set("iterations", a.iterations).set("max_points", a.max_points);
    let tsne_config = resolve(&TsneConfig::default(), &file.tsne, &flags)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let config = checkpoint_run_config(global, &ckpt, None)?;
    let (manifest, root) = recorded_data(&ckpt, a.manifest, a.root)?;
    let dataset = build_patch_dataset(&manifest, &root, &config.grid).map_err(|e| data_err(&root, e))?;
    let patches = PatchSet::from_dataset(&dataset, split, config.input_size)?;
    let features = extract_features(&ckpt.network, &patches, config.batch_size)?;
    let available = features.len();
    let keep = subsample(available, tsne_config.max_points, tsne_config.seed);
    let features = features.subset(&keep)?;
    log::info!("embed split={} points={} width={}", a.split, features.len(), features.width());
    let embedding = tsne(&features.rows, &tsne_config)?;
    log::info!("embed kl initial={:.6} final={:.6}", embedding.initial_kl, embedding.final_kl);
    let points = embedded_points(&features, &embedding);
    write_json(&a.out, &points)?;
    if let Some(plot) = &a.plot {
        let palette = Palette::for_taxonomy(manifest.taxonomy.mode());
        scatter_plot(&points, &palette.colors).save(plot).map_err(|e| data_err(plot, e))?;
        log::info!("wrote {}", plot.display());
    }
    write_json(
        &run_record_path(&a.out),
        &json!({
            "config": { "tsne": tsne_config, "train": config },
            "seed": tsne_config.seed,
            "checkpoint": absolute(&a.ckpt),
            "split": a.split,
            "points": points.len(),
            "subsample": { "available": available, "kept": keep.len(), "seed": tsne_config.seed },
            "initial_kl": embedding.initial_kl,
            "final_kl": embedding.final_kl,
        }),
    )
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// An image file or a directory of images
    #[arg(long)]
    pub input: PathBuf,
    /// Grid as ROWSxCOLS
    #[arg(long, default_value = "5x8")]
    pub grid: String,
    /// Output directory for overlays
    #[arg(long)]
    pub out: PathBuf,
    /// Leave the top row unclassified
    #[arg(long)]
    pub skip_top: bool,
    /// Tint opacity in [0, 1]
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Also write per-frame label grids with probabilities
    #[arg(long)]
    pub labels_json: bool,
    /// Training manifest, needed only for knn checkpoints
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub root: Option<PathBuf>,
}

fn input_frames(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut frames: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| data_err(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && patchgrid_core::ingest::is_image_file(p))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(CliError::Data(format!("{}: no images found", input.display())));
    }
    Ok(frames)
}

fn infer(global: &GlobalArgs, _file: &ConfigFile, a: InferArgs) -> Result<()> {
    let grid = GridSpec::parse(&a.grid, a.skip_top).map_err(|e| CliError::Usage(e.to_string()))?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let config = checkpoint_run_config(global, &ckpt, None)?;
    let palette = Palette::for_taxonomy(ckpt.taxonomy).with_alpha(a.alpha)?;
    let bank = match config.head {
        patchgrid_nn::Head::Knn { .. } => {
            let (manifest, root) = recorded_data(&ckpt, a.manifest, a.root)?;
            Some(train_validation_split(&manifest, &root, &config)?.0)
        }
        _ => None,
    };
    let model = load_model(&ckpt, bank.as_ref())?;
    let input_size = model.input_size();
    let frames = input_frames(&a.input)?;
    fs::create_dir_all(&a.out).map_err(|e| data_err(&a.out, e))?;
    for frame in &frames {
        let image = ImageBuffer::load(frame).map_err(|e| data_err(frame, e))?;
        let labels = classify_frame(&model, &image, &grid, input_size)?;
        let stem = frame.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        let overlay_path = a.out.join(format!("{stem}_overlay.png"));
        render_overlay(&image, &labels, &palette)?.save(&overlay_path).map_err(|e| data_err(&overlay_path, e))?;
        log::info!("infer frame={} cells={}", frame.display(), labels.cells.len());
        if a.labels_json {
            let mut value = serde_json::to_value(&labels).map_err(|e| CliError::Data(e.to_string()))?;
            value["source"] = json!(frame);
            value["checkpoint"] = json!(absolute(&a.ckpt));
            value["seed"] = json!(ckpt.seed);
            value["config"] = json!({ "train": config, "grid": grid, "alpha": a.alpha });
            write_json(&a.out.join(format!("{stem}_labels.json")), &value)?;
        }
    }
    write_json(
        &a.out.join("infer.run.json"),
        &json!({
            "config": { "train": config, "grid": grid, "alpha": a.alpha, "labels_json": a.labels_json },
            "seed": ckpt.seed,
            "checkpoint": absolute(&a.ckpt),
            "input": a.input,
            "frames": frames,
        }),
    )
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub train: TrainFlags,
}

fn show_config(global: &GlobalArgs, file: &ConfigFile, a: ConfigArgs) -> Result<()> {
    let train = train_config(global, file, a.train.flags())?;
    let tsne = resolve(&TsneConfig::default(), &file.tsne, &seeded(global))?;
    let synth = resolve(&SynthSpec::default(), &file.synth, &seeded(global))?;
    let text = serde_json::to_string_pretty(&json!({ "train": train, "tsne": tsne, "synth": synth }))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{text}");
    Ok(())
}
