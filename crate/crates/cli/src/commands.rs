//! Command-line surface of `trio` and the subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use trio_core::clip::{precompute_targets, ClipTargets, SurrogateClip, TargetCache, TargetSource};
use trio_core::dataset::{
    split_manifest, synth_audio, synth_dataset, validate_manifest, DatasetManifest, Split,
    MANIFEST_FILE, SPLITS_FILE,
};
use trio_core::diffusion::{
    generate, write_outputs, DiffusionBackend, GenerationRequest, GuidanceResolver, GuidanceSource,
    MediaInput, Payload, SchedulerKind, ToyBackend, UncondPolicy,
};
use trio_core::encoders::{
    build_encoder, reference_spec, EchoEncoder, ProjectionHead, REFERENCE_NAMES,
};
use trio_core::metrics::{batch_plan, measure_tau};
use trio_core::trainer::{evaluate, load_examples, train, OptimizerKind, TrainConfig};
use trio_core::{AudioEncoder, EncoderSpec};

use crate::annotate::{self, ANNOTATION_FILE};
use crate::config::{pick, require, FileConfig};
use crate::error::{CliError, Result};
use crate::registry;
use crate::report::{BenchmarkReport, EvaluationRecord, TimingRecord, REPORT_SCHEMA_VERSION};
use crate::service::{self, ServiceConfig, DEFAULT_QUEUE_CAPACITY};

#[derive(Debug, Parser)]
#[command(
    name = "trio",
    version,
    about = "Train, evaluate and generate with CLIP-aligned audio encoders"
)]
pub struct Cli {
    /// TOML settings file (defaults to ./trio.toml when present).
    #[arg(long, global = true, env = "TRIO_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub paths: PathArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Directories shared by several subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct PathArgs {
    /// Dataset directory holding manifest.jsonl and splits.json.
    #[arg(long, global = true, env = "TRIO_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// CLIP target cache directory.
    #[arg(long, global = true, env = "TRIO_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Training checkpoints of one run.
    #[arg(long, global = true, env = "TRIO_CHECKPOINT_DIR")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Trained encoders offered for generation, one file or training directory per encoder id.
    #[arg(long, global = true, env = "TRIO_ENCODERS_DIR")]
    pub encoders_dir: Option<PathBuf>,
    /// Where generated images, reports and annotation templates go.
    #[arg(long, global = true, env = "TRIO_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
    /// Stable Diffusion 1.5 snapshot (diffusers layout); the toy backend is used otherwise.
    #[arg(long, global = true, env = "TRIO_SD15_DIR")]
    pub sd15_dir: Option<PathBuf>,
    /// CLIP ViT-L/14 snapshot; the surrogate text/image encoder is used otherwise.
    #[arg(long, global = true, env = "TRIO_CLIP_DIR")]
    pub clip_dir: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    #[arg(long, global = true, env = "TRIO_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset or validate an existing one, then split it.
    Prepare(PrepareArgs),
    /// Encode CLIP targets for every manifest entry missing from the cache.
    CacheTargets(ForceArg),
    /// Train an encoder, resuming from the newest checkpoint.
    Train(TrainArgs),
    /// Run the metric battery on one split.
    Evaluate(EvaluateArgs),
    /// Measure the mean time per batch of an encoder.
    BenchTiming(BenchTimingArgs),
    /// Generate images from text, audio, noise and init images.
    Generate(GenerateArgs),
    /// Tabulate evaluations and timings with the best value of each metric marked.
    Report(ReportArgs),
    /// Write one empty element-presence sheet per generated image.
    AnnotateTemplate(AnnotateArgs),
    /// Serve the generation API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ForceArg {
    /// Redo the work even when its outputs exist.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PrepareArgs {
    /// Generate this many synthetic trios instead of reading an existing manifest.
    #[arg(long)]
    pub synth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    #[arg(long, env = "TRIO_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Built-in architecture name.
    #[arg(long, env = "TRIO_ENCODER", conflicts_with = "spec")]
    pub encoder: Option<String>,
    /// Architecture file (TOML encoder spec).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, env = "TRIO_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "TRIO_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "TRIO_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
    #[arg(long, env = "TRIO_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "TRIO_OPTIMIZER")]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub validate_before: Option<bool>,
    #[arg(long)]
    pub validate_after: Option<bool>,
    /// Delete existing checkpoints and start over.
    #[arg(long)]
    pub force: bool,
}

/// Which encoder a measurement runs on.
#[derive(Debug, Clone, Args)]
pub struct EncoderChoice {
    /// Checkpoint file, or training directory (newest checkpoint).
    #[arg(long, conflicts_with_all = ["encoder", "echo"])]
    pub checkpoint: Option<PathBuf>,
    /// Untrained built-in architecture, initialized from `--seed`.
    #[arg(long, conflicts_with = "echo")]
    pub encoder: Option<String>,
    /// Lookup stub that answers every clip with its cached text projection.
    #[arg(long)]
    pub echo: bool,
    #[arg(long, env = "TRIO_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Column label in reports (defaults to the checkpoint or architecture name).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub encoder: EncoderChoice,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also compare raw 77x768 outputs with the cached text states.
    #[arg(long)]
    pub raw: bool,
    /// Write the record here; an existing file is kept unless `--force`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchTimingArgs {
    #[command(flatten)]
    pub encoder: EncoderChoice,
    #[arg(long, default_value_t = 23_524)]
    pub dataset_size: usize,
    #[arg(long, default_value_t = 1_000)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    /// Distinct synthetic clips cycled through the batches.
    #[arg(long, default_value_t = 32)]
    pub pool: usize,
    /// Print the batch plan without timing anything.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Full request as JSON; excludes the source flags below.
    #[arg(long, conflicts_with_all = ["text", "audio", "random", "init_image"])]
    pub request: Option<PathBuf>,
    /// Text prompt source (repeatable).
    #[arg(long)]
    pub text: Vec<String>,
    /// WAV clip source (repeatable), read by `--audio-encoder`.
    #[arg(long)]
    pub audio: Vec<PathBuf>,
    #[arg(long)]
    pub audio_encoder: Option<String>,
    /// Gaussian noise source with this seed (repeatable).
    #[arg(long)]
    pub random: Vec<u64>,
    /// 512x512 PNG; switches to image-to-image.
    #[arg(long)]
    pub init_image: Option<PathBuf>,
    /// Mixing weights in source order: texts, audios, then random sources.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long, env = "TRIO_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repeat: Option<usize>,
    #[arg(long)]
    pub uncond_policy: Option<UncondPolicy>,
    #[arg(long)]
    pub scheduler: Option<SchedulerKind>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Evaluation records written by `evaluate --out`.
    #[arg(long = "eval", required = true, num_args = 1..)]
    pub evals: Vec<PathBuf>,
    /// Timing records written by `bench-timing --out`.
    #[arg(long = "timing", num_args = 1..)]
    pub timings: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
    /// Also write report.txt and report.json to the output directory.
    #[arg(long)]
    pub save: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AnnotateArgs {
    /// Elements to check in every image (repeatable).
    #[arg(long = "element")]
    pub elements: Vec<String>,
    #[arg(long, default_value = "")]
    pub annotator: String,
    /// Directory of generated images (defaults to the output directory).
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, env = "TRIO_ADDR")]
    pub addr: Option<String>,
    #[arg(long, env = "TRIO_QUEUE_CAPACITY")]
    pub queue_capacity: Option<usize>,
}

/// What a successful command prints.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Json(Value),
    Text(String),
}

impl Output {
    fn ok(details: Value) -> Self {
        Self::status("ok", details)
    }

    fn skipped(details: Value) -> Self {
        Self::status("skipped", details)
    }

    fn status(status: &str, details: Value) -> Self {
        let mut obj = json!({ "status": status });
        if let (Some(o), Value::Object(d)) = (obj.as_object_mut(), details) {
            o.extend(d);
        }
        Output::Json(obj)
    }
}

/// Resolved directories: flag or environment, then file.
struct Paths {
    cli: PathArgs,
    file: FileConfig,
}

impl Paths {
    fn data_dir(&self) -> Result<PathBuf> {
        require(
            self.cli.data_dir.clone(),
            self.file.paths.data_dir.clone(),
            "data_dir",
        )
    }

    fn cache_dir(&self) -> Result<PathBuf> {
        require(
            self.cli.cache_dir.clone(),
            self.file.paths.cache_dir.clone(),
            "cache_dir",
        )
    }

    fn checkpoint_dir(&self) -> Result<PathBuf> {
        require(
            self.cli.checkpoint_dir.clone(),
            self.file.paths.checkpoint_dir.clone(),
            "checkpoint_dir",
        )
    }

    fn encoders_dir(&self) -> Option<PathBuf> {
        self.cli
            .encoders_dir
            .clone()
            .or(self.file.paths.encoders_dir.clone())
    }

    fn output_dir(&self) -> Result<PathBuf> {
        require(
            self.cli.output_dir.clone(),
            self.file.paths.output_dir.clone(),
            "output_dir",
        )
    }

    fn sd15_dir(&self) -> Option<PathBuf> {
        self.cli
            .sd15_dir
            .clone()
            .or(self.file.paths.sd15_dir.clone())
    }

    fn clip_dir(&self) -> Option<PathBuf> {
        self.cli
            .clip_dir
            .clone()
            .or(self.file.paths.clip_dir.clone())
    }

    fn static_dir(&self) -> Option<PathBuf> {
        self.cli
            .static_dir
            .clone()
            .or(self.file.paths.static_dir.clone())
    }
}

pub fn run(cli: Cli) -> Result<Output> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let paths = Paths {
        cli: cli.paths,
        file,
    };
    match cli.command {
        Command::Prepare(a) => prepare(&paths, &a),
        Command::CacheTargets(a) => cache_targets(&paths, a.force),
        Command::Train(a) => train_cmd(&paths, &a),
        Command::Evaluate(a) => evaluate_cmd(&paths, &a),
        Command::BenchTiming(a) => bench_timing(&a),
        Command::Generate(a) => generate_cmd(&paths, &a),
        Command::Report(a) => report(&paths, &a),
        Command::AnnotateTemplate(a) => annotate_template(&paths, &a),
        Command::Serve(a) => serve(&paths, &a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("records serialize")
}

fn remove_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

fn split_counts(m: &DatasetManifest) -> Value {
    json!({
        "entries": m.entries.len(),
        "train": m.count(Split::Train),
        "val": m.count(Split::Val),
        "test": m.count(Split::Test),
        "seed": m.seed,
    })
}

fn prepare(paths: &Paths, a: &PrepareArgs) -> Result<Output> {
    let dir = paths.data_dir()?;
    let seed = pick(a.seed, None, 0);
    let prepared = dir.join(MANIFEST_FILE).is_file() && dir.join(SPLITS_FILE).is_file();
    if prepared && !a.force {
        let manifest = DatasetManifest::read(&dir)?;
        return Ok(Output::skipped(json!({
            "data_dir": dir,
            "dataset": split_counts(&manifest),
        })));
    }
    let manifest = match a.synth {
        Some(n) => synth_dataset(n, seed, &dir)?,
        None => {
            let m = DatasetManifest::read(&dir)?;
            validate_manifest(&m)?;
            m
        }
    };
    let manifest = split_manifest(manifest.entries, &dir, a.val, a.test, seed)?;
    manifest.write()?;
    Ok(Output::ok(json!({
        "data_dir": dir,
        "dataset": split_counts(&manifest),
    })))
}

fn clip_targets(paths: &Paths) -> Result<Arc<dyn ClipTargets>> {
    match paths.clip_dir() {
        None => Ok(Arc::new(SurrogateClip::new())),
        #[cfg(feature = "pretrained")]
        Some(dir) => {
            let clip = trio_core::clip::PretrainedClip::load(
                &trio_core::clip::PretrainedClipPaths::from_dir(&dir),
                &Device::Cpu,
            )?;
            Ok(Arc::new(clip))
        }
        #[cfg(not(feature = "pretrained"))]
        Some(_) => Err(CliError::Config(
            "clip_dir needs a build with the `pretrained` feature".into(),
        )),
    }
}

fn backend(paths: &Paths) -> Result<Arc<dyn DiffusionBackend>> {
    match paths.sd15_dir() {
        None => Ok(Arc::new(ToyBackend::new())),
        #[cfg(feature = "pretrained")]
        Some(dir) => {
            let sd = trio_core::diffusion::Sd15Backend::load(
                &trio_core::diffusion::Sd15Paths::from_dir(&dir),
                &Device::Cpu,
            )?;
            Ok(Arc::new(sd))
        }
        #[cfg(not(feature = "pretrained"))]
        Some(_) => Err(CliError::Config(
            "sd15_dir needs a build with the `pretrained` feature".into(),
        )),
    }
}

fn cache_targets(paths: &Paths, force: bool) -> Result<Output> {
    let manifest = DatasetManifest::read(&paths.data_dir()?)?;
    let dir = paths.cache_dir()?;
    if force {
        remove_dir(&dir)?;
    }
    let clip = clip_targets(paths)?;
    let mut cache = TargetCache::open(&dir, clip.checkpoint_id())?;
    let written = precompute_targets(&manifest, clip.as_ref(), &mut cache)?;
    let details = json!({
        "cache_dir": dir,
        "checkpoint": clip.checkpoint_id(),
        "written": written,
        "cached": cache.len(),
    });
    Ok(if written == 0 {
        Output::skipped(details)
    } else {
        Output::ok(details)
    })
}

fn train_spec(a: &TrainArgs, file: &FileConfig) -> Result<EncoderSpec> {
    if let Some(path) = &a.spec {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let spec = EncoderSpec::from_toml(&text)?;
        spec.validate()?;
        return Ok(spec);
    }
    let name = require(a.encoder.clone(), file.train.encoder.clone(), "encoder")?;
    Ok(reference_spec(&name)?)
}

fn train_cmd(paths: &Paths, a: &TrainArgs) -> Result<Output> {
    let t = &paths.file.train;
    let defaults = TrainConfig::default();
    let spec = train_spec(a, &paths.file)?;
    let config = TrainConfig {
        epochs: pick(a.epochs, t.epochs, defaults.epochs),
        batch_size: pick(a.batch_size, t.batch_size, defaults.batch_size),
        learning_rate: pick(a.learning_rate, t.learning_rate, defaults.learning_rate),
        seed: pick(a.seed, t.seed, defaults.seed),
        checkpoint_dir: paths.checkpoint_dir()?,
        validate_before: pick(
            a.validate_before,
            t.validate_before,
            defaults.validate_before,
        ),
        validate_after: pick(a.validate_after, t.validate_after, defaults.validate_after),
        optimizer: pick(a.optimizer, t.optimizer, defaults.optimizer),
    };
    config.validate()?;
    if a.force {
        remove_dir(&config.checkpoint_dir)?;
    }
    let manifest = DatasetManifest::read(&paths.data_dir()?)?;
    let cache = TargetCache::open_existing(&paths.cache_dir()?)?;
    let outcome = train(&spec, &manifest, &cache, &config)?;
    let details = json!({
        "encoder": spec.name,
        "checkpoint": outcome.checkpoint,
        "epochs_run": outcome.epochs.len(),
        "epochs": outcome.epochs,
        "before": outcome.before,
        "after": outcome.after,
    });
    Ok(if outcome.epochs.is_empty() {
        Output::skipped(details)
    } else {
        Output::ok(details)
    })
}

/// An encoder with its head and report label.
struct Chosen {
    label: String,
    encoder: Arc<dyn AudioEncoder>,
    head: ProjectionHead,
}

fn choose_encoder(
    c: &EncoderChoice,
    echo_rows: Option<(&[trio_core::trainer::TrainingExample], &dyn TargetSource)>,
) -> Result<Chosen> {
    let device = Device::Cpu;
    if let Some(path) = &c.checkpoint {
        let file = registry::checkpoint_file(path)?;
        let loaded = registry::load(&file.display().to_string(), &file, &device)?;
        return Ok(Chosen {
            label: c
                .name
                .clone()
                .unwrap_or(loaded.summary.architecture.clone()),
            encoder: loaded.encoder,
            head: loaded.head,
        });
    }
    if c.echo {
        let Some((examples, targets)) = echo_rows else {
            return Err(CliError::Config("--echo needs cached targets".into()));
        };
        let mut echo = EchoEncoder::new("echo");
        for e in examples {
            echo.insert(&e.audio, targets.projections(&e.trio_id)?.0)?;
        }
        return Ok(Chosen {
            label: c.name.clone().unwrap_or("echo".into()),
            encoder: Arc::new(echo),
            head: ProjectionHead::identity(&device)?,
        });
    }
    let Some(name) = &c.encoder else {
        return Err(CliError::Config(format!(
            "choose an encoder with --checkpoint, --echo or --encoder ({})",
            REFERENCE_NAMES.join(", ")
        )));
    };
    let spec = reference_spec(name)?;
    Ok(Chosen {
        label: c.name.clone().unwrap_or(spec.name.clone()),
        encoder: Arc::new(build_encoder(&spec, c.seed)?),
        head: ProjectionHead::new(c.seed, &device)?,
    })
}

fn evaluate_cmd(paths: &Paths, a: &EvaluateArgs) -> Result<Output> {
    if let Some(out) = a.out.as_ref().filter(|p| p.is_file() && !a.force) {
        let existing: EvaluationRecord = read_json(out)?;
        return Ok(Output::skipped(to_value(&existing)));
    }
    let manifest = DatasetManifest::read(&paths.data_dir()?)?;
    let cache = TargetCache::open_existing(&paths.cache_dir()?)?;
    let examples = load_examples(&manifest, a.split)?;
    let chosen = choose_encoder(&a.encoder, Some((&examples, &cache)))?;
    let metrics = evaluate(
        chosen.encoder.as_ref(),
        &chosen.head,
        &examples,
        &cache,
        a.raw,
    )?;
    let record = EvaluationRecord {
        schema_version: REPORT_SCHEMA_VERSION,
        encoder: chosen.label,
        split: a.split,
        observations: examples.len(),
        metrics,
    };
    let value = to_value(&record);
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&value).expect("json"))?;
    }
    Ok(Output::ok(value))
}

fn bench_timing(a: &BenchTimingArgs) -> Result<Output> {
    if a.dataset_size == 0 || a.batch_size == 0 || a.repeats == 0 {
        return Err(CliError::Config(
            "dataset-size, batch-size and repeats must be at least 1".into(),
        ));
    }
    if a.dry_run {
        let plan = batch_plan(a.dataset_size, a.batch_size);
        return Ok(Output::ok(json!({
            "dataset_size": a.dataset_size,
            "batch_size": a.batch_size,
            "batches": plan.len(),
            "last_batch": plan.last().copied().unwrap_or(0),
            "repeats": a.repeats,
        })));
    }
    if let Some(out) = a.out.as_ref().filter(|p| p.is_file() && !a.force) {
        let existing: TimingRecord = read_json(out)?;
        return Ok(Output::skipped(to_value(&existing)));
    }
    if a.encoder.echo {
        return Err(CliError::Config(
            "bench-timing does not time the echo stub".into(),
        ));
    }
    let chosen = choose_encoder(&a.encoder, None)?;
    let pool: Vec<_> = (0..a.pool.max(1))
        .map(|i| synth_audio(a.encoder.seed, i))
        .collect();
    let m = measure_tau(
        chosen.encoder.as_ref(),
        &pool,
        a.dataset_size,
        a.batch_size,
        a.repeats,
    )?;
    let record = TimingRecord::new(&chosen.label, a.dataset_size, a.batch_size, &m);
    let value = to_value(&record);
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&value).expect("json"))?;
    }
    Ok(Output::ok(value))
}

fn request_from_flags(a: &GenerateArgs) -> Result<GenerationRequest> {
    if let Some(path) = &a.request {
        return read_json(path);
    }
    let mut sources: Vec<GuidanceSource> = a.text.iter().map(GuidanceSource::text).collect();
    if !a.audio.is_empty() {
        let id = a
            .audio_encoder
            .clone()
            .ok_or_else(|| CliError::Config("--audio needs --audio-encoder".into()))?;
        sources.extend(
            a.audio
                .iter()
                .map(|p| GuidanceSource::audio(id.clone(), MediaInput::from_path(p))),
        );
    }
    sources.extend(a.random.iter().map(|&s| GuidanceSource::random(s)));
    let seed = a.seed.unwrap_or(0);
    let mut request = match &a.init_image {
        Some(p) => GenerationRequest::image_to_image(sources, MediaInput::from_path(p), seed),
        None => GenerationRequest::text_to_image(sources, seed),
    };
    if !a.weights.is_empty() {
        request.mix_weights = Some(a.weights.clone());
    }
    if let Some(v) = a.guidance_scale {
        request.guidance_scale = v;
    }
    if let Some(v) = a.steps {
        request.steps = v;
    }
    if let Some(v) = a.strength {
        request.strength = Some(v);
    }
    if let Some(v) = a.repeat {
        request.repeat = v;
    }
    if let Some(v) = a.uncond_policy {
        request.uncond_policy = v;
    }
    if let Some(v) = a.scheduler {
        request.scheduler = v;
    }
    Ok(request)
}

fn generate_cmd(paths: &Paths, a: &GenerateArgs) -> Result<Output> {
    let request = request_from_flags(a)?;
    request.validate().map_err(|e| {
        CliError::Diffusion(trio_core::diffusion::DiffusionError::InvalidRequest(e))
    })?;
    let out_dir = paths.output_dir()?;
    let pngs: Vec<PathBuf> = (0..request.repeat)
        .map(|i| out_dir.join(format!("{}.png", request.output_stem(i))))
        .collect();
    if !a.force && pngs.iter().all(|p| p.is_file()) {
        return Ok(Output::skipped(json!({ "images": pngs })));
    }

    let mut resolver = GuidanceResolver::new(Some(clip_targets(paths)?));
    let wanted: Vec<&str> = request
        .guidance_sources
        .iter()
        .filter(|s| matches!(s.payload, Payload::Audio(_)))
        .map(|s| s.encoder_id.as_str())
        .collect();
    if !wanted.is_empty() {
        let dir = paths
            .encoders_dir()
            .ok_or_else(|| CliError::Config("audio sources need encoders_dir".into()))?;
        for (id, path) in registry::discover(&dir)? {
            if wanted.contains(&id.as_str()) {
                let loaded = registry::load(&id, &path, &Device::Cpu)?;
                resolver.insert_audio_encoder(id, loaded.encoder);
            }
        }
    }
    let backend = backend(paths)?;
    let images = generate(backend.as_ref(), &resolver, &request, &mut |p| {
        if p.step == p.steps {
            tracing::info!(image = p.image + 1, of = p.images, "image finished");
        }
    })?;
    let written = write_outputs(&out_dir, backend.name(), &request, &images)?;
    Ok(Output::ok(json!({
        "backend": backend.name(),
        "images": written,
        "iterations": images.iter().map(|g| g.iterations).collect::<Vec<_>>(),
    })))
}

fn report(paths: &Paths, a: &ReportArgs) -> Result<Output> {
    let targets = if a.save {
        let dir = paths.output_dir()?;
        Some((dir.join("report.txt"), dir.join("report.json")))
    } else {
        None
    };
    let existing = targets
        .as_ref()
        .filter(|(t, j)| t.is_file() && j.is_file() && !a.force);
    let (text, json_text) = match existing {
        Some((t, j)) => (
            fs::read_to_string(t).map_err(|e| CliError::io(t, e))?,
            fs::read_to_string(j).map_err(|e| CliError::io(j, e))?,
        ),
        None => {
            let evals = a
                .evals
                .iter()
                .map(|p| read_json::<EvaluationRecord>(p))
                .collect::<Result<Vec<_>>>()?;
            let timings = a
                .timings
                .iter()
                .map(|p| read_json::<TimingRecord>(p))
                .collect::<Result<Vec<_>>>()?;
            let report = BenchmarkReport::build(&evals, &timings)?;
            let rendered = (report.to_text(), report.to_json());
            if let Some((t, j)) = &targets {
                write_text(t, &rendered.0)?;
                write_text(j, &rendered.1)?;
            }
            rendered
        }
    };
    Ok(match a.format {
        ReportFormat::Text => Output::Text(text),
        ReportFormat::Json => Output::Json(
            serde_json::from_str(&json_text)
                .map_err(|e| CliError::Config(format!("report.json: {e}")))?,
        ),
    })
}

fn annotate_template(paths: &Paths, a: &AnnotateArgs) -> Result<Output> {
    let dir = match &a.images_dir {
        Some(d) => d.clone(),
        None => paths.output_dir()?,
    };
    let out = dir.join(ANNOTATION_FILE);
    if out.is_file() && !a.force {
        return Ok(Output::skipped(json!({ "annotations": out })));
    }
    let sheets = annotate::templates(&dir, &a.elements, &a.annotator)?;
    write_text(&out, &serde_json::to_string_pretty(&sheets).expect("json"))?;
    Ok(Output::ok(
        json!({ "annotations": out, "sheets": sheets.len() }),
    ))
}

fn serve(paths: &Paths, a: &ServeArgs) -> Result<Output> {
    let s = &paths.file.serve;
    let addr = pick(a.addr.clone(), s.addr.clone(), "127.0.0.1:8080".to_string());
    let queue_capacity = pick(a.queue_capacity, s.queue_capacity, DEFAULT_QUEUE_CAPACITY);
    let loaded = registry::load_all(paths.encoders_dir().as_deref(), &Device::Cpu)?;
    let mut resolver = GuidanceResolver::new(Some(clip_targets(paths)?));
    let mut summaries = Vec::with_capacity(loaded.len());
    for l in loaded {
        resolver.insert_audio_encoder(l.summary.id.clone(), l.encoder);
        summaries.push(l.summary);
    }
    let backend = backend(paths)?;
    let config = ServiceConfig {
        queue_capacity,
        output_dir: paths
            .cli
            .output_dir
            .clone()
            .or(paths.file.paths.output_dir.clone()),
        static_dir: paths.static_dir(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Server(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Server(format!("{addr}: {e}")))?;
        let bound = listener
            .local_addr()
            .map_err(|e| CliError::Server(e.to_string()))?;
        tracing::info!(%bound, backend = backend.name(), encoders = summaries.len(), "listening");
        let app = service::start(backend, resolver, summaries, config);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Server(e.to_string()))?;
        Ok(Output::ok(json!({ "addr": bound.to_string() })))
    })
}
