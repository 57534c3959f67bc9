//! Training an audio encoder and its projection head against frozen CLIP
//! targets, with per-epoch checkpoints and before/after validation.

mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentError, AlignmentLoss, ProjectionBatch};
use crate::clip::{ClipError, TargetSource};
use crate::dataset::{load_wav, DatasetError, DatasetManifest, Split, Trio};
use crate::encoders::{
    build_encoder, load_checkpoint, save_checkpoint, AudioEncoder, Checkpoint, EncoderError,
    EncoderSpec, Mode, NoGradGuard, ProjectionHead, ReferenceEncoder,
};
use crate::metrics::{
    MetricsError, MetricsReport, MomentAccumulator, RawComparisonAccumulator, Stat,
};
use crate::types::{AudioWaveform, EmbeddingMatrix, EMBED_DIM};

pub use optim::{Optimizer, OptimizerKind};

/// Clips encoded per forward pass during validation.
pub const VALIDATION_CHUNK: usize = 256;
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const BEFORE_REPORT_FILE: &str = "validation_before.json";
pub const AFTER_REPORT_FILE: &str = "validation_after.json";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Targets(#[from] ClipError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("training storage failure: {0}")]
    Storage(String),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Storage(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub validate_before: bool,
    pub validate_after: bool,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 32,
            batch_size: 1151,
            learning_rate: 0.001,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            validate_before: true,
            validate_after: true,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig(
                "epochs must be at least 1".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(
                "batch_size must be at least 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One clip and the trio it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub trio_id: String,
    pub audio: AudioWaveform,
}

impl From<&Trio> for TrainingExample {
    fn from(trio: &Trio) -> Self {
        Self {
            trio_id: trio.trio_id.clone(),
            audio: trio.audio.clone(),
        }
    }
}

/// Loads the audio of every trio in `split`, in manifest order.
pub fn load_examples(manifest: &DatasetManifest, split: Split) -> Result<Vec<TrainingExample>> {
    manifest
        .entries_in(split)
        .into_iter()
        .map(|e| {
            Ok(TrainingExample {
                trio_id: e.trio_id.clone(),
                audio: load_wav(&manifest.resolve(&e.audio_path))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportTag {
    Before,
    After,
}

/// The metric battery over a whole split, tagged with when it was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub split: Split,
    pub tag: ReportTag,
    /// Completed training epochs when the report was taken.
    pub epoch: usize,
    pub observations: usize,
    pub metrics: MetricsReport,
}

/// One line of the JSON Lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    /// Mean of the per-batch losses.
    pub mean_loss: f64,
}

/// Shuffle and dropout stream for one epoch; independent of earlier epochs so
/// a resumed run replays the same order.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn projection_rows(rows: Vec<f32>, m: usize, device: &Device) -> Result<ProjectionBatch> {
    Ok(ProjectionBatch::normalized(Tensor::from_vec(
        rows,
        (m, EMBED_DIM),
        device,
    )?)?)
}

fn target_batches(
    targets: &dyn TargetSource,
    ids: &[&str],
    device: &Device,
) -> Result<(ProjectionBatch, ProjectionBatch)> {
    let mut text = Vec::with_capacity(ids.len() * EMBED_DIM);
    let mut image = Vec::with_capacity(ids.len() * EMBED_DIM);
    for id in ids {
        let (t, i) = targets.projections(id)?;
        text.extend(t);
        image.extend(i);
    }
    Ok((
        projection_rows(text, ids.len(), device)?,
        projection_rows(image, ids.len(), device)?,
    ))
}

/// Encoder, head and optimizer state of one training run.
pub struct Trainer {
    encoder: ReferenceEncoder,
    head: ProjectionHead,
    optimizer: Optimizer,
    config: TrainConfig,
    epochs_done: usize,
    loss: AlignmentLoss,
}

fn optimizer_params(
    encoder: &ReferenceEncoder,
    head: &ProjectionHead,
) -> Vec<(String, candle_core::Var)> {
    let mut params: Vec<_> = encoder
        .params()
        .iter()
        .map(|(n, v)| (format!("encoder.{n}"), v.clone()))
        .collect();
    params.push(("head.weight".into(), head.weight().clone()));
    params
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    optimizer: OptimizerKind,
    learning_rate: f64,
    optimizer_steps: u64,
    batch_size: usize,
}

impl Trainer {
    /// Fresh encoder and head, both initialized under `config.seed`.
    pub fn new(spec: &EncoderSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = build_encoder(spec, config.seed)?;
        let head = ProjectionHead::new(config.seed, encoder.device())?;
        let optimizer = Optimizer::new(
            config.optimizer,
            config.learning_rate,
            optimizer_params(&encoder, &head),
        )?;
        Ok(Self {
            encoder,
            head,
            optimizer,
            config,
            epochs_done: 0,
            loss: AlignmentLoss::default(),
        })
    }

    /// Continues the run captured in `checkpoint`.
    pub fn from_checkpoint(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state: TrainState = serde_json::from_value(checkpoint.meta.state.clone())
            .map_err(|e| TrainError::Storage(format!("checkpoint training state: {e}")))?;
        if state.optimizer != config.optimizer {
            return Err(TrainError::InvalidConfig(format!(
                "checkpoint was trained with {}, config asks for {}",
                state.optimizer, config.optimizer
            )));
        }
        if checkpoint.meta.seed != config.seed {
            return Err(TrainError::InvalidConfig(format!(
                "checkpoint seed {} differs from config seed {}",
                checkpoint.meta.seed, config.seed
            )));
        }
        let (encoder, head) = checkpoint.restore(&Device::Cpu)?;
        let mut optimizer = Optimizer::new(
            config.optimizer,
            config.learning_rate,
            optimizer_params(&encoder, &head),
        )?;
        optimizer
            .restore_state(&checkpoint.tensors, state.optimizer_steps)
            .map_err(TrainError::Storage)?;
        Ok(Self {
            encoder,
            head,
            optimizer,
            config,
            epochs_done: checkpoint.meta.epoch,
            loss: AlignmentLoss::default(),
        })
    }

    pub fn encoder(&self) -> &ReferenceEncoder {
        &self.encoder
    }

    pub fn head(&self) -> &ProjectionHead {
        &self.head
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One shuffled pass over `examples`; the last partial batch is kept.
    pub fn train_epoch(
        &mut self,
        examples: &[TrainingExample],
        targets: &dyn TargetSource,
        on_batch: &mut dyn FnMut(&BatchRecord),
    ) -> Result<EpochSummary> {
        if examples.is_empty() {
            return Err(TrainError::InvalidConfig("training split is empty".into()));
        }
        let epoch = self.epochs_done + 1;
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let device = self.encoder.device().clone();
        let mut total = 0.0;
        let mut batches = 0;
        for (batch, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let start = Instant::now();
            let waves: Vec<AudioWaveform> =
                chunk.iter().map(|&i| examples[i].audio.clone()).collect();
            let ids: Vec<&str> = chunk
                .iter()
                .map(|&i| examples[i].trio_id.as_str())
                .collect();
            let (text, image) = target_batches(targets, &ids, &device)?;
            let x = AudioWaveform::batch_tensor(&waves, &device)?;
            let raw = self.encoder.forward(&x, &mut Mode::Train(&mut rng))?;
            let audio = self.head.project_batch(&raw)?;
            let loss = self.loss.loss(&audio, &text, &image)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    batch,
                    loss: value,
                });
            }
            self.optimizer.backward_step(&loss)?;
            on_batch(&BatchRecord {
                epoch,
                batch,
                size: chunk.len(),
                loss: value,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            total += value;
            batches += 1;
        }
        self.epochs_done = epoch;
        Ok(EpochSummary {
            epoch,
            batches,
            mean_loss: total / batches as f64,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let state = TrainState {
            optimizer: self.config.optimizer,
            learning_rate: self.config.learning_rate,
            optimizer_steps: self.optimizer.step_count(),
            batch_size: self.config.batch_size,
        };
        let state = serde_json::to_value(state).map_err(|e| TrainError::Storage(e.to_string()))?;
        let mut checkpoint =
            Checkpoint::capture(&self.encoder, &self.head, self.epochs_done, state)?;
        checkpoint.tensors.extend(self.optimizer.state_tensors()?);
        Ok(checkpoint)
    }

    /// Writes `epoch-NNNN.safetensors` into the checkpoint directory.
    pub fn save(&self) -> Result<PathBuf> {
        let path = checkpoint_path(&self.config.checkpoint_dir, self.epochs_done);
        save_checkpoint(&path, &self.checkpoint()?)?;
        Ok(path)
    }

    pub fn validate(
        &self,
        examples: &[TrainingExample],
        targets: &dyn TargetSource,
        split: Split,
        tag: ReportTag,
    ) -> Result<ValidationReport> {
        Ok(ValidationReport {
            split,
            tag,
            epoch: self.epochs_done,
            observations: examples.len(),
            metrics: evaluate(&self.encoder, &self.head, examples, targets, false)?,
        })
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.safetensors"))
}

/// The highest-numbered epoch checkpoint in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch = name
                .strip_prefix("epoch-")?
                .strip_suffix(".safetensors")?
                .parse()
                .ok()?;
            Some((epoch, e.path()))
        })
        .max_by_key(|(epoch, _)| *epoch)
}

/// The metric battery over `examples` as one similarity matrix, in evaluation mode.
///
/// With `include_raw`, the raw `77 x 768` outputs are also compared against the
/// cached text states (the `rt` statistics).
pub fn evaluate(
    encoder: &dyn AudioEncoder,
    head: &ProjectionHead,
    examples: &[TrainingExample],
    targets: &dyn TargetSource,
    include_raw: bool,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(TrainError::InvalidConfig(
            "cannot evaluate an empty split".into(),
        ));
    }
    let _no_grad = NoGradGuard::new();
    let device = head.weight().device().clone();
    let m = examples.len();
    let mut audio_rows = Vec::with_capacity(m * EMBED_DIM);
    let mut text_rows = Vec::with_capacity(m * EMBED_DIM);
    let mut image_rows = Vec::with_capacity(m * EMBED_DIM);
    let mut text_acc = MomentAccumulator::new(EMBED_DIM);
    let mut image_acc = MomentAccumulator::new(EMBED_DIM);
    let mut raw_acc = include_raw.then(RawComparisonAccumulator::default);

    for chunk in examples.chunks(VALIDATION_CHUNK) {
        let waves: Vec<AudioWaveform> = chunk.iter().map(|e| e.audio.clone()).collect();
        let raw = encoder.encode_batch(&waves)?.to_device(&device)?;
        let audio = head.project_batch(&raw)?.to_rows()?;
        for (example, a) in chunk.iter().zip(&audio) {
            let (t, i) = targets.projections(&example.trio_id)?;
            let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            text_acc.push_f32(&a32, &t);
            image_acc.push_f32(&a32, &i);
            audio_rows.extend(a32);
            text_rows.extend(t);
            image_rows.extend(i);
        }
        if let Some(acc) = raw_acc.as_mut() {
            for (example, out) in chunk
                .iter()
                .zip(EmbeddingMatrix::batch_from_tensor(&raw).map_err(EncoderError::from)?)
            {
                acc.push(&out, &targets.text_raw(&example.trio_id)?);
            }
        }
    }

    let audio = projection_rows(audio_rows, m, &device)?;
    let text = projection_rows(text_rows, m, &device)?;
    let image = projection_rows(image_rows, m, &device)?;
    let loss_fn = AlignmentLoss::default();
    let tceocs_t = loss_fn.tceocs(&audio, &text)?;
    let tceocs_i = loss_fn.tceocs(&audio, &image)?;
    let r2_t = text_acc.r2_stats()?;
    let r2_i = image_acc.r2_stats()?;
    let report = MetricsReport {
        loss: (tceocs_t + tceocs_i) / AlignmentLoss::DIVISOR,
        tceocs_t,
        tceocs_i,
        mse_t: Stat::from_f64(text_acc.mse_mean()?),
        mse_i: Stat::from_f64(image_acc.mse_mean()?),
        mse_rt: None,
        r2_mean_t: r2_t.mean,
        r2_mean_i: r2_i.mean,
        r2_mean_rt: None,
        r2_std_t: r2_t.std,
        r2_std_i: r2_i.std,
        r2_std_rt: None,
        r2_excluded_t: r2_t.excluded,
        r2_excluded_i: r2_i.excluded,
        r2_excluded_rt: None,
        tau_seconds: None,
    };
    Ok(match raw_acc {
        Some(acc) => report.with_raw(&acc.finish()?),
        None => report,
    })
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub before: Option<ValidationReport>,
    pub after: Option<ValidationReport>,
    pub epochs: Vec<EpochSummary>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json =
        serde_json::to_string_pretty(value).map_err(|e| TrainError::Storage(e.to_string()))?;
    crate::dataset::write_atomic(path, json.as_bytes())?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| TrainError::Storage(format!("{}: {e}", path.display())))
}

/// Trains on `train`, validating on `val`, resuming from the newest
/// checkpoint in `config.checkpoint_dir` when one exists.
pub fn train_examples(
    spec: &EncoderSpec,
    train: &[TrainingExample],
    val: &[TrainingExample],
    targets: &dyn TargetSource,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("training split is empty".into()));
    }
    if (config.validate_before || config.validate_after) && val.is_empty() {
        return Err(TrainError::InvalidConfig(
            "validation split is empty".into(),
        ));
    }
    let dir = &config.checkpoint_dir;
    fs::create_dir_all(dir)?;
    let mut trainer = match latest_checkpoint(dir) {
        Some((_, path)) => {
            let checkpoint = load_checkpoint(&path)?;
            if &checkpoint.meta.spec != spec {
                return Err(TrainError::InvalidConfig(format!(
                    "{} holds a different encoder spec",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(&checkpoint, config.clone())?
        }
        None => Trainer::new(spec, config.clone())?,
    };

    let before_path = dir.join(BEFORE_REPORT_FILE);
    let mut before = read_json::<ValidationReport>(&before_path)?;
    if config.validate_before && before.is_none() && trainer.epochs_done() == 0 {
        let report = trainer.validate(val, targets, Split::Val, ReportTag::Before)?;
        write_json(&before_path, &report)?;
        before = Some(report);
    }

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(TRAIN_LOG_FILE))?;
    let mut log_error = None;
    let mut epochs = Vec::new();
    let mut checkpoint = latest_checkpoint(dir).map(|(_, p)| p);
    while trainer.epochs_done() < config.epochs {
        let summary = trainer.train_epoch(train, targets, &mut |record| {
            let line = serde_json::to_string(record).expect("batch records serialize");
            if let Err(e) = writeln!(log, "{line}") {
                log_error.get_or_insert(e);
            }
        })?;
        if let Some(e) = log_error.take() {
            return Err(e.into());
        }
        tracing::info!(
            epoch = summary.epoch,
            loss = summary.mean_loss,
            "epoch finished"
        );
        checkpoint = Some(trainer.save()?);
        epochs.push(summary);
    }
    let checkpoint = match checkpoint {
        Some(path) => path,
        None => trainer.save()?,
    };

    let after = if config.validate_after {
        let report = trainer.validate(val, targets, Split::Val, ReportTag::After)?;
        write_json(&dir.join(AFTER_REPORT_FILE), &report)?;
        Some(report)
    } else {
        None
    };
    Ok(TrainOutcome {
        checkpoint,
        before,
        after,
        epochs,
    })
}

/// [`train_examples`] over the train and val splits of a manifest.
pub fn train(
    spec: &EncoderSpec,
    manifest: &DatasetManifest,
    targets: &dyn TargetSource,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let train = load_examples(manifest, Split::Train)?;
    let val = load_examples(manifest, Split::Val)?;
    train_examples(spec, &train, &val, targets, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{ProjectionTargets, SurrogateClip};
    use crate::dataset::synth_trio;
    use crate::encoders::{reference_spec, EchoEncoder};

    fn fixture(n: usize, seed: u64) -> (Vec<TrainingExample>, ProjectionTargets) {
        let trios: Vec<Trio> = (0..n).map(|i| synth_trio(seed, i)).collect();
        let targets = ProjectionTargets::encode(&SurrogateClip::new(), &trios).unwrap();
        (trios.iter().map(TrainingExample::from).collect(), targets)
    }

    fn quick_config(dir: &Path) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 9,
            checkpoint_dir: dir.to_path_buf(),
            validate_before: false,
            validate_after: false,
            optimizer: OptimizerKind::Adam,
        }
    }

    #[test]
    fn config_bounds() {
        let mut c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (32, 1151, 0.001));
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c.batch_size = 2;
        c.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn echo_encoder_scores_perfectly() {
        let (examples, targets) = fixture(12, 1);
        let mut echo = EchoEncoder::new("echo");
        for e in &examples {
            echo.insert(&e.audio, targets.projections(&e.trio_id).unwrap().0)
                .unwrap();
        }
        let head = ProjectionHead::identity(&Device::Cpu).unwrap();
        let report = evaluate(&echo, &head, &examples, &targets, false).unwrap();
        assert!(report.mse_t.value().unwrap() < 1e-12);
        assert!((report.r2_mean_t.value().unwrap() - 1.0).abs() < 1e-9);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(
            serde_json::from_str::<MetricsReport>(&json).unwrap(),
            report
        );
    }

    #[test]
    fn missing_targets_surface_as_cache_miss() {
        let (examples, _) = fixture(4, 1);
        let spec = reference_spec("tiny").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(&spec, quick_config(dir.path())).unwrap();
        let err = trainer
            .train_epoch(&examples, &ProjectionTargets::new(), &mut |_| {})
            .unwrap_err();
        assert!(matches!(err, TrainError::Targets(ClipError::CacheMiss(_))));
    }

    #[test]
    fn resume_reproduces_next_epoch_bitwise() {
        let (examples, targets) = fixture(10, 2);
        let spec = reference_spec("tiny").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(dir.path());

        let mut straight = Trainer::new(&spec, config.clone()).unwrap();
        straight
            .train_epoch(&examples, &targets, &mut |_| {})
            .unwrap();
        let saved = straight.save().unwrap();
        straight
            .train_epoch(&examples, &targets, &mut |_| {})
            .unwrap();

        let mut resumed =
            Trainer::from_checkpoint(&load_checkpoint(&saved).unwrap(), config).unwrap();
        assert_eq!(resumed.epochs_done(), 1);
        resumed
            .train_epoch(&examples, &targets, &mut |_| {})
            .unwrap();

        let a = straight.checkpoint().unwrap();
        let b = resumed.checkpoint().unwrap();
        assert_eq!(a.tensors, b.tensors);
    }

    #[test]
    fn train_writes_log_checkpoints_and_reports() {
        let (examples, targets) = fixture(12, 3);
        let spec = reference_spec("tiny").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.validate_before = true;
        config.validate_after = true;
        let outcome =
            train_examples(&spec, &examples[..8], &examples[8..], &targets, &config).unwrap();
        assert_eq!(outcome.epochs.len(), 2);
        assert_eq!(outcome.checkpoint, checkpoint_path(dir.path(), 2));
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 4);
        let first: BatchRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!((first.epoch, first.batch, first.size), (1, 0, 4));
        assert_eq!(outcome.before.unwrap().tag, ReportTag::Before);
        assert_eq!(outcome.after.as_ref().unwrap().epoch, 2);

        // rerunning with the same config finds the work done
        let again =
            train_examples(&spec, &examples[..8], &examples[8..], &targets, &config).unwrap();
        assert!(again.epochs.is_empty());
        assert_eq!(again.after.unwrap().metrics, outcome.after.unwrap().metrics);
    }

    #[test]
    fn frozen_targets_are_untouched() {
        let (examples, targets) = fixture(6, 4);
        let before = targets.projections(&examples[0].trio_id).unwrap();
        let spec = reference_spec("tiny").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(&spec, quick_config(dir.path())).unwrap();
        trainer
            .train_epoch(&examples, &targets, &mut |_| {})
            .unwrap();
        assert_eq!(targets.projections(&examples[0].trio_id).unwrap(), before);
    }
}
