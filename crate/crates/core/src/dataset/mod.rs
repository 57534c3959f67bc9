//! Trio datasets: WAV + PNG + caption, a JSON Lines manifest, split files,
//! validation, and deterministic synthetic data.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl   one {"schema_version", "trio_id", "audio_path", "image_path", "text"} per line
//! splits.json      {"schema_version", "seed", "assignments": {trio_id: "train" | "val" | "test"}}
//! audio/*.wav      1 s, 16 kHz, mono, PCM16
//! images/*.png     512x512 RGB
//! ```
//!
//! Paths inside the manifest are relative to the dataset directory.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{AudioWaveform, CLIP_SAMPLES, IMAGE_SIDE, SAMPLE_RATE};

pub use synth::{
    synth_audio, synth_caption, synth_dataset, synth_image, synth_trio, synth_trio_id,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const MAX_CAPTION_WORDS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: bad audio format: {reason}")]
    BadAudioFormat { path: String, reason: String },
    #[error("{path}: bad image: {reason}")]
    BadImage { path: String, reason: String },
    #[error("bad text: {0}")]
    BadText(String),
    #[error("need more than {requested} entries for the requested splits, have {available}")]
    InsufficientData { requested: usize, available: usize },
    #[error("duplicate trio id {0}")]
    DuplicateId(String),
    #[error("{} invalid entries: {}", .0.len(), .0.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; "))]
    InvalidEntries(Vec<(String, String)>),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::StorageFailure(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::InvalidRequest(format!(
                "unknown split {other:?}"
            ))),
        }
    }
}

fn manifest_schema_version() -> u32 {
    MANIFEST_SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    #[serde(default = "manifest_schema_version")]
    pub schema_version: u32,
    pub trio_id: String,
    pub audio_path: PathBuf,
    pub image_path: PathBuf,
    pub text: String,
}

impl DatasetEntry {
    pub fn new(
        trio_id: impl Into<String>,
        audio_path: PathBuf,
        image_path: PathBuf,
        text: impl Into<String>,
    ) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            trio_id: trio_id.into(),
            audio_path,
            image_path,
            text: text.into(),
        }
    }
}

/// One validated observation held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trio {
    pub trio_id: String,
    pub audio: AudioWaveform,
    pub image: RgbImage,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitFile {
    schema_version: u32,
    seed: u64,
    assignments: BTreeMap<String, Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub split: BTreeMap<String, Split>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn entries_in(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries
            .iter()
            .filter(|e| self.split.get(&e.trio_id) == Some(&split))
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.values().filter(|&&s| s == split).count()
    }

    /// Writes `manifest.jsonl` and `splits.json` into `self.root`.
    pub fn write(&self) -> Result<(), DatasetError> {
        fs::create_dir_all(&self.root)?;
        let mut lines = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut lines, e)
                .map_err(|e| DatasetError::StorageFailure(e.to_string()))?;
            lines.push(b'\n');
        }
        write_atomic(&self.root.join(MANIFEST_FILE), &lines)?;
        let splits = SplitFile {
            schema_version: MANIFEST_SCHEMA_VERSION,
            seed: self.seed,
            assignments: self.split.clone(),
        };
        let json = serde_json::to_vec_pretty(&splits)
            .map_err(|e| DatasetError::StorageFailure(e.to_string()))?;
        write_atomic(&self.root.join(SPLITS_FILE), &json)
    }

    /// Reads a dataset directory. Entries without a split assignment are training data.
    pub fn read(root: &Path) -> Result<Self, DatasetError> {
        let file = fs::File::open(root.join(MANIFEST_FILE)).map_err(|e| {
            DatasetError::StorageFailure(format!("{}: {e}", root.join(MANIFEST_FILE).display()))
        })?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: DatasetEntry =
                serde_json::from_str(&line).map_err(|e| DatasetError::Manifest {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            if entry.schema_version != MANIFEST_SCHEMA_VERSION {
                return Err(DatasetError::Manifest {
                    line: i + 1,
                    reason: format!("unsupported schema_version {}", entry.schema_version),
                });
            }
            if !seen.insert(entry.trio_id.clone()) {
                return Err(DatasetError::DuplicateId(entry.trio_id));
            }
            entries.push(entry);
        }
        let split_path = root.join(SPLITS_FILE);
        let (mut split, seed) = if split_path.exists() {
            let s: SplitFile = serde_json::from_slice(&fs::read(&split_path)?).map_err(|e| {
                DatasetError::StorageFailure(format!("{}: {e}", split_path.display()))
            })?;
            (s.assignments, s.seed)
        } else {
            (BTreeMap::new(), 0)
        };
        for e in &entries {
            split.entry(e.trio_id.clone()).or_insert(Split::Train);
        }
        split.retain(|id, _| seen.contains(id));
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            split,
            seed,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a WAV file that must be exactly 1 s of 16 kHz mono PCM16.
pub fn load_wav(path: &Path) -> Result<AudioWaveform, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::BadAudioFormat {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    decode_wav(&bytes, &path.display().to_string())
}

/// [`load_wav`] over in-memory bytes; `label` names the source in errors.
pub fn decode_wav(bytes: &[u8], label: &str) -> Result<AudioWaveform, DatasetError> {
    let bad = |reason: String| DatasetError::BadAudioFormat {
        path: label.to_string(),
        reason,
    };
    let reader =
        hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(|e| bad(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(bad(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!(
            "{} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(bad(format!(
            "{}-bit {:?} samples, expected 16-bit integer PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if reader.duration() as usize != CLIP_SAMPLES {
        return Err(bad(format!(
            "{} samples, expected {CLIP_SAMPLES}",
            reader.duration()
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    AudioWaveform::new(samples).map_err(|e| bad(e.to_string()))
}

pub fn write_wav(path: &Path, wave: &AudioWaveform) -> Result<(), DatasetError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let storage =
        |e: hound::Error| DatasetError::StorageFailure(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(storage)?;
    for &s in wave.samples() {
        writer.write_sample(s).map_err(storage)?;
    }
    writer.finalize().map_err(storage)
}

/// WAV file bytes for `wave` (16 kHz mono PCM16).
pub fn encode_wav(wave: &AudioWaveform) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).expect("in-memory writer");
        for &s in wave.samples() {
            writer.write_sample(s).expect("in-memory write");
        }
        writer.finalize().expect("in-memory finalize");
    }
    cursor.into_inner()
}

/// PNG file bytes for `image`.
pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut cursor = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut cursor, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    cursor.into_inner()
}

/// Reads a PNG that must be 512x512 8-bit RGB.
pub fn load_image(path: &Path) -> Result<RgbImage, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::BadImage {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    decode_image(&bytes, &path.display().to_string())
}

/// [`load_image`] over in-memory bytes; `label` names the source in errors.
pub fn decode_image(bytes: &[u8], label: &str) -> Result<RgbImage, DatasetError> {
    let bad = |reason: String| DatasetError::BadImage {
        path: label.to_string(),
        reason,
    };
    let img = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| bad(e.to_string()))?
        .decode()
        .map_err(|e| bad(e.to_string()))?;
    let image::DynamicImage::ImageRgb8(rgb) = img else {
        return Err(bad(format!(
            "color type {:?}, expected 8-bit RGB",
            img.color()
        )));
    };
    if rgb.dimensions() != (IMAGE_SIDE, IMAGE_SIDE) {
        return Err(bad(format!(
            "{}x{}, expected {IMAGE_SIDE}x{IMAGE_SIDE}",
            rgb.width(),
            rgb.height()
        )));
    }
    Ok(rgb)
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<(), DatasetError> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DatasetError::StorageFailure(format!("{}: {e}", path.display())))
}

/// Caption rule: nonempty and at most 16 whitespace-separated words.
pub fn validate_text(text: &str) -> Result<(), DatasetError> {
    let words = text.split_whitespace().count();
    if words == 0 {
        return Err(DatasetError::BadText("caption is empty".into()));
    }
    if words > MAX_CAPTION_WORDS {
        return Err(DatasetError::BadText(format!(
            "caption has {words} words, limit is {MAX_CAPTION_WORDS}"
        )));
    }
    Ok(())
}

/// Decodes and checks one entry, resolving paths against `root`.
pub fn validate_trio(entry: &DatasetEntry, root: &Path) -> Result<Trio, DatasetError> {
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    };
    validate_text(&entry.text)?;
    let audio = load_wav(&resolve(&entry.audio_path))?;
    let image = load_image(&resolve(&entry.image_path))?;
    Ok(Trio {
        trio_id: entry.trio_id.clone(),
        audio,
        image,
        text: entry.text.clone(),
    })
}

/// Validates every entry, failing with the full list of offenders.
pub fn validate_manifest(manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let offenders: Vec<(String, String)> = manifest
        .entries
        .iter()
        .filter_map(|e| {
            validate_trio(e, &manifest.root)
                .err()
                .map(|err| (e.trio_id.clone(), err.to_string()))
        })
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(DatasetError::InvalidEntries(offenders))
    }
}

/// Assigns `val_count` and `test_count` entries uniformly at random under `seed`;
/// everything else is training data.
pub fn split_manifest(
    entries: Vec<DatasetEntry>,
    root: &Path,
    val_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    let requested = val_count + test_count;
    if requested >= entries.len() {
        return Err(DatasetError::InsufficientData {
            requested,
            available: entries.len(),
        });
    }
    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.trio_id.as_str()) {
            return Err(DatasetError::DuplicateId(e.trio_id.clone()));
        }
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = BTreeMap::new();
    for (rank, &i) in order.iter().enumerate() {
        let s = if rank < val_count {
            Split::Val
        } else if rank < requested {
            Split::Test
        } else {
            Split::Train
        };
        split.insert(entries[i].trio_id.clone(), s);
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        split,
        seed,
    })
}
