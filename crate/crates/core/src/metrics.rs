//! Regression statistics over projection and raw-embedding predictions:
//! mean squared error, coefficient of determination, and batch timing.
//!
//! Statistics are accumulated one observation at a time (Welford updates per
//! variable), so the raw 77x768 comparison over tens of thousands of
//! observations never needs the full `M x 59136` matrices in memory.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::encoders::AudioEncoder;
use crate::types::{AudioWaveform, EmbeddingMatrix, EMBED_DIM, SEQ_LEN};

/// Per-variable R^2 magnitudes above this are reported as invalid.
pub const R2_INVALID_MAGNITUDE: f64 = 1e308;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction set is empty ({rows}x{cols})")]
    EmptySet { rows: usize, cols: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("R^2 needs at least two observations, got {0}")]
    TooFewObservations(usize),
    #[error("all {0} variables have constant ground truth")]
    ZeroVarianceVariable(usize),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("encoder failed on batch {batch}: {message}")]
    EncoderFailure { batch: usize, message: String },
    #[error("invalid timing request: {0}")]
    InvalidRequest(&'static str),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// A statistic that may have overflowed; serialized as a number or `"invalid"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stat {
    Value(f64),
    Invalid,
}

impl Stat {
    pub fn from_f64(v: f64) -> Self {
        if v.is_finite() && v.abs() <= R2_INVALID_MAGNITUDE {
            Stat::Value(v)
        } else {
            Stat::Invalid
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Stat::Value(v) => Some(v),
            Stat::Invalid => None,
        }
    }

    pub fn is_invalid(self) -> bool {
        matches!(self, Stat::Invalid)
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stat::Value(v) => write!(f, "{v}"),
            Stat::Invalid => f.write_str("invalid"),
        }
    }
}

impl Serialize for Stat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Stat::Value(v) => s.serialize_f64(*v),
            Stat::Invalid => s.serialize_str("invalid"),
        }
    }
}

impl<'de> Deserialize<'de> for Stat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Stat::Value(v)),
            Repr::Text(s) if s == "invalid" => Ok(Stat::Invalid),
            Repr::Text(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"invalid\", got {s:?}"
            ))),
        }
    }
}

/// Paired `M x N` predictions and ground truth, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    rows: usize,
    cols: usize,
    predictions: Vec<f64>,
    ground_truth: Vec<f64>,
}

impl PredictionSet {
    pub fn new(
        rows: usize,
        cols: usize,
        predictions: Vec<f64>,
        ground_truth: Vec<f64>,
    ) -> Result<Self> {
        for v in [&predictions, &ground_truth] {
            if v.len() != rows * cols {
                return Err(MetricsError::ShapeMismatch {
                    left: vec![rows, cols],
                    right: vec![v.len()],
                });
            }
        }
        for (i, (p, t)) in predictions.iter().zip(&ground_truth).enumerate() {
            if !p.is_finite() || !t.is_finite() {
                return Err(MetricsError::NonFinite {
                    row: i / cols.max(1),
                    col: i % cols.max(1),
                });
            }
        }
        Ok(Self {
            rows,
            cols,
            predictions,
            ground_truth,
        })
    }

    pub fn from_rows(predictions: &[Vec<f64>], ground_truth: &[Vec<f64>]) -> Result<Self> {
        let rows = predictions.len();
        let cols = predictions.first().map_or(0, Vec::len);
        let shape = |m: &[Vec<f64>]| vec![m.len(), m.first().map_or(0, Vec::len)];
        if shape(ground_truth) != vec![rows, cols]
            || predictions
                .iter()
                .chain(ground_truth)
                .any(|r| r.len() != cols)
        {
            return Err(MetricsError::ShapeMismatch {
                left: shape(predictions),
                right: shape(ground_truth),
            });
        }
        Self::new(rows, cols, predictions.concat(), ground_truth.concat())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn accumulate(&self) -> MomentAccumulator {
        let mut acc = MomentAccumulator::new(self.cols);
        for (p, t) in self
            .predictions
            .chunks_exact(self.cols.max(1))
            .zip(self.ground_truth.chunks_exact(self.cols.max(1)))
        {
            acc.push(p.iter().copied(), t.iter().copied());
        }
        acc
    }
}

/// Running per-variable moments of ground truth and squared error.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    count: usize,
    truth_mean: Vec<f64>,
    truth_m2: Vec<f64>,
    sse: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(variables: usize) -> Self {
        Self {
            count: 0,
            truth_mean: vec![0.0; variables],
            truth_m2: vec![0.0; variables],
            sse: vec![0.0; variables],
        }
    }

    pub fn variables(&self) -> usize {
        self.sse.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds one observation. Both iterators must yield `variables()` items.
    pub fn push(
        &mut self,
        prediction: impl IntoIterator<Item = f64>,
        truth: impl IntoIterator<Item = f64>,
    ) {
        self.count += 1;
        let n = self.count as f64;
        let slots = self
            .truth_mean
            .iter_mut()
            .zip(self.truth_m2.iter_mut())
            .zip(self.sse.iter_mut());
        for (((mean, m2), sse), (p, x)) in slots.zip(prediction.into_iter().zip(truth)) {
            let delta = x - *mean;
            *mean += delta / n;
            *m2 += delta * (x - *mean);
            *sse += (x - p) * (x - p);
        }
    }

    pub fn push_f32(&mut self, prediction: &[f32], truth: &[f32]) {
        debug_assert_eq!(prediction.len(), self.variables());
        debug_assert_eq!(truth.len(), self.variables());
        self.push(
            prediction.iter().map(|&v| v as f64),
            truth.iter().map(|&v| v as f64),
        );
    }

    pub fn mse_mean(&self) -> Result<f64> {
        if self.count == 0 || self.variables() == 0 {
            return Err(MetricsError::EmptySet {
                rows: self.count,
                cols: self.variables(),
            });
        }
        let total: f64 = self.sse.iter().sum();
        Ok(total / (self.count as f64 * self.variables() as f64))
    }

    pub fn r2_stats(&self) -> Result<R2Stats> {
        if self.variables() == 0 {
            return Err(MetricsError::EmptySet {
                rows: self.count,
                cols: 0,
            });
        }
        if self.count < 2 {
            return Err(MetricsError::TooFewObservations(self.count));
        }
        let per_variable: Vec<f64> = self
            .sse
            .iter()
            .zip(&self.truth_m2)
            .filter(|(_, &m2)| m2 > 0.0)
            .map(|(&sse, &m2)| 1.0 - sse / m2)
            .collect();
        let excluded = self.variables() - per_variable.len();
        if per_variable.is_empty() {
            return Err(MetricsError::ZeroVarianceVariable(excluded));
        }
        Ok(R2Stats::summarize(&per_variable, excluded))
    }
}

/// Mean and population standard deviation of per-variable R^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R2Stats {
    pub mean: Stat,
    pub std: Stat,
    /// Variables dropped because their ground truth never varies.
    pub excluded: usize,
}

impl R2Stats {
    fn summarize(values: &[f64], excluded: usize) -> Self {
        let n = values.len() as f64;
        let overflowed = values
            .iter()
            .any(|v| !v.is_finite() || v.abs() > R2_INVALID_MAGNITUDE);
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean: Stat::from_f64(mean),
            std: if overflowed {
                Stat::Invalid
            } else {
                Stat::from_f64(var.sqrt())
            },
            excluded,
        }
    }
}

/// `(1/(M N)) sum_j sum_k (pred - truth)^2`.
pub fn mse_mean(p: &PredictionSet) -> Result<f64> {
    if p.rows == 0 || p.cols == 0 {
        return Err(MetricsError::EmptySet {
            rows: p.rows,
            cols: p.cols,
        });
    }
    p.accumulate().mse_mean()
}

/// Per-variable `R^2 = 1 - SSE / SST`, summarized across variables.
pub fn r2_stats(p: &PredictionSet) -> Result<R2Stats> {
    if p.rows == 0 || p.cols == 0 {
        return Err(MetricsError::EmptySet {
            rows: p.rows,
            cols: p.cols,
        });
    }
    p.accumulate().r2_stats()
}

/// Metrics between raw encoder outputs and CLIP text hidden states, with
/// every one of the 77*768 entries treated as its own variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawComparison {
    pub mse: f64,
    pub r2: R2Stats,
}

/// Streaming form of [`raw_vs_text_metrics`].
#[derive(Debug, Clone)]
pub struct RawComparisonAccumulator {
    inner: MomentAccumulator,
}

impl Default for RawComparisonAccumulator {
    fn default() -> Self {
        Self {
            inner: MomentAccumulator::new(SEQ_LEN * EMBED_DIM),
        }
    }
}

impl RawComparisonAccumulator {
    pub fn push(&mut self, audio_raw: &EmbeddingMatrix, text_raw: &EmbeddingMatrix) {
        self.inner.push_f32(audio_raw.values(), text_raw.values());
    }

    pub fn finish(&self) -> Result<RawComparison> {
        Ok(RawComparison {
            mse: self.inner.mse_mean()?,
            r2: self.inner.r2_stats()?,
        })
    }
}

pub fn raw_vs_text_metrics(
    audio_raw: &[EmbeddingMatrix],
    text_raw: &[EmbeddingMatrix],
) -> Result<RawComparison> {
    if audio_raw.len() != text_raw.len() {
        return Err(MetricsError::ShapeMismatch {
            left: vec![audio_raw.len(), SEQ_LEN, EMBED_DIM],
            right: vec![text_raw.len(), SEQ_LEN, EMBED_DIM],
        });
    }
    let mut acc = RawComparisonAccumulator::default();
    for (a, t) in audio_raw.iter().zip(text_raw) {
        acc.push(a, t);
    }
    acc.finish()
}

/// Batch sizes used to feed `dataset_size` observations: full batches plus
/// one remainder batch.
pub fn batch_plan(dataset_size: usize, batch_size: usize) -> Vec<usize> {
    if batch_size == 0 {
        return Vec::new();
    }
    let mut plan = vec![batch_size; dataset_size / batch_size];
    if dataset_size % batch_size != 0 {
        plan.push(dataset_size % batch_size);
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauMeasurement {
    /// Mean wall time per batch, in seconds.
    pub tau_seconds: f64,
    pub batches: Vec<usize>,
    pub repeats: usize,
    /// Mean wall time of one full pass over the dataset.
    pub pass_seconds: f64,
}

/// Times full passes of `dataset_size` clips through `encoder`.
///
/// Batches draw clips from `pool` cyclically. One untimed warm-up pass runs
/// first; the result is the mean pass time divided by the number of batches.
pub fn measure_tau(
    encoder: &dyn AudioEncoder,
    pool: &[AudioWaveform],
    dataset_size: usize,
    batch_size: usize,
    repeats: usize,
) -> Result<TauMeasurement> {
    if dataset_size == 0 || batch_size == 0 || repeats == 0 {
        return Err(MetricsError::InvalidRequest(
            "dataset_size, batch_size and repeats must be at least 1",
        ));
    }
    if pool.is_empty() {
        return Err(MetricsError::InvalidRequest("waveform pool is empty"));
    }
    let plan = batch_plan(dataset_size, batch_size);
    let mut cursor = 0usize;
    let batches: Vec<Vec<AudioWaveform>> = plan
        .iter()
        .map(|&len| {
            let batch = (0..len)
                .map(|i| pool[(cursor + i) % pool.len()].clone())
                .collect();
            cursor += len;
            batch
        })
        .collect();

    let run_pass = || -> Result<()> {
        for (i, batch) in batches.iter().enumerate() {
            encoder
                .encode_batch(batch)
                .map_err(|e| MetricsError::EncoderFailure {
                    batch: i,
                    message: e.to_string(),
                })?;
        }
        Ok(())
    };

    run_pass()?;
    let mut total = 0.0;
    for _ in 0..repeats {
        let start = Instant::now();
        run_pass()?;
        total += start.elapsed().as_secs_f64();
    }
    let pass_seconds = total / repeats as f64;
    Ok(TauMeasurement {
        tau_seconds: pass_seconds / plan.len() as f64,
        batches: plan,
        repeats,
        pass_seconds,
    })
}

/// One row of the validation/test tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub loss: f64,
    pub tceocs_t: f64,
    pub tceocs_i: f64,
    pub mse_t: Stat,
    pub mse_i: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse_rt: Option<Stat>,
    pub r2_mean_t: Stat,
    pub r2_mean_i: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2_mean_rt: Option<Stat>,
    pub r2_std_t: Stat,
    pub r2_std_i: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2_std_rt: Option<Stat>,
    #[serde(default)]
    pub r2_excluded_t: usize,
    #[serde(default)]
    pub r2_excluded_i: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2_excluded_rt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_seconds: Option<f64>,
}

impl MetricsReport {
    pub fn with_raw(mut self, raw: &RawComparison) -> Self {
        self.mse_rt = Some(Stat::from_f64(raw.mse));
        self.r2_mean_rt = Some(raw.r2.mean);
        self.r2_std_rt = Some(raw.r2.std);
        self.r2_excluded_rt = Some(raw.r2.excluded);
        self
    }

    pub fn with_tau(mut self, tau_seconds: f64) -> Self {
        self.tau_seconds = Some(tau_seconds);
        self
    }

    /// `(name, value, higher_is_better)` for every populated metric, in table order.
    pub fn rows(&self) -> Vec<(&'static str, Stat, bool)> {
        let mut rows = vec![("loss", Stat::from_f64(self.loss), false)];
        if let Some(tau) = self.tau_seconds {
            rows.push(("tau_seconds", Stat::from_f64(tau), false));
        }
        rows.extend([
            ("tceocs_t", Stat::from_f64(self.tceocs_t), false),
            ("mse_t", self.mse_t, false),
            ("r2_mean_t", self.r2_mean_t, true),
            ("r2_std_t", self.r2_std_t, false),
            ("tceocs_i", Stat::from_f64(self.tceocs_i), false),
            ("mse_i", self.mse_i, false),
            ("r2_mean_i", self.r2_mean_i, true),
            ("r2_std_i", self.r2_std_i, false),
        ]);
        if let (Some(m), Some(r), Some(s)) = (self.mse_rt, self.r2_mean_rt, self.r2_std_rt) {
            rows.extend([
                ("mse_rt", m, false),
                ("r2_mean_rt", r, true),
                ("r2_std_rt", s, false),
            ]);
        }
        rows
    }
}
