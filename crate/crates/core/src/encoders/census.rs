//! Layer census: how many layers of each kind an encoder contains, how many
//! scalars it trains, and how many times an output fans out to several layers.
//!
//! Kind names follow the PyTorch/torchaudio class names used when encoders are
//! compared side by side.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    AdaptiveAvgPool1d,
    AdaptiveMaxPool1d,
    AmplitudeToDB,
    Conv1d,
    Dropout,
    #[serde(rename = "GELU")]
    Gelu,
    LayerNorm,
    Linear,
    MelScale,
    MelSpectrogram,
    ModuleList,
    MultiheadAttention,
    NonDynamicQuantiLinear,
    #[serde(rename = "SiLU")]
    Silu,
    Spectrogram,
    TransformerEncoder,
    TransformerEncoderLayer,
}

impl LayerKind {
    pub const ALL: [LayerKind; 17] = [
        LayerKind::AdaptiveAvgPool1d,
        LayerKind::AdaptiveMaxPool1d,
        LayerKind::AmplitudeToDB,
        LayerKind::Conv1d,
        LayerKind::Dropout,
        LayerKind::Gelu,
        LayerKind::LayerNorm,
        LayerKind::Linear,
        LayerKind::MelScale,
        LayerKind::MelSpectrogram,
        LayerKind::ModuleList,
        LayerKind::MultiheadAttention,
        LayerKind::NonDynamicQuantiLinear,
        LayerKind::Silu,
        LayerKind::Spectrogram,
        LayerKind::TransformerEncoder,
        LayerKind::TransformerEncoderLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::AdaptiveAvgPool1d => "AdaptiveAvgPool1d",
            LayerKind::AdaptiveMaxPool1d => "AdaptiveMaxPool1d",
            LayerKind::AmplitudeToDB => "AmplitudeToDB",
            LayerKind::Conv1d => "Conv1d",
            LayerKind::Dropout => "Dropout",
            LayerKind::Gelu => "GELU",
            LayerKind::LayerNorm => "LayerNorm",
            LayerKind::Linear => "Linear",
            LayerKind::MelScale => "MelScale",
            LayerKind::MelSpectrogram => "MelSpectrogram",
            LayerKind::ModuleList => "ModuleList",
            LayerKind::MultiheadAttention => "MultiheadAttention",
            LayerKind::NonDynamicQuantiLinear => "NonDynamicQuantiLinear",
            LayerKind::Silu => "SiLU",
            LayerKind::Spectrogram => "Spectrogram",
            LayerKind::TransformerEncoder => "TransformerEncoder",
            LayerKind::TransformerEncoderLayer => "TransformerEncoderLayer",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub layers: BTreeMap<LayerKind, usize>,
    pub trainable_parameters: usize,
    pub branchings: usize,
}

impl Census {
    pub fn add(&mut self, kind: LayerKind) {
        *self.layers.entry(kind).or_default() += 1;
    }

    /// Count for `kind`, zero when absent.
    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.get(&kind).copied().unwrap_or(0)
    }

    /// Full 17-row column, zeros included.
    pub fn column(&self) -> Vec<(LayerKind, usize)> {
        LayerKind::ALL.iter().map(|&k| (k, self.count(k))).collect()
    }
}

impl fmt::Display for Census {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (kind, n) in self.column() {
            writeln!(f, "{:<26}{n:>12}", kind.name())?;
        }
        writeln!(
            f,
            "{:<26}{:>12}",
            "Trainable parameters", self.trainable_parameters
        )?;
        write!(f, "{:<26}{:>12}", "Branchings", self.branchings)
    }
}
