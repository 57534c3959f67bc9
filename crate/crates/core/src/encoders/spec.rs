//! Encoder specifications and the reference registry.

use serde::{Deserialize, Serialize};

use super::layers::Activation;
use super::EncoderError;
use crate::types::CLIP_SAMPLES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontEnd {
    /// Strided convolution over the raw waveform.
    RawConv,
    /// Non-overlapping raw frames, linearly projected.
    RawFrames,
    /// 64-band log-mel spectrogram, linearly projected.
    MelSpectrogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Linear interpolation of the time axis to 77 positions (no module).
    Interpolate,
    /// Adaptive average pooling to 77 positions.
    Mean,
    /// Adaptive max pooling to 77 positions.
    Max,
    /// 77 learned queries attending over the sequence.
    LearnedQuery,
    /// Sum of adaptive mean and max pooling, scaled by a channel gate.
    MeanMaxGated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Gelu,
    Silu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::Silu => Activation::Silu,
        }
    }
}

fn default_frame_length() -> usize {
    400
}

fn default_frame_hop() -> usize {
    200
}

fn default_activation() -> ActivationKind {
    ActivationKind::Gelu
}

/// Architecture description. `(spec, seed)` fully determines initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub front_end: FrontEnd,
    #[serde(default)]
    pub conv_layers: usize,
    /// LayerNorm after the stem and inside each residual conv block.
    #[serde(default)]
    pub conv_norm: bool,
    #[serde(default)]
    pub transformer_layers: usize,
    #[serde(default)]
    pub attention_heads: usize,
    pub model_width: usize,
    #[serde(default)]
    pub ff_width: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    pub pooling: Pooling,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    /// Dropout on the front-end features before the transformer.
    #[serde(default)]
    pub input_dropout: bool,
    /// LayerNorm after the last transformer layer.
    #[serde(default)]
    pub final_norm: bool,
    /// Adds the front-end features back onto the transformer output.
    #[serde(default)]
    pub global_residual: bool,
    /// Kernel of the raw-conv stem, or frame size of raw framing.
    #[serde(default = "default_frame_length")]
    pub frame_length: usize,
    /// Stride of the raw-conv stem.
    #[serde(default = "default_frame_hop")]
    pub frame_hop: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: String| Err(EncoderError::InvalidSpec(format!("{}: {msg}", self.name)));
        if self.name.trim().is_empty() {
            return Err(EncoderError::InvalidSpec("name is empty".into()));
        }
        if self.model_width == 0 {
            return bad("model_width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate {} is outside [0, 1)",
                self.dropout_rate
            ));
        }
        match self.front_end {
            FrontEnd::RawConv => {
                if self.conv_layers == 0 {
                    return bad("raw-conv front end needs conv_layers >= 1".into());
                }
                if self.frame_length == 0 || self.frame_hop == 0 || self.frame_length > CLIP_SAMPLES
                {
                    return bad("frame_length and frame_hop must be in 1..=16000".into());
                }
            }
            FrontEnd::RawFrames => {
                if self.frame_length == 0 || CLIP_SAMPLES % self.frame_length != 0 {
                    return bad(format!(
                        "frame_length {} must divide {CLIP_SAMPLES}",
                        self.frame_length
                    ));
                }
            }
            FrontEnd::MelSpectrogram => {}
        }
        if self.front_end != FrontEnd::RawConv && self.conv_layers != 0 {
            return bad("conv_layers is only meaningful with the raw-conv front end".into());
        }
        if (self.transformer_layers > 0 || self.pooling == Pooling::LearnedQuery)
            && (self.attention_heads == 0 || self.model_width % self.attention_heads != 0)
        {
            return bad(format!(
                "model_width {} must be divisible by attention_heads {}",
                self.model_width, self.attention_heads
            ));
        }
        if self.transformer_layers > 0 && self.ff_width == 0 {
            return bad("ff_width must be positive when transformer_layers > 0".into());
        }
        if self.transformer_layers == 0
            && (self.final_norm || self.global_residual || self.input_dropout)
        {
            return bad(
                "final_norm, global_residual and input_dropout need transformer layers".into(),
            );
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, EncoderError> {
        toml::to_string(self).map_err(|e| EncoderError::InvalidSpec(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, EncoderError> {
        let spec: Self =
            toml::from_str(text).map_err(|e| EncoderError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

pub const REFERENCE_NAMES: [&str; 6] = ["ours", "chatgpt", "deepseek", "gemini", "grok", "tiny"];

fn transformer(
    name: &str,
    front_end: FrontEnd,
    layers: usize,
    heads: usize,
    ff: usize,
) -> EncoderSpec {
    EncoderSpec {
        name: name.into(),
        front_end,
        conv_layers: usize::from(front_end == FrontEnd::RawConv),
        conv_norm: false,
        transformer_layers: layers,
        attention_heads: heads,
        model_width: 768,
        ff_width: ff,
        dropout_rate: 0.1,
        pooling: Pooling::Interpolate,
        activation: ActivationKind::Gelu,
        input_dropout: false,
        final_norm: false,
        global_residual: false,
        frame_length: default_frame_length(),
        frame_hop: default_frame_hop(),
    }
}

/// One of the built-in architectures, by name.
pub fn reference_spec(name: &str) -> Result<EncoderSpec, EncoderError> {
    let spec = match name {
        "ours" => EncoderSpec {
            name: "ours".into(),
            front_end: FrontEnd::RawConv,
            conv_layers: 14,
            conv_norm: true,
            transformer_layers: 0,
            attention_heads: 0,
            model_width: 208,
            ff_width: 0,
            dropout_rate: 0.1,
            pooling: Pooling::MeanMaxGated,
            activation: ActivationKind::Silu,
            input_dropout: false,
            final_norm: false,
            global_residual: false,
            frame_length: default_frame_length(),
            frame_hop: default_frame_hop(),
        },
        "chatgpt" => EncoderSpec {
            input_dropout: true,
            ..transformer("chatgpt", FrontEnd::RawConv, 4, 8, 2048)
        },
        "deepseek" => transformer("deepseek", FrontEnd::RawConv, 12, 12, 3072),
        "gemini" => EncoderSpec {
            final_norm: true,
            global_residual: true,
            ..transformer("gemini", FrontEnd::MelSpectrogram, 8, 8, 3072)
        },
        "grok" => EncoderSpec {
            frame_length: 200,
            ..transformer("grok", FrontEnd::RawFrames, 12, 12, 3072)
        },
        "tiny" => EncoderSpec {
            model_width: 128,
            pooling: Pooling::Mean,
            dropout_rate: 0.0,
            ..transformer("tiny", FrontEnd::MelSpectrogram, 2, 4, 256)
        },
        other => return Err(EncoderError::UnknownReference(other.to_string())),
    };
    Ok(spec)
}

pub fn reference_specs() -> Vec<EncoderSpec> {
    REFERENCE_NAMES
        .iter()
        .map(|n| reference_spec(n).expect("registry names resolve"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_specs_are_valid_and_round_trip() {
        for spec in reference_specs() {
            spec.validate().unwrap();
            let text = spec.to_toml().unwrap();
            assert_eq!(EncoderSpec::from_toml(&text).unwrap(), spec);
        }
    }

    #[test]
    fn rejects_indivisible_width() {
        let mut spec = reference_spec("tiny").unwrap();
        spec.attention_heads = 3;
        assert!(matches!(spec.validate(), Err(EncoderError::InvalidSpec(_))));
    }

    #[test]
    fn rejects_raw_conv_without_convs() {
        let mut spec = reference_spec("chatgpt").unwrap();
        spec.conv_layers = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let spec = EncoderSpec::from_toml(
            "name = \"mini\"\nfront_end = \"mel-spectrogram\"\nmodel_width = 32\npooling = \"mean\"\n",
        )
        .unwrap();
        assert_eq!(spec.transformer_layers, 0);
        assert_eq!(spec.activation, ActivationKind::Gelu);
    }

    #[test]
    fn unknown_reference() {
        assert!(matches!(
            reference_spec("bard"),
            Err(EncoderError::UnknownReference(_))
        ));
    }
}
