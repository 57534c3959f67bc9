//! The reference encoder family built from an [`EncoderSpec`].

use candle_core::{Device, Tensor, Var};

use super::census::{Census, LayerKind};
use super::layers::{
    adaptive_avg_matrix, adaptive_max_pool, interpolation_matrix, param, param_count, sigmoid,
    sinusoidal_positions, Activation, Conv1d, Dropout, LayerNorm, Linear, Mode, MultiheadAttention,
    NoGradGuard, ParamStore, TransformerEncoderLayer,
};
use super::mel::{self, MelFrontEnd, N_MELS};
use super::spec::{EncoderSpec, FrontEnd, Pooling};
use super::{AudioEncoder, EncoderError};
use crate::types::{AudioWaveform, CLIP_SAMPLES, EMBED_DIM, PCM_SCALE, SEQ_LEN};

/// Residual block: conv → LayerNorm → activation → conv, plus the skip path.
struct ResBlock {
    conv1: Conv1d,
    norm: LayerNorm,
    conv2: Conv1d,
}

/// LayerNorm over the channel axis of a `(B, C, T)` tensor.
fn channel_norm(norm: &LayerNorm, x: &Tensor) -> candle_core::Result<Tensor> {
    norm.forward(&x.transpose(1, 2)?.contiguous()?)?
        .transpose(1, 2)?
        .contiguous()
}

struct ConvStack {
    stem: Conv1d,
    stem_norm: Option<LayerNorm>,
    blocks: Vec<ResBlock>,
    trailing: Option<Conv1d>,
}

impl ConvStack {
    fn new(ps: &mut ParamStore, spec: &EncoderSpec) -> candle_core::Result<Self> {
        let c = spec.model_width;
        ps.push_scope("conv");
        let stem = Conv1d::new(ps, "stem", 1, c, spec.frame_length, spec.frame_hop, 0)?;
        let stem_norm = if spec.conv_norm {
            Some(LayerNorm::new(ps, "stem_norm", c)?)
        } else {
            None
        };
        let rest = spec.conv_layers - 1;
        let mut blocks = Vec::with_capacity(rest / 2);
        for i in 0..rest / 2 {
            ps.push_scope(format!("block{i}"));
            blocks.push(ResBlock {
                conv1: Conv1d::new(ps, "conv1", c, c, 3, 1, 1)?,
                norm: LayerNorm::new(ps, "norm", c)?,
                conv2: Conv1d::new(ps, "conv2", c, c, 3, 1, 1)?,
            });
            ps.pop_scope();
        }
        let trailing = if rest % 2 == 1 {
            Some(Conv1d::new(ps, "trailing", c, c, 3, 1, 1)?)
        } else {
            None
        };
        ps.pop_scope();
        Ok(Self {
            stem,
            stem_norm,
            blocks,
            trailing,
        })
    }

    /// `(B, 1, 16000)` → `(B, C, T)`.
    fn forward(&self, x: &Tensor, act: Activation) -> candle_core::Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        if let Some(norm) = &self.stem_norm {
            h = channel_norm(norm, &h)?;
        }
        h = act.forward(&h)?;
        for block in &self.blocks {
            let y = block.conv1.forward(&h)?;
            let y = act.forward(&channel_norm(&block.norm, &y)?)?;
            h = (h + block.conv2.forward(&y)?)?;
        }
        if let Some(conv) = &self.trailing {
            h = act.forward(&conv.forward(&h)?)?;
        }
        Ok(h)
    }

    fn census(&self, c: &mut Census) {
        self.stem.census(c);
        if let Some(n) = &self.stem_norm {
            n.census(c);
        }
        for b in &self.blocks {
            b.conv1.census(c);
            b.norm.census(c);
            b.conv2.census(c);
            c.branchings += 1;
        }
        if let Some(conv) = &self.trailing {
            conv.census(c);
        }
    }

    fn frames(spec: &EncoderSpec) -> usize {
        (CLIP_SAMPLES - spec.frame_length) / spec.frame_hop + 1
    }
}

enum FrontEndModule {
    RawConv(ConvStack),
    RawFrames { proj: Linear, frame: usize },
    Mel { mel: MelFrontEnd, proj: Linear },
}

struct GatedPool {
    squeeze: Linear,
    dropout: Dropout,
    excite: Linear,
}

enum PoolModule {
    Interpolate(Tensor),
    Mean(Tensor),
    Max,
    LearnedQuery {
        queries: Var,
        attn: MultiheadAttention,
    },
    MeanMaxGated {
        avg: Tensor,
        gate: GatedPool,
    },
}

/// A trainable encoder assembled from a spec.
pub struct ReferenceEncoder {
    spec: EncoderSpec,
    seed: u64,
    activation: Activation,
    front: FrontEndModule,
    positions: Option<Tensor>,
    input_dropout: Option<Dropout>,
    layers: Vec<TransformerEncoderLayer>,
    final_norm: Option<LayerNorm>,
    pool: PoolModule,
    output: Option<Linear>,
    params: Vec<(String, Var)>,
    device: Device,
}

/// Builds the encoder for `spec` with parameters drawn from `seed`.
pub fn build_encoder(spec: &EncoderSpec, seed: u64) -> Result<ReferenceEncoder, EncoderError> {
    build_encoder_on(spec, seed, &Device::Cpu)
}

pub(crate) fn build_encoder_on(
    spec: &EncoderSpec,
    seed: u64,
    device: &Device,
) -> Result<ReferenceEncoder, EncoderError> {
    spec.validate()?;
    let w = spec.model_width;
    let mut ps = ParamStore::new(seed, device);

    let (front, steps) = match spec.front_end {
        FrontEnd::RawConv => (
            FrontEndModule::RawConv(ConvStack::new(&mut ps, spec)?),
            ConvStack::frames(spec),
        ),
        FrontEnd::RawFrames => (
            FrontEndModule::RawFrames {
                proj: Linear::new(&mut ps, "frame_proj", spec.frame_length, w, true)?,
                frame: spec.frame_length,
            },
            CLIP_SAMPLES / spec.frame_length,
        ),
        FrontEnd::MelSpectrogram => (
            FrontEndModule::Mel {
                mel: MelFrontEnd::new(),
                proj: Linear::new(&mut ps, "mel_proj", N_MELS, w, true)?,
            },
            mel::frame_count(),
        ),
    };

    let transformer = spec.transformer_layers > 0;
    let positions = if transformer {
        Some(sinusoidal_positions(steps, w, device)?)
    } else {
        None
    };
    let input_dropout = spec.input_dropout.then(|| Dropout::new(spec.dropout_rate));
    let mut layers = Vec::with_capacity(spec.transformer_layers);
    for i in 0..spec.transformer_layers {
        layers.push(TransformerEncoderLayer::new(
            &mut ps,
            &format!("layers.{i}"),
            w,
            spec.attention_heads,
            spec.ff_width,
            spec.dropout_rate,
        )?);
    }
    let final_norm = if spec.final_norm {
        Some(LayerNorm::new(&mut ps, "final_norm", w)?)
    } else {
        None
    };

    let pool = match spec.pooling {
        Pooling::Interpolate => PoolModule::Interpolate(
            interpolation_matrix(steps, SEQ_LEN, device)?
                .t()?
                .contiguous()?,
        ),
        Pooling::Mean => PoolModule::Mean(
            adaptive_avg_matrix(steps, SEQ_LEN, device)?
                .t()?
                .contiguous()?,
        ),
        Pooling::Max => PoolModule::Max,
        Pooling::LearnedQuery => {
            ps.push_scope("pool");
            let queries = ps.normal("queries", &[SEQ_LEN, w], 0.02)?;
            let attn = MultiheadAttention::new(&mut ps, "attn", w, spec.attention_heads)?;
            ps.pop_scope();
            PoolModule::LearnedQuery { queries, attn }
        }
        Pooling::MeanMaxGated => {
            let hidden = (w / 4).max(1);
            ps.push_scope("pool");
            let gate = GatedPool {
                squeeze: Linear::new(&mut ps, "squeeze", w, hidden, true)?,
                dropout: Dropout::new(spec.dropout_rate),
                excite: Linear::new(&mut ps, "excite", hidden, w, true)?,
            };
            ps.pop_scope();
            PoolModule::MeanMaxGated {
                avg: adaptive_avg_matrix(steps, SEQ_LEN, device)?,
                gate,
            }
        }
    };
    let output = if w != EMBED_DIM {
        Some(Linear::new(&mut ps, "output", w, EMBED_DIM, true)?)
    } else {
        None
    };

    Ok(ReferenceEncoder {
        spec: spec.clone(),
        seed,
        activation: spec.activation.into(),
        front,
        positions,
        input_dropout,
        layers,
        final_norm,
        pool,
        output,
        params: ps.into_params(),
        device: device.clone(),
    })
}

impl ReferenceEncoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable parameters in construction order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Front end: `(B, 16000)` raw samples → `(B, T, W)` and, for the conv
    /// front end, the channel-major `(B, W, T)` view.
    fn front_forward(&self, x: &Tensor) -> candle_core::Result<(Tensor, Option<Tensor>)> {
        let b = x.dims()[0];
        match &self.front {
            FrontEndModule::RawConv(stack) => {
                let h = stack.forward(&x.reshape((b, 1, CLIP_SAMPLES))?, self.activation)?;
                Ok((h.transpose(1, 2)?.contiguous()?, Some(h)))
            }
            FrontEndModule::RawFrames { proj, frame } => {
                let frames = x.reshape((b, CLIP_SAMPLES / frame, *frame))?;
                Ok((proj.forward(&frames)?, None))
            }
            FrontEndModule::Mel { mel, proj } => {
                let host = x.to_vec2::<f32>()?;
                let mut feats = Vec::with_capacity(b * mel::frame_count() * N_MELS);
                for clip in &host {
                    feats.extend(mel.features(clip));
                }
                let feats = Tensor::from_vec(feats, (b, mel::frame_count(), N_MELS), x.device())?;
                Ok((proj.forward(&feats)?, None))
            }
        }
    }

    /// Forward pass over raw sample values `(B, 16000)` to `(B, 77, 768)`.
    pub fn forward(&self, samples: &Tensor, mode: &mut Mode) -> candle_core::Result<Tensor> {
        let _no_grad = (!mode.is_train()).then(NoGradGuard::new);
        let x = (samples / PCM_SCALE as f64)?;
        let (mut h, channel_major) = self.front_forward(&x)?;

        if let Some(pos) = &self.positions {
            h = h.broadcast_add(pos)?;
            if let Some(d) = &self.input_dropout {
                h = d.forward(&h, mode)?;
            }
            let features = h.clone();
            for layer in &self.layers {
                h = layer.forward(&h, self.activation, mode)?;
            }
            if let Some(n) = &self.final_norm {
                h = n.forward(&h)?;
            }
            if self.spec.global_residual {
                h = (h + features)?;
            }
        }

        let pooled = match &self.pool {
            PoolModule::Interpolate(m) | PoolModule::Mean(m) => m.broadcast_matmul(&h)?,
            PoolModule::Max => {
                let hc = match channel_major {
                    Some(hc) if self.positions.is_none() => hc,
                    _ => h.transpose(1, 2)?.contiguous()?,
                };
                adaptive_max_pool(&hc, SEQ_LEN)?
                    .transpose(1, 2)?
                    .contiguous()?
            }
            PoolModule::LearnedQuery { queries, attn } => {
                let (b, _, w) = h.dims3()?;
                let q = param(queries)
                    .unsqueeze(0)?
                    .broadcast_as((b, SEQ_LEN, w))?
                    .contiguous()?;
                attn.forward(&q, &h)?
            }
            PoolModule::MeanMaxGated { avg, gate } => {
                let hc = match channel_major {
                    Some(hc) if self.positions.is_none() => hc,
                    _ => h.transpose(1, 2)?.contiguous()?,
                };
                let squeezed = adaptive_max_pool(&hc, 1)?.squeeze(2)?;
                let g = gate.squeeze.forward(&squeezed)?;
                let g = gate.dropout.forward(&self.activation.forward(&g)?, mode)?;
                let g = sigmoid(&gate.excite.forward(&g)?)?;
                let mean = hc.broadcast_matmul(avg)?;
                let max = adaptive_max_pool(&hc, SEQ_LEN)?;
                (mean + max)?
                    .broadcast_mul(&g.unsqueeze(2)?)?
                    .transpose(1, 2)?
                    .contiguous()?
            }
        };
        match &self.output {
            Some(out) => out.forward(&pooled),
            None => Ok(pooled),
        }
    }

    /// Layer census of this instance.
    pub fn census(&self) -> Census {
        let mut c = Census::default();
        c.add(self.activation.kind());
        match &self.front {
            FrontEndModule::RawConv(stack) => stack.census(&mut c),
            FrontEndModule::RawFrames { proj, .. } => proj.census(&mut c),
            FrontEndModule::Mel { proj, .. } => {
                for kind in [
                    LayerKind::MelSpectrogram,
                    LayerKind::Spectrogram,
                    LayerKind::MelScale,
                    LayerKind::AmplitudeToDB,
                ] {
                    c.add(kind);
                }
                proj.census(&mut c);
            }
        }
        if let Some(d) = &self.input_dropout {
            d.census(&mut c);
        }
        if !self.layers.is_empty() {
            c.add(LayerKind::TransformerEncoder);
            c.add(LayerKind::ModuleList);
        }
        for layer in &self.layers {
            layer.census(&mut c);
        }
        if let Some(n) = &self.final_norm {
            n.census(&mut c);
        }
        if self.spec.global_residual {
            c.branchings += 1;
        }
        match &self.pool {
            PoolModule::Interpolate(_) => {}
            PoolModule::Mean(_) => c.add(LayerKind::AdaptiveAvgPool1d),
            PoolModule::Max => c.add(LayerKind::AdaptiveMaxPool1d),
            PoolModule::LearnedQuery { attn, .. } => attn.census(&mut c),
            PoolModule::MeanMaxGated { gate, .. } => {
                c.add(LayerKind::AdaptiveAvgPool1d);
                // One pool for the 77 positions, one for the gate's global squeeze.
                c.add(LayerKind::AdaptiveMaxPool1d);
                c.add(LayerKind::AdaptiveMaxPool1d);
                gate.squeeze.census(&mut c);
                gate.dropout.census(&mut c);
                gate.excite.census(&mut c);
                // The final feature map feeds three pools.
                c.branchings += 2;
            }
        }
        if let Some(out) = &self.output {
            out.census(&mut c);
        }
        c.trainable_parameters = param_count(&self.params);
        c
    }
}

impl AudioEncoder for ReferenceEncoder {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn encode_batch(&self, batch: &[AudioWaveform]) -> Result<Tensor, EncoderError> {
        if batch.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let x = AudioWaveform::batch_tensor(batch, &self.device)?;
        Ok(self.forward(&x, &mut Mode::Eval)?)
    }
}
