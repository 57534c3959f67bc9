//! Lookup encoder that answers known waveforms with a fixed row repeated
//! over all 77 positions. With an identity head it reproduces the row exactly,
//! which makes it the perfect-imitation reference for the metric battery.

use std::collections::HashMap;

use candle_core::{Device, Tensor};

use super::{AudioEncoder, EncoderError};
use crate::types::{AudioWaveform, EMBED_DIM, SEQ_LEN};

pub struct EchoEncoder {
    name: String,
    rows: HashMap<Vec<i16>, Vec<f32>>,
}

impl EchoEncoder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            rows: HashMap::new(),
        }
    }

    /// Registers the 768-wide row returned for `wave`.
    pub fn insert(&mut self, wave: &AudioWaveform, row: Vec<f32>) -> Result<(), EncoderError> {
        if row.len() != EMBED_DIM {
            return Err(EncoderError::InvalidSpec(format!(
                "echo rows must have {EMBED_DIM} entries, got {}",
                row.len()
            )));
        }
        self.rows.insert(wave.samples().to_vec(), row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl AudioEncoder for EchoEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn encode_batch(&self, batch: &[AudioWaveform]) -> Result<Tensor, EncoderError> {
        if batch.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let mut out = Vec::with_capacity(batch.len() * SEQ_LEN * EMBED_DIM);
        for (item, wave) in batch.iter().enumerate() {
            let row = self
                .rows
                .get(wave.samples())
                .ok_or(EncoderError::UnknownWaveform { item })?;
            for _ in 0..SEQ_LEN {
                out.extend_from_slice(row);
            }
        }
        Ok(Tensor::from_vec(
            out,
            (batch.len(), SEQ_LEN, EMBED_DIM),
            &Device::Cpu,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{check_output, project, ProjectionHead};
    use crate::types::EmbeddingMatrix;

    #[test]
    fn echoes_registered_rows_and_rejects_others() {
        let mut enc = EchoEncoder::new("echo");
        let wave = AudioWaveform::silence();
        let mut row = vec![0f32; EMBED_DIM];
        row[3] = 1.0;
        enc.insert(&wave, row.clone()).unwrap();
        let out = enc.encode_batch(&[wave.clone(), wave]).unwrap();
        check_output(&out, 2).unwrap();
        let first = EmbeddingMatrix::batch_from_tensor(&out).unwrap().remove(0);
        let head = ProjectionHead::identity(&Device::Cpu).unwrap();
        assert_eq!(project(&first, &head).unwrap(), row);

        let other = AudioWaveform::from_i64(&vec![5; crate::types::CLIP_SAMPLES]).unwrap();
        assert!(matches!(
            enc.encode_batch(&[other]),
            Err(EncoderError::UnknownWaveform { item: 0 })
        ));
    }
}
