//! Log-mel front end: 64 HTK mel bands from a 25 ms Hann window with a
//! 10 ms hop, power spectrum, then decibels. It has no trainable parameters.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::types::{CLIP_SAMPLES, SAMPLE_RATE};

pub const N_MELS: usize = 64;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
const N_FREQS: usize = WIN_LENGTH / 2 + 1;
const AMIN: f32 = 1e-10;

/// Number of frames for a one-second clip with centered, reflect-padded framing.
pub const fn frame_count() -> usize {
    1 + CLIP_SAMPLES / HOP_LENGTH
}

pub struct MelFrontEnd {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    /// `(N_FREQS, N_MELS)` row-major.
    filters: Vec<f32>,
}

impl Default for MelFrontEnd {
    fn default() -> Self {
        Self::new()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK filters without area normalization, `(n_freqs, n_mels)`.
pub fn mel_filterbank(n_freqs: usize, n_mels: usize, sample_rate: u32) -> Vec<f32> {
    let nyquist = sample_rate as f64 / 2.0;
    let all_freqs: Vec<f64> = (0..n_freqs)
        .map(|i| nyquist * i as f64 / (n_freqs - 1) as f64)
        .collect();
    let (m_min, m_max) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let f_pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_min + (m_max - m_min) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0f32; n_freqs * n_mels];
    for (fi, &f) in all_freqs.iter().enumerate() {
        for m in 0..n_mels {
            let down = (f - f_pts[m]) / (f_pts[m + 1] - f_pts[m]);
            let up = (f_pts[m + 2] - f) / (f_pts[m + 2] - f_pts[m + 1]);
            fb[fi * n_mels + m] = down.min(up).max(0.0) as f32;
        }
    }
    fb
}

impl MelFrontEnd {
    pub fn new() -> Self {
        let fft = FftPlanner::<f32>::new().plan_fft_forward(WIN_LENGTH);
        // Periodic Hann window.
        let window = (0..WIN_LENGTH)
            .map(|i| {
                let x = 2.0 * std::f64::consts::PI * i as f64 / WIN_LENGTH as f64;
                (0.5 - 0.5 * x.cos()) as f32
            })
            .collect();
        Self {
            fft,
            window,
            filters: mel_filterbank(N_FREQS, N_MELS, SAMPLE_RATE),
        }
    }

    /// Log-mel features of one normalized clip, `(frame_count(), N_MELS)` row-major.
    pub fn features(&self, clip: &[f32]) -> Vec<f32> {
        let pad = WIN_LENGTH / 2;
        let n = clip.len();
        let padded: Vec<f32> = (0..n + 2 * pad)
            .map(|i| {
                // reflect padding without repeating the edge sample
                let j = i as isize - pad as isize;
                let j = if j < 0 {
                    -j
                } else if j >= n as isize {
                    2 * (n as isize - 1) - j
                } else {
                    j
                };
                clip[j as usize]
            })
            .collect();
        let frames = 1 + (padded.len() - WIN_LENGTH) / HOP_LENGTH;
        let mut out = vec![0f32; frames * N_MELS];
        let mut buf = vec![Complex::new(0f32, 0f32); WIN_LENGTH];
        let mut power = vec![0f32; N_FREQS];
        for f in 0..frames {
            let start = f * HOP_LENGTH;
            for (b, (&s, &w)) in buf
                .iter_mut()
                .zip(padded[start..start + WIN_LENGTH].iter().zip(&self.window))
            {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = &mut out[f * N_MELS..(f + 1) * N_MELS];
            for (fi, &p) in power.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let filt = &self.filters[fi * N_MELS..(fi + 1) * N_MELS];
                for (r, &w) in row.iter_mut().zip(filt) {
                    *r += p * w;
                }
            }
            for r in row.iter_mut() {
                *r = 10.0 * r.max(AMIN).log10();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_for_one_second() {
        let fe = MelFrontEnd::new();
        let feats = fe.features(&vec![0.0; CLIP_SAMPLES]);
        assert_eq!(frame_count(), 101);
        assert_eq!(feats.len(), 101 * N_MELS);
        // Silence bottoms out at the amplitude floor.
        assert!(feats.iter().all(|&v| (v + 100.0).abs() < 1e-3));
    }

    #[test]
    fn tone_energy_lands_in_matching_band() {
        let fe = MelFrontEnd::new();
        let tone: Vec<f32> = (0..CLIP_SAMPLES)
            .map(|i| (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 16_000.0).sin() * 0.5)
            .collect();
        let feats = fe.features(&tone);
        let mid = &feats[50 * N_MELS..51 * N_MELS];
        let peak = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let fb = mel_filterbank(N_FREQS, N_MELS, SAMPLE_RATE);
        // 1 kHz is FFT bin 25 at 40 Hz resolution.
        let strongest_filter = (0..N_MELS)
            .max_by(|&a, &b| fb[25 * N_MELS + a].total_cmp(&fb[25 * N_MELS + b]))
            .unwrap();
        assert_eq!(peak, strongest_filter);
    }

    #[test]
    fn filters_are_triangles_within_unit_height() {
        let fb = mel_filterbank(N_FREQS, N_MELS, SAMPLE_RATE);
        assert!(fb.iter().all(|&w| (0.0..=1.0).contains(&w)));
        for m in 0..N_MELS {
            assert!(
                (0..N_FREQS).any(|f| fb[f * N_MELS + m] > 0.0),
                "empty band {m}"
            );
        }
    }
}
