//! Deterministic synthetic trios built with integer arithmetic only, so the
//! bytes are identical on every platform for a given seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::{write_png, write_wav, DatasetEntry, DatasetError, DatasetManifest, Split, Trio};
use crate::types::{AudioWaveform, CLIP_SAMPLES, IMAGE_SIDE, SAMPLE_RATE};

const NOTES_HZ: [u32; 12] = [110, 147, 196, 220, 262, 330, 392, 440, 523, 659, 880, 1175];
const PITCH_WORDS: [&str; 4] = ["deep", "low", "bright", "high"];
const TIMBRES: [&str; 4] = ["pure", "buzzing", "hollow", "ringing"];
const NOISES: [&str; 4] = ["silence", "hiss", "rain", "static"];
const COLORS: [&str; 8] = [
    "red", "orange", "yellow", "green", "teal", "blue", "violet", "grey",
];
const PATTERNS: [&str; 4] = ["stripes", "waves", "bands", "haze"];
const COLOR_RGB: [[i32; 3]; 8] = [
    [200, 40, 40],
    [220, 130, 30],
    [220, 200, 40],
    [50, 170, 60],
    [30, 160, 160],
    [40, 70, 200],
    [140, 60, 190],
    [128, 128, 128],
];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-trio parameters drawn from one 64-bit stream.
struct Params {
    bits: [u64; 4],
}

impl Params {
    fn new(seed: u64, index: usize) -> Self {
        let base = splitmix64(seed ^ splitmix64(index as u64));
        Self {
            bits: [
                splitmix64(base),
                splitmix64(base ^ 1),
                splitmix64(base ^ 2),
                splitmix64(base ^ 3),
            ],
        }
    }

    fn pick(&self, slot: usize, n: usize) -> usize {
        (self.bits[slot % 4] >> (16 * (slot / 4)) & 0xffff) as usize % n
    }

    fn note(&self) -> usize {
        self.pick(0, NOTES_HZ.len())
    }
    fn timbre(&self) -> usize {
        self.pick(1, TIMBRES.len())
    }
    fn noise(&self) -> usize {
        self.pick(2, NOISES.len())
    }
    fn color(&self) -> [i32; 3] {
        [0, 1, 2].map(|c| 30 + self.pick(3 + 4 * c, 196) as i32)
    }
    fn pattern(&self) -> usize {
        self.pick(4, PATTERNS.len())
    }
    fn level(&self) -> i32 {
        4_000 + self.pick(13, 12_000) as i32
    }
    fn phase(&self, c: usize) -> i32 {
        self.pick([5, 6, 8][c], 512) as i32
    }
    fn direction(&self) -> (i32, i32) {
        (self.pick(9, 5) as i32 - 2, self.pick(10, 5) as i32 - 2)
    }
    fn period(&self) -> i32 {
        64 + self.pick(12, 192) as i32
    }
}

/// Parabolic sine approximation over a 32-bit phase; output in `[-32767, 32767]`.
fn isin(phase: u32) -> i32 {
    let t = ((phase >> 16) & 0x7fff) as i64;
    let y = ((4 * t * (32_768 - t)) >> 15).min(32_767) as i32;
    if phase >> 31 == 0 {
        y
    } else {
        -y
    }
}

/// Tone (with a timbre-dependent overtone) plus low-passed noise and a fade in/out.
pub fn synth_audio(seed: u64, index: usize) -> AudioWaveform {
    let p = Params::new(seed, index);
    let freq = NOTES_HZ[p.note()] as u64;
    let step = ((freq << 32) / SAMPLE_RATE as u64) as u32;
    let overtone_step = step.wrapping_mul(2 + p.timbre() as u32);
    let overtone_share = [0, 3, 2, 1][p.timbre()];
    let noise_level = [0, 1_500, 3_000, 6_000][p.noise()];
    let level = p.level();
    let mut state = (splitmix64(p.bits[0]) as u32) | 1;
    let (mut phase, mut overtone, mut lowpass) = (0u32, 0u32, 0i32);
    let fade = (CLIP_SAMPLES / 20) as i64;
    let samples = (0..CLIP_SAMPLES)
        .map(|i| {
            phase = phase.wrapping_add(step);
            overtone = overtone.wrapping_add(overtone_step);
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            let white = (state >> 16) as i32 - 32_768;
            lowpass += (white - lowpass) >> 2;
            let tone =
                isin(phase) as i64 * (4 - overtone_share) + isin(overtone) as i64 * overtone_share;
            let mut s =
                tone * level as i64 / (4 * 32_767) + lowpass as i64 * noise_level as i64 / 32_768;
            let edge = (i as i64).min((CLIP_SAMPLES - 1 - i) as i64);
            if edge < fade {
                s = s * edge / fade;
            }
            s.clamp(i16::MIN as i64, i16::MAX as i64) as i16
        })
        .collect();
    AudioWaveform::new(samples).expect("exact length")
}

/// 512x512 color field: a base color modulated by a tilted triangle wave per channel.
pub fn synth_image(seed: u64, index: usize) -> RgbImage {
    let p = Params::new(seed, index);
    let base = p.color();
    let (dx, dy) = p.direction();
    let (dx, dy) = if dx == 0 && dy == 0 { (1, 0) } else { (dx, dy) };
    let period = p.period();
    let depth = [60, 90, 45, 20][p.pattern()];
    // Channel value for each phase position along the wave.
    let table: Vec<[u8; 3]> = (0..period)
        .map(|t| {
            let tri = (2 * t - period).abs() * 2 * depth / period - depth;
            [0, 1, 2].map(|c| (base[c] + tri).clamp(0, 255) as u8)
        })
        .collect();
    let side = IMAGE_SIDE as usize;
    let mut raw = vec![0u8; side * side * 3];
    for (y, row) in raw.chunks_exact_mut(side * 3).enumerate() {
        let mut t = [0, 1, 2].map(|c| (y as i32 * dy + p.phase(c)).rem_euclid(period));
        for px in row.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = table[t[c] as usize][c];
                t[c] = (t[c] + dx).rem_euclid(period);
            }
        }
    }
    RgbImage::from_raw(IMAGE_SIDE, IMAGE_SIDE, raw).expect("buffer matches dimensions")
}

/// Palette entry closest to `rgb`.
fn color_name(rgb: [i32; 3]) -> &'static str {
    let distance = |named: &[i32; 3]| -> i32 { (0..3).map(|c| (named[c] - rgb[c]).pow(2)).sum() };
    let best = (0..COLORS.len())
        .min_by_key(|&i| distance(&COLOR_RGB[i]))
        .unwrap_or(0);
    COLORS[best]
}

/// Caption naming the sound and the image; the trailing index keeps captions distinct.
pub fn synth_caption(seed: u64, index: usize) -> String {
    let p = Params::new(seed, index);
    let pitch = PITCH_WORDS[p.note() * PITCH_WORDS.len() / NOTES_HZ.len()];
    format!(
        "{pitch} {} tone, {}, {} {} {index}",
        TIMBRES[p.timbre()],
        NOISES[p.noise()],
        color_name(p.color()),
        PATTERNS[p.pattern()],
    )
}

pub fn synth_trio_id(index: usize) -> String {
    format!("syn-{index:06}")
}

/// The in-memory trio `synth_dataset` would write at `index`.
pub fn synth_trio(seed: u64, index: usize) -> Trio {
    Trio {
        trio_id: synth_trio_id(index),
        audio: synth_audio(seed, index),
        image: synth_image(seed, index),
        text: synth_caption(seed, index),
    }
}

/// Writes `n` synthetic trios under `out_dir`, all assigned to the training split.
pub fn synth_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest, DatasetError> {
    if n == 0 {
        return Err(DatasetError::InvalidRequest(
            "synthetic dataset needs n >= 1".into(),
        ));
    }
    fs::create_dir_all(out_dir.join("audio"))?;
    fs::create_dir_all(out_dir.join("images"))?;
    let mut entries = Vec::with_capacity(n);
    let mut split = BTreeMap::new();
    for index in 0..n {
        let trio = synth_trio(seed, index);
        let audio_path = PathBuf::from("audio").join(format!("{}.wav", trio.trio_id));
        let image_path = PathBuf::from("images").join(format!("{}.png", trio.trio_id));
        write_wav(&out_dir.join(&audio_path), &trio.audio)?;
        write_png(&out_dir.join(&image_path), &trio.image)?;
        split.insert(trio.trio_id.clone(), Split::Train);
        entries.push(DatasetEntry::new(
            trio.trio_id,
            audio_path,
            image_path,
            trio.text,
        ));
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        split,
        seed,
    };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_text;

    #[test]
    fn isin_hits_extremes() {
        assert_eq!(isin(0), 0);
        assert!(isin(1 << 30) > 32_000);
        assert!(isin(3 << 30) < -32_000);
    }

    #[test]
    fn captions_are_valid_and_distinct() {
        let caps: Vec<String> = (0..200).map(|i| synth_caption(3, i)).collect();
        for c in &caps {
            validate_text(c).unwrap();
        }
        let unique: std::collections::HashSet<_> = caps.iter().collect();
        assert_eq!(unique.len(), caps.len());
    }

    #[test]
    fn audio_is_reproducible_and_varied() {
        assert_eq!(synth_audio(1, 5), synth_audio(1, 5));
        assert_ne!(synth_audio(1, 5), synth_audio(1, 6));
        assert_ne!(synth_audio(1, 5), synth_audio(2, 5));
        let peak = synth_audio(1, 5)
            .samples()
            .iter()
            .map(|s| s.unsigned_abs())
            .max()
            .unwrap();
        assert!(peak > 1_000);
    }
}
