//! Synthetic domestic-audio corpus with a known tag ground truth.
//!
//! Every chunk has a coloured-noise background with random tint and level,
//! and one sound event per tag it carries. Each tag has its own acoustic
//! signature (harmonic voices at different pitches, tones, chirps, clicks,
//! band noise), placed at a random time and signal-to-noise ratio.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_wav, AudioChunk, CHUNK_SAMPLES, NUM_DEV_FOLDS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tags::{Tag, TagSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Probability that a chunk carries each tag (at least one is forced).
    pub tag_probability: f64,
    /// Event-to-background RMS ratio range in dB.
    pub snr_db: (f64, f64),
    /// Event duration range in seconds.
    pub event_seconds: (f64, f64),
    /// Background RMS range (full scale = 1).
    pub background_rms: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tag_probability: 0.3,
            snr_db: (-3.0, 6.0),
            event_seconds: (0.8, 2.5),
            background_rms: (0.005, 0.05),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthChunk {
    pub chunk_id: String,
    pub tags: TagSet,
    pub fold: u8,
    pub audio: AudioChunk,
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn background(rng: &mut impl Rng, config: &SynthConfig) -> Vec<f64> {
    let tint = rng.gen_range(0.3..0.97);
    let mut state = 0.0;
    let mut out: Vec<f64> = (0..CHUNK_SAMPLES)
        .map(|_| {
            state = tint * state + (1.0 - tint) * rng.gen_range(-1.0..1.0);
            state
        })
        .collect();
    let hum_freq = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
    let hum_level = rng.gen_range(0.0..0.5) * rms(&out);
    for (n, v) in out.iter_mut().enumerate() {
        *v += hum_level * (2.0 * PI * hum_freq * n as f64 / SAMPLE_RATE as f64).sin();
    }
    let target = rng.gen_range(config.background_rms.0..config.background_rms.1);
    let scale = target / rms(&out).max(1e-12);
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

fn harmonic_voice(len: usize, f0: (f64, f64), harmonics: usize, syllable_hz: f64, rng: &mut impl Rng) -> Vec<f64> {
    let f0 = rng.gen_range(f0.0..f0.1);
    let vibrato = rng.gen_range(2.0..6.0);
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    (0..len)
        .map(|n| {
            let t = n as f64 / SAMPLE_RATE as f64;
            let f = f0 * (1.0 + 0.03 * (2.0 * PI * vibrato * t).sin());
            phase += 2.0 * PI * f / SAMPLE_RATE as f64;
            let tone: f64 = (1..=harmonics).map(|h| (h as f64 * phase).sin() / h as f64).sum();
            let syllable = (0.5 - 0.5 * (2.0 * PI * syllable_hz * t + phase0).cos()).powi(2);
            tone * syllable
        })
        .collect()
}

fn band_noise(len: usize, lo: f64, hi: f64, partials: usize, rng: &mut impl Rng) -> Vec<f64> {
    let comps: Vec<(f64, f64)> = (0..partials)
        .map(|_| (rng.gen_range(lo..hi), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    (0..len)
        .map(|n| {
            let t = n as f64 / SAMPLE_RATE as f64;
            comps.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>()
        })
        .collect()
}

fn event_signal(tag: Tag, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    match tag {
        Tag::C => harmonic_voice(len, (300.0, 400.0), 5, 4.0, rng),
        Tag::M => harmonic_voice(len, (95.0, 135.0), 10, 3.0, rng),
        Tag::F => harmonic_voice(len, (190.0, 250.0), 7, 3.5, rng),
        Tag::V => band_noise(len, 1000.0, 3000.0, 40, rng),
        Tag::O => {
            let f = rng.gen_range(4000.0..6000.0);
            (0..len).map(|n| (2.0 * PI * f * n as f64 / sr).sin()).collect()
        }
        Tag::B => {
            // Repeated upward chirps.
            let period = (rng.gen_range(0.25..0.4) * sr) as usize;
            let (f_lo, f_hi) = (600.0, 3500.0);
            (0..len)
                .map(|n| {
                    let k = n % period;
                    let t = k as f64 / sr;
                    let dur = period as f64 / sr;
                    let phase = 2.0 * PI * (f_lo * t + 0.5 * (f_hi - f_lo) / dur * t * t);
                    phase.sin()
                })
                .collect()
        }
        Tag::P => {
            // Decaying broadband clicks at a steady rate.
            let period = (rng.gen_range(0.15..0.3) * sr) as usize;
            let decay = rng.gen_range(0.003..0.008) * sr;
            (0..len)
                .map(|n| {
                    let k = (n % period) as f64;
                    (-k / decay).exp() * rng.gen_range(-1.0..1.0)
                })
                .collect()
        }
    }
}

/// Mixes one event per tag into a fresh background.
pub fn synth_chunk(tags: TagSet, config: &SynthConfig, rng: &mut impl Rng) -> AudioChunk {
    let mut mix = background(rng, config);
    let bg_rms = rms(&mix);
    let sr = SAMPLE_RATE as f64;
    for tag in tags.iter() {
        let dur = ((rng.gen_range(config.event_seconds.0..config.event_seconds.1) * sr) as usize).min(CHUNK_SAMPLES);
        let onset = rng.gen_range(0..=CHUNK_SAMPLES - dur);
        let mut ev = event_signal(tag, dur, rng);
        let fade = (0.02 * sr) as usize;
        for i in 0..fade.min(dur / 2) {
            let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
            ev[i] *= g;
            ev[dur - 1 - i] *= g;
        }
        let snr = rng.gen_range(config.snr_db.0..config.snr_db.1);
        let gain = bg_rms * 10f64.powf(snr / 20.0) / rms(&ev).max(1e-12);
        for (m, e) in mix[onset..onset + dur].iter_mut().zip(&ev) {
            *m += gain * e;
        }
    }
    let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.99 {
        mix.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    AudioChunk::new(mix)
}

fn synth_tags(config: &SynthConfig, rng: &mut impl Rng) -> TagSet {
    loop {
        let set = TagSet::from_tags(Tag::ALL.into_iter().filter(|_| rng.gen_bool(config.tag_probability)));
        if !set.is_empty() {
            return set;
        }
    }
}

/// `n` chunks assigned round-robin to the development folds.
pub fn generate_corpus(n: usize, config: &SynthConfig) -> Vec<SynthChunk> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..n)
        .map(|i| {
            let tags = synth_tags(config, &mut rng);
            SynthChunk {
                chunk_id: format!("synth{i:04}"),
                tags,
                fold: (i % NUM_DEV_FOLDS as usize) as u8,
                audio: synth_chunk(tags, config, &mut rng),
            }
        })
        .collect()
}

/// Writes `<dir>/<id>.wav` for every chunk plus `<dir>/chunks.csv`, and
/// returns the list path.
pub fn write_corpus(dir: &Path, chunks: &[SynthChunk]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut csv = String::from("chunk_id,labels,fold\n");
    for c in chunks {
        write_wav(&dir.join(format!("{}.wav", c.chunk_id)), &c.audio.samples)?;
        let _ = writeln!(csv, "{},{},{}", c.chunk_id, c.tags, c.fold);
    }
    let path = dir.join("chunks.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}
