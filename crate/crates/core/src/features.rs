//! Framing, log mel filterbank (MBK) and MFCC extraction, normalization and
//! background-noise-aware context expansion.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{AudioChunk, SAMPLE_RATE};
use crate::error::{Error, Result};

/// 20 ms analysis window at 16 kHz.
pub const WINDOW_SAMPLES: usize = 320;
/// 10 ms hop at 16 kHz.
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MEL: usize = 40;
pub const NUM_MFCC: usize = 24;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;
pub const FRAME_PERIOD_MS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mbk,
    Mfcc,
    DaeCode,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mbk => "mbk",
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::DaeCode => "daecode",
        }
    }

    pub fn parse(text: &str) -> Option<FeatureKind> {
        match text.trim().to_ascii_lowercase().as_str() {
            "mbk" | "mbk40" => Some(FeatureKind::Mbk),
            "mfcc" | "mfcc24" => Some(FeatureKind::Mfcc),
            "daecode" | "dae" => Some(FeatureKind::DaeCode),
            _ => None,
        }
    }
}

/// Frames × dims feature matrix for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub chunk_id: String,
    pub kind: FeatureKind,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(chunk_id: impl Into<String>, kind: FeatureKind, values: Array2<f64>) -> Self {
        FeatureMatrix {
            chunk_id: chunk_id.into(),
            kind,
            values,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }
}

/// Number of full windows that fit: `1 + floor((len - 320) / 160)`.
pub fn frame_count(len: usize) -> Option<usize> {
    (len >= WINDOW_SAMPLES).then(|| 1 + (len - WINDOW_SAMPLES) / HOP_SAMPLES)
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Splits a chunk into Hamming-windowed 20 ms frames with a 10 ms hop.
pub fn frame_signal(chunk: &AudioChunk) -> Result<Array2<f64>> {
    if chunk.sample_rate != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "expected {SAMPLE_RATE} Hz audio, got {}",
            chunk.sample_rate
        )));
    }
    let n_frames = frame_count(chunk.samples.len()).ok_or_else(|| {
        Error::Degenerate(format!(
            "chunk of {} samples is shorter than one {WINDOW_SAMPLES}-sample window",
            chunk.samples.len()
        ))
    })?;
    let window = hamming(WINDOW_SAMPLES);
    let mut frames = Array2::zeros((n_frames, WINDOW_SAMPLES));
    for (t, mut row) in frames.outer_iter_mut().enumerate() {
        let start = t * HOP_SAMPLES;
        let seg = &chunk.samples[start..start + WINDOW_SAMPLES];
        for ((dst, &x), &w) in row.iter_mut().zip(seg).zip(&window) {
            *dst = x * w;
        }
    }
    Ok(frames)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// 40 unit-peak triangular filters, mel-spaced over 0..8 kHz, on the 257
/// bins of a 512-point FFT.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `NUM_MEL × (FFT_SIZE/2 + 1)`.
    weights: Array2<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let n_bins = FFT_SIZE / 2 + 1;
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..NUM_MEL + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (NUM_MEL + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((NUM_MEL, n_bins));
        for m in 0..NUM_MEL {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
        }
        MelFilterbank {
            weights,
            centers_hz: edges[1..=NUM_MEL].to_vec(),
        }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

/// Reusable MBK/MFCC extractor (FFT plan, filterbank, DCT basis).
pub struct FeatureExtractor {
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
    dct: Array2<f64>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").finish_non_exhaustive()
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        FeatureExtractor {
            fft,
            filterbank: MelFilterbank::new(),
            dct: dct_basis(NUM_MFCC, NUM_MEL),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Power spectrum (257 bins) of each windowed frame, zero-padded to 512.
    pub fn power_spectrum(&self, frames: &Array2<f64>) -> Array2<f64> {
        let n_bins = FFT_SIZE / 2 + 1;
        let mut out = Array2::zeros((frames.nrows(), n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for (frame, mut dst) in frames.outer_iter().zip(out.outer_iter_mut()) {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, &x) in buf.iter_mut().zip(frame.iter()) {
                c.re = x;
            }
            self.fft.process(&mut buf);
            for (d, c) in dst.iter_mut().zip(&buf[..n_bins]) {
                *d = c.norm_sqr();
            }
        }
        out
    }

    /// Log mel energies, 40 per frame, floored at [`LOG_FLOOR`] before the log.
    pub fn mel_log_energies(&self, frames: &Array2<f64>) -> Array2<f64> {
        let power = self.power_spectrum(frames);
        let mut mel = power.dot(&self.filterbank.weights.t());
        mel.mapv_inplace(|e| e.max(LOG_FLOOR).ln());
        mel
    }

    pub fn mbk(&self, chunk_id: &str, frames: &Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(chunk_id, FeatureKind::Mbk, self.mel_log_energies(frames))
    }

    pub fn mfcc(&self, chunk_id: &str, frames: &Array2<f64>) -> FeatureMatrix {
        let mel = self.mel_log_energies(frames);
        FeatureMatrix::new(chunk_id, FeatureKind::Mfcc, mfcc_from_log_mel(&self.dct, &mel))
    }

    /// Frames and extracts one feature kind from raw audio.
    pub fn extract(&self, chunk_id: &str, chunk: &AudioChunk, kind: FeatureKind) -> Result<FeatureMatrix> {
        let frames = frame_signal(chunk)?;
        match kind {
            FeatureKind::Mbk => Ok(self.mbk(chunk_id, &frames)),
            FeatureKind::Mfcc => Ok(self.mfcc(chunk_id, &frames)),
            FeatureKind::DaeCode => Err(Error::Config(
                "DAE codes are produced by an encoder, not extracted from audio".into(),
            )),
        }
    }

    /// Extracts many chunks in parallel, preserving order.
    pub fn extract_all(&self, chunks: &[(&str, &AudioChunk)], kind: FeatureKind) -> Result<Vec<FeatureMatrix>> {
        use rayon::prelude::*;
        chunks.par_iter().map(|(id, audio)| self.extract(id, audio, kind)).collect()
    }
}

/// Orthonormal DCT-II basis, `n_out × n_in`.
pub fn dct_basis(n_out: usize, n_in: usize) -> Array2<f64> {
    let mut basis = Array2::zeros((n_out, n_in));
    let n = n_in as f64;
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..n_in {
            basis[[k, i]] = scale * (PI * k as f64 * (i as f64 + 0.5) / n).cos();
        }
    }
    basis
}

/// First 24 DCT-II coefficients (c0 included) of each log-mel row.
pub fn mfcc_from_log_mel(basis: &Array2<f64>, log_mel: &Array2<f64>) -> Array2<f64> {
    log_mel.dot(&basis.t())
}

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    /// Fits on every frame of `corpus`. Zero-variance dimensions have their
    /// standard deviation floored at [`STD_FLOOR`].
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<NormStats> {
        let mut count = 0usize;
        let mut sum: Option<Array1<f64>> = None;
        let mut sumsq: Option<Array1<f64>> = None;
        let mut shifts: Option<Array1<f64>> = None;
        for m in corpus {
            if m.frames() == 0 {
                continue;
            }
            // Shifted sums keep the variance accurate for large offsets.
            let shift = shifts.get_or_insert_with(|| m.values.row(0).to_owned());
            if shift.len() != m.dims() {
                return Err(Error::Shape(format!(
                    "corpus mixes {} and {} dimensional features",
                    shift.len(),
                    m.dims()
                )));
            }
            let s = sum.get_or_insert_with(|| Array1::zeros(m.dims()));
            let q = sumsq.get_or_insert_with(|| Array1::zeros(m.dims()));
            for row in m.values.outer_iter() {
                let d = &row - &*shift;
                *s += &d;
                *q += &d.mapv(|v| v * v);
            }
            count += m.frames();
        }
        let (Some(sum), Some(sumsq), Some(shift)) = (sum, sumsq, shifts) else {
            return Err(Error::Degenerate("cannot fit normalization on an empty corpus".into()));
        };
        let n = count as f64;
        let mut mean = Vec::with_capacity(shift.len());
        let mut std = Vec::with_capacity(shift.len());
        for d in 0..shift.len() {
            let m = sum[d] / n;
            let var = (sumsq[d] / n - m * m).max(0.0);
            let mut sd = var.sqrt();
            if sd < STD_FLOOR {
                log::warn!("normalization: dimension {d} has zero variance, flooring std");
                sd = STD_FLOOR;
            }
            mean.push(shift[d] + m);
            std.push(sd);
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check(matrix)?;
        let mut values = matrix.values.clone();
        for mut row in values.outer_iter_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(FeatureMatrix::new(matrix.chunk_id.clone(), matrix.kind, values))
    }

    pub fn invert(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check(matrix)?;
        let mut values = matrix.values.clone();
        for mut row in values.outer_iter_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(FeatureMatrix::new(matrix.chunk_id.clone(), matrix.kind, values))
    }

    fn check(&self, matrix: &FeatureMatrix) -> Result<()> {
        if matrix.dims() != self.dims() {
            return Err(Error::Shape(format!(
                "normalization fitted on {} dims, matrix has {}",
                self.dims(),
                matrix.dims()
            )));
        }
        Ok(())
    }

    /// Content hash used to tie models and caches to the statistics they used.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Context window layout: `2·half_width/dilation + 1` stacked frames plus
/// one noise block averaged over the first `noise_frames` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub half_width: usize,
    pub noise_frames: usize,
    /// Spacing between stacked frames; 1 stacks every frame.
    pub dilation: usize,
    /// Spacing between window centres.
    pub stride: usize,
}

impl ContextSpec {
    pub fn new(half_width: usize, noise_frames: usize) -> Self {
        ContextSpec {
            half_width,
            noise_frames,
            dilation: 1,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_frames < 1 {
            return Err(Error::Config("noise estimate needs at least one frame (T >= 1)".into()));
        }
        if self.stride < 1 || self.dilation < 1 {
            return Err(Error::Config("context stride and dilation must be >= 1".into()));
        }
        Ok(())
    }

    /// Frame offsets relative to the window centre.
    pub fn offsets(&self) -> Vec<isize> {
        let reach = (self.half_width / self.dilation * self.dilation) as isize;
        (-reach..=reach).step_by(self.dilation).collect()
    }

    pub fn stacked_frames(&self) -> usize {
        2 * (self.half_width / self.dilation) + 1
    }

    pub fn input_dim(&self, feature_dim: usize) -> usize {
        (self.stacked_frames() + 1) * feature_dim
    }

    pub fn centers(&self, frames: usize) -> impl Iterator<Item = usize> {
        (0..frames).step_by(self.stride)
    }
}

/// Mean of the first `noise_frames` rows.
pub fn noise_estimate(matrix: &FeatureMatrix, noise_frames: usize) -> Result<Array1<f64>> {
    if noise_frames < 1 {
        return Err(Error::Config("noise estimate needs at least one frame (T >= 1)".into()));
    }
    if matrix.frames() < noise_frames {
        return Err(Error::Degenerate(format!(
            "chunk {} has {} frames, fewer than the {noise_frames} noise frames",
            matrix.chunk_id,
            matrix.frames()
        )));
    }
    Ok(matrix
        .values
        .slice(s![..noise_frames, ..])
        .mean_axis(Axis(0))
        .expect("non-empty"))
}

/// Writes the replicate-padded frames at `center + offsets` into `out`.
pub fn stack_frames(matrix: &FeatureMatrix, center: usize, offsets: &[isize], out: &mut [f64]) {
    let dims = matrix.dims();
    let last = matrix.frames() as isize - 1;
    for (slot, &off) in out.chunks_exact_mut(dims).zip(offsets) {
        let t = (center as isize + off).clamp(0, last) as usize;
        for (d, v) in slot.iter_mut().zip(matrix.values.row(t).iter()) {
            *d = *v;
        }
    }
}

/// Writes one full context input (stacked frames then noise block) into `out`.
pub fn write_context_input(
    matrix: &FeatureMatrix,
    center: usize,
    offsets: &[isize],
    noise: ArrayView1<'_, f64>,
    out: &mut [f64],
) {
    let dims = matrix.dims();
    let stacked = offsets.len() * dims;
    stack_frames(matrix, center, offsets, &mut out[..stacked]);
    for (d, v) in out[stacked..stacked + dims].iter_mut().zip(noise.iter()) {
        *d = *v;
    }
}

/// A single network input: stacked context frames followed by the noise block.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextInput {
    pub center: usize,
    pub values: Vec<f64>,
}

impl ContextInput {
    pub fn noise_block(&self, feature_dim: usize) -> &[f64] {
        &self.values[self.values.len() - feature_dim..]
    }
}

/// Builds context inputs at every `spec.stride`-th frame.
pub fn make_context_inputs(matrix: &FeatureMatrix, spec: &ContextSpec) -> Result<Vec<ContextInput>> {
    spec.validate()?;
    let noise = noise_estimate(matrix, spec.noise_frames)?;
    let offsets = spec.offsets();
    let dim = spec.input_dim(matrix.dims());
    Ok(spec
        .centers(matrix.frames())
        .map(|center| {
            let mut values = vec![0.0; dim];
            write_context_input(matrix, center, &offsets, noise.view(), &mut values);
            ContextInput { center, values }
        })
        .collect())
}
