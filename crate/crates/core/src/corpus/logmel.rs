//! Log-Mel filterbank frontend for 16 kHz mono audio.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{MoleError, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Number of frames produced for `samples` input samples.
pub fn num_frames(samples: usize) -> Result<usize> {
    if samples < FRAME_LEN {
        return Err(MoleError::TooShort {
            samples,
            needed: FRAME_LEN,
        });
    }
    Ok(1 + (samples - FRAME_LEN) / HOP)
}

/// Triangular filters with peaks equally spaced on the mel scale over 0–8 kHz.
#[derive(Clone)]
pub struct MelFilterbank {
    /// `[N_MELS × (N_FFT/2 + 1)]`, row-major.
    weights: Vec<f64>,
    centers: Vec<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFilterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFilterbank")
            .field("centers", &self.centers)
            .finish()
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFilterbank {
    pub fn new() -> Self {
        let bins = N_FFT / 2 + 1;
        let top = hz_to_mel(f64::from(SAMPLE_RATE) / 2.0);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let mut weights = vec![0.0; N_MELS * bins];
        for m in 0..N_MELS {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * f64::from(SAMPLE_RATE) / N_FFT as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
        }
        let window = (0..FRAME_LEN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / FRAME_LEN as f64).cos())
            .collect();
        MelFilterbank {
            weights,
            centers: edges[1..=N_MELS].to_vec(),
            window,
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
        }
    }

    /// Peak frequency of each filter in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// `[frames × 80]` natural-log filterbank energies of the power spectrum.
    pub fn compute(&self, samples: &[f64], sample_rate: u32) -> Result<Tensor> {
        if sample_rate != SAMPLE_RATE {
            return Err(MoleError::Contract(format!(
                "expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz"
            )));
        }
        let frames = num_frames(samples.len())?;
        let bins = N_FFT / 2 + 1;
        let mut out = Vec::with_capacity(frames * N_MELS);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = vec![0.0; bins];
        for t in 0..frames {
            let chunk = &samples[t * HOP..t * HOP + FRAME_LEN];
            for (i, b) in buf.iter_mut().enumerate() {
                let v = if i < FRAME_LEN {
                    chunk[i] * self.window[i]
                } else {
                    0.0
                };
                *b = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..N_MELS {
                let row = &self.weights[m * bins..(m + 1) * bins];
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push(e.max(LOG_FLOOR).ln());
            }
        }
        Tensor::new(vec![frames, N_MELS], out)
    }
}

/// Log-Mel features of 16 kHz mono samples in `[-1, 1]`.
pub fn logmel(samples: &[f64], sample_rate: u32) -> Result<Tensor> {
    MelFilterbank::new().compute(samples, sample_rate)
}

/// Reads a PCM16 mono WAV file, scaling samples to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader =
        hound::WavReader::open(path).map_err(|e| MoleError::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(MoleError::Contract(format!(
            "{}: expected PCM16 mono, got {} channel(s), {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| MoleError::format(path, e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Log-Mel features of a WAV file.
pub fn logmel_wav(path: &Path) -> Result<Tensor> {
    let (samples, rate) = read_wav(path)?;
    logmel(&samples, rate)
}
