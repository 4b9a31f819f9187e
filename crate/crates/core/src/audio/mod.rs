//! Audio front end: 16 kHz PCM input, 25 ms / 10 ms Hamming STFT magnitudes,
//! per-frame standardization, and random fixed-length crops.

mod spg;
mod stft;
mod wav;

use rand::Rng;
use thiserror::Error;

pub use spg::{read_spg, write_spg};
pub use stft::{frame_count, frame_power_spectrum, hamming_window, stft_spectrogram};
pub use wav::{load_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_LEN: usize = 400;
pub const HOP_LEN: usize = 160;
pub const FFT_LEN: usize = 512;
pub const NUM_BINS: usize = FFT_LEN / 2 + 1;
/// Reflection padding applied at both ends before framing.
pub const EDGE_PAD: usize = (WINDOW_LEN - HOP_LEN) / 2;
pub const FRAMES_PER_SECOND: f64 = 100.0;
/// Standard-deviation floor used by [`normalize_spectrogram`].
pub const NORM_EPS: f32 = 1e-8;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed WAV {path}: {detail}")]
    Malformed { path: String, detail: String },
    #[error("unsupported codec: {0}, expected 16-bit integer PCM")]
    Codec(String),
    #[error("channel count {0}, expected 1")]
    Channels(u16),
    #[error("sample rate {0}, expected 16000")]
    SampleRate(u32),
    #[error("audio has {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("spectrogram is already normalized")]
    AlreadyNormalized,
    #[error("utterance has {available} frames, requested crop of {requested}")]
    CropTooLong { available: usize, requested: usize },
    #[error("invalid audio buffer: {0}")]
    Invalid(String),
    #[error("bad spectrogram file: {0}")]
    BadSpg(String),
}

pub type Result<T, E = AudioError> = std::result::Result<T, E>;

/// Mono 16 kHz samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(AudioError::Invalid("empty buffer".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::Invalid(format!("sample {i} is not finite")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// `NUM_BINS x frames` matrix stored row-major (frequency-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl Spectrogram {
    pub fn from_values(frames: usize, values: Vec<f32>, normalized: bool) -> Result<Self> {
        if frames == 0 || values.len() != NUM_BINS * frames {
            return Err(AudioError::Invalid(format!(
                "{} values for {NUM_BINS} x {frames}",
                values.len()
            )));
        }
        Ok(Self {
            frames,
            values,
            normalized,
        })
    }

    pub fn bins(&self) -> usize {
        NUM_BINS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..NUM_BINS).map(|b| self.get(b, frame)).collect()
    }

    /// Contiguous frame range `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(AudioError::CropTooLong {
                available: self.frames.saturating_sub(start),
                requested: len,
            });
        }
        let mut values = Vec::with_capacity(NUM_BINS * len);
        for b in 0..NUM_BINS {
            values.extend_from_slice(&self.values[b * self.frames + start..][..len]);
        }
        Ok(Self {
            frames: len,
            values,
            normalized: self.normalized,
        })
    }

    /// Concatenates along time; both inputs must agree on normalization.
    pub fn concat_frames(&self, other: &Spectrogram) -> Result<Self> {
        if self.normalized != other.normalized {
            return Err(AudioError::Invalid("mixing normalized and raw spectrograms".into()));
        }
        let frames = self.frames + other.frames;
        let mut values = Vec::with_capacity(NUM_BINS * frames);
        for b in 0..NUM_BINS {
            values.extend_from_slice(&self.values[b * self.frames..][..self.frames]);
            values.extend_from_slice(&other.values[b * other.frames..][..other.frames]);
        }
        Ok(Self {
            frames,
            values,
            normalized: self.normalized,
        })
    }
}

/// Standardizes each time step across its frequency bins.
pub fn normalize_spectrogram(spec: &Spectrogram) -> Result<Spectrogram> {
    if spec.normalized {
        return Err(AudioError::AlreadyNormalized);
    }
    let mut out = spec.clone();
    standardize_columns(&mut out.values, spec.frames);
    out.normalized = true;
    Ok(out)
}

pub(crate) fn standardize_columns(values: &mut [f32], frames: usize) {
    let n = NUM_BINS as f64;
    for t in 0..frames {
        let mean = (0..NUM_BINS).map(|b| values[b * frames + t] as f64).sum::<f64>() / n;
        let var = (0..NUM_BINS)
            .map(|b| (values[b * frames + t] as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let denom = var.sqrt().max(NORM_EPS as f64);
        for b in 0..NUM_BINS {
            let v = &mut values[b * frames + t];
            *v = ((*v as f64 - mean) / denom) as f32;
        }
    }
}

/// Number of frames covering `seconds` at 100 frames per second.
pub fn frames_for_seconds(seconds: f64) -> usize {
    (seconds * FRAMES_PER_SECOND).round() as usize
}

/// Picks a start frame uniformly and returns `(start, crop)`.
pub fn random_crop_with_start<R: Rng + ?Sized>(
    spec: &Spectrogram,
    seconds: f64,
    rng: &mut R,
) -> Result<(usize, Spectrogram)> {
    let len = frames_for_seconds(seconds);
    if len == 0 || len > spec.frames {
        return Err(AudioError::CropTooLong {
            available: spec.frames,
            requested: len,
        });
    }
    let start = rng.random_range(0..=spec.frames - len);
    Ok((start, spec.slice_frames(start, len)?))
}

pub fn random_crop<R: Rng + ?Sized>(spec: &Spectrogram, seconds: f64, rng: &mut R) -> Result<Spectrogram> {
    random_crop_with_start(spec, seconds, rng).map(|(_, s)| s)
}
