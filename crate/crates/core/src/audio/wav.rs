use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioBuffer, AudioError, Result, SAMPLE_RATE};

fn hound_err(path: &Path, e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.display().to_string(),
            source,
        },
        hound::Error::Unsupported => AudioError::Codec("unsupported WAV encoding".into()),
        other => AudioError::Malformed {
            path: path.display().to_string(),
            detail: other.to_string(),
        },
    }
}

/// Reads 16-bit PCM mono 16 kHz WAV; samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::Codec(format!(
            "{:?} with {} bits per sample",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(AudioError::Channels(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::SampleRate(spec.sample_rate));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| hound_err(path, e))?;
    AudioBuffer::new(samples)
}

/// Writes 16-bit PCM mono 16 kHz; values are clamped to the i16 range.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in audio.samples() {
        let v = (s as f64 * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(v).map_err(|e| hound_err(path, e))?;
    }
    w.finalize().map_err(|e| hound_err(path, e))
}
