use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioBuffer, AudioError, Result, Spectrogram, EDGE_PAD, FFT_LEN, HOP_LEN, NUM_BINS, WINDOW_LEN};

/// `0.54 - 0.46 cos(2 pi n / (N - 1))`.
pub fn hamming_window(len: usize) -> Vec<f64> {
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect()
}

/// Frames produced for `samples` input samples: one per 10 ms hop.
pub fn frame_count(samples: usize) -> usize {
    samples / HOP_LEN
}

fn reflect_padded(x: &[f32]) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * EDGE_PAD);
    out.extend((1..=EDGE_PAD).rev().map(|i| x[i] as f64));
    out.extend(x.iter().map(|&v| v as f64));
    out.extend((0..EDGE_PAD).map(|i| x[n - 2 - i] as f64));
    out
}

fn windowed_frame(padded: &[f64], window: &[f64], frame: usize) -> Vec<Complex<f64>> {
    let start = frame * HOP_LEN;
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
    for (i, (s, w)) in padded[start..start + WINDOW_LEN].iter().zip(window).enumerate() {
        buf[i] = Complex::new(s * w, 0.0);
    }
    buf
}

fn check_len(audio: &AudioBuffer) -> Result<()> {
    if audio.len() < WINDOW_LEN {
        return Err(AudioError::TooShort {
            samples: audio.len(),
            needed: WINDOW_LEN,
        });
    }
    Ok(())
}

/// Linear STFT magnitudes, `257 x floor(samples / 160)`, unnormalized.
pub fn stft_spectrogram(audio: &AudioBuffer) -> Result<Spectrogram> {
    check_len(audio)?;
    let frames = frame_count(audio.len());
    let padded = reflect_padded(audio.samples());
    let window = hamming_window(WINDOW_LEN);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_LEN);
    let mut values = vec![0.0f32; NUM_BINS * frames];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let mut buf = windowed_frame(&padded, &window, t);
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (b, c) in buf[..NUM_BINS].iter().enumerate() {
            values[b * frames + t] = c.norm() as f32;
        }
    }
    Spectrogram::from_values(frames, values, false)
}

/// Squared magnitude of all 512 bins of one frame, together with the energy
/// of the windowed samples that went into it.
pub fn frame_power_spectrum(audio: &AudioBuffer, frame: usize) -> Result<(Vec<f64>, f64)> {
    check_len(audio)?;
    if frame >= frame_count(audio.len()) {
        return Err(AudioError::Invalid(format!("frame {frame} out of range")));
    }
    let padded = reflect_padded(audio.samples());
    let window = hamming_window(WINDOW_LEN);
    let mut buf = windowed_frame(&padded, &window, frame);
    let energy = buf.iter().map(|c| c.re * c.re).sum();
    FftPlanner::<f64>::new().plan_fft_forward(FFT_LEN).process(&mut buf);
    Ok((buf.iter().map(|c| c.norm_sqr()).collect(), energy))
}
