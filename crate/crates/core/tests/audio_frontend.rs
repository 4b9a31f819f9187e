use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thinvlad::audio::{
    frame_power_spectrum, load_wav, normalize_spectrogram, random_crop, random_crop_with_start, read_spg,
    stft_spectrogram, write_spg, write_wav, AudioBuffer, AudioError, Spectrogram, NUM_BINS,
};

fn sine(freq: f64, samples: usize) -> AudioBuffer {
    AudioBuffer::new(
        (0..samples)
            .map(|n| (0.5 * (2.0 * PI * freq * n as f64 / 16_000.0).sin()) as f32)
            .collect(),
    )
    .unwrap()
}

/// Textbook O(N^2) DFT magnitude of one interior frame: 400 samples starting
/// 120 samples before the hop position, Hamming-weighted, zero-padded to 512.
fn reference_column(samples: &[f32], frame: usize) -> Vec<f64> {
    let start = frame * 160 - 120;
    let x: Vec<f64> = (0..400)
        .map(|n| {
            let w = 0.54 - 0.46 * (2.0 * PI * n as f64 / 399.0).cos();
            samples[start + n] as f64 * w
        })
        .collect();
    (0..257)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * n) as f64 / 512.0;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

#[test]
fn one_khz_sine_peaks_at_bin_32() {
    let audio = sine(1000.0, 16_000);
    let spec = stft_spectrogram(&audio).unwrap();
    assert_eq!((spec.bins(), spec.frames()), (257, 100));
    for t in 2..98 {
        let col = spec.column(t);
        let argmax = (0..NUM_BINS).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(argmax, 32, "frame {t}");
    }
}

#[test]
fn interior_columns_match_direct_dft() {
    let audio = AudioBuffer::new((0..8000).map(|n| ((n as f64 * 0.013).sin() * 0.3 + (n as f64 * 0.41).cos() * 0.1) as f32).collect()).unwrap();
    let spec = stft_spectrogram(&audio).unwrap();
    for t in [1usize, 7, 20, 48] {
        let reference = reference_column(audio.samples(), t);
        let scale = reference.iter().cloned().fold(0.0, f64::max);
        for (b, r) in reference.iter().enumerate() {
            let got = spec.get(b, t) as f64;
            assert!((got - r).abs() <= 1e-5 * scale, "frame {t} bin {b}: {got} vs {r}");
        }
    }
}

#[test]
fn parseval_holds_per_frame() {
    let audio = sine(440.0, 4_000);
    for t in [0usize, 5, 24] {
        let (power, energy) = frame_power_spectrum(&audio, t).unwrap();
        let total: f64 = power.iter().sum::<f64>() / 512.0;
        assert!((total - energy).abs() <= 1e-9 * energy.max(1.0));
    }
}

#[test]
fn crop_of_two_and_a_half_seconds_is_257_by_250() {
    let spec = stft_spectrogram(&sine(300.0, 40_000)).unwrap();
    assert_eq!((spec.bins(), spec.frames()), (257, 250));
}

#[test]
fn zero_audio_gives_zero_magnitudes() {
    let spec = stft_spectrogram(&AudioBuffer::new(vec![0.0; 16_000]).unwrap()).unwrap();
    assert_eq!(spec.frames(), 100);
    assert!(spec.values().iter().all(|&v| v == 0.0));
}

#[test]
fn too_short_audio_is_rejected() {
    let err = stft_spectrogram(&AudioBuffer::new(vec![0.1; 100]).unwrap()).unwrap_err();
    assert!(matches!(err, AudioError::TooShort { samples: 100, .. }));
}

fn ramp_spectrogram(frames: usize) -> Spectrogram {
    let values = (0..NUM_BINS * frames).map(|i| (i / frames) as f32 + 1.0).collect();
    Spectrogram::from_values(frames, values, false).unwrap()
}

#[test]
fn normalizing_a_ramp_column() {
    let n = normalize_spectrogram(&ramp_spectrogram(3)).unwrap();
    assert!(n.is_normalized());
    for t in 0..3 {
        let col: Vec<f64> = n.column(t).iter().map(|&v| v as f64).collect();
        let mean = col.iter().sum::<f64>() / 257.0;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 257.0).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
    }
}

#[test]
fn constant_column_normalizes_to_zero() {
    let spec = Spectrogram::from_values(2, vec![4.0; NUM_BINS * 2], false).unwrap();
    let n = normalize_spectrogram(&spec).unwrap();
    assert!(n.values().iter().all(|&v| v == 0.0));
}

#[test]
fn normalizing_twice_is_an_error() {
    let n = normalize_spectrogram(&ramp_spectrogram(2)).unwrap();
    assert!(matches!(normalize_spectrogram(&n), Err(AudioError::AlreadyNormalized)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_columns_have_zero_mean_unit_std(seed in 0u64..10_000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..NUM_BINS * 10).map(|_| rng.random_range(0.0f32..5.0)).collect();
        let n = normalize_spectrogram(&Spectrogram::from_values(10, values, false).unwrap()).unwrap();
        for t in 0..10 {
            let col: Vec<f64> = n.column(t).iter().map(|&v| v as f64).collect();
            let mean = col.iter().sum::<f64>() / 257.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 257.0).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn frame_count_tracks_hop(samples in 400usize..20_000) {
        let spec = stft_spectrogram(&AudioBuffer::new(vec![0.01; samples]).unwrap()).unwrap();
        prop_assert_eq!(spec.frames(), samples / 160);
    }

    #[test]
    fn crops_are_contiguous_slices(frames in 250usize..700, seed in 0u64..1000) {
        let spec = ramp_spectrogram(frames);
        let spec = Spectrogram::from_values(
            frames,
            spec.values().iter().enumerate().map(|(i, v)| v * 1000.0 + (i % frames) as f32).collect(),
            false,
        ).unwrap();
        let (start, crop) = random_crop_with_start(&spec, 2.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(crop.frames(), 250);
        for b in [0usize, 100, 256] {
            for t in [0usize, 249] {
                prop_assert_eq!(crop.get(b, t), spec.get(b, start + t));
            }
        }
    }
}

#[test]
fn crop_examples() {
    let spec = ramp_spectrogram(600);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    assert_eq!(random_crop(&spec, 2.5, &mut rng).unwrap().frames(), 250);

    let full = random_crop(&spec, 6.0, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    assert_eq!(full, spec);

    let a = random_crop_with_start(&spec, 2.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().0;
    let b = random_crop_with_start(&spec, 2.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().0;
    assert_eq!(a, b);

    assert!(matches!(
        random_crop(&spec, 6.5, &mut rng),
        Err(AudioError::CropTooLong { available: 600, requested: 650 })
    ));
}

#[test]
fn wav_round_trip_and_length() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let audio = sine(200.0, 16_000);
    write_wav(&path, &audio).unwrap();
    let back = load_wav(&path).unwrap();
    assert_eq!(back.len(), 16_000);
    for (a, b) in audio.samples().iter().zip(back.samples()) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }

    let zeros = dir.path().join("z.wav");
    write_wav(&zeros, &AudioBuffer::new(vec![0.0; 1600]).unwrap()).unwrap();
    assert!(load_wav(&zeros).unwrap().samples().iter().all(|&v| v == 0.0));
}

fn write_raw(path: &std::path::Path, channels: u16, sample_rate: u32) {
    let spec = hound::WavSpec {
        channels,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for _ in 0..(1000 * channels as usize) {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn wav_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let stereo = dir.path().join("s.wav");
    write_raw(&stereo, 2, 16_000);
    let err = load_wav(&stereo).unwrap_err();
    assert_eq!(err.to_string(), "channel count 2, expected 1");

    let narrow = dir.path().join("n.wav");
    write_raw(&narrow, 1, 8_000);
    assert!(matches!(load_wav(&narrow), Err(AudioError::SampleRate(8_000))));

    assert!(matches!(load_wav(dir.path().join("missing.wav")), Err(AudioError::Io { .. })));

    let junk = dir.path().join("j.wav");
    std::fs::write(&junk, b"not a wav file at all").unwrap();
    assert!(load_wav(&junk).is_err());
}

#[test]
fn spg_round_trip() {
    let spec = ramp_spectrogram(4);
    let mut bytes = Vec::new();
    write_spg(&mut bytes, &spec).unwrap();
    assert_eq!(&bytes[..4], b"SPG1");
    assert_eq!(bytes.len(), 12 + 257 * 4 * 4);
    assert_eq!(read_spg(&bytes[..], false).unwrap(), spec);
    assert!(read_spg(&bytes[..20], false).is_err());
    assert!(read_spg(&b"XXXX00000000"[..], false).is_err());
}
