//! Source-filter synthetic speakers: a jittered glottal sawtooth through
//! three two-pole formant resonators, in syllable-like bursts over a noise floor.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Result, TrainError};
use crate::audio::{AudioBuffer, SAMPLE_RATE};

pub const F0_RANGE: (f64, f64) = (90.0, 280.0);
const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 900.0), (900.0, 2500.0), (2300.0, 3600.0)];
const BANDWIDTH_RANGES: [(f64, f64); 3] = [(50.0, 120.0), (70.0, 180.0), (100.0, 250.0)];
const JITTER_RANGE: (f64, f64) = (0.02, 0.06);
const NOISE_RANGE: (f64, f64) = (0.002, 0.02);
pub const MIN_UTTERANCE_SECONDS: f64 = 3.0;
const PEAK: f32 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpeakerSpec {
    pub f0: f64,
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    /// Relative f0 excursion per syllable and slow drift amplitude.
    pub jitter: f64,
    /// White-noise amplitude relative to the harmonic source.
    pub noise_floor: f64,
}

/// How an utterance mixes the voiced source with the noise floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtteranceStyle {
    pub harmonic_gain: f64,
    /// Overrides the speaker's noise floor when set.
    pub noise_floor: Option<f64>,
}

impl Default for UtteranceStyle {
    fn default() -> Self {
        Self {
            harmonic_gain: 1.0,
            noise_floor: None,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

impl SynthSpeakerSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let formants = std::array::from_fn(|i| uniform(rng, FORMANT_RANGES[i]));
        let bandwidths = std::array::from_fn(|i| uniform(rng, BANDWIDTH_RANGES[i]));
        Self {
            f0: uniform(rng, F0_RANGE),
            formants,
            bandwidths,
            jitter: uniform(rng, JITTER_RANGE),
            noise_floor: uniform(rng, NOISE_RANGE),
        }
    }

    /// Identity coordinates scaled to roughly unit range: log-f0 and the three formants.
    pub fn identity_vector(&self) -> [f64; 4] {
        let lf = |v: f64, (lo, hi): (f64, f64)| (v.ln() - lo.ln()) / (hi.ln() - lo.ln());
        [
            lf(self.f0, F0_RANGE),
            lf(self.formants[0], FORMANT_RANGES[0]),
            lf(self.formants[1], FORMANT_RANGES[1]),
            lf(self.formants[2], FORMANT_RANGES[2]),
        ]
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.identity_vector()
            .iter()
            .zip(other.identity_vector())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Draws `n` speakers whose identity vectors are pairwise at least `min_distance` apart.
pub fn draw_speakers<R: Rng + ?Sized>(n: usize, min_distance: f64, rng: &mut R) -> Result<Vec<SynthSpeakerSpec>> {
    let mut out: Vec<SynthSpeakerSpec> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(TrainError::Config(format!(
                "cannot place {n} speakers at minimum distance {min_distance}"
            )));
        }
        let cand = SynthSpeakerSpec::random(rng);
        if out.iter().all(|s| s.distance(&cand) >= min_distance) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Two-pole resonator with unity gain at DC.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let c = -(-2.0 * std::f64::consts::PI * bandwidth / fs).exp();
        let b = 2.0 * (-std::f64::consts::PI * bandwidth / fs).exp() * (2.0 * std::f64::consts::PI * freq / fs).cos();
        Self {
            a: 1.0 - b - c,
            b,
            c,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bandwidth: f64) {
        let fresh = Self::new(freq, bandwidth);
        self.a = fresh.a;
        self.b = fresh.b;
        self.c = fresh.c;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn check_seconds(seconds: f64) -> Result<usize> {
    if !(seconds >= MIN_UTTERANCE_SECONDS) {
        return Err(TrainError::Config(format!(
            "utterance of {seconds} s requested, minimum is {MIN_UTTERANCE_SECONDS} s"
        )));
    }
    Ok((seconds * SAMPLE_RATE as f64).round() as usize)
}

/// Voiced bursts and pauses rendered into `out`, plus the noise floor.
fn render<R: Rng + ?Sized>(spec: &SynthSpeakerSpec, style: UtteranceStyle, out: &mut [f64], rng: &mut R) {
    let fs = SAMPLE_RATE as f64;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let syllable = Uniform::new(0.15, 0.40).unwrap();
    let pause = Uniform::new(0.03, 0.15).unwrap();
    let mut resonators: Vec<Resonator> = spec
        .formants
        .iter()
        .zip(&spec.bandwidths)
        .map(|(&f, &b)| Resonator::new(f, b))
        .collect();
    let drift_rate = uniform(rng, (0.2, 0.8));
    let drift_phase = uniform(rng, (0.0, std::f64::consts::TAU));
    let mut phase = 0.0f64;
    let mut pos = 0usize;
    let mut voiced = true;
    while pos < out.len() {
        let len = if voiced { syllable.sample(rng) } else { pause.sample(rng) };
        let end = (pos + (len * fs) as usize).min(out.len());
        if voiced && style.harmonic_gain > 0.0 {
            let f0 = spec.f0 * (1.0 + spec.jitter * normal.sample(rng)).max(0.5);
            let wobble = 0.5 * spec.jitter;
            for (r, (&f, &b)) in resonators.iter_mut().zip(spec.formants.iter().zip(&spec.bandwidths)) {
                let shift = 1.0 + wobble * normal.sample(rng);
                r.retune(f * shift, b);
            }
            let n = end - pos;
            for (i, o) in out[pos..end].iter_mut().enumerate() {
                let t = (pos + i) as f64 / fs;
                let f = f0 * (1.0 + spec.jitter * (std::f64::consts::TAU * drift_rate * t + drift_phase).sin());
                phase = (phase + f / fs).fract();
                let source = 2.0 * phase - 1.0;
                // Raised-cosine envelope over the syllable.
                let env = (std::f64::consts::PI * i as f64 / n as f64).sin();
                let mut y = source * env * style.harmonic_gain;
                for r in resonators.iter_mut() {
                    y = r.step(y);
                }
                *o += y;
            }
        } else {
            for o in out[pos..end].iter_mut() {
                let mut y = 0.0;
                for r in resonators.iter_mut() {
                    y = r.step(y);
                }
                *o += y;
            }
        }
        pos = end;
        voiced = !voiced;
    }
    let floor = style.noise_floor.unwrap_or(spec.noise_floor);
    if floor > 0.0 {
        let noise = Normal::new(0.0, floor).unwrap();
        for o in out.iter_mut() {
            *o += noise.sample(rng);
        }
    }
}

fn finish(mut samples: Vec<f64>) -> Result<AudioBuffer> {
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK as f64 / peak;
        samples.iter_mut().for_each(|v| *v *= g);
    }
    AudioBuffer::new(samples.into_iter().map(|v| v as f32).collect()).map_err(TrainError::from)
}

pub fn synth_utterance<R: Rng + ?Sized>(spec: &SynthSpeakerSpec, seconds: f64, rng: &mut R) -> Result<AudioBuffer> {
    synth_utterance_with(spec, seconds, UtteranceStyle::default(), rng)
}

pub fn synth_utterance_with<R: Rng + ?Sized>(
    spec: &SynthSpeakerSpec,
    seconds: f64,
    style: UtteranceStyle,
    rng: &mut R,
) -> Result<AudioBuffer> {
    let n = check_seconds(seconds)?;
    let mut out = vec![0.0; n];
    render(spec, style, &mut out, rng);
    finish(out)
}

/// Alternating speech and white-noise segments, half of the duration each.
///
/// Noise segments carry noise only, at an RMS comparable to the speech.
pub fn synth_mixed_utterance<R: Rng + ?Sized>(
    spec: &SynthSpeakerSpec,
    seconds: f64,
    segment_seconds: f64,
    rng: &mut R,
) -> Result<AudioBuffer> {
    let n = check_seconds(seconds)?;
    let seg = ((segment_seconds * SAMPLE_RATE as f64) as usize).max(1);
    let mut speech = vec![0.0; n];
    render(spec, UtteranceStyle::default(), &mut speech, rng);
    let rms = (speech.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-6);
    let noise = Normal::new(0.0, rms).unwrap();
    // Segment slots alternate; the first slot's kind is random.
    let speech_first = rng.random_bool(0.5);
    let mut out = vec![0.0; n];
    for (slot, chunk) in out.chunks_mut(seg).enumerate() {
        let start = slot * seg;
        let is_speech = (slot % 2 == 0) == speech_first;
        for (i, o) in chunk.iter_mut().enumerate() {
            *o = if is_speech {
                speech[start + i]
            } else {
                noise.sample(rng)
            };
        }
    }
    finish(out)
}
