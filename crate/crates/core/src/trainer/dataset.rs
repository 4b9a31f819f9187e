//! Synthetic corpora on disk and the manifests that index them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::synth::{draw_speakers, synth_mixed_utterance, synth_utterance, SynthSpeakerSpec};
use super::{Result, TrainError};
use crate::audio::{load_wav, normalize_spectrogram, stft_spectrogram, write_wav, Spectrogram};

pub const TRAIN_LIST: &str = "train.lst";
pub const HELDOUT_LIST: &str = "heldout.lst";
pub const HELDOUT_PAIRS: &str = "heldout_pairs.lst";
pub const ALL_LIST: &str = "all.lst";
/// Mixes into the render seed of speech/noise utterances so they never
/// replay the syllable stream of the clean utterance with the same index.
const MIXED_SEED_SALT: u64 = 0x6d69_7865_645f_7365;
pub const TRAIN_FRACTION: f64 = 0.8;
pub const MIN_SPEAKER_DISTANCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    pub path: PathBuf,
}

/// Reads `<speaker_id> <relative_wav_path>` lines; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TrainError::Io(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(spk), Some(p), None) => out.push(ManifestEntry {
                speaker: spk.to_string(),
                path: PathBuf::from(p),
            }),
            _ => {
                return Err(TrainError::Manifest(format!(
                    "{}:{}: expected `<speaker> <path>`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        writeln!(w, "{} {}", e.speaker, e.path.display()).map_err(|e| TrainError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::Io(e.to_string()))
}

/// Which utterance renderer a planned file uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UtteranceKind {
    Clean,
    /// Half speech, half white noise in alternating segments.
    Mixed,
}

#[derive(Clone, Debug)]
pub struct PlannedUtterance {
    pub speaker: usize,
    pub index: usize,
    pub seconds: f64,
    pub seed: u64,
    pub heldout: bool,
}

/// A fully determined synthetic corpus; rendering does not consume the caller's RNG.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub speakers: Vec<SynthSpeakerSpec>,
    pub utterances: Vec<PlannedUtterance>,
    pub kind: UtteranceKind,
    pub segment_seconds: f64,
}

pub fn speaker_id(i: usize) -> String {
    format!("spk{i:03}")
}

impl SynthDataset {
    /// Draws speakers and per-utterance seeds; the first 80% of each speaker's
    /// utterances are marked for training, the rest held out.
    pub fn plan<R: Rng + ?Sized>(
        n_speakers: usize,
        utts_per_speaker: usize,
        seconds_range: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        if n_speakers < 2 || utts_per_speaker < 2 {
            return Err(TrainError::Config(
                "need at least 2 speakers with 2 utterances each".into(),
            ));
        }
        let (lo, hi) = seconds_range;
        if !(lo >= super::synth::MIN_UTTERANCE_SECONDS && hi >= lo && hi.is_finite()) {
            return Err(TrainError::Config(format!("bad seconds range {lo}..{hi}")));
        }
        let speakers = draw_speakers(n_speakers, MIN_SPEAKER_DISTANCE, rng)?;
        let n_train = ((utts_per_speaker as f64 * TRAIN_FRACTION).round() as usize).clamp(1, utts_per_speaker - 1);
        let mut utterances = Vec::with_capacity(n_speakers * utts_per_speaker);
        for s in 0..n_speakers {
            for u in 0..utts_per_speaker {
                let seconds = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                utterances.push(PlannedUtterance {
                    speaker: s,
                    index: u,
                    seconds: (seconds * 100.0).round() / 100.0,
                    seed: rng.random(),
                    heldout: u >= n_train,
                });
            }
        }
        Ok(Self {
            speakers,
            utterances,
            kind: UtteranceKind::Clean,
            segment_seconds: 0.5,
        })
    }

    pub fn relative_path(&self, u: &PlannedUtterance) -> PathBuf {
        PathBuf::from(speaker_id(u.speaker)).join(format!("utt{:03}.wav", u.index))
    }

    pub fn render(&self, u: &PlannedUtterance) -> Result<crate::audio::AudioBuffer> {
        let seed = match self.kind {
            UtteranceKind::Clean => u.seed,
            UtteranceKind::Mixed => u.seed ^ MIXED_SEED_SALT,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = &self.speakers[u.speaker];
        match self.kind {
            UtteranceKind::Clean => synth_utterance(spec, u.seconds, &mut rng),
            UtteranceKind::Mixed => synth_mixed_utterance(spec, u.seconds, self.segment_seconds, &mut rng),
        }
    }

    pub fn entries(&self, heldout: bool) -> Vec<ManifestEntry> {
        self.utterances
            .iter()
            .filter(|u| u.heldout == heldout)
            .map(|u| ManifestEntry {
                speaker: speaker_id(u.speaker),
                path: self.relative_path(u),
            })
            .collect()
    }

    /// Renders every WAV and writes the train, held-out and combined manifests under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for s in 0..self.speakers.len() {
            let d = dir.join(speaker_id(s));
            fs::create_dir_all(&d).map_err(|e| TrainError::Io(format!("{}: {e}", d.display())))?;
        }
        self.utterances.par_iter().try_for_each(|u| -> Result<()> {
            let audio = self.render(u)?;
            write_wav(dir.join(self.relative_path(u)), &audio)?;
            Ok(())
        })?;
        write_manifest(&dir.join(TRAIN_LIST), &self.entries(false))?;
        write_manifest(&dir.join(HELDOUT_LIST), &self.entries(true))?;
        let all: Vec<ManifestEntry> = self
            .utterances
            .iter()
            .map(|u| ManifestEntry {
                speaker: speaker_id(u.speaker),
                path: self.relative_path(u),
            })
            .collect();
        write_manifest(&dir.join(ALL_LIST), &all)?;
        Ok(())
    }
}

/// Normalized spectrograms with integer speaker labels, ready for training.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub speakers: Vec<String>,
    pub items: Vec<(Spectrogram, usize)>,
}

impl TrainingSet {
    pub fn num_classes(&self) -> usize {
        self.speakers.len()
    }

    /// Loads each listed WAV (paths relative to `base`) and extracts its spectrogram.
    pub fn from_manifest(base: &Path, entries: &[ManifestEntry]) -> Result<Self> {
        let speakers: Vec<String> = entries
            .iter()
            .map(|e| e.speaker.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let items = entries
            .par_iter()
            .map(|e| -> Result<(Spectrogram, usize)> {
                let spg = load_normalized(&base.join(&e.path))?;
                Ok((spg, index[e.speaker.as_str()]))
            })
            .collect::<Result<Vec<_>>>()?;
        if speakers.len() < 2 {
            return Err(TrainError::Config("training set needs at least 2 speakers".into()));
        }
        Ok(Self { speakers, items })
    }
}

pub fn load_normalized(path: &Path) -> Result<Spectrogram> {
    let audio = load_wav(path)?;
    Ok(normalize_spectrogram(&stft_spectrogram(&audio)?)?)
}

/// Shuffles a copy of `0..n` with the given RNG.
pub fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
