//! Verification scoring, equal error rate and the crop-length probe.

mod eer;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

pub use eer::{compute_eer, EerResult, ScoreSet};

use crate::audio::{
    frames_for_seconds, load_wav, normalize_spectrogram, random_crop_with_start, stft_spectrogram, AudioError,
    Spectrogram,
};
use crate::model::{Embedding, ModelError, SpeakerModel};
use crate::tensor::Float;
use crate::trainer::ManifestEntry;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("utterance {path} has {frames} frames, probe needs {required}")]
    TooShort { path: String, frames: usize, required: usize },
    #[error("unknown utterance {0}")]
    Unknown(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io(format!("{}: {e}", path.display()))
}

/// Cosine similarity; a zero-norm side is an error rather than a silent 0.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Invalid(format!(
            "embedding lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::Invalid("zero-norm embedding".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VerificationPair {
    pub same_speaker: bool,
    pub a: PathBuf,
    pub b: PathBuf,
}

/// Reads `<label> <path_a> <path_b>` lines, label being 1 (same) or 0.
pub fn read_pairs(path: &Path) -> Result<Vec<VerificationPair>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: &str| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: message.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err("expected `<label> <path_a> <path_b>`"));
        }
        let same_speaker = match f[0] {
            "1" => true,
            "0" => false,
            _ => return Err(parse_err("label must be 0 or 1")),
        };
        out.push(VerificationPair {
            same_speaker,
            a: f[1].into(),
            b: f[2].into(),
        });
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[VerificationPair]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{} {} {}", p.same_speaker as u8, p.a.display(), p.b.display()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSampling {
    pub positives_per_speaker: usize,
    pub negatives_per_speaker: usize,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            positives_per_speaker: 10,
            negatives_per_speaker: 10,
        }
    }
}

/// Picks `count` of `n` candidates: distinct when possible, otherwise with replacement.
fn choose<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if count <= n {
        index::sample(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Samples target and non-target trials for every speaker in `entries`.
///
/// Targets pair two different utterances of the speaker; non-targets pair
/// one of its utterances with an utterance of another speaker.
pub fn sample_pairs<R: Rng + ?Sized>(
    entries: &[ManifestEntry],
    sampling: PairSampling,
    rng: &mut R,
) -> Result<Vec<VerificationPair>> {
    let mut by_speaker: BTreeMap<&str, Vec<&Path>> = BTreeMap::new();
    for e in entries {
        by_speaker.entry(&e.speaker).or_default().push(&e.path);
    }
    if by_speaker.len() < 2 {
        return Err(EvalError::Invalid("pair sampling needs at least two speakers".into()));
    }
    if let Some((s, _)) = by_speaker.iter().find(|(_, u)| u.len() < 2) {
        return Err(EvalError::Invalid(format!(
            "speaker {s} has a single utterance, no target trial possible"
        )));
    }
    let mut out = Vec::new();
    for (spk, utts) in &by_speaker {
        let n = utts.len();
        let within: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for k in choose(within.len(), sampling.positives_per_speaker, rng) {
            let (i, j) = within[k];
            out.push(VerificationPair {
                same_speaker: true,
                a: utts[i].to_path_buf(),
                b: utts[j].to_path_buf(),
            });
        }
        let others: Vec<&Path> = entries
            .iter()
            .filter(|e| e.speaker != *spk)
            .map(|e| e.path.as_path())
            .collect();
        for k in choose(n * others.len(), sampling.negatives_per_speaker, rng) {
            out.push(VerificationPair {
                same_speaker: false,
                a: utts[k / others.len()].to_path_buf(),
                b: others[k % others.len()].to_path_buf(),
            });
        }
    }
    Ok(out)
}

/// Provides normalized spectrograms by utterance path.
pub trait UtteranceSource: Sync {
    fn spectrogram(&self, path: &Path) -> Result<Spectrogram>;
}

/// WAV files relative to a base directory.
pub struct WavDirectory {
    pub base: PathBuf,
}

impl UtteranceSource for WavDirectory {
    fn spectrogram(&self, path: &Path) -> Result<Spectrogram> {
        let audio = load_wav(self.base.join(path))?;
        Ok(normalize_spectrogram(&stft_spectrogram(&audio)?)?)
    }
}

/// Precomputed spectrograms keyed by path.
#[derive(Default)]
pub struct MemorySource(pub HashMap<PathBuf, Spectrogram>);

impl UtteranceSource for MemorySource {
    fn spectrogram(&self, path: &Path) -> Result<Spectrogram> {
        self.0
            .get(path)
            .cloned()
            .ok_or_else(|| EvalError::Unknown(path.display().to_string()))
    }
}

fn unique_paths(pairs: &[VerificationPair]) -> Vec<&Path> {
    let mut seen = std::collections::HashSet::new();
    pairs
        .iter()
        .flat_map(|p| [p.a.as_path(), p.b.as_path()])
        .filter(|p| seen.insert(*p))
        .collect()
}

fn load_all<'a>(source: &dyn UtteranceSource, paths: &[&'a Path]) -> Result<Vec<(&'a Path, Spectrogram)>> {
    paths
        .par_iter()
        .map(|p| source.spectrogram(p).map(|s| (*p, s)))
        .collect()
}

fn embed_all<T: Float>(model: &SpeakerModel<T>, specs: &[Spectrogram]) -> Result<Vec<Embedding>> {
    specs.par_iter().map(|s| model.embed(s).map_err(EvalError::from)).collect()
}

fn score_with(pairs: &[VerificationPair], emb: &HashMap<&Path, Embedding>) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| cosine_score(emb[p.a.as_path()].as_slice(), emb[p.b.as_path()].as_slice()))
        .collect()
}

/// Scores every pair with full-length embeddings, each utterance embedded once.
pub fn score_pairs<T: Float>(
    model: &SpeakerModel<T>,
    source: &dyn UtteranceSource,
    pairs: &[VerificationPair],
) -> Result<Vec<f64>> {
    let paths = unique_paths(pairs);
    let loaded = load_all(source, &paths)?;
    let specs: Vec<Spectrogram> = loaded.iter().map(|(_, s)| s.clone()).collect();
    let emb = embed_all(model, &specs)?;
    let map: HashMap<&Path, Embedding> = paths.iter().copied().zip(emb).collect();
    score_with(pairs, &map)
}

/// Scores every pair on random crops of `seconds`: one crop per distinct
/// utterance, drawn in first-appearance order.
pub fn score_pairs_cropped<T: Float, R: Rng + ?Sized>(
    model: &SpeakerModel<T>,
    source: &dyn UtteranceSource,
    pairs: &[VerificationPair],
    seconds: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let paths = unique_paths(pairs);
    let loaded = load_all(source, &paths)?;
    let crops = crop_all(&loaded, seconds, rng)?;
    let emb = embed_all(model, &crops)?;
    let map: HashMap<&Path, Embedding> = paths.iter().copied().zip(emb).collect();
    score_with(pairs, &map)
}

fn crop_all<R: Rng + ?Sized>(loaded: &[(&Path, Spectrogram)], seconds: f64, rng: &mut R) -> Result<Vec<Spectrogram>> {
    loaded
        .iter()
        .map(|(_, s)| Ok(random_crop_with_start(s, seconds, rng)?.1))
        .collect()
}

pub fn score_set(pairs: &[VerificationPair], scores: Vec<f64>) -> Result<ScoreSet> {
    ScoreSet::new(scores, pairs.iter().map(|p| p.same_speaker).collect())
}

/// `label,path_a,path_b,score` CSV text.
pub fn format_scores(pairs: &[VerificationPair], scores: &[f64]) -> String {
    let mut out = String::from("label,path_a,path_b,score\n");
    for (p, s) in pairs.iter().zip(scores) {
        out.push_str(&format!("{},{},{},{}\n", p.same_speaker as u8, p.a.display(), p.b.display(), s));
    }
    out
}

pub fn write_scores(path: &Path, pairs: &[VerificationPair], scores: &[f64]) -> Result<()> {
    fs::write(path, format_scores(pairs, scores)).map_err(|e| io_err(path, e))
}

/// Reads a score CSV written by [`write_scores`].
pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: message.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err("expected 4 comma-separated fields"));
        }
        labels.push(match f[0] {
            "1" => true,
            "0" => false,
            _ => return Err(parse_err("label must be 0 or 1")),
        });
        scores.push(f[3].trim().parse::<f64>().map_err(|_| parse_err("bad score"))?);
    }
    ScoreSet::new(scores, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub length_seconds: f64,
    pub eer_mean: f64,
    /// Population standard deviation over repeats.
    pub eer_std: f64,
    pub eers: Vec<f64>,
}

pub const PROBE_LENGTHS: [f64; 5] = [2.0, 3.0, 4.0, 5.0, 6.0];

/// EER of fixed trials as a function of test crop length.
///
/// Every utterance must cover the longest crop. Each repeat draws fresh
/// crops for all utterances at every length.
pub fn length_probe<T: Float, R: Rng + ?Sized>(
    model: &SpeakerModel<T>,
    source: &dyn UtteranceSource,
    pairs: &[VerificationPair],
    lengths: &[f64],
    repeats: usize,
    rng: &mut R,
) -> Result<Vec<ProbeRow>> {
    if lengths.is_empty() || repeats == 0 {
        return Err(EvalError::Invalid("probe needs at least one length and one repeat".into()));
    }
    let longest = lengths.iter().cloned().fold(0.0, f64::max);
    let required = frames_for_seconds(longest);
    let paths = unique_paths(pairs);
    let loaded = load_all(source, &paths)?;
    if let Some((p, s)) = loaded.iter().find(|(_, s)| s.frames() < required) {
        return Err(EvalError::TooShort {
            path: p.display().to_string(),
            frames: s.frames(),
            required,
        });
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut eers = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let crops = crop_all(&loaded, len, rng)?;
            let emb = embed_all(model, &crops)?;
            let map: HashMap<&Path, Embedding> = paths.iter().copied().zip(emb).collect();
            let set = score_set(pairs, score_with(pairs, &map)?)?;
            eers.push(compute_eer(&set).eer);
        }
        let mean = eers.iter().sum::<f64>() / eers.len() as f64;
        let var = eers.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / eers.len() as f64;
        rows.push(ProbeRow {
            length_seconds: len,
            eer_mean: mean,
            eer_std: var.sqrt(),
            eers,
        });
    }
    Ok(rows)
}

/// `length_s,eer_mean,eer_std` CSV text.
pub fn format_probe(rows: &[ProbeRow]) -> String {
    let mut out = String::from("length_s,eer_mean,eer_std\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.length_seconds, r.eer_mean, r.eer_std));
    }
    out
}

pub fn write_probe(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    fs::write(path, format_probe(rows)).map_err(|e| io_err(path, e))
}
