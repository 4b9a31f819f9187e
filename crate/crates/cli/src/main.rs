mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::CliConfig;
use thinvlad::audio::{load_wav, normalize_spectrogram, stft_spectrogram, write_spg};
use thinvlad::checks;
use thinvlad::eval::{self, PairSampling, WavDirectory};
use thinvlad::model::{load_checkpoint, SpeakerModel};
use thinvlad::trainer::{self, SynthDataset, TrainingSet, UtteranceKind};

#[derive(Parser)]
#[command(name = "thinvlad", version, about = "Speaker verification with a thin ResNet and VLAD pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the magnitude spectrogram of a WAV file as SPG1.
    Spectrogram {
        wav: PathBuf,
        out: PathBuf,
        /// Standardize each time step across frequency before writing.
        #[arg(long)]
        normalize: bool,
    },
    /// Render a synthetic-speaker corpus with manifests and held-out trials.
    SynthData {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        min_seconds: f64,
        #[arg(long, default_value_t = 6.0)]
        max_seconds: f64,
        /// Alternate speech with white-noise segments, half of each utterance.
        #[arg(long)]
        mixed: bool,
    },
    /// Train a model on a manifest; writes checkpoints and a CSV log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the unit-norm embedding of a WAV file.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        wav: PathBuf,
    },
    /// Score a trial list with cosine similarity.
    ScorePairs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Directory the trial paths are relative to (default: the list's directory).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Score random crops of this length instead of full utterances.
        #[arg(long)]
        crop_seconds: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Equal error rate of a score CSV.
    Eer { scores: PathBuf },
    /// EER against test crop length on a manifest of long utterances.
    LengthProbe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = eval::PROBE_LENGTHS)]
        lengths: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        positives: usize,
        #[arg(long, default_value_t = 10)]
        negatives: usize,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the 64-bit finite-difference gradient suite.
    GradCheck {
        /// Include the whole-model composition.
        #[arg(long)]
        full: bool,
    },
    /// Verify every trunk stage extent for the default configuration.
    ShapeCheck,
}

fn base_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<SpeakerModel<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Spectrogram { wav, out, normalize } => {
            let audio = load_wav(&wav)?;
            let mut spec = stft_spectrogram(&audio)?;
            if normalize {
                spec = normalize_spectrogram(&spec)?;
            }
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_spg(std::io::BufWriter::new(file), &spec)?;
            eprintln!("{} bins x {} frames -> {}", spec.bins(), spec.frames(), out.display());
        }
        Command::SynthData {
            out_dir,
            speakers,
            utts,
            seed,
            min_seconds,
            max_seconds,
            mixed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ds = SynthDataset::plan(speakers, utts, (min_seconds, max_seconds), &mut rng)?;
            if mixed {
                ds.kind = UtteranceKind::Mixed;
            }
            ds.write_to(&out_dir)?;
            let held = ds.entries(true);
            let trials = match eval::sample_pairs(&held, PairSampling::default(), &mut rng) {
                Ok(pairs) => {
                    eval::write_pairs(&out_dir.join(trainer::HELDOUT_PAIRS), &pairs)?;
                    pairs.len()
                }
                Err(e) => {
                    eprintln!("warning: no held-out trial list written: {e}");
                    0
                }
            };
            eprintln!(
                "{} utterances from {speakers} speakers, {trials} held-out trials -> {}",
                ds.utterances.len(),
                out_dir.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => {
            let mut cfg = CliConfig::default();
            if let Some(p) = &config {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                cfg.apply_text(&text, &p.display().to_string()).map_err(UsageError)?;
            }
            cfg.apply_overrides(&overrides).map_err(UsageError)?;
            cfg.validate().map_err(UsageError)?;
            let resolved = cfg.resolved();
            eprint!("{resolved}");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("config.txt"), &resolved)?;
            let entries = trainer::read_manifest(&data)?;
            let set = TrainingSet::from_manifest(&base_of(&data), &entries)?;
            let model_cfg = cfg.model_config(set.num_classes())?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let mut model = SpeakerModel::<f32>::new(model_cfg, &mut rng)?;
            let report = trainer::train(&mut model, &set, &cfg.train, Some(&out))?;
            if let Some(last) = report.epochs.last() {
                eprintln!(
                    "trained {} epochs{}: loss {:.4}, accuracy {:.4}",
                    report.epochs.len(),
                    if report.stopped_early { " (early stop)" } else { "" },
                    last.mean_loss,
                    last.accuracy
                );
            }
        }
        Command::Embed { ckpt, wav } => {
            let model = load_model(&ckpt)?;
            let spec = normalize_spectrogram(&stft_spectrogram(&load_wav(&wav)?)?)?;
            let emb = model.embed(&spec)?;
            let line: Vec<String> = emb.as_slice().iter().map(|v| v.to_string()).collect();
            println!("{}", line.join(" "));
        }
        Command::ScorePairs {
            ckpt,
            pairs,
            base,
            crop_seconds,
            seed,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let list = eval::read_pairs(&pairs)?;
            let source = WavDirectory {
                base: base.unwrap_or_else(|| base_of(&pairs)),
            };
            let scores = match crop_seconds {
                Some(s) => eval::score_pairs_cropped(&model, &source, &list, s, &mut ChaCha8Rng::seed_from_u64(seed))?,
                None => eval::score_pairs(&model, &source, &list)?,
            };
            emit(out.as_deref(), &eval::format_scores(&list, &scores))?;
        }
        Command::Eer { scores } => {
            let set = eval::read_scores(&scores)?;
            let r = eval::compute_eer(&set);
            println!("EER {:.4}", r.eer);
            println!("threshold {:.6}", r.threshold);
        }
        Command::LengthProbe {
            ckpt,
            data,
            lengths,
            repeats,
            seed,
            positives,
            negatives,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let entries = trainer::read_manifest(&data)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampling = PairSampling {
                positives_per_speaker: positives,
                negatives_per_speaker: negatives,
            };
            let pairs = eval::sample_pairs(&entries, sampling, &mut rng)?;
            let source = WavDirectory { base: base_of(&data) };
            let rows = eval::length_probe(&model, &source, &pairs, &lengths, repeats, &mut rng)?;
            emit(out.as_deref(), &eval::format_probe(&rows))?;
        }
        Command::GradCheck { full } => {
            let cases = checks::gradient_suite(full)?;
            let mut failed = 0;
            for c in &cases {
                let r = &c.report;
                println!(
                    "{:<20} {} max_rel {:.3e} checked {} below_noise {} kinks_skipped {}",
                    c.name,
                    if c.passed() { "ok  " } else { "FAIL" },
                    r.max_rel_error,
                    r.checked,
                    r.below_noise,
                    r.skipped_at_kinks
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient check(s) failed");
            }
        }
        Command::ShapeCheck => {
            let rows = checks::shape_suite(&[64, 128, 256])?;
            let mut failed = 0;
            for r in &rows {
                println!(
                    "T={:<4} stage {} expected {:?} got {:?} {}",
                    r.frames,
                    r.stage,
                    r.expected,
                    r.actual,
                    if r.passed() { "ok" } else { "MISMATCH" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} extent(s) differ");
            }
        }
    }
    Ok(())
}

/// Bad configuration keys or values; reported like argument errors.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
