//! Synthetic-speaker corpora and the classification training loop.

mod adam;
mod dataset;
mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dataset::{
    load_normalized, read_manifest, ALL_LIST, shuffled, speaker_id, write_manifest, ManifestEntry, PlannedUtterance,
    SynthDataset, TrainingSet, UtteranceKind, HELDOUT_LIST, HELDOUT_PAIRS, MIN_SPEAKER_DISTANCE, TRAIN_FRACTION,
    TRAIN_LIST,
};
pub use synth::{
    draw_speakers, synth_mixed_utterance, synth_utterance, synth_utterance_with, SynthSpeakerSpec, UtteranceStyle,
    F0_RANGE, MIN_UTTERANCE_SECONDS,
};

use crate::audio::{frames_for_seconds, random_crop, AudioError, NUM_BINS};
use crate::model::{Checkpoint, ModelError, SpeakerModel};
use crate::tensor::{BatchNormMode, Float, Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate is divided by this factor every `decay_interval` epochs.
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a lower mean loss; 0 disables.
    pub patience: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_factor: 10.0,
            decay_interval: 8,
            batch_size: 16,
            crop_seconds: 2.5,
            epochs: 30,
            patience: 5,
            checkpoint_every: 0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.decay_factor >= 1.0) || self.decay_interval == 0 {
            return bad("decay factor must be >= 1 and interval positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.crop_seconds > 0.0) {
            return bad("crop length must be positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }

    /// Step-decayed learning rate for a 0-indexed epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate / self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
    pub stopped_early: bool,
    pub checkpoints: Vec<PathBuf>,
}

/// Stacks equally long normalized spectrograms into `N x 257 x T x 1`.
pub fn batch_tensor<T: Float>(specs: &[crate::audio::Spectrogram]) -> Result<Tensor<T>> {
    let frames = specs.first().map(|s| s.frames()).unwrap_or(0);
    let mut data = Vec::with_capacity(specs.len() * NUM_BINS * frames);
    for s in specs {
        if s.frames() != frames {
            return Err(TrainError::Config("batch spectrograms differ in length".into()));
        }
        data.extend(s.values().iter().map(|&v| T::from_f32(v).unwrap()));
    }
    Ok(Tensor::new([specs.len(), NUM_BINS, frames, 1], data)?)
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One optimisation step on a labelled batch; returns `(loss, accuracy)`.
pub fn train_step<T: Float>(
    model: &mut SpeakerModel<T>,
    state: &mut AdamState<T>,
    batch: Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let vars = model.store().bind(&mut g, true);
    let x = g.constant(batch);
    let fwd = model.loss_graph(&mut g, &vars, x, labels, BatchNormMode::Train)?;
    let loss = g.data(fwd.loss.loss)[0].to_f64().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("training loss".into()));
    }
    let classes = g.shape(fwd.logits)[1];
    let correct = g
        .data(fwd.logits)
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    g.backward(fwd.loss.loss)?;
    // Parameters that did not reach the loss get an explicit zero gradient.
    let fill: Vec<Option<Vec<T>>> = vars
        .iter()
        .zip(model.store().params())
        .map(|(&v, (_, t))| g.grad(v).is_none().then(|| vec![T::zero(); t.len()]))
        .collect();
    let grads: Vec<&[T]> = vars
        .iter()
        .zip(&fill)
        .map(|(&v, f)| match f {
            Some(z) => z.as_slice(),
            None => g.grad(v).expect("checked above"),
        })
        .collect();
    let mut params: Vec<&mut Tensor<T>> = model.store_mut().params_mut().collect();
    adam_step(&mut params, &grads, state, lr)?;
    model.apply_bn_updates(&fwd.updates);
    Ok((loss, correct as f64 / labels.len() as f64))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

/// Writes the checkpoint after checking every parameter and moment is finite.
pub fn write_checkpoint<T: Float>(model: &SpeakerModel<T>, state: &AdamState<T>, step: u64, path: &Path) -> Result<()> {
    if !model.store().all_finite() {
        return Err(TrainError::NonFinite("model parameters".into()));
    }
    let shapes: Vec<Vec<usize>> = model.store().params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let snap = state.snapshot(&shapes)?;
    Checkpoint::from_model(model, step, Some(snap)).save(path)?;
    Ok(())
}

/// Trains `model` on `data`.
///
/// Each epoch visits every utterance once in a seeded shuffle, taking one
/// random crop per visit. When `out_dir` is set, a per-step CSV log
/// (`train_log.csv`) and checkpoints are written there.
pub fn train<T: Float>(
    model: &mut SpeakerModel<T>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.num_classes() != model.config().num_classes {
        return Err(TrainError::Config(format!(
            "model has {} classes, training set has {}",
            model.config().num_classes,
            data.num_classes()
        )));
    }
    if data.items.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let need = frames_for_seconds(cfg.crop_seconds);
    if let Some((i, (spec, _))) = data.items.iter().enumerate().find(|(_, (s, _))| s.frames() < need) {
        return Err(TrainError::Config(format!(
            "utterance {i} has {} frames, a {} s crop needs {need}",
            spec.frames(),
            cfg.crop_seconds
        )));
    }
    let mut log = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
            let p = d.join("train_log.csv");
            let mut f = std::io::BufWriter::new(fs::File::create(&p).map_err(|e| io_err(&p, e))?);
            writeln!(f, "epoch,step,lr,loss,acc").map_err(|e| io_err(&p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.store().params().iter().map(|(_, t)| t.len()).collect();
    let mut state = AdamState::new(cfg.adam, sizes);
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled(data.items.len(), &mut rng);
        let (mut loss_sum, mut acc_sum, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut crops = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (spec, label) = &data.items[i];
                crops.push(random_crop(spec, cfg.crop_seconds, &mut rng)?);
                labels.push(*label);
            }
            let batch = batch_tensor(&crops)?;
            let (loss, acc) = train_step(model, &mut state, batch, &labels, lr)?;
            loss_sum += loss * chunk.len() as f64;
            acc_sum += acc * chunk.len() as f64;
            seen += chunk.len();
            let entry = StepLog {
                epoch,
                step: state.step,
                lr,
                loss,
                accuracy: acc,
            };
            if let Some((p, f)) = log.as_mut() {
                writeln!(f, "{},{},{:e},{:.6},{:.4}", epoch, entry.step, lr, loss, acc).map_err(|e| io_err(p, e))?;
            }
            report.steps.push(entry);
        }
        let summary = EpochSummary {
            epoch,
            mean_loss: loss_sum / seen as f64,
            accuracy: acc_sum / seen as f64,
        };
        if let (Some(d), true) = (out_dir, cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            let p = d.join(format!("epoch{:03}.vldn", epoch + 1));
            write_checkpoint(model, &state, state.step, &p)?;
            report.checkpoints.push(p);
        }
        if summary.mean_loss < best {
            best = summary.mean_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        report.epochs.push(summary);
        if cfg.patience > 0 && stale >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    if let Some((p, mut f)) = log {
        f.flush().map_err(|e| io_err(&p, e))?;
    }
    if let Some(d) = out_dir {
        let p = d.join("final.vldn");
        write_checkpoint(model, &state, state.step, &p)?;
        report.checkpoints.push(p);
    }
    Ok(report)
}
