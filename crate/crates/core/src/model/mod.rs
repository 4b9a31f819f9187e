//! Thin-ResNet speaker model: trunk, temporal aggregation head, FC
//! reduction to the embedding, and the training classifier.

mod checkpoint;
mod config;
mod heads;
mod params;
mod trunk;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointTensor, OptimizerSnapshot, CHECKPOINT_VERSION};
pub use config::{HeadConfig, HeadKind, ModelConfig, TrunkConfig, FRAME_DIM, STAGES, STEM_WIDTH};
pub use heads::{
    ghostvlad_aggregate, netvlad_aggregate, soft_assign_graph, soft_assignment, tap_aggregate, vlad_graph, vlad_matrix,
    VladParams,
};
pub use params::{BufferId, ParamId, ParamStore};
pub use trunk::BnUpdate;

use crate::audio::{Spectrogram, NUM_BINS};
use crate::losses::{self, AmSoftmaxConfig, LossError, LossKind, LossOutput};
use crate::tensor::{BatchNormMode, Float, Graph, Tensor, TensorError, Var};
use trunk::{Forward, Trunk};

/// Shortest spectrogram (in frames) accepted by the trunk.
pub const MIN_FRAMES: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("spectrogram has {frames} frames, the trunk needs at least {MIN_FRAMES}")]
    InputTooShort { frames: usize },
    #[error("spectrogram must be normalized before embedding")]
    NotNormalized,
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("shape mismatch for tensor '{name}': checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor '{0}' missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint stores {found:?} tensors, requested {requested:?}")]
    DType {
        found: crate::tensor::DType,
        requested: crate::tensor::DType,
    },
    #[error("non-finite parameter '{0}'")]
    NonFiniteParameter(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Unit-norm utterance embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Parameter counts of the trunk at a given width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrunkParamCount {
    /// Stem, residual stages and their batch-norm affines.
    pub residual_body: usize,
    /// Final `7 x 1` frame projection and its batch-norm affine.
    pub projection: usize,
}

impl TrunkParamCount {
    pub fn total(&self) -> usize {
        self.residual_body + self.projection
    }
}

enum Head {
    Tap,
    Vlad {
        weights: ParamId,
        bias: ParamId,
        centres: ParamId,
        clusters: usize,
        intra_normalize: bool,
    },
}

/// Output of a training-mode forward pass.
pub struct TrainForward<T> {
    pub loss: LossOutput,
    /// `n x C` logits used for accuracy (cosines for AM-softmax).
    pub logits: Var,
    pub updates: Vec<BnUpdate<T>>,
}

pub struct SpeakerModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    trunk: Trunk,
    head: Head,
    fc_weight: ParamId,
    fc_bias: ParamId,
    classifier_weight: ParamId,
    classifier_bias: Option<ParamId>,
}

fn lecun_uniform<T: Float, R: Rng + ?Sized>(shape: [usize; 2], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

fn scaled_normal<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(dist.sample(rng)))
}

impl<T: Float> SpeakerModel<T> {
    /// Builds a freshly initialized model; the layer stack and parameter
    /// order depend only on `config`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate().map_err(ModelError::Config)?;
        let mut store = ParamStore::default();
        let trunk = Trunk::build(&config.trunk, &mut store, rng);
        let d = config.trunk.frame_dim();
        let head = match config.head.kind {
            HeadKind::Tap => Head::Tap,
            HeadKind::NetVlad | HeadKind::GhostVlad => {
                let total = config.head.clusters + config.head.effective_ghosts();
                Head::Vlad {
                    weights: store.add_param("vlad.assign_weights", scaled_normal(&[total, d], 0.1, rng)),
                    bias: store.add_param("vlad.assign_bias", scaled_normal(&[total], 0.1, rng)),
                    centres: store.add_param("vlad.centres", scaled_normal(&[total, d], 0.1, rng)),
                    clusters: config.head.clusters,
                    intra_normalize: config.head.intra_normalize,
                }
            }
        };
        let agg = config.head.output_dim(d);
        let e = config.embed_dim;
        let fc_weight = store.add_param("fc.weight", lecun_uniform([agg, e], agg, rng));
        let fc_bias = store.add_param("fc.bias", Tensor::zeros([e]));
        let classifier_weight = store.add_param(
            "classifier.weight",
            lecun_uniform([config.num_classes, e], e, rng),
        );
        let classifier_bias = matches!(config.loss, LossKind::Softmax)
            .then(|| store.add_param("classifier.bias", Tensor::zeros([config.num_classes])));
        Ok(Self {
            config,
            store,
            trunk,
            head,
            fc_weight,
            fc_bias,
            classifier_weight,
            classifier_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn trunk_param_count(&self) -> TrunkParamCount {
        let trunk = self.store.count_with_prefix("trunk.");
        let projection = self.store.count_with_prefix("trunk.projection.");
        TrunkParamCount {
            residual_body: trunk - projection,
            projection,
        }
    }

    /// Current VLAD parameters, if the head is a VLAD variant.
    pub fn vlad_params(&self) -> Option<VladParams<T>> {
        match self.head {
            Head::Tap => None,
            Head::Vlad {
                weights,
                bias,
                centres,
                clusters,
                intra_normalize,
            } => {
                let mut p = VladParams::new(
                    clusters,
                    self.store.param(weights).shape()[0] - clusters,
                    self.store.param(weights).clone(),
                    self.store.param(bias).clone(),
                    self.store.param(centres).clone(),
                )
                .ok()?;
                p.intra_normalize = intra_normalize;
                Some(p)
            }
        }
    }

    /// Descriptors `N x 1 x T' x D` for an `N x 257 x T x 1` input on `g`.
    pub fn trunk_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: Var,
        mode: BatchNormMode,
        trace: Option<&mut Vec<Vec<usize>>>,
    ) -> Result<(Var, Vec<BnUpdate<T>>)> {
        let mut f = Forward {
            g,
            vars,
            store: &self.store,
            mode,
            updates: Vec::new(),
        };
        let out = self.trunk.forward(&mut f, input, trace)?;
        Ok((out, f.updates))
    }

    /// Aggregated utterance vectors `N x agg` from `N x 1 x T' x D` descriptors.
    pub fn head_graph(&self, g: &mut Graph<T>, vars: &[Var], descriptors: Var) -> Result<Var> {
        let s = g.shape(descriptors).to_vec();
        let feats = g.reshape(descriptors, &[s[0], s[1] * s[2], s[3]])?;
        Ok(match self.head {
            Head::Tap => g.mean_time(feats)?,
            Head::Vlad {
                weights,
                bias,
                centres,
                clusters,
                intra_normalize,
            } => vlad_graph(
                g,
                feats,
                vars[weights.0],
                vars[bias.0],
                vars[centres.0],
                clusters,
                intra_normalize,
            )?,
        })
    }

    /// Pre-normalization FC output `N x E`.
    pub fn embedding_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: Var,
        mode: BatchNormMode,
    ) -> Result<(Var, Vec<BnUpdate<T>>)> {
        let (desc, updates) = self.trunk_graph(g, vars, input, mode, None)?;
        let agg = self.head_graph(g, vars, desc)?;
        let emb = g.linear(agg, vars[self.fc_weight.0], Some(vars[self.fc_bias.0]))?;
        Ok((emb, updates))
    }

    /// Classification loss on a labelled batch `N x 257 x T x 1`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: Var,
        labels: &[usize],
        mode: BatchNormMode,
    ) -> Result<TrainForward<T>> {
        let (emb, updates) = self.embedding_graph(g, vars, input, mode)?;
        let w = vars[self.classifier_weight.0];
        let (loss, logits) = match self.config.loss {
            LossKind::Softmax => {
                let wt = g.transpose(w)?;
                let bias = self.classifier_bias.map(|b| vars[b.0]);
                let logits = g.linear(emb, wt, bias)?;
                let loss = losses::softmax_ce(g, logits, labels)?;
                (
                    LossOutput {
                        loss,
                        degenerate_features: 0,
                    },
                    logits,
                )
            }
            LossKind::AmSoftmax { margin, scale } => {
                let cfg = AmSoftmaxConfig::new(margin, scale, self.config.num_classes)?;
                let (cos, _) = losses::cosine_logits(g, emb, w)?;
                let out = losses::am_softmax(g, emb, w, labels, &cfg)?;
                (out, cos)
            }
        };
        Ok(TrainForward {
            loss,
            logits,
            updates,
        })
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let mut mean = self.store.buffer(u.mean).clone();
            let mut var = self.store.buffer(u.var).clone();
            u.stats.update_running(mean.data_mut(), var.data_mut());
            *self.store.buffer_mut(u.mean) = mean;
            *self.store.buffer_mut(u.var) = var;
        }
    }

    fn spectrogram_input(&self, g: &mut Graph<T>, spec: &Spectrogram) -> Result<Var> {
        if !spec.is_normalized() {
            return Err(ModelError::NotNormalized);
        }
        if spec.frames() < MIN_FRAMES {
            return Err(ModelError::InputTooShort { frames: spec.frames() });
        }
        let data = spec.values().iter().map(|&v| T::from_f32(v).unwrap()).collect();
        Ok(g.constant(Tensor::new([1, NUM_BINS, spec.frames(), 1], data)?))
    }

    /// Frame-level descriptors `1 x T' x D` in eval mode.
    pub fn frame_features(&self, spec: &Spectrogram) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let vars = self.store.bind(&mut g, false);
        let x = self.spectrogram_input(&mut g, spec)?;
        let (desc, _) = self.trunk_graph(&mut g, &vars, x, BatchNormMode::Eval, None)?;
        let s = g.shape(desc).to_vec();
        Ok(g.value(desc).clone().reshape([1, s[2], s[3]])?)
    }

    /// Head output before the FC layer, in eval mode.
    pub fn aggregate(&self, spec: &Spectrogram) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let vars = self.store.bind(&mut g, false);
        let x = self.spectrogram_input(&mut g, spec)?;
        let (desc, _) = self.trunk_graph(&mut g, &vars, x, BatchNormMode::Eval, None)?;
        let agg = self.head_graph(&mut g, &vars, desc)?;
        Ok(g.value(agg).clone())
    }

    /// Unit-norm embedding of a normalized spectrogram (eval-mode batch norm).
    pub fn embed(&self, spec: &Spectrogram) -> Result<Embedding> {
        let mut g = Graph::inference();
        let vars = self.store.bind(&mut g, false);
        let x = self.spectrogram_input(&mut g, spec)?;
        let (emb, _) = self.embedding_graph(&mut g, &vars, x, BatchNormMode::Eval)?;
        let unit = g.l2_normalize(emb, 1)?;
        Ok(Embedding(g.data(unit).iter().map(|v| v.to_f32().unwrap()).collect()))
    }

    /// Shapes after each trunk stage for an `N x 257 x frames x 1` input.
    pub fn trace_shapes(&self, frames: usize) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::inference();
        let vars = self.store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, NUM_BINS, frames, 1]));
        let mut trace = Vec::new();
        self.trunk_graph(&mut g, &vars, x, BatchNormMode::Eval, Some(&mut trace))?;
        Ok(trace)
    }

    /// Same model in another float width (parameters cast element-wise).
    pub fn cast<U: Float>(&self) -> SpeakerModel<U> {
        let mut out = SpeakerModel::<U>::skeleton(self.config.clone());
        out.store = self.store.cast();
        out
    }

    /// Layer layout for `config` with placeholder parameters.
    pub(crate) fn skeleton(config: ModelConfig) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Self::new(config, &mut rng).expect("validated configuration")
    }

    /// Overwrites parameters and buffers from `tensors` by name, checking shapes.
    pub fn load_tensors(&mut self, tensors: &[CheckpointTensor<T>]) -> Result<()> {
        let find = |name: &str| tensors.iter().find(|t| t.name == name);
        let assign = |name: &str, slot: &mut Tensor<T>| -> Result<()> {
            let t = find(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
            if t.tensor.shape() != slot.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: name.to_string(),
                    expected: slot.shape().to_vec(),
                    found: t.tensor.shape().to_vec(),
                });
            }
            *slot = t.tensor.clone();
            Ok(())
        };
        let mut store = self.store.clone();
        for (name, slot) in store.params_named_mut() {
            assign(&name, slot)?;
        }
        for (name, slot) in store.buffers_mut() {
            let name = name.to_string();
            assign(&name, slot)?;
        }
        self.store = store;
        Ok(())
    }
}

/// Trunk parameter counts for `cfg` without keeping a model around.
pub fn trunk_param_count(cfg: &TrunkConfig) -> TrunkParamCount {
    let mut store = ParamStore::<f32>::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Trunk::build(cfg, &mut store, &mut rng);
    let projection = store.count_with_prefix("trunk.projection.");
    TrunkParamCount {
        residual_body: store.num_parameters() - projection,
        projection,
    }
}
