//! Thin ResNet-34 trunk: spectrogram `N x 257 x T x 1` to descriptors `N x 1 x T/32 x D`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::params::{BufferId, ParamId, ParamStore};
use super::TrunkConfig;
use crate::tensor::{BatchNormMode, BatchStats, Float, Graph, Padding, Result, Tensor, Var};

/// Running-statistics update produced by one batch-norm layer in train mode.
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

pub(crate) struct Forward<'a, T> {
    pub g: &'a mut Graph<T>,
    pub vars: &'a [Var],
    pub store: &'a ParamStore<T>,
    pub mode: BatchNormMode,
    pub updates: Vec<BnUpdate<T>>,
}

impl<T: Float> Forward<'_, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// He-uniform kernel in HWIO layout.
pub(crate) fn conv_kernel<T: Float, R: Rng + ?Sized>(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut R) -> Tensor<T> {
    let fan_in = (kh * kw * cin) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
    Tensor::from_fn([kh, kw, cin, cout], |_| T::from_f64_lossy(dist.sample(rng)))
}

pub(crate) struct ConvBn {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    stride: (usize, usize),
    padding: Padding,
    relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: (usize, usize),
        cin: usize,
        cout: usize,
        stride: (usize, usize),
        padding: Padding,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            kernel: store.add_param(format!("{name}.kernel"), conv_kernel(kernel.0, kernel.1, cin, cout, rng)),
            gamma: store.add_param(format!("{name}.bn.gamma"), Tensor::full([cout], T::one())),
            beta: store.add_param(format!("{name}.bn.beta"), Tensor::zeros([cout])),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros([cout])),
            running_var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::full([cout], T::one())),
            stride,
            padding,
            relu,
        }
    }

    fn forward<T: Float>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = f.g.conv2d(x, f.var(self.kernel), self.stride, self.padding)?;
        let running = (
            f.store.buffer(self.running_mean).data(),
            f.store.buffer(self.running_var).data(),
        );
        let (y, stats) = f.g.batch_norm(y, f.var(self.gamma), f.var(self.beta), f.mode, Some(running))?;
        if let Some(stats) = stats {
            f.updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
        }
        Ok(if self.relu { f.g.relu(y) } else { y })
    }
}

/// `[1x1 mid, 3x3 mid, 1x1 out]` with a projection shortcut when the shape changes.
struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn forward<T: Float>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(f, x)?;
        let h = self.spatial.forward(f, h)?;
        let h = self.expand.forward(f, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(f, x)?,
            None => x,
        };
        let sum = f.g.add(h, skip)?;
        Ok(f.g.relu(sum))
    }
}

pub(crate) struct Trunk {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
    projection: ConvBn,
}

impl Trunk {
    pub fn build<T: Float, R: Rng + ?Sized>(cfg: &TrunkConfig, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let stem_w = cfg.stem_width();
        let stem = ConvBn::build(store, "trunk.stem", (7, 7), 1, stem_w, (1, 1), Padding::Same, true, rng);
        let mut blocks = Vec::new();
        let mut cin = stem_w;
        for (si, &(mid, out, count)) in cfg.stages().iter().enumerate() {
            for bi in 0..count {
                let stride = if si > 0 && bi == 0 { (2, 2) } else { (1, 1) };
                let name = format!("trunk.stage{}.block{bi}", si + 1);
                let reduce = ConvBn::build(store, &format!("{name}.reduce"), (1, 1), cin, mid, (1, 1), Padding::Same, true, rng);
                let spatial = ConvBn::build(store, &format!("{name}.spatial"), (3, 3), mid, mid, stride, Padding::Same, true, rng);
                let expand = ConvBn::build(store, &format!("{name}.expand"), (1, 1), mid, out, (1, 1), Padding::Same, false, rng);
                let shortcut = (cin != out || stride != (1, 1)).then(|| {
                    ConvBn::build(store, &format!("{name}.shortcut"), (1, 1), cin, out, stride, Padding::Same, false, rng)
                });
                blocks.push(Bottleneck {
                    reduce,
                    spatial,
                    expand,
                    shortcut,
                });
                cin = out;
            }
        }
        let projection = ConvBn::build(
            store,
            "trunk.projection",
            (7, 1),
            cin,
            cfg.frame_dim(),
            (1, 1),
            Padding::Valid,
            true,
            rng,
        );
        Self {
            stem,
            blocks,
            projection,
        }
    }

    /// Runs the trunk, reporting the activation after each stage
    /// boundary to `trace` when given.
    pub fn forward<T: Float>(
        &self,
        f: &mut Forward<'_, T>,
        x: Var,
        mut trace: Option<&mut Vec<Vec<usize>>>,
    ) -> Result<Var> {
        let mut record = |g: &Graph<T>, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(g.shape(v).to_vec());
            }
        };
        let mut h = self.stem.forward(f, x)?;
        record(f.g, h);
        h = f.g.maxpool2d(h, (2, 2), (2, 2))?;
        record(f.g, h);
        let mut prev_stage = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let stage = stage_of(i);
            if prev_stage.is_some() && prev_stage != Some(stage) {
                record(f.g, h);
            }
            prev_stage = Some(stage);
            h = block.forward(f, h)?;
        }
        record(f.g, h);
        h = f.g.maxpool2d(h, (3, 1), (2, 2))?;
        record(f.g, h);
        h = self.projection.forward(f, h)?;
        record(f.g, h);
        Ok(h)
    }
}

fn stage_of(block: usize) -> usize {
    let mut acc = 0;
    for (s, &(_, _, n)) in super::config::STAGES.iter().enumerate() {
        acc += n;
        if block < acc {
            return s;
        }
    }
    super::config::STAGES.len() - 1
}
