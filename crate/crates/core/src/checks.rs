//! Self-checks shared by the command line and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::NUM_BINS;
use crate::losses::{self, AmSoftmaxConfig, LossKind};
use crate::model::{HeadConfig, HeadKind, ModelConfig, SpeakerModel, TrunkConfig};
use crate::tensor::{grad_check_subset, BatchNormMode, GradCheckReport, Graph, Padding, Result, Tensor, Var};

/// Frequency extents after each trunk stage boundary.
pub const FREQ_CHAIN: [usize; 8] = [257, 128, 128, 64, 32, 16, 7, 1];
pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeCheck {
    pub frames: usize,
    pub stage: usize,
    pub expected: Vec<usize>,
    pub actual: Vec<usize>,
}

impl ShapeCheck {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }
}

/// Expected `[1, F, T, C]` extents at each stage boundary for `frames` input frames.
pub fn expected_extents(cfg: &TrunkConfig, frames: usize) -> Vec<Vec<usize>> {
    let half_up = |t: usize| t.div_ceil(2);
    let mut times = vec![frames, frames / 2];
    let mut t = frames / 2;
    times.push(t);
    for _ in 0..3 {
        t = half_up(t);
        times.push(t);
    }
    t = half_up(t);
    times.push(t);
    times.push(t);
    let stages = cfg.stages();
    let channels = [
        cfg.stem_width(),
        cfg.stem_width(),
        stages[0].1,
        stages[1].1,
        stages[2].1,
        stages[3].1,
        stages[3].1,
        cfg.frame_dim(),
    ];
    (0..8).map(|i| vec![1, FREQ_CHAIN[i], times[i], channels[i]]).collect()
}

/// Traces the default trunk for each input length against [`expected_extents`].
pub fn shape_suite(frames: &[usize]) -> crate::model::Result<Vec<ShapeCheck>> {
    let cfg = ModelConfig::default();
    let model = SpeakerModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut out = Vec::new();
    for &t in frames {
        let actual = model.trace_shapes(t)?;
        let expected = expected_extents(&cfg.trunk, t);
        for (stage, exp) in expected.into_iter().enumerate() {
            out.push(ShapeCheck {
                frames: t,
                stage,
                expected: exp,
                actual: actual.get(stage).cloned().unwrap_or_default(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.passed(GRAD_TOLERANCE)
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(normal(g.shape(out), &mut rng));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn case<F>(name: &'static str, f: F, inputs: &[Tensor<f64>], max_per_input: usize) -> Result<GradCase>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(GradCase {
        name,
        report: grad_check_subset(f, inputs, GRAD_EPS, max_per_input, 17)?,
    })
}

fn vlad_case(name: &'static str, ghosts: usize, rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (k, d) = (3, 4);
    let inputs = [
        normal(&[2, 5, d], rng),
        normal(&[k + ghosts, d], rng),
        normal(&[k + ghosts], rng),
        normal(&[k + ghosts, d], rng),
    ];
    case(
        name,
        |g, v| {
            let out = crate::model::vlad_graph(g, v[0], v[1], v[2], v[3], k, true)?;
            project(g, out, 6)
        },
        &inputs,
        usize::MAX,
    )
}

/// Tiny configuration used for the whole-model check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        trunk: TrunkConfig::with_multiplier(1.0 / 32.0),
        head: HeadConfig {
            kind: HeadKind::GhostVlad,
            clusters: 2,
            ghost_clusters: 1,
            intra_normalize: true,
        },
        embed_dim: 8,
        num_classes: 3,
        loss: LossKind::default(),
    }
}

fn full_model_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let model = SpeakerModel::<f64>::new(tiny_model_config(), rng).expect("valid tiny config");
    let x = normal(&[2, NUM_BINS, 64, 1], rng);
    let labels = [0usize, 2];
    let inputs: Vec<Tensor<f64>> = model.store().params().iter().map(|(_, t)| t.clone()).collect();
    case(
        "full_model",
        |g, v| {
            let xv = g.constant(x.clone());
            let fwd = model
                .loss_graph(g, v, xv, &labels, BatchNormMode::Train)
                .map_err(|e| crate::tensor::TensorError::ShapeMismatch {
                    op: "full_model",
                    detail: e.to_string(),
                })?;
            Ok(fwd.loss.loss)
        },
        &inputs,
        usize::MAX,
    )
}

/// Runs the 64-bit finite-difference suite; `full` adds the whole-model case.
pub fn gradient_suite(full: bool) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = Vec::new();

    let conv_in = [normal(&[2, 6, 5, 2], &mut rng), normal(&[3, 3, 2, 3], &mut rng)];
    cases.push(case(
        "conv2d",
        |g, v| {
            let y = g.conv2d(v[0], v[1], (2, 1), Padding::Same)?;
            project(g, y, 1)
        },
        &conv_in,
        usize::MAX,
    )?);

    let bn_in = [normal(&[3, 2, 2, 3], &mut rng), normal(&[3], &mut rng), normal(&[3], &mut rng)];
    cases.push(case(
        "batchnorm2d",
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, None)?;
            project(g, y, 2)
        },
        &bn_in,
        usize::MAX,
    )?);

    let lin_in = [normal(&[4, 5], &mut rng), normal(&[5, 3], &mut rng), normal(&[3], &mut rng)];
    cases.push(case(
        "linear",
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, 3)
        },
        &lin_in,
        usize::MAX,
    )?);

    let sm_in = [normal(&[4, 5], &mut rng)];
    cases.push(case(
        "softmax_rows",
        |g, v| {
            let y = g.softmax_rows(v[0]);
            project(g, y, 4)
        },
        &sm_in,
        usize::MAX,
    )?);

    let l2_in = [normal(&[3, 6], &mut rng)];
    cases.push(case(
        "l2_normalize",
        |g, v| {
            let y = g.l2_normalize(v[0], 1)?;
            project(g, y, 5)
        },
        &l2_in,
        usize::MAX,
    )?);

    cases.push(vlad_case("netvlad_aggregate", 0, &mut rng)?);
    cases.push(vlad_case("ghostvlad_aggregate", 2, &mut rng)?);

    let ce_in = [normal(&[4, 5], &mut rng)];
    let labels = [1usize, 0, 4, 2];
    cases.push(case(
        "softmax_ce",
        |g, v| Ok(losses::softmax_ce(g, v[0], &labels).expect("labels in range")),
        &ce_in,
        usize::MAX,
    )?);

    let am_in = [normal(&[4, 6], &mut rng), normal(&[5, 6], &mut rng)];
    let am_cfg = AmSoftmaxConfig::with_defaults(5).expect("valid defaults");
    cases.push(case(
        "am_softmax",
        |g, v| Ok(losses::am_softmax(g, v[0], v[1], &labels, &am_cfg).expect("valid batch").loss),
        &am_in,
        usize::MAX,
    )?);

    if full {
        cases.push(full_model_case(&mut rng)?);
    }
    Ok(cases)
}
