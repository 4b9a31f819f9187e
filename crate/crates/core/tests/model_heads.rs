use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thinvlad::audio::{normalize_spectrogram, Spectrogram, NUM_BINS};
use thinvlad::model::{
    ghostvlad_aggregate, netvlad_aggregate, soft_assignment, tap_aggregate, vlad_matrix, Checkpoint, HeadConfig,
    HeadKind, ModelConfig, ModelError, SpeakerModel, TrunkConfig,
};
use thinvlad::tensor::Tensor;

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0) * scale)
}

fn vlad_params(k: usize, g: usize, d: usize, rng: &mut ChaCha8Rng) -> thinvlad::model::VladParams<f64> {
    thinvlad::model::VladParams::new(
        k,
        g,
        random_tensor(&[k + g, d], 1.0, rng),
        random_tensor(&[k + g], 1.0, rng),
        random_tensor(&[k + g, d], 1.0, rng),
    )
    .unwrap()
}

fn spectrogram(frames: usize, seed: u64) -> Spectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..NUM_BINS * frames).map(|_| rng.random_range(0.0f32..3.0)).collect();
    normalize_spectrogram(&Spectrogram::from_values(frames, values, false).unwrap()).unwrap()
}

fn small_model(head: HeadKind, width: f64, seed: u64) -> SpeakerModel<f32> {
    let cfg = ModelConfig {
        trunk: TrunkConfig::with_multiplier(width),
        head: HeadConfig {
            kind: head,
            ..HeadConfig::default()
        },
        embed_dim: 64,
        num_classes: 4,
        ..ModelConfig::default()
    };
    SpeakerModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn full_width_trunk_descriptor_counts() {
    let model = SpeakerModel::<f32>::new(
        ModelConfig {
            num_classes: 10,
            ..ModelConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(model.frame_features(&spectrogram(256, 1)).unwrap().shape(), [1, 8, 512]);
    assert_eq!(model.frame_features(&spectrogram(250, 2)).unwrap().shape(), [1, 8, 512]);
    assert_eq!(model.frame_features(&spectrogram(512, 3)).unwrap().shape(), [1, 16, 512]);
    assert_eq!(model.aggregate(&spectrogram(256, 4)).unwrap().len(), 8 * 512);

    let e = model.embed(&spectrogram(256, 1)).unwrap();
    assert_eq!(e.dim(), 512);
    let norm: f64 = e.as_slice().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn embedding_is_deterministic() {
    let model = small_model(HeadKind::GhostVlad, 0.25, 3);
    let spec = spectrogram(200, 9);
    assert_eq!(model.embed(&spec).unwrap(), model.embed(&spec).unwrap());
}

#[test]
fn input_requirements() {
    let model = small_model(HeadKind::Tap, 0.125, 0);
    assert!(matches!(
        model.embed(&spectrogram(20, 0)),
        Err(ModelError::InputTooShort { frames: 20 })
    ));
    let raw = Spectrogram::from_values(64, vec![1.0; NUM_BINS * 64], false).unwrap();
    assert!(matches!(model.embed(&raw), Err(ModelError::NotNormalized)));
}

#[test]
fn last_frame_change_stays_in_a_trailing_window() {
    let model = small_model(HeadKind::Tap, 0.25, 5);
    let a = spectrogram(1024, 21);
    let mut values = a.values().to_vec();
    for b in 0..NUM_BINS {
        values[b * 1024 + 1023] = if b % 2 == 0 { 2.0 } else { -2.0 };
    }
    let b = Spectrogram::from_values(1024, values, true).unwrap();
    let fa = model.frame_features(&a).unwrap();
    let fb = model.frame_features(&b).unwrap();
    let d = fa.shape()[2];
    let differs: Vec<bool> = fa
        .data()
        .chunks_exact(d)
        .zip(fb.data().chunks_exact(d))
        .map(|(x, y)| x.iter().zip(y).any(|(p, q)| (p - q).abs() > 1e-6))
        .collect();
    assert_eq!(differs.len(), 32);
    assert!(*differs.last().unwrap());
    let first = differs.iter().position(|&v| v).unwrap();
    assert!(differs[first..].iter().all(|&v| v), "{differs:?}");
    assert!(first >= 16, "change reached descriptor {first}");
}

#[test]
fn tap_examples() {
    let v = Tensor::new([1, 3], vec![1.0f64, -2.0, 0.5]).unwrap();
    assert_eq!(tap_aggregate(&v).unwrap().data(), v.data());
    let pair = Tensor::new([2, 3], vec![1.0f64, -2.0, 0.5, -1.0, 2.0, -0.5]).unwrap();
    assert!(tap_aggregate(&pair).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn tap_is_invariant_to_self_concatenation() {
    let model = small_model(HeadKind::Tap, 0.25, 8);
    let feats = model.frame_features(&spectrogram(256, 4)).unwrap().cast::<f64>();
    let d = feats.shape()[2];
    let once = feats.clone().reshape([8, d]).unwrap();
    let mut doubled = feats.data().to_vec();
    doubled.extend_from_slice(feats.data());
    let twice = Tensor::new([16, d], doubled).unwrap();
    let a = tap_aggregate(&once).unwrap();
    let b = tap_aggregate(&twice).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-5);
    }
}

#[test]
fn single_cluster_assignment_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = vlad_params(1, 0, 4, &mut rng);
    let x = random_tensor(&[5, 4], 1.0, &mut rng);
    assert!(soft_assignment(&x, &p).unwrap().data().iter().all(|&a| (a - 1.0).abs() < 1e-15));
    let v = vlad_matrix(&x, &p).unwrap();
    for j in 0..4 {
        let expected: f64 = (0..5).map(|t| x.data()[t * 4 + j] - p.centres.data()[j]).sum();
        assert!((v.data()[j] - expected).abs() < 1e-12);
    }
}

#[test]
fn frames_at_their_centre_leave_a_zero_row() {
    let d = 3;
    let centre = [0.5, -1.0, 2.0];
    let weights = Tensor::new([2, d], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
    let bias = Tensor::new([2], vec![0.0, 0.0]).unwrap();
    let centres = Tensor::new([2, d], [centre, [-0.5, 1.0, -2.0]].concat()).unwrap();
    let p = thinvlad::model::VladParams::new(2, 0, weights, bias, centres).unwrap();
    let x = Tensor::new([4, d], centre.repeat(4)).unwrap();
    let v = vlad_matrix(&x, &p).unwrap();
    assert!(v.data()[..d].iter().all(|&r: &f64| r.abs() < 1e-15));
}

#[test]
fn ghost_dominated_frame_adds_little_to_real_clusters() {
    let (k, g, d) = (3, 1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = vlad_params(k, g, d, &mut rng);
    p.assign_weights.data_mut()[k * d..].fill(0.0);
    p.assign_bias.data_mut()[k] = 50.0;
    let x = random_tensor(&[1, d], 0.5, &mut rng);
    let a = soft_assignment(&x, &p).unwrap();
    assert!(a.data()[k] >= 0.99);
    let real_mass: f64 = a.data()[..k].iter().sum();
    assert!(real_mass <= 0.01);
}

#[test]
fn ghostvlad_output_length_is_independent_of_ghosts_and_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (g, t) in [(1, 3), (2, 8), (4, 1)] {
        let p = vlad_params(8, g, 512, &mut rng);
        let x = random_tensor(&[t, 512], 1.0, &mut rng);
        assert_eq!(ghostvlad_aggregate(&x, &p).unwrap().len(), 4096);
    }
}

#[test]
fn netvlad_rejects_ghosts_and_bad_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = vlad_params(2, 1, 4, &mut rng);
    assert!(netvlad_aggregate(&random_tensor(&[3, 4], 1.0, &mut rng), &p).is_err());
    let p = vlad_params(2, 0, 4, &mut rng);
    assert!(netvlad_aggregate(&random_tensor(&[3, 5], 1.0, &mut rng), &p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn assignment_rows_sum_to_one(seed in 0u64..10_000, k in 1usize..6, g in 0usize..3, t in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vlad_params(k, g, 5, &mut rng);
        let x = random_tensor(&[t, 5], 3.0, &mut rng);
        let a = soft_assignment(&x, &p).unwrap();
        for row in a.data().chunks_exact(k + g) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregates_ignore_frame_order(seed in 0u64..10_000, t in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vlad_params(3, 2, 6, &mut rng);
        let x = random_tensor(&[t, 6], 1.0, &mut rng);
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        let permuted = Tensor::new(
            [t, 6],
            order.iter().flat_map(|&i| x.data()[i * 6..(i + 1) * 6].to_vec()).collect(),
        ).unwrap();
        let pairs = [
            (ghostvlad_aggregate(&x, &p).unwrap(), ghostvlad_aggregate(&permuted, &p).unwrap()),
            (tap_aggregate(&x).unwrap(), tap_aggregate(&permuted).unwrap()),
        ];
        for (a, b) in pairs {
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn vlad_output_is_unit_norm(seed in 0u64..10_000, t in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = vlad_params(4, 0, 3, &mut rng);
        let v = netvlad_aggregate(&random_tensor(&[t, 3], 1.0, &mut rng), &p).unwrap();
        prop_assert_eq!(v.len(), 12);
        let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vldn");
    let model = small_model(HeadKind::GhostVlad, 0.125, 12);
    thinvlad::model::save_checkpoint(&model, &path).unwrap();
    let back: SpeakerModel<f32> = thinvlad::model::load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.store().params(), model.store().params());
    assert_eq!(back.store().buffers(), model.store().buffers());
    let spec = spectrogram(96, 2);
    assert_eq!(back.embed(&spec).unwrap(), model.embed(&spec).unwrap());
}

#[test]
fn checkpoint_errors() {
    let model = small_model(HeadKind::GhostVlad, 0.125, 12);
    let bytes = Checkpoint::from_model(&model, 3, None).to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = Checkpoint::<f32>::from_bytes(&bad).unwrap_err();
    assert_eq!(err.to_string(), "bad magic");

    let cut = &bytes[..bytes.len() - 10];
    assert!(Checkpoint::<f32>::from_bytes(cut).is_err());
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..10]).is_err());
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(ModelError::DType { .. })));

    let mut wider = model.config().clone();
    wider.head.clusters = 10;
    let mut target = SpeakerModel::<f32>::new(wider, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    match ckpt.load_into(&mut target) {
        Err(ModelError::ShapeMismatch { name, expected, found }) => {
            assert!(name.starts_with("vlad."), "{name}");
            assert_eq!(expected[0], 12);
            assert_eq!(found[0], 10);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}
