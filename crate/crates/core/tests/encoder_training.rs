use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtrack::encoder::{
    load_checkpoint, save_checkpoint, Batch, EncoderConfig, EncoderError, EncoderState, Gradients, Mode, Objective,
    TrainingPair,
};
use sdtrack::fusion::FusedObjectMap;
use sdtrack::grid::Grid;

fn random_pairs(n: usize, res: usize, seed: u64) -> Vec<TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let prev: Vec<f64> = (0..res * res).map(|_| rng.random_range(0.0..1.0)).collect();
            let curr = prev.iter().map(|v| (v + rng.random_range(-0.05..0.05f64)).clamp(0.0, 1.0)).collect();
            TrainingPair { prev, curr }
        })
        .collect()
}

fn small_config() -> EncoderConfig {
    EncoderConfig { epochs: 3, bottleneck_only_epochs: 1, batch_size: 4, ..EncoderConfig::tiny() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = EncoderConfig { learning_rate: 0.0, ..small_config() };
    let mut state = EncoderState::new(cfg, 1).unwrap();
    let before = state.params.clone();
    state.train(&random_pairs(10, 16, 1), 4).unwrap();
    assert_eq!(state.params, before);
}

#[test]
fn fixed_seed_gives_bit_identical_trace() {
    let pairs = random_pairs(12, 16, 2);
    let run = || {
        let mut s = EncoderState::new(small_config(), 9).unwrap();
        let report = s.train(&pairs, 5).unwrap();
        (report, s.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.epochs.len(), 3);
    assert_eq!(a.epochs[2].objective, Objective::BottleneckOnly);
    assert_eq!(a.epochs[1].objective, Objective::Total);
}

#[test]
fn empty_dataset_is_rejected() {
    let mut s = EncoderState::new(small_config(), 0).unwrap();
    assert!(matches!(s.train(&[], 0), Err(EncoderError::EmptyDataset)));
}

#[test]
fn bottleneck_only_epochs_freeze_the_decoder() {
    let cfg = EncoderConfig { epochs: 2, bottleneck_only_epochs: 2, ..small_config() };
    let mut s = EncoderState::new(cfg, 3).unwrap();
    let before = s.params.clone();
    s.train(&random_pairs(8, 16, 3), 1).unwrap();
    for (a, b) in before.iter().zip(&s.params) {
        assert_eq!(a.name.starts_with("dec."), a == b, "{}", a.name);
    }
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let mut s = EncoderState::new(EncoderConfig::tiny(), 4).unwrap();
    let before = s.params.clone();
    let zero = Gradients { grads: s.params.iter().map(|p| Some(vec![0.0; p.value.len()])).collect() };
    s.adam_step(&zero);
    assert_eq!(s.params, before);
    assert_eq!(s.adam.step, 1);

    // first step with constant gradient g: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    let mut s = EncoderState::new(EncoderConfig::tiny(), 4).unwrap();
    let g = Gradients {
        grads: s
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| Some(vec![if i % 2 == 0 { 0.5 } else { -2.0 }; p.value.len()]))
            .collect(),
    };
    s.adam_step(&g);
    for (i, (a, b)) in before.iter().zip(&s.params).enumerate() {
        let gi: f64 = if i % 2 == 0 { 0.5 } else { -2.0 };
        let expected = 1e-3 * gi / (gi.abs() + 1e-8);
        for (x, y) in a.value.iter().zip(&b.value) {
            assert!(((x - y) - expected).abs() < 1e-15, "{} {}", x - y, expected);
        }
    }
    // moments accumulate: a second identical step moves parameters again
    let after_one = s.params.clone();
    s.adam_step(&g);
    assert_ne!(s.params, after_one);
    assert_eq!(s.adam.step, 2);
}

#[test]
fn embedding_is_deterministic_and_rejects_empty_masks() {
    let s = EncoderState::new(EncoderConfig::tiny(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let values = Grid::from_vec(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let map = FusedObjectMap { values, source_frame: 1, source_det: 0, empty_mask: false };
    let a = s.embed(&map).unwrap();
    assert_eq!(a, s.embed(&map).unwrap());
    assert_eq!(a.dim(), 32);
    let empty = FusedObjectMap { empty_mask: true, ..map };
    assert!(matches!(s.embed(&empty), Err(EncoderError::EmptyMask)));
}

#[test]
fn default_bottleneck_is_2048() {
    let s = EncoderState::new(EncoderConfig::default(), 0).unwrap();
    let batch = Batch::new(1, 64, vec![0.5; 64 * 64]).unwrap();
    assert_eq!(s.encode_batch(&batch, Mode::Eval).unwrap().len(), 2048);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut s = EncoderState::new(small_config(), 6).unwrap();
    s.train(&random_pairs(6, 16, 6), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&s, dir.path().join("ckpt")).unwrap();
    let t = load_checkpoint(dir.path().join("ckpt")).unwrap();
    assert_eq!(t.params, s.params);
    assert_eq!(t.running, s.running);
    assert_eq!(t.config(), s.config());
    let batch = Batch::new(2, 16, random_pairs(1, 16, 7).pop().map(|p| [p.prev, p.curr].concat()).unwrap()).unwrap();
    assert_eq!(t.encode_batch(&batch, Mode::Eval).unwrap(), s.encode_batch(&batch, Mode::Eval).unwrap());
}

#[test]
fn checkpoint_with_missing_tensor_is_rejected() {
    let s = EncoderState::new(EncoderConfig::tiny(), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&s, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.json");
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    json["tensors"].as_array_mut().unwrap().pop();
    std::fs::write(&manifest, json.to_string()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(EncoderError::Checkpoint(_))));
}

#[test]
fn train_mode_rejects_single_sample_batches() {
    let s = EncoderState::new(EncoderConfig::tiny(), 0).unwrap();
    let b = Batch::new(1, 16, vec![0.1; 256]).unwrap();
    assert!(matches!(s.forward_pure(&b, Mode::Train), Err(EncoderError::BatchTooSmall(1))));
}
