//! Full-backpropagation training on the width-reduced model, which has the
//! real topology and input size but few channels.
use ccblock::data::{InputKind, TensorDataset};
use ccblock::gradcheck::reduced_spec;
use ccblock::train::{train, TrainConfig};
use ccblock::weights::WeightArchive;
use ccblock::{build_model, Error, Tensor};
use rand::{Rng, SeedableRng};

fn images(n: usize, seed: u64) -> TensorDataset {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|_| Tensor::from_fn(&[3, 224, 224], |_| rng.random_range(-1.0..1.0f32)))
        .collect();
    let labels = (0..n).map(|i| i % 3).collect();
    TensorDataset::new(items, labels, InputKind::Image).unwrap()
}

fn run(cfg: &TrainConfig) -> (String, Vec<u8>, ccblock::Model) {
    let data = images(6, 11);
    let mut model = build_model::<f32>(&reduced_spec(), cfg.seed).unwrap();
    let history = train(&mut model, &data, Some(&images(3, 12)), cfg, |_| {}).unwrap();
    let bytes = WeightArchive::from_model(&model).unwrap().to_bytes();
    (history.to_csv(), bytes, model)
}

#[test]
fn full_backprop_is_deterministic_and_updates_backbone() {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let (h1, b1, m1) = run(&cfg);
    let (h2, b2, _) = run(&cfg);
    assert_eq!(h1, h2);
    assert_eq!(b1, b2);
    let fresh = build_model::<f32>(&reduced_spec(), 4).unwrap();
    assert_ne!(
        m1.tensor("backbone.conv1_1.weight").unwrap().data(),
        fresh.tensor("backbone.conv1_1.weight").unwrap().data()
    );
    let (h3, _, _) = run(&TrainConfig { seed: 5, ..cfg });
    assert_ne!(h1, h3);
}

#[test]
fn frozen_backbone_stays_fixed() {
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 3,
        freeze_backbone: true,
        ..TrainConfig::default()
    };
    let (_, _, m) = run(&cfg);
    let fresh = build_model::<f32>(&reduced_spec(), 0).unwrap();
    for (name, t) in fresh.named_tensors() {
        let same = m.tensor(&name).unwrap().data() == t.data();
        assert_eq!(same, name.starts_with("backbone."), "{name}");
    }
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 3,
        learning_rate: 1e12,
        ..TrainConfig::default()
    };
    let mut model = build_model::<f32>(&reduced_spec(), 0).unwrap();
    let err = train(&mut model, &images(6, 1), None, &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}
