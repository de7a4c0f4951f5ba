//! Trains the CCBlock and FC layers on random 512x7x7 feature maps until the
//! training set is memorized. This exercises SGD with momentum without a
//! backbone pass.
use ccblock::data::{InputKind, TensorDataset};
use ccblock::train::{train, TrainConfig};
use ccblock::{build_model, ModelSpec, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> ccblock::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let items = (0..30)
        .map(|_| Tensor::from_fn(&[512, 7, 7], |_| rng.random_range(0.0..1.0f32)))
        .collect();
    let labels = (0..30).map(|_| rng.random_range(0..3)).collect();
    let data = TensorDataset::new(items, labels, InputKind::Features)?;
    let mut model = build_model::<f32>(&ModelSpec::new(3)?, 0)?;
    let cfg = TrainConfig {
        epochs: 300,
        stop_at: Some((1.0, 1e-2)),
        ..TrainConfig::default()
    };
    let history = train(&mut model, &data, None, &cfg, |r| {
        println!("epoch {:>3} loss {:.5} acc {:.3}", r.epoch, r.train_loss, r.train_acc)
    })?;
    print!("{}", history.to_csv());
    Ok(())
}
