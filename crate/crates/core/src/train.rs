//! SGD with momentum, the epoch loop, history and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::data::{batch_order, Dataset, InputKind, TensorDataset};
use crate::error::{fmt_shape, Error, Result};
use crate::layers::{argmax_rows, softmax_cross_entropy};
use crate::model::{build_model, Model, ModelSpec};
use crate::tensor::{Scalar, Tensor};
use crate::weights::{apply_weights, NameMap, Strictness, WeightArchive};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    /// Fill the history's `seconds` column. Off by default so histories
    /// are byte-identical across runs.
    pub record_time: bool,
    /// Stop after the first epoch whose train accuracy and loss reach these
    /// values (`(accuracy in [0, 1], loss)`). `None` runs every epoch.
    pub stop_at: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            freeze_backbone: false,
            record_time: false,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        // Train-mode batch norm on the 1×1 output of the last CCBlock
        // convolution needs two samples.
        if self.batch_size < 2 {
            return Err(Error::Validation(format!(
                "batch size must be at least 2 for train-mode batch norm, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Heavy-ball momentum: `v ← m·v − lr·g`, `w ← w + v`. Velocities are
/// created at zero the first time a parameter is seen.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T: Scalar = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// Updates one named parameter in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: fmt_shape(param.shape()),
                found: fmt_shape(grad.shape()),
            });
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if v.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                name: format!("{name} velocity"),
                expected: fmt_shape(param.shape()),
                found: fmt_shape(v.shape()),
            });
        }
        let (m, lr) = (T::from_f64(self.momentum), T::from_f64(self.learning_rate));
        for ((w, vi), &g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            *vi = m * *vi - lr * g;
            *w += *vi;
        }
        Ok(())
    }

    /// Applies the gradients left in `model` by its last train step.
    pub fn step(&mut self, model: &mut Model<T>) -> Result<()> {
        for (name, param, grad) in model.trainable_mut() {
            self.update(&name, param, grad)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Fraction in [0, 1].
    pub train_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,test_loss,test_acc,seconds";

    /// Floats use the shortest representation that round-trips, so equal
    /// histories give equal bytes. Missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                r.train_acc,
                opt(r.test_loss),
                opt(r.test_acc),
                opt(r.seconds)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }
}

/// Class probabilities (`N×K`) in inference mode, computed in batches.
pub fn predict_probs(model: &Model<f32>, data: &dyn Dataset, batch_size: usize) -> Result<Tensor<f32>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Validation("cannot predict on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(n * model.num_classes());
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = data.batch(chunk)?;
        let logits = match data.input_kind() {
            InputKind::Image => model.forward_logits(&x)?,
            InputKind::Features => model.head_forward(&x)?,
        };
        let probs = softmax_cross_entropy(&logits, &vec![0; chunk.len()])?.probs;
        rows.extend_from_slice(probs.data());
    }
    Tensor::new(vec![n, model.num_classes()], rows)
}

/// Mean cross-entropy and accuracy of inference-mode predictions.
pub fn evaluate(model: &Model<f32>, data: &dyn Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let probs = predict_probs(model, data, batch_size)?;
    let k = model.num_classes();
    let labels = data.labels();
    let mut loss = 0.0;
    for (row, &l) in probs.data().chunks(k).zip(labels) {
        loss -= (row[l] as f64).max(f64::MIN_POSITIVE).ln();
    }
    let correct = argmax_rows(&probs)?.iter().zip(labels).filter(|(p, l)| p == l).count();
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Runs the backbone once over an image dataset. With a frozen backbone
/// this gives exactly the features a train step would compute.
pub fn precompute_features(model: &Model<f32>, data: &dyn Dataset, batch_size: usize) -> Result<TensorDataset> {
    if data.input_kind() == InputKind::Features {
        return Err(Error::Validation("dataset already holds features".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut items = Vec::with_capacity(data.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let feats = model.backbone_forward(&data.batch(chunk)?)?;
        for i in 0..chunk.len() {
            items.push(feats.index_axis0(i)?);
        }
    }
    TensorDataset::new(items, data.labels().to_vec(), InputKind::Features)
}

/// Epoch batches; a trailing single-sample batch is folded into the one
/// before it, since batch norm cannot normalize one value per channel.
fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let mut batches = batch_order(n, cfg.batch_size, cfg.seed, epoch as u64)?;
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    Ok(batches)
}

/// Mini-batch SGD on softmax cross-entropy. Train metrics are
/// sample-weighted averages over the epoch's train-mode batches; test
/// metrics are computed in inference mode after each epoch.
///
/// Feature datasets train the head only. Image datasets with a frozen
/// backbone are converted to features once up front.
pub fn train(
    model: &mut Model<f32>,
    train_data: &dyn Dataset,
    test_data: Option<&dyn Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_data.len() < 2 {
        return Err(Error::Validation(format!(
            "training needs at least 2 samples, got {}",
            train_data.len()
        )));
    }
    let features_in = train_data.input_kind() == InputKind::Features;
    model.set_backbone_trainable(!cfg.freeze_backbone && !features_in);

    let cached_train;
    let cached_test;
    let (train_data, test_data): (&dyn Dataset, Option<&dyn Dataset>) = if !features_in && cfg.freeze_backbone {
        cached_train = precompute_features(model, train_data, cfg.batch_size)?;
        cached_test = test_data
            .map(|t| precompute_features(model, t, cfg.batch_size))
            .transpose()?;
        (&cached_train, cached_test.as_ref().map(|t| t as &dyn Dataset))
    } else {
        (train_data, test_data)
    };
    let head_only = train_data.input_kind() == InputKind::Features;

    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum);
    let mut history = TrainHistory::default();
    let labels = train_data.labels();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for (b, idx) in epoch_batches(train_data.len(), cfg, epoch)?.into_iter().enumerate() {
            let x = train_data.batch(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let stats = if head_only {
                model.head_train_step(&x, &y)?
            } else {
                model.train_step(&x, &y)?
            };
            if !stats.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                    loss: stats.loss,
                });
            }
            opt.step(model)?;
            loss_sum += stats.loss * stats.batch as f64;
            correct += stats.correct;
            seen += stats.batch;
        }
        let (test_loss, test_acc) = match test_data {
            Some(t) if !t.is_empty() => {
                let (l, a) = evaluate(model, t, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_loss,
            test_acc,
            seconds: cfg.record_time.then(|| start.elapsed().as_secs_f64()),
        };
        on_epoch(&record);
        let done = cfg
            .stop_at
            .is_some_and(|(acc, loss)| record.train_acc >= acc && record.train_loss < loss);
        history.rows.push(record);
        if done {
            break;
        }
    }
    Ok(history)
}

/// Writes every parameter and batch-norm buffer as a CCW archive.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    WeightArchive::from_model(model)?.save(path)
}

/// Strict import of a checkpoint into an existing model.
pub fn resume<T: Scalar>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let archive = WeightArchive::load(path)?;
    apply_weights(model, &archive, &NameMap::identity(), Strictness::Strict)?;
    Ok(())
}

/// Builds a full-size model whose class count is read from the
/// checkpoint's `fc2.weight`, then loads it strictly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let archive = WeightArchive::load(path)?;
    let k = archive
        .get("fc2.weight")
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::Validation(format!("{} has no fc2.weight entry", path.display())))?;
    let mut model = build_model(&ModelSpec::new(k)?, 0)?;
    apply_weights(&mut model, &archive, &NameMap::identity(), Strictness::Strict)?;
    Ok(model)
}
