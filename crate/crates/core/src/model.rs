//! The VGG-16 backbone + CCBlock classifier.
//!
//! Layer chain (3-class, 224×224×3 input):
//!
//! ```text
//! backbone  conv(64)×2 pool  conv(128)×2 pool  conv(256)×3 pool  conv(512)×3 pool  conv(512)×3 pool   → 7×7×512
//! ccblock   [conv3x3 valid → relu → bn] × (512, 256, 128)                                           → 1×1×128
//! head      flatten → fc(256) → relu → fc(K) → softmax
//! ```
//!
//! Backbone convolutions are 3×3 with padding 1; CCBlock convolutions are
//! 3×3 without padding, which is what takes 7×7 down to 1×1.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{fmt_shape, Error, Result};
use crate::layers::{
    argmax_rows, softmax_cross_entropy, BatchNorm2d, BatchNormParams, Conv2d, ConvParams, Dense, DenseParams, Flatten,
    Layer, MaxPool2, Relu, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
use crate::tensor::{Scalar, Tensor};

pub const INPUT_SIZE: usize = 224;
pub const INPUT_CHANNELS: usize = 3;
pub const CCBLOCK_FILTERS: [usize; 3] = [512, 256, 128];
pub const FC_HIDDEN: usize = 256;

/// Canonical VGG-16 convolution plan, one entry per stage.
pub fn vgg16_stages() -> Vec<Vec<usize>> {
    vec![
        vec![64, 64],
        vec![128, 128],
        vec![256, 256, 256],
        vec![512, 512, 512],
        vec![512, 512, 512],
    ]
}

/// Order of the activation and normalization inside each CCBlock unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockOrder {
    /// conv → ReLU → BatchNorm (default)
    ReluThenBn,
    /// conv → BatchNorm → ReLU
    BnThenRelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub num_classes: usize,
    pub backbone: Vec<Vec<usize>>,
    pub ccblock_filters: [usize; 3],
    pub fc_hidden: usize,
    pub block_order: BlockOrder,
    /// ReLU between the hidden and the output fully connected layer.
    pub relu_after_fc: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelSpec {
    /// The published architecture for 2 or 3 classes.
    pub fn new(num_classes: usize) -> Result<Self> {
        let spec = Self {
            num_classes,
            backbone: vgg16_stages(),
            ccblock_filters: CCBLOCK_FILTERS,
            fc_hidden: FC_HIDDEN,
            block_order: BlockOrder::ReluThenBn,
            relu_after_fc: true,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same topology with other widths. Only meant for cheap numerical
    /// checks; the real model always uses [`ModelSpec::new`].
    pub fn reduced(
        num_classes: usize,
        backbone: Vec<Vec<usize>>,
        ccblock_filters: [usize; 3],
        fc_hidden: usize,
    ) -> Result<Self> {
        let spec = Self {
            backbone,
            ccblock_filters,
            fc_hidden,
            ..Self::new(num_classes)?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Validation(format!(
                "num_classes must be 2 or 3, got {}",
                self.num_classes
            )));
        }
        if self.backbone.len() != 5 || self.backbone.iter().any(|s| s.is_empty()) {
            return Err(Error::Validation(
                "backbone needs five non-empty stages (224 → 7 after five pools)".into(),
            ));
        }
        let widths = self.backbone.iter().flatten().chain(&self.ccblock_filters);
        if widths.copied().chain([self.fc_hidden]).any(|w| w == 0) {
            return Err(Error::Validation("layer widths must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) || self.bn_momentum == 0.0 {
            return Err(Error::Validation("bn eps must be > 0 and momentum in (0,1)".into()));
        }
        Ok(())
    }

    /// Rows of the architecture table (input row first).
    pub fn layer_specs(&self, backbone_trainable: bool) -> Vec<LayerSpec> {
        let mut rows = vec![LayerSpec {
            row: "input".into(),
            kind: LayerKind::Image,
            feature_count: Some(1),
            output_shape: vec![INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS],
            trainable: false,
            pretrained: false,
            note: None,
        }];
        let mut size = INPUT_SIZE;
        let mut idx = 1;
        for (stage, convs) in self.backbone.iter().enumerate() {
            let c = *convs.last().unwrap();
            let note = (stage == 2 && convs.len() != 2).then(|| {
                format!(
                    "canonical VGG-16 stage 3 has {} convolutions; reference table lists 2xConvolution",
                    convs.len()
                )
            });
            rows.push(LayerSpec {
                row: idx.to_string(),
                kind: LayerKind::Conv { count: convs.len() },
                feature_count: Some(c),
                output_shape: vec![size, size, c],
                trainable: backbone_trainable,
                pretrained: true,
                note,
            });
            size /= 2;
            rows.push(LayerSpec {
                row: (idx + 1).to_string(),
                kind: LayerKind::MaxPool,
                feature_count: Some(c),
                output_shape: vec![size, size, c],
                trainable: false,
                pretrained: false,
                note: None,
            });
            idx += 2;
        }
        for &f in &self.ccblock_filters {
            size -= 2;
            for kind in [LayerKind::Conv { count: 1 }, LayerKind::BatchNorm] {
                rows.push(LayerSpec {
                    row: idx.to_string(),
                    kind,
                    feature_count: Some(f),
                    output_shape: vec![size, size, f],
                    trainable: true,
                    pretrained: false,
                    note: None,
                });
                idx += 1;
            }
        }
        let flat = size * size * self.ccblock_filters[2];
        for (kind, feature_count, width, trainable) in [
            (LayerKind::Flatten, Some(flat), flat, false),
            (LayerKind::Dense, None, self.fc_hidden, true),
            (LayerKind::SoftmaxHead, None, self.num_classes, true),
        ] {
            rows.push(LayerSpec {
                row: idx.to_string(),
                kind,
                feature_count,
                output_shape: vec![1, width],
                trainable,
                pretrained: false,
                note: None,
            });
            idx += 1;
        }
        rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Image,
    Conv { count: usize },
    MaxPool,
    Relu,
    BatchNorm,
    Flatten,
    Dense,
    SoftmaxHead,
}

impl LayerKind {
    pub fn label(&self) -> String {
        match self {
            LayerKind::Image => "Image".into(),
            LayerKind::Conv { count } => format!("{count}xConvolution"),
            LayerKind::MaxPool => "Maxpooling".into(),
            LayerKind::Relu => "ReLU".into(),
            LayerKind::BatchNorm => "BatchNorm".into(),
            LayerKind::Flatten => "Flatten".into(),
            LayerKind::Dense => "FC".into(),
            LayerKind::SoftmaxHead => "FC+Softmax".into(),
        }
    }
}

/// One row of the architecture table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub row: String,
    pub kind: LayerKind,
    pub feature_count: Option<usize>,
    /// `H×W×C` for feature maps, `1×n` for vectors.
    pub output_shape: Vec<usize>,
    pub trainable: bool,
    pub pretrained: bool,
    pub note: Option<String>,
}

/// A layer together with its name and table row.
#[derive(Clone, Debug)]
pub struct Slot<T: Scalar = f32> {
    pub name: String,
    /// Architecture-table row this layer belongs to (1-based).
    pub row: usize,
    pub layer: Layer<T>,
    pub trainable: bool,
    pub pretrained: bool,
}

/// Where a named tensor lives in the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub is_buffer: bool,
    pub trainable: bool,
    pub pretrained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// `(layer name, parameter count, trainable)` for every layer with parameters.
    pub per_layer: Vec<(String, usize, bool)>,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    slots: Vec<Slot<T>>,
    head_start: usize,
    grads: Vec<Vec<Tensor<T>>>,
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

/// Allocates the full model. Every convolution and dense layer gets He
/// fan-in normal weights and zero bias from `seed`; backbone weights are
/// meant to be overwritten by a pretrained import.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots = Vec::new();
    let conv = |rng: &mut ChaCha8Rng, cin: usize, cout: usize, pad: usize| -> Result<Layer<T>> {
        let w = he_normal(rng, &[cout, cin, 3, 3], cin * 9);
        Ok(Layer::Conv(Conv2d::new(ConvParams::new(
            w,
            Tensor::zeros(&[cout]),
            1,
            pad,
        )?)))
    };

    let mut cin = INPUT_CHANNELS;
    let mut row = 1;
    for (s, convs) in spec.backbone.iter().enumerate() {
        for (i, &cout) in convs.iter().enumerate() {
            let tag = format!("{}_{}", s + 1, i + 1);
            slots.push(Slot {
                name: format!("backbone.conv{tag}"),
                row,
                layer: conv(&mut rng, cin, cout, 1)?,
                trainable: true,
                pretrained: true,
            });
            slots.push(Slot {
                name: format!("backbone.relu{tag}"),
                row,
                layer: Layer::Relu(Relu::new()),
                trainable: false,
                pretrained: false,
            });
            cin = cout;
        }
        slots.push(Slot {
            name: format!("backbone.pool{}", s + 1),
            row: row + 1,
            layer: Layer::MaxPool(MaxPool2::new()),
            trainable: false,
            pretrained: false,
        });
        row += 2;
    }
    let head_start = slots.len();

    for (j, &cout) in spec.ccblock_filters.iter().enumerate() {
        let k = j + 1;
        let conv_slot = Slot {
            name: format!("ccblock.conv{k}"),
            row,
            layer: conv(&mut rng, cin, cout, 0)?,
            trainable: true,
            pretrained: false,
        };
        let relu = Slot {
            name: format!("ccblock.relu{k}"),
            row,
            layer: Layer::Relu(Relu::new()),
            trainable: false,
            pretrained: false,
        };
        let bn = Slot {
            name: format!("ccblock.bn{k}"),
            row: row + 1,
            layer: Layer::BatchNorm(BatchNorm2d::new(BatchNormParams::with_hyper(
                cout,
                spec.bn_eps,
                spec.bn_momentum,
            ))),
            trainable: true,
            pretrained: false,
        };
        slots.push(conv_slot);
        match spec.block_order {
            BlockOrder::ReluThenBn => slots.extend([relu, bn]),
            BlockOrder::BnThenRelu => {
                let mut relu = relu;
                relu.row = row + 1;
                slots.extend([bn, relu]);
            }
        }
        cin = cout;
        row += 2;
    }

    slots.push(Slot {
        name: "flatten".into(),
        row,
        layer: Layer::Flatten(Flatten::new()),
        trainable: false,
        pretrained: false,
    });
    let dense = |rng: &mut ChaCha8Rng, name: &str, row: usize, inp: usize, out: usize| -> Result<Slot<T>> {
        let w = he_normal(rng, &[out, inp], inp);
        Ok(Slot {
            name: name.into(),
            row,
            layer: Layer::Dense(Dense::new(DenseParams::new(w, Tensor::zeros(&[out]))?)),
            trainable: true,
            pretrained: false,
        })
    };
    slots.push(dense(&mut rng, "fc1", row + 1, cin, spec.fc_hidden)?);
    if spec.relu_after_fc {
        slots.push(Slot {
            name: "fc1_relu".into(),
            row: row + 1,
            layer: Layer::Relu(Relu::new()),
            trainable: false,
            pretrained: false,
        });
    }
    slots.push(dense(&mut rng, "fc2", row + 2, spec.fc_hidden, spec.num_classes)?);

    let grads = slots
        .iter()
        .map(|s| s.layer.params().iter().map(|(_, p)| Tensor::zeros(p.shape())).collect())
        .collect();
    Ok(Model {
        spec: spec.clone(),
        slots,
        head_start,
        grads,
    })
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn slots(&self) -> &[Slot<T>] {
        &self.slots
    }

    /// Index of the first layer after the backbone.
    pub fn head_start(&self) -> usize {
        self.head_start
    }

    pub fn backbone_trainable(&self) -> bool {
        self.slots[..self.head_start].iter().any(|s| s.trainable)
    }

    /// Freezes (or unfreezes) every backbone layer.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for s in &mut self.slots[..self.head_start] {
            s.trainable = trainable && !s.layer.params().is_empty();
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        match *x.shape() {
            [n, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE] => Ok(n),
            _ => Err(Error::Shape(format!(
                "model input must be N×{INPUT_CHANNELS}×{INPUT_SIZE}×{INPUT_SIZE}, got {}",
                fmt_shape(x.shape())
            ))),
        }
    }

    /// Backbone-only forward, e.g. to precompute features.
    pub fn backbone_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        run(&self.slots[..self.head_start], x.clone())
    }

    /// Inference-mode logits for `N×3×224×224` input.
    pub fn forward_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        run(&self.slots, x.clone())
    }

    /// Inference-mode class probabilities, one row per sample.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.forward_logits(x)?;
        let labels = vec![0; logits.shape()[0]];
        Ok(softmax_cross_entropy(&logits, &labels)?.probs)
    }

    /// Inference forward of the part after the backbone on `N×C×7×7` features.
    pub fn head_forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        run(&self.slots[self.head_start..], features.clone())
    }

    /// Shape after every layer, inference mode.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<(String, usize, Vec<usize>)>> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            h = s.layer.forward(&h)?;
            out.push((s.name.clone(), s.row, h.shape().to_vec()));
        }
        Ok(out)
    }

    /// Output shape at the end of each table row, in the table's `H×W×C` /
    /// `1×n` notation, for a single-sample trace.
    pub fn row_shapes(trace: &[(String, usize, Vec<usize>)]) -> Vec<(usize, Vec<usize>)> {
        let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
        for (_, row, shape) in trace {
            let shape = match shape.as_slice() {
                &[_, c, h, w] => vec![h, w, c],
                &[_, n] => vec![1, n],
                other => other.to_vec(),
            };
            match rows.last_mut() {
                Some(last) if last.0 == *row => last.1 = shape,
                _ => rows.push((*row, shape)),
            }
        }
        rows
    }

    /// Train-mode logits (batch statistics in batch norm, running stats
    /// updated, no caches kept).
    pub fn train_mode_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let feats = run(&self.slots[..self.head_start], x.clone())?;
        self.head_train_logits(&feats)
    }

    fn head_train_logits(&mut self, feats: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = feats.clone();
        for s in &mut self.slots[self.head_start..] {
            h = s.layer.forward_train(&h)?;
        }
        for s in &mut self.slots[self.head_start..] {
            s.layer.clear_cache();
        }
        Ok(h)
    }

    fn zero_grads(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.fill(T::ZERO);
        }
    }

    fn accumulate(&mut self, idx: usize, grads: Vec<Tensor<T>>) -> Result<()> {
        if !self.slots[idx].trainable {
            return Ok(());
        }
        for (acc, g) in self.grads[idx].iter_mut().zip(grads) {
            acc.add_assign(&g)?;
        }
        Ok(())
    }

    fn lowest_trainable(&self) -> Option<usize> {
        self.slots.iter().position(|s| s.trainable)
    }

    /// Forward + backward on one batch in train mode; leaves parameter
    /// gradients of the mean loss in the model (see [`Model::trainable_mut`]).
    ///
    /// The backbone has no batch coupling, so it is run per sample: once
    /// without caches to produce features for the batch-norm head, then again
    /// with caches during backward. Peak memory stays at one sample's
    /// activations.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<StepStats> {
        let n = self.check_input(x)?;
        if labels.len() != n {
            return Err(Error::Validation(format!("{} labels for a batch of {n}", labels.len())));
        }
        self.zero_grads();
        let backbone = self.head_start;
        let feats: Vec<Tensor<T>> = (0..n)
            .map(|s| {
                let xs = x.index_axis0(s)?.reshape(&with_batch(&x.shape()[1..]))?;
                run(&self.slots[..backbone], xs)
            })
            .collect::<Result<_>>()?;
        let feats = concat_batch(&feats)?;

        let mut h = feats;
        for s in &mut self.slots[backbone..] {
            h = s.layer.forward_train(&h)?;
        }
        let xent = softmax_cross_entropy(&h, labels)?;
        let correct = argmax_rows(&xent.probs)?
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();

        let Some(lowest) = self.lowest_trainable() else {
            for s in &mut self.slots {
                s.layer.clear_cache();
            }
            return Ok(StepStats {
                loss: xent.loss.to_f64(),
                correct,
                batch: n,
            });
        };

        let mut g = xent.grad;
        for i in (backbone.max(lowest)..self.slots.len()).rev() {
            let need_input = i > lowest;
            let out = self.slots[i].layer.backward(&g, need_input)?;
            self.accumulate(i, out.params)?;
            match out.input {
                Some(gi) => g = gi,
                None => break,
            }
        }
        for s in &mut self.slots[backbone..] {
            s.layer.clear_cache();
        }

        if lowest < backbone {
            let dfeats = g;
            for s in 0..n {
                let xs = x.index_axis0(s)?.reshape(&with_batch(&x.shape()[1..]))?;
                let mut h = xs;
                for slot in &mut self.slots[..backbone] {
                    h = slot.layer.forward_train(&h)?;
                }
                let mut gs = dfeats.index_axis0(s)?.reshape(&with_batch(&dfeats.shape()[1..]))?;
                for i in (lowest..backbone).rev() {
                    let out = self.slots[i].layer.backward(&gs, i > lowest)?;
                    self.accumulate(i, out.params)?;
                    match out.input {
                        Some(gi) => gs = gi,
                        None => break,
                    }
                }
                for slot in &mut self.slots[..backbone] {
                    slot.layer.clear_cache();
                }
            }
        }

        Ok(StepStats {
            loss: xent.loss.to_f64(),
            correct,
            batch: n,
        })
    }

    /// Train step on precomputed backbone features (`N×C×7×7`). Only the
    /// head receives gradients.
    pub fn head_train_step(&mut self, feats: &Tensor<T>, labels: &[usize]) -> Result<StepStats> {
        self.zero_grads();
        let mut h = feats.clone();
        for s in &mut self.slots[self.head_start..] {
            h = s.layer.forward_train(&h)?;
        }
        let xent = softmax_cross_entropy(&h, labels)?;
        let correct = argmax_rows(&xent.probs)?
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let lowest = self.slots[self.head_start..]
            .iter()
            .position(|s| s.trainable)
            .map(|p| p + self.head_start);
        if let Some(lowest) = lowest {
            let mut g = xent.grad;
            for i in (lowest..self.slots.len()).rev() {
                let out = self.slots[i].layer.backward(&g, i > lowest)?;
                self.accumulate(i, out.params)?;
                match out.input {
                    Some(gi) => g = gi,
                    None => break,
                }
            }
        }
        for s in &mut self.slots[self.head_start..] {
            s.layer.clear_cache();
        }
        Ok(StepStats {
            loss: xent.loss.to_f64(),
            correct,
            batch: labels.len(),
        })
    }

    /// Trainable parameters with their accumulated gradients.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>, &Tensor<T>)> {
        let mut out = Vec::new();
        for (slot, grads) in self.slots.iter_mut().zip(&self.grads) {
            if !slot.trainable {
                continue;
            }
            let name = slot.name.clone();
            for ((pname, p), g) in slot.layer.params_mut().into_iter().zip(grads) {
                out.push((format!("{name}.{pname}"), p, g));
            }
        }
        out
    }

    /// Gradient buffer of a parameter after the last train step.
    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        let (layer, short) = name.rsplit_once('.')?;
        let idx = self.slots.iter().position(|s| s.name == layer)?;
        let pos = self.slots[idx].layer.params().iter().position(|(n, _)| *n == short)?;
        self.grads[idx].get(pos)
    }

    /// Every named parameter and buffer, in layer order.
    pub fn tensor_slots(&self) -> Vec<TensorSlot> {
        let mut out = Vec::new();
        for s in &self.slots {
            let params = s.layer.params().into_iter().map(|p| (p, false));
            let buffers = s.layer.buffers().into_iter().map(|p| (p, true));
            for ((short, t), is_buffer) in params.chain(buffers) {
                out.push(TensorSlot {
                    name: format!("{}.{short}", s.name),
                    shape: t.shape().to_vec(),
                    is_buffer,
                    trainable: s.trainable && !is_buffer,
                    pretrained: s.pretrained,
                });
            }
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for s in &self.slots {
            for (short, t) in s.layer.params().into_iter().chain(s.layer.buffers()) {
                out.push((format!("{}.{short}", s.name), t));
            }
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        let (layer, short) = name.rsplit_once('.')?;
        let slot = self.slots.iter().find(|s| s.name == layer)?;
        slot.layer
            .params()
            .into_iter()
            .chain(slot.layer.buffers())
            .find(|(n, _)| *n == short)
            .map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (layer, short) = name.rsplit_once('.')?;
        let slot = self.slots.iter_mut().find(|s| s.name == layer)?;
        if matches!(slot.layer, Layer::BatchNorm(_)) && short.starts_with("running_") {
            return slot
                .layer
                .buffers_mut()
                .into_iter()
                .find(|(n, _)| *n == short)
                .map(|(_, t)| t);
        }
        slot.layer
            .params_mut()
            .into_iter()
            .find(|(n, _)| *n == short)
            .map(|(_, t)| t)
    }

    /// Exact learnable-parameter counts (batch-norm running statistics are
    /// buffers and not counted).
    pub fn count_params(&self) -> ParamCount {
        let mut per_layer = Vec::new();
        let (mut trainable, mut frozen) = (0, 0);
        for s in &self.slots {
            let n: usize = s.layer.params().iter().map(|(_, t)| t.len()).sum();
            if n == 0 {
                continue;
            }
            if s.trainable {
                trainable += n;
            } else {
                frozen += n;
            }
            per_layer.push((s.name.clone(), n, s.trainable));
        }
        ParamCount {
            per_layer,
            trainable,
            frozen,
            total: trainable + frozen,
        }
    }

    /// The architecture table for this model.
    pub fn summarize(&self) -> Summary {
        let specs = self.spec.layer_specs(self.backbone_trainable());
        let rows = specs
            .iter()
            .map(|s| SummaryRow {
                index: s.row.clone(),
                layer: s.kind.label(),
                feature_map: s.feature_count.map_or("-".into(), |c| c.to_string()),
                size: s
                    .output_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x"),
                trainable: s.trainable,
                pretrained: s.pretrained,
                note: s.note.clone().unwrap_or_default(),
            })
            .collect();
        Summary { rows }
    }
}

fn with_batch(shape: &[usize]) -> Vec<usize> {
    let mut v = vec![1];
    v.extend_from_slice(shape);
    v
}

/// Concatenates `1×…` tensors along the batch axis.
fn concat_batch<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let stacked = Tensor::stack(items)?;
    let mut shape = stacked.shape().to_vec();
    shape.remove(1);
    shape[0] = items.len();
    stacked.reshape(&shape)
}

fn run<T: Scalar>(slots: &[Slot<T>], mut h: Tensor<T>) -> Result<Tensor<T>> {
    for s in slots {
        h = s.layer.forward(&h)?;
    }
    Ok(h)
}

fn py_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryRow {
    pub index: String,
    pub layer: String,
    pub feature_map: String,
    pub size: String,
    pub trainable: bool,
    pub pretrained: bool,
    pub note: String,
}

impl SummaryRow {
    /// `layer, feature map, size, trainable, pretrained`
    pub fn fields(&self) -> String {
        format!(
            "{}, {}, {}, {}, {}",
            self.layer,
            self.feature_map,
            self.size,
            py_bool(self.trainable),
            py_bool(self.pretrained)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub const CSV_HEADER: &'static str = "index,layer,feature_map,size,trainable,pretrained,note";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let note = if r.note.contains(',') || r.note.contains('"') {
                format!("\"{}\"", r.note.replace('"', "\"\""))
            } else {
                r.note.clone()
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.index,
                r.layer,
                r.feature_map,
                r.size,
                py_bool(r.trainable),
                py_bool(r.pretrained),
                note
            );
        }
        out
    }

    /// Aligned table; notes are printed as footnotes.
    pub fn to_text(&self) -> String {
        let header = ["", "Layer", "Feature map", "Size", "Trainable", "Pre-Trained"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let mark = if r.note.is_empty() { "" } else { " *" };
                [
                    r.index.clone(),
                    format!("{}{mark}", r.layer),
                    r.feature_map.clone(),
                    r.size.clone(),
                    py_bool(r.trainable).to_string(),
                    py_bool(r.pretrained).to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cols: &[&str]| {
            let parts: Vec<String> = cols.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        for r in self.rows.iter().filter(|r| !r.note.is_empty()) {
            let _ = writeln!(out, "* row {}: {}", r.index, r.note);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec::reduced(3, vec![vec![2], vec![2], vec![2], vec![2], vec![4]], [4, 4, 2], 4).unwrap()
    }

    #[test]
    fn rejects_unsupported_class_count() {
        assert!(matches!(ModelSpec::new(4), Err(Error::Validation(_))));
        assert!(ModelSpec::new(1).is_err());
    }

    #[test]
    fn output_width_follows_class_count() {
        for k in [2, 3] {
            let spec = ModelSpec::reduced(k, vec![vec![2], vec![2], vec![2], vec![2], vec![4]], [4, 4, 2], 4).unwrap();
            let m = build_model::<f32>(&spec, 1).unwrap();
            let y = m.forward(&Tensor::zeros(&[1, 3, 224, 224])).unwrap();
            assert_eq!(y.shape(), &[1, k]);
            assert_eq!(
                ModelSpec::new(k)
                    .unwrap()
                    .layer_specs(true)
                    .last()
                    .unwrap()
                    .output_shape,
                vec![1, k]
            );
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model::<f32>(&tiny(), 42).unwrap();
        let b = build_model::<f32>(&tiny(), 42).unwrap();
        let c = build_model::<f32>(&tiny(), 43).unwrap();
        let bits = |m: &Model<f32>| -> Vec<u32> {
            m.named_tensors()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn zero_model_gives_uniform_probs() {
        let mut m = build_model::<f32>(&ModelSpec::new(3).unwrap(), 0).unwrap();
        let names: Vec<String> = m
            .tensor_slots()
            .into_iter()
            .filter(|s| !s.is_buffer)
            .map(|s| s.name)
            .collect();
        for n in names {
            if n.contains("conv") || n.ends_with("bias") {
                m.tensor_mut(&n).unwrap().fill(0.0);
            }
        }
        let p = m.forward(&Tensor::zeros(&[1, 3, 224, 224])).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_shape() {
        let m = build_model::<f32>(&tiny(), 0).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[1, 3, 112, 112])),
            Err(Error::Shape(_))
        ));
        assert!(m.forward(&Tensor::zeros(&[1, 1, 224, 224])).is_err());
    }

    #[test]
    fn param_counts_per_layer() {
        let m = build_model::<f32>(&ModelSpec::new(3).unwrap(), 0).unwrap();
        let c = m.count_params();
        let get = |name: &str| c.per_layer.iter().find(|(n, _, _)| n == name).unwrap().1;
        assert_eq!(get("fc1"), 128 * 256 + 256);
        assert_eq!(get("backbone.conv1_1"), 3 * 3 * 3 * 64 + 64);
        assert_eq!(c.frozen, 0);
    }

    #[test]
    fn freezing_moves_backbone_to_frozen() {
        let mut m = build_model::<f32>(&ModelSpec::new(2).unwrap(), 0).unwrap();
        let before = m.count_params();
        m.set_backbone_trainable(false);
        let after = m.count_params();
        assert_eq!(before.total, after.total);
        assert_eq!(after.frozen, 14_714_688);
        let s = m.summarize();
        assert_eq!(s.rows[1].fields(), "2xConvolution, 64, 224x224x64, False, True");
    }

    #[test]
    fn summary_is_idempotent_and_has_table_rows() {
        let m = build_model::<f32>(&ModelSpec::new(3).unwrap(), 0).unwrap();
        let s = m.summarize();
        assert_eq!(s, m.summarize());
        assert_eq!(s.rows.len(), 20);
        assert_eq!(s.rows[1].fields(), "2xConvolution, 64, 224x224x64, True, True");
        assert!(s.rows[17].fields().contains("128, 1x128, False"));
        assert_eq!(s.rows[19].fields(), "FC+Softmax, -, 1x3, True, False");
        assert!(!s.rows[5].note.is_empty());
        assert!(s.to_text().contains("* row 5"));
    }

    #[test]
    fn tensor_lookup_by_name() {
        let mut m = build_model::<f32>(&tiny(), 0).unwrap();
        assert_eq!(m.tensor("backbone.conv1_1.weight").unwrap().shape(), &[2, 3, 3, 3]);
        assert_eq!(m.tensor("ccblock.bn1.running_var").unwrap().data(), &[1.0; 4]);
        m.tensor_mut("ccblock.bn1.running_mean").unwrap().fill(2.0);
        assert_eq!(m.tensor("ccblock.bn1.running_mean").unwrap().data(), &[2.0; 4]);
        assert!(m.tensor("fc9.weight").is_none());
    }

    #[test]
    fn bn_then_relu_order() {
        let mut spec = tiny();
        spec.block_order = BlockOrder::BnThenRelu;
        let m = build_model::<f32>(&spec, 0).unwrap();
        let names: Vec<&str> = m.slots().iter().map(|s| s.name.as_str()).collect();
        let i = names.iter().position(|n| *n == "ccblock.conv1").unwrap();
        assert_eq!(&names[i..i + 3], &["ccblock.conv1", "ccblock.bn1", "ccblock.relu1"]);
    }
}
