//! Central finite-difference checks of the analytic backward passes.
//!
//! Layers are instantiated in `f64` so that the numerical derivative is
//! accurate to well below the tolerance; the code under test is the same
//! generic layer code that trains in `f32`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    softmax_cross_entropy, BatchNorm2d, BatchNormParams, Conv2d, ConvParams, Dense, DenseParams, Flatten, Layer,
    MaxPool2, Relu,
};
use crate::model::{build_model, ModelSpec};
use crate::tensor::Tensor;

pub const LAYER_STEP: f64 = 1e-3;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_STEP: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Absolute noise floor of the end-to-end check. Central differences of a
/// loss of order 1 at `h = 1e-6` carry roughly 1e-9 of f64 roundoff, so
/// gradients below this are compared as absolute error.
pub const MODEL_FLOOR: f64 = 1e-6;
/// Largest share of sampled coordinates allowed to sit on a kink.
pub const MAX_KINK_FRACTION: f64 = 0.05;

/// `|a − n| / max(|a|, |n|)`, with a floor on the denominator so exact
/// zeros compare as absolute error.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_floor(analytic, numeric, 1e-8)
}

pub fn rel_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `weight[17]`.
    pub worst: String,
    /// Coordinates excluded because the loss is not smooth around them
    /// (a ReLU or max-pool switch lies within every tried step).
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && (self.kinks as f64) <= MAX_KINK_FRACTION * (self.checked + self.kinks) as f64
    }
}

struct Worst {
    checked: usize,
    err: f64,
    at: String,
}

impl Worst {
    fn new() -> Self {
        Self {
            checked: 0,
            err: 0.0,
            at: String::new(),
        }
    }

    fn into_report(self, name: &str, kinks: usize) -> GradCheckReport {
        GradCheckReport {
            name: name.to_string(),
            checked: self.checked,
            max_rel_error: self.err,
            worst: self.at,
            kinks,
        }
    }

    fn record(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.err || err.is_nan() {
            self.err = err;
            self.at = at();
        }
    }
}

/// Projection loss `Σ r ⊙ layer(x)` in train mode.
fn projected_loss(layer: &mut Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    let y = layer.forward_train(x)?;
    layer.clear_cache();
    y.dot(r)
}

/// Checks input and parameter gradients of one layer on every coordinate.
pub fn check_layer(name: &str, mut layer: Layer<f64>, x: Tensor<f64>, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward_train(&x)?;
    let r = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    let grads = layer.backward(&r, true)?;
    let mut worst = Worst::new();

    let dx = grads.input.expect("input gradient requested");
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let up = projected_loss(&mut layer, &xp, &r)?;
        xp.data_mut()[i] = orig - h;
        let down = projected_loss(&mut layer, &xp, &r)?;
        xp.data_mut()[i] = orig;
        let num = (up - down) / (2.0 * h);
        worst.record(rel_error(dx.data()[i], num), || format!("input[{i}]"));
    }

    let names: Vec<&'static str> = layer.params().iter().map(|(n, _)| *n).collect();
    for (p, (pname, g)) in names.iter().zip(&grads.params).enumerate() {
        for i in 0..g.len() {
            let orig = layer.params()[p].1.data()[i];
            layer.params_mut()[p].1.data_mut()[i] = orig + h;
            let up = projected_loss(&mut layer, &x, &r)?;
            layer.params_mut()[p].1.data_mut()[i] = orig - h;
            let down = projected_loss(&mut layer, &x, &r)?;
            layer.params_mut()[p].1.data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            worst.record(rel_error(g.data()[i], num), || format!("{pname}[{i}]"));
        }
    }
    Ok(worst.into_report(name, 0))
}

/// Softmax cross-entropy: analytic logit gradient against the mean loss.
pub fn check_softmax_xent(logits: Tensor<f64>, labels: &[usize], h: f64) -> Result<GradCheckReport> {
    let g = softmax_cross_entropy(&logits, labels)?.grad;
    let mut worst = Worst::new();
    let mut x = logits.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = softmax_cross_entropy(&x, labels)?.loss;
        x.data_mut()[i] = orig - h;
        let down = softmax_cross_entropy(&x, labels)?.loss;
        x.data_mut()[i] = orig;
        worst.record(rel_error(g.data()[i], (up - down) / (2.0 * h)), || {
            format!("logits[{i}]")
        });
    }
    Ok(worst.into_report("softmax_xent", 0))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Every layer type at small shapes (N=2, C=3, 5×5 maps; 6×6 for pooling).
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = LAYER_STEP;
    let mut out = Vec::new();

    for (name, pad) in [("conv3x3_pad1", 1), ("conv3x3_valid", 0)] {
        let p = ConvParams::new(uniform(&mut rng, &[4, 3, 3, 3]), uniform(&mut rng, &[4]), 1, pad)?;
        let x = uniform(&mut rng, &[2, 3, 5, 5]);
        out.push(check_layer(name, Layer::Conv(Conv2d::new(p)), x, rng.random(), h)?);
    }

    // Distinct values spaced well beyond 2h so no window max changes under perturbation.
    let mut vals: Vec<f64> = (0..2 * 3 * 6 * 6).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(&mut rng);
    let x = Tensor::new(vec![2, 3, 6, 6], vals)?;
    out.push(check_layer(
        "maxpool2",
        Layer::MaxPool(MaxPool2::new()),
        x,
        rng.random(),
        h,
    )?);

    // Keep inputs away from the kink at zero.
    let x = Tensor::from_fn(&[2, 3, 5, 5], |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    out.push(check_layer("relu", Layer::Relu(Relu::new()), x, rng.random(), h)?);

    let mut bn = BatchNormParams::new(3);
    bn.gamma = Tensor::from_fn(&[3], |_| rng.random_range(0.5..1.5));
    bn.beta = uniform(&mut rng, &[3]);
    let x = uniform(&mut rng, &[2, 3, 5, 5]);
    out.push(check_layer(
        "batchnorm",
        Layer::BatchNorm(BatchNorm2d::new(bn)),
        x,
        rng.random(),
        h,
    )?);

    let p = DenseParams::new(uniform(&mut rng, &[5, 12]), uniform(&mut rng, &[5]))?;
    let x = uniform(&mut rng, &[2, 12]);
    out.push(check_layer("dense", Layer::Dense(Dense::new(p)), x, rng.random(), h)?);

    let x = uniform(&mut rng, &[2, 3, 2, 2]);
    out.push(check_layer(
        "flatten",
        Layer::Flatten(Flatten::new()),
        x,
        rng.random(),
        h,
    )?);

    let logits = Tensor::from_fn(&[3, 3], |_| rng.random_range(-2.0..2.0));
    out.push(check_softmax_xent(logits, &[0, 2, 1], h)?);
    Ok(out)
}

/// Width-reduced model used by [`model_check`].
pub fn reduced_spec() -> ModelSpec {
    ModelSpec::reduced(
        3,
        vec![
            vec![8, 8],
            vec![16, 16],
            vec![16, 16, 16],
            vec![32, 32, 32],
            vec![32, 32, 32],
        ],
        [32, 16, 8],
        16,
    )
    .expect("valid reduced spec")
}

/// End-to-end check of the total loss of a width-reduced model on
/// `per_tensor` sampled coordinates of every trainable tensor.
pub fn model_check(seed: u64, batch: usize, per_tensor: usize, h: f64) -> Result<GradCheckReport> {
    let spec = reduced_spec();
    let mut model = build_model::<f64>(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // Random BN affine so the head is not at its symmetric init.
    let bn_names: Vec<String> = model
        .tensor_slots()
        .into_iter()
        .filter(|s| s.name.contains(".bn") && !s.is_buffer)
        .map(|s| s.name)
        .collect();
    for name in bn_names {
        let t = model.tensor_mut(&name).expect("bn tensor");
        let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = offset + rng.random_range(-0.3..0.3));
    }
    let x = Tensor::from_fn(&[batch, 3, 224, 224], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();

    model.train_step(&x, &labels)?;
    let mut samples = Vec::new();
    for slot in model.tensor_slots().into_iter().filter(|s| s.trainable) {
        let n: usize = slot.shape.iter().product();
        let analytic = model.grad(&slot.name).expect("gradient").clone();
        for _ in 0..per_tensor {
            samples.push((slot.name.clone(), rng.random_range(0..n), analytic.clone()));
        }
    }

    let mut worst = Worst::new();
    let mut kinks = 0;
    for (name, i, analytic) in samples {
        let mut central = |step: f64| -> Result<f64> {
            let orig = model.tensor(&name).expect("param").data()[i];
            model.tensor_mut(&name).expect("param").data_mut()[i] = orig + step;
            let up = softmax_cross_entropy(&model.train_mode_logits(&x)?, &labels)?.loss;
            model.tensor_mut(&name).expect("param").data_mut()[i] = orig - step;
            let down = softmax_cross_entropy(&model.train_mode_logits(&x)?, &labels)?.loss;
            model.tensor_mut(&name).expect("param").data_mut()[i] = orig;
            Ok((up - down) / (2.0 * step))
        };
        match smooth_estimate(&mut central, h)? {
            Some(num) => worst.record(rel_error_floor(analytic.data()[i], num, MODEL_FLOOR), || {
                format!("{name}[{i}]")
            }),
            None => kinks += 1,
        }
    }
    Ok(worst.into_report("reduced_model", kinks))
}

/// Central differences at `h`, `h/4` and `h/16`. Where the loss is smooth
/// over the step, consecutive estimates agree to within O(h²); a ReLU or
/// max-pool switch inside the interval makes them disagree. Returns the
/// finer estimate of the first agreeing pair, or `None` on a kink.
fn smooth_estimate(central: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<Option<f64>> {
    let mut prev = central(h)?;
    let mut step = h;
    for _ in 0..2 {
        step /= 4.0;
        let next = central(step)?;
        if rel_error_floor(prev, next, MODEL_FLOOR) <= MODEL_TOLERANCE / 10.0 {
            return Ok(Some(next));
        }
        prev = next;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn kinked_function_is_detected() {
        // |x| at 1e-7: every tried step straddles the kink.
        let mut abs = |s: f64| -> Result<f64> { Ok(((1e-7f64 + s).abs() - (1e-7f64 - s).abs()) / (2.0 * s)) };
        assert_eq!(smooth_estimate(&mut abs, 1e-6).unwrap(), None);
        let mut cube = |s: f64| -> Result<f64> { Ok(((0.5f64 + s).powi(3) - (0.5f64 - s).powi(3)) / (2.0 * s)) };
        let d = smooth_estimate(&mut cube, 1e-6).unwrap().unwrap();
        assert!((d - 0.75).abs() < 1e-8);
    }

    #[test]
    fn kinks_count_against_the_report() {
        let r = GradCheckReport {
            name: "m".into(),
            checked: 10,
            max_rel_error: 0.0,
            worst: String::new(),
            kinks: 2,
        };
        assert!(!r.passed(1.0));
    }

    #[test]
    fn every_layer_passes() {
        for r in layer_suite(3).unwrap() {
            assert!(r.passed(LAYER_TOLERANCE), "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Dense layer checked against a loss with a different scale: the
        // analytic gradient no longer matches.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DenseParams::new(uniform(&mut rng, &[2, 3]), uniform(&mut rng, &[2])).unwrap();
        let mut layer = Layer::Dense(Dense::new(p));
        let x = uniform(&mut rng, &[2, 3]);
        let y = layer.forward_train(&x).unwrap();
        let r = Tensor::full(y.shape(), 1.0);
        let g = layer.backward(&r, true).unwrap().input.unwrap().scale(1.01);
        let up = {
            let mut xp = x.clone();
            xp.data_mut()[0] += 1e-3;
            projected_loss(&mut layer, &xp, &r).unwrap()
        };
        let down = {
            let mut xp = x.clone();
            xp.data_mut()[0] -= 1e-3;
            projected_loss(&mut layer, &xp, &r).unwrap()
        };
        assert!(rel_error(g.data()[0], (up - down) / 2e-3) > LAYER_TOLERANCE);
    }
}
