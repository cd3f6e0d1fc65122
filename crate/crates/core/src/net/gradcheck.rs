//! Finite-difference gradient checking in double precision.
//!
//! A stack of layers is reduced to the scalar `Σ r·y` with a fixed random
//! `r`; analytic gradients from `backward` are compared with central
//! differences for every input and parameter entry.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{softmax_cross_entropy, Layer, LayerSpec, LayerWeights};
use super::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dropout masks are re-drawn from the same seed on every evaluation so the
/// function is deterministic.
fn stack_loss(layers: &mut [Layer<f64>], x: &Tensor<f64>, r: &[f64]) -> f64 {
    let mut a = x.clone();
    let mut g = rng(99);
    for l in layers.iter_mut() {
        a = l.forward(a, &mut g);
    }
    a.data.iter().zip(r).map(|(y, w)| y * w).sum()
}

/// `|a − n| / max(|a|, |n|, 10⁻⁶)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Difference step scaled to the values' RMS.
pub fn step_for(values: &[f64]) -> f64 {
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64).sqrt();
    1e-3 * rms.max(1e-2)
}

/// Largest relative error between analytic and central-difference gradients
/// over the input and every parameter of the stack. Parameters are
/// initialized from `seed` and perturbed so fresh zero biases and unit
/// batch-norm scales do not hide errors.
pub fn check_stack(specs: &[LayerSpec], x: Tensor<f64>, seed: u64) -> f64 {
    let mut init = rng(seed);
    let mut layers: Vec<Layer<f64>> = specs.iter().map(|s| Layer::new(LayerWeights::init(s.clone(), &mut init))).collect();
    for l in layers.iter_mut() {
        for p in l.weights.params.iter_mut() {
            for v in p.data.iter_mut() {
                *v += 0.3 * init.random_range(-1.0..1.0);
            }
        }
    }
    let out_len = {
        let mut probe = rng(99);
        let mut a = x.clone();
        for l in layers.iter_mut() {
            a = l.forward(a, &mut probe);
        }
        a.len()
    };
    let r: Vec<f64> = (0..out_len).map(|_| init.random_range(-1.0..1.0)).collect();

    let mut a = x.clone();
    let mut g = rng(99);
    for l in layers.iter_mut() {
        a = l.forward(a, &mut g);
    }
    let mut d = Tensor::from_vec(&a.shape, r.clone());
    for l in layers.iter_mut().rev() {
        d = l.backward(d);
    }
    let dx = d;
    let grads: Vec<Vec<Vec<f64>>> = layers.iter().map(|l| l.grads.clone()).collect();

    let mut worst: f64 = 0.0;
    let h = step_for(&x.data);
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let n = (stack_loss(&mut layers, &xp, &r) - stack_loss(&mut layers, &xm, &r)) / (2.0 * h);
        worst = worst.max(rel_err(dx.data[i], n));
    }
    for li in 0..layers.len() {
        for pi in 0..layers[li].weights.params.len() {
            let h = step_for(&layers[li].weights.params[pi].data);
            for i in 0..layers[li].weights.params[pi].len() {
                let orig = layers[li].weights.params[pi].data[i];
                layers[li].weights.params[pi].data[i] = orig + h;
                let lp = stack_loss(&mut layers, &x, &r);
                layers[li].weights.params[pi].data[i] = orig - h;
                let lm = stack_loss(&mut layers, &x, &r);
                layers[li].weights.params[pi].data[i] = orig;
                worst = worst.max(rel_err(grads[li][pi][i], (lp - lm) / (2.0 * h)));
            }
        }
    }
    worst
}

/// Largest relative error of the fused softmax + cross-entropy logit gradient.
pub fn check_softmax_cross_entropy(logits: &Tensor<f64>, targets: &[usize]) -> f64 {
    let (_, grad, _) = softmax_cross_entropy(logits, targets);
    let h = step_for(&logits.data);
    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p.data[i] += h;
        let mut m = logits.clone();
        m.data[i] -= h;
        let n = (softmax_cross_entropy(&p, targets).0 - softmax_cross_entropy(&m, targets).0) / (2.0 * h);
        worst = worst.max(rel_err(grad.data[i], n));
    }
    worst
}

/// Uniform entries in [−1, 1).
pub fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Input whose entries are distinct and at least 0.05 apart, away from zero,
/// so ReLU kinks and max-pool ties stay outside the difference step.
pub fn spread_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.1 + 0.05 * i as f64).collect();
    let mut r = rng(seed);
    vals.shuffle(&mut r);
    for v in vals.iter_mut() {
        if r.random::<bool>() {
            *v = -*v;
        }
    }
    Tensor::from_vec(shape, vals)
}
