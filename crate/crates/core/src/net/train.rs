//! Mini-batch training with AdamW, flip augmentation and best-epoch selection.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{EpochStats, ModelCheckpoint, TrainingMetadata};
use super::layers::{flip_sample, softmax_cross_entropy};
use super::optim::AdamW;
use super::tensor::Tensor;
use super::{NetError, Network, NetworkConfig};
use crate::imaging::{split_train_test, CsiImage, Dataset, LabeledImage, SplitMode};
use crate::rng::{child_rng, child_seed, domain};

/// Images per inference batch during validation.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Probability of reversing an image's columns.
    pub flip_horizontal: f64,
    /// Probability of reversing an image's rows.
    pub flip_vertical: f64,
    /// Share of training images held out for validation when no validation set is given.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 40,
            batch_size: 50,
            weight_decay: 1e-4,
            seed: 1,
            flip_horizontal: 0.5,
            flip_vertical: 0.5,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        for (name, p) in [("flip_horizontal", self.flip_horizontal), ("flip_vertical", self.flip_vertical)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction));
        }
        Ok(())
    }
}

/// Class probabilities for one image.
pub fn predict_probs(model: &ModelCheckpoint, image: &CsiImage) -> Result<Vec<f64>, NetError> {
    model.predict_probs(image)
}

/// Trains on `train` and returns the weights of the epoch with the highest
/// validation accuracy (earliest on ties). Classes are `train.sites` in order.
///
/// Without `val`, a stratified `holdout_fraction` of the training images is
/// held out; if that leaves a side empty the training images double as the
/// validation set.
pub fn train(train: &Dataset, val: Option<&Dataset>, net: &NetworkConfig, cfg: &TrainConfig) -> Result<ModelCheckpoint, NetError> {
    train_with_progress(train, val, net, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with_progress(
    train: &Dataset,
    val: Option<&Dataset>,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<ModelCheckpoint, NetError> {
    cfg.validate()?;
    let (height, width) = train
        .image_dims()
        .ok_or_else(|| NetError::Config("training set has no images".into()))?;
    let input_shape = [3, height, width];
    let classes = train.sites.clone();
    let label = |img: &LabeledImage| classes.iter().position(|s| s.site_id == img.site_id);

    let (fit, val) = match val {
        Some(v) => (train.clone(), v.clone()),
        None if cfg.holdout_fraction > 0.0 => {
            let seed = child_seed(cfg.seed, domain::VALIDATION, 0);
            match split_train_test(train, 1.0 - cfg.holdout_fraction, seed, SplitMode::Image) {
                Ok(pair) => pair,
                Err(_) => (train.clone(), train.clone()),
            }
        }
        None => (train.clone(), train.clone()),
    };
    let samples: Vec<(&CsiImage, usize)> = fit
        .images
        .iter()
        .map(|i| label(i).map(|l| (&i.image, l)))
        .collect::<Option<_>>()
        .ok_or_else(|| NetError::Config("training image labeled with an unknown site".into()))?;
    let val_samples: Vec<(&CsiImage, usize)> = val.images.iter().filter_map(|i| label(i).map(|l| (&i.image, l))).collect();

    let arch = net.architecture(input_shape, classes.len())?;
    let mut network = Network::<f32>::new(&arch, input_shape, &mut child_rng(cfg.seed, domain::INIT, 0))?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);

    let mut best = (network.weights(), 0usize, accuracy(&network, &val_samples)?, 0.0);
    let mut history = Vec::new();
    let sample_len = 3 * height * width;
    for epoch in 1..=cfg.epochs {
        let mut rng = child_rng(cfg.seed, domain::EPOCH, epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut data = Vec::with_capacity(batch.len() * sample_len);
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, t) = samples[i];
                let start = data.len();
                data.extend_from_slice(&img.pixels);
                let h = rng.random::<f64>() < cfg.flip_horizontal;
                let v = rng.random::<f64>() < cfg.flip_vertical;
                flip_sample(&mut data[start..], 3, height, width, h, v);
                targets.push(t);
            }
            let x = Tensor::from_vec(&[batch.len(), 3, height, width], data);
            let logits = network.forward_train(x, &mut rng)?;
            let (loss, grad, probs) = softmax_cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(NetError::Diverged { epoch, batch: batch_idx });
            }
            loss_sum += loss * batch.len() as f64;
            correct += probs.iter().zip(&targets).filter(|(p, &t)| argmax(p) == t).count();
            network.backward(grad);
            opt.step(&mut network);
            network.zero_grad();
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
            val_accuracy: accuracy(&network, &val_samples)?,
        };
        on_epoch(&stats);
        if stats.val_accuracy > best.2 || best.1 == 0 {
            best = (network.weights(), epoch, stats.val_accuracy, stats.train_accuracy);
        }
        history.push(stats);
    }
    let (layers, epoch, val_accuracy, train_accuracy) = best;
    Ok(ModelCheckpoint {
        input_shape,
        sites: classes,
        layers,
        metadata: TrainingMetadata {
            epoch,
            val_accuracy,
            train_accuracy,
            seed: cfg.seed,
            history,
        },
    })
}

/// Index of the largest value; ties go to the lower index.
pub(crate) fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

fn accuracy(net: &Network<f32>, samples: &[(&CsiImage, usize)]) -> Result<f64, NetError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let [c, h, w] = net.input_shape;
    let mut correct = 0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let data: Vec<f32> = chunk.iter().flat_map(|(img, _)| img.pixels.iter().copied()).collect();
        let logits = net.logits(&Tensor::from_vec(&[chunk.len(), c, h, w], data))?;
        for (b, &(_, t)) in chunk.iter().enumerate() {
            let l: Vec<f64> = logits.sample(b).iter().map(|&v| v as f64).collect();
            if argmax(&l) == t {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
