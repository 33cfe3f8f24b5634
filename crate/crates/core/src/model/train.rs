use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    backward, cross_entropy_loss_grad, forward, forward_train, Adam, AdamConfig, GradMask,
    ModelParams, ParamId, StatMode,
};
use crate::error::{Error, Result};
use crate::numeric::{argmax, Tensor};

/// Square single-channel frames with class labels (blank frames carry the
/// blank class).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameSet {
    pub side: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FrameSet {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, image: &[f64], label: usize) {
        debug_assert_eq!(image.len(), self.side * self.side);
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &FrameSet) {
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.side * self.side;
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the selected frames into an `N x 1 x side x side` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.side * self.side);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![indices.len(), 1, self.side, self.side], data)?;
        Ok((t, labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Capped at the dataset size.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
}

/// Per-step learning-rate policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero over the whole run.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total == 0 => base,
            LrSchedule::Cosine => {
                0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.99,
            epochs: 10,
            seed: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy over the dataset before the first update.
    pub initial_loss: f64,
    /// Mean minibatch cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Splits `0..n` into consecutive batches of at most `size`, never leaving a
/// trailing batch of one sample (batch statistics need two).
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.clamp(2, n.max(2));
    let mut out = Vec::new();
    let mut lo = 0;
    while lo < n {
        let mut hi = (lo + size).min(n);
        if n - hi == 1 {
            hi = n;
        }
        out.push(lo..hi);
        lo = hi;
    }
    out
}

fn check_frames(params: &ModelParams, frames: &FrameSet) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Empty("training set has no frames".into()));
    }
    if frames.side != params.arch.input {
        return Err(Error::Shape(format!(
            "frame side {} vs model input {}",
            frames.side, params.arch.input
        )));
    }
    if let Some(&bad) = frames.labels.iter().find(|&&l| l >= params.classes()) {
        return Err(Error::Range {
            index: bad,
            len: params.classes(),
        });
    }
    Ok(())
}

/// Supervised frame-level training with Adam and batch statistics.
/// Deterministic for a given seed.
pub fn train(params: &mut ModelParams, frames: &FrameSet, cfg: &TrainConfig) -> Result<TrainReport> {
    check_frames(params, frames)?;
    if frames.len() < 2 {
        return Err(Error::DegenerateBatch("training needs at least 2 frames".into()));
    }
    let n = frames.len();
    let bs = cfg.batch_size.min(n);

    let mut initial = 0.0;
    let all: Vec<usize> = (0..n).collect();
    for r in batch_ranges(n, bs) {
        let (x, y) = frames.batch(&all[r.clone()])?;
        let (logits, _) = forward(params, &x, StatMode::BatchStats)?;
        initial += cross_entropy_loss_grad(&logits, &y)?.0 * r.len() as f64;
    }
    let mut report = TrainReport {
        initial_loss: initial / n as f64,
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        params,
        &ParamId::ALL,
        AdamConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::default()
        },
    );
    let mut order = all;
    let per_epoch = batch_ranges(n, bs).len();
    let total_steps = per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for r in batch_ranges(n, bs) {
            let (x, y) = frames.batch(&order[r.clone()])?;
            let (logits, cache) = forward_train(params, &x)?;
            let (loss, dlogits) = cross_entropy_loss_grad(&logits, &y)?;
            let grads = backward(params, &cache, &dlogits, GradMask::All)?;
            adam.step(params, &grads, cfg.schedule.lr_at(cfg.lr, step, total_steps));
            step += 1;
            total += loss * r.len() as f64;
        }
        let mean = total / n as f64;
        debug!("epoch {epoch}: loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    if !params.all_finite() {
        return Err(Error::Internal("training diverged to non-finite parameters".into()));
    }
    Ok(report)
}

/// Fraction of frames whose argmax class equals the label.
pub fn frame_accuracy(params: &ModelParams, frames: &FrameSet, mode: StatMode) -> Result<f64> {
    check_frames(params, frames)?;
    let all: Vec<usize> = (0..frames.len()).collect();
    let mut correct = 0usize;
    for r in batch_ranges(frames.len(), 256) {
        let (x, y) = frames.batch(&all[r])?;
        let (logits, _) = forward(params, &x, mode)?;
        correct += y
            .iter()
            .enumerate()
            .filter(|&(i, &label)| argmax(logits.row(i)) == label)
            .count();
    }
    Ok(correct as f64 / frames.len() as f64)
}
