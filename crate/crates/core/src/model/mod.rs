//! Compact frame classifier: two conv + batch-norm blocks and a dense
//! output layer, with hand-derived backward passes.
//!
//! ```text
//! input N x 1 x S x S
//!   conv 3x3 (c1) -> BN -> ReLU -> maxpool 2
//!   conv 3x3 (c2) -> BN -> ReLU -> maxpool 2
//!   dense (c2 * (S/4)^2 -> C)          C = alphabet + blank
//! ```
//!
//! The default architecture is `S = 32, c1 = 8, c2 = 16`. The class set
//! includes the CTC blank, so the softmax rows of a strip form a lattice
//! directly.

mod checkpoint;
mod layers;
mod loss;
mod optim;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{cross_entropy_loss_grad, entropy_loss_grad, row_entropies};
pub use optim::{Adam, AdamConfig};
pub use train::{frame_accuracy, train, FrameSet, LrSchedule, TrainConfig, TrainReport};

use crate::ctc::ProbLattice;
use crate::error::{Error, Result};
use crate::numeric::{softmax_into, Alphabet, Distribution, Tensor};
use layers::ConvShape;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Square input side; must be a multiple of 4.
    pub input: usize,
    pub conv1: usize,
    pub conv2: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input: 32,
            conv1: 8,
            conv2: 16,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input < 4 || self.input % 4 != 0 || self.conv1 == 0 || self.conv2 == 0 {
            return Err(Error::contract(format!("unsupported architecture {self:?}")));
        }
        Ok(())
    }

    pub fn fc_in(&self) -> usize {
        self.conv2 * (self.input / 4) * (self.input / 4)
    }
}

/// Batch-norm state for one layer: running statistics plus the affine
/// scale/shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BnLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn absorb(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &v) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

/// Trainable tensors of [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Conv1Weight,
    Conv1Bias,
    Bn1Gamma,
    Bn1Beta,
    Conv2Weight,
    Conv2Bias,
    Bn2Gamma,
    Bn2Beta,
    FcWeight,
    FcBias,
}

impl ParamId {
    pub const ALL: [ParamId; 10] = [
        ParamId::Conv1Weight,
        ParamId::Conv1Bias,
        ParamId::Bn1Gamma,
        ParamId::Bn1Beta,
        ParamId::Conv2Weight,
        ParamId::Conv2Bias,
        ParamId::Bn2Gamma,
        ParamId::Bn2Beta,
        ParamId::FcWeight,
        ParamId::FcBias,
    ];

    pub const BN_AFFINE: [ParamId; 4] = [
        ParamId::Bn1Gamma,
        ParamId::Bn1Beta,
        ParamId::Bn2Gamma,
        ParamId::Bn2Beta,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Conv1Weight => "conv1.weight",
            ParamId::Conv1Bias => "conv1.bias",
            ParamId::Bn1Gamma => "bn1.gamma",
            ParamId::Bn1Beta => "bn1.beta",
            ParamId::Conv2Weight => "conv2.weight",
            ParamId::Conv2Bias => "conv2.bias",
            ParamId::Bn2Gamma => "bn2.gamma",
            ParamId::Bn2Beta => "bn2.beta",
            ParamId::FcWeight => "fc.weight",
            ParamId::FcBias => "fc.bias",
        }
    }

    pub fn is_bn_affine(self) -> bool {
        Self::BN_AFFINE.contains(&self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub alphabet: Alphabet,
    pub conv1_weight: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    pub bn1: BnLayer,
    pub conv2_weight: Vec<f64>,
    pub conv2_bias: Vec<f64>,
    pub bn2: BnLayer,
    pub fc_weight: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

impl ModelParams {
    /// He-normal conv/dense weights from a seeded PRNG, zero biases, identity
    /// batch norm.
    pub fn init(arch: Architecture, alphabet: Alphabet, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |count: usize, fan_in: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..count).map(|_| normal.sample(&mut rng)).collect()
        };
        let classes = alphabet.classes();
        Ok(Self {
            conv1_weight: he(arch.conv1 * 9, 9),
            conv1_bias: vec![0.0; arch.conv1],
            bn1: BnLayer::new(arch.conv1),
            conv2_weight: he(arch.conv2 * arch.conv1 * 9, arch.conv1 * 9),
            conv2_bias: vec![0.0; arch.conv2],
            bn2: BnLayer::new(arch.conv2),
            fc_weight: he(classes * arch.fc_in(), arch.fc_in()),
            fc_bias: vec![0.0; classes],
            arch,
            alphabet,
        })
    }

    pub fn classes(&self) -> usize {
        self.alphabet.classes()
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        match id {
            ParamId::Conv1Weight => &self.conv1_weight,
            ParamId::Conv1Bias => &self.conv1_bias,
            ParamId::Bn1Gamma => &self.bn1.gamma,
            ParamId::Bn1Beta => &self.bn1.beta,
            ParamId::Conv2Weight => &self.conv2_weight,
            ParamId::Conv2Bias => &self.conv2_bias,
            ParamId::Bn2Gamma => &self.bn2.gamma,
            ParamId::Bn2Beta => &self.bn2.beta,
            ParamId::FcWeight => &self.fc_weight,
            ParamId::FcBias => &self.fc_bias,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        match id {
            ParamId::Conv1Weight => &mut self.conv1_weight,
            ParamId::Conv1Bias => &mut self.conv1_bias,
            ParamId::Bn1Gamma => &mut self.bn1.gamma,
            ParamId::Bn1Beta => &mut self.bn1.beta,
            ParamId::Conv2Weight => &mut self.conv2_weight,
            ParamId::Conv2Bias => &mut self.conv2_bias,
            ParamId::Bn2Gamma => &mut self.bn2.gamma,
            ParamId::Bn2Beta => &mut self.bn2.beta,
            ParamId::FcWeight => &mut self.fc_weight,
            ParamId::FcBias => &mut self.fc_bias,
        }
    }

    pub fn param_shape(&self, id: ParamId) -> Vec<usize> {
        let a = self.arch;
        match id {
            ParamId::Conv1Weight => vec![a.conv1, 1, 3, 3],
            ParamId::Conv1Bias | ParamId::Bn1Gamma | ParamId::Bn1Beta => vec![a.conv1],
            ParamId::Conv2Weight => vec![a.conv2, a.conv1, 3, 3],
            ParamId::Conv2Bias | ParamId::Bn2Gamma | ParamId::Bn2Beta => vec![a.conv2],
            ParamId::FcWeight => vec![self.classes(), a.fc_in()],
            ParamId::FcBias => vec![self.classes()],
        }
    }

    /// Blends the batch statistics recorded in `cache` into the running
    /// statistics. No-op for caches produced with running statistics.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        if cache.mode == StatMode::BatchStats {
            self.bn1.absorb(&cache.bn1.mean, &cache.bn1.var);
            self.bn2.absorb(&cache.bn2.mean, &cache.bn2.var);
        }
    }

    pub fn all_finite(&self) -> bool {
        ParamId::ALL
            .iter()
            .all(|&id| self.param(id).iter().all(|v| v.is_finite()))
            && [&self.bn1, &self.bn2].iter().all(|b| {
                b.running_mean.iter().chain(&b.running_var).all(|v| v.is_finite())
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatMode {
    /// Normalize with the current batch's mean and variance.
    BatchStats,
    /// Normalize with the stored running statistics.
    RunningStats,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    mode: StatMode,
    input: Vec<f64>,
    bn1: BnCache,
    relu1: Vec<f64>,
    pool1: Vec<f64>,
    pool1_idx: Vec<u32>,
    bn2: BnCache,
    relu2: Vec<f64>,
    pool2: Vec<f64>,
    pool2_idx: Vec<u32>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> StatMode {
        self.mode
    }

    /// Normalized (pre-affine) activations of BN layer 1 or 2.
    pub fn normalized(&self, layer: usize) -> &[f64] {
        match layer {
            1 => &self.bn1.xhat,
            _ => &self.bn2.xhat,
        }
    }
}

fn check_batch(params: &ModelParams, batch: &Tensor) -> Result<usize> {
    let s = params.arch.input;
    match batch.shape() {
        &[n, 1, h, w] if h == s && w == s && n >= 1 => Ok(n),
        other => Err(Error::Shape(format!("expected N x 1 x {s} x {s} batch, got {other:?}"))),
    }
}

fn bn_stage(
    z: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    layer: &BnLayer,
    mode: StatMode,
) -> (BnCache, Vec<f64>) {
    let (mean, var) = match mode {
        StatMode::BatchStats => layers::channel_stats(z, n, c, plane),
        StatMode::RunningStats => (layer.running_mean.clone(), layer.running_var.clone()),
    };
    let (xhat, y, inv_std) = layers::bn_forward(
        z,
        n,
        c,
        plane,
        &mean,
        &var,
        &layer.gamma,
        &layer.beta,
        layer.eps,
    );
    (
        BnCache {
            mean,
            var,
            xhat,
            inv_std,
        },
        y,
    )
}

/// Forward pass. Pure: batch statistics are recorded in the cache and only
/// reach the running statistics through [`ModelParams::absorb_batch_stats`]
/// (see [`forward_train`]).
pub fn forward(params: &ModelParams, batch: &Tensor, mode: StatMode) -> Result<(Tensor, ForwardCache)> {
    let n = check_batch(params, batch)?;
    if mode == StatMode::BatchStats && n < 2 {
        return Err(Error::DegenerateBatch(
            "batch statistics need at least 2 samples".into(),
        ));
    }
    let a = params.arch;
    let (s1, s2) = (a.input, a.input / 2);

    let shape1 = ConvShape {
        n,
        cin: 1,
        cout: a.conv1,
        h: s1,
        w: s1,
    };
    let z1 = layers::conv_forward(batch.data(), shape1, &params.conv1_weight, &params.conv1_bias);
    let (bn1, y1) = bn_stage(&z1, n, a.conv1, s1 * s1, &params.bn1, mode);
    let relu1 = layers::relu_forward(&y1);
    let (pool1, pool1_idx) = layers::maxpool_forward(&relu1, n * a.conv1, s1, s1);

    let shape2 = ConvShape {
        n,
        cin: a.conv1,
        cout: a.conv2,
        h: s2,
        w: s2,
    };
    let z2 = layers::conv_forward(&pool1, shape2, &params.conv2_weight, &params.conv2_bias);
    let (bn2, y2) = bn_stage(&z2, n, a.conv2, s2 * s2, &params.bn2, mode);
    let relu2 = layers::relu_forward(&y2);
    let (pool2, pool2_idx) = layers::maxpool_forward(&relu2, n * a.conv2, s2, s2);

    let logits = layers::dense_forward(&pool2, n, a.fc_in(), &params.fc_weight, &params.fc_bias);
    let logits = Tensor::new(vec![n, params.classes()], logits)
        .map_err(|e| Error::Internal(format!("forward produced {e}")))?;
    let cache = ForwardCache {
        n,
        mode,
        input: batch.data().to_vec(),
        bn1,
        relu1,
        pool1,
        pool1_idx,
        bn2,
        relu2,
        pool2,
        pool2_idx,
    };
    Ok((logits, cache))
}

/// Batch-statistics forward that also updates the running statistics.
pub fn forward_train(params: &mut ModelParams, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let (logits, cache) = forward(params, batch, StatMode::BatchStats)?;
    params.absorb_batch_stats(&cache);
    Ok((logits, cache))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMask {
    /// Only BN scale and shift.
    BnAffine,
    All,
}

impl GradMask {
    pub fn includes(self, id: ParamId) -> bool {
        match self {
            GradMask::BnAffine => id.is_bn_affine(),
            GradMask::All => true,
        }
    }
}

/// Gradients for every trainable tensor; unmasked tensors are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    grads: Vec<Vec<f64>>,
    mask: GradMask,
}

impl GradSet {
    pub fn zeros(params: &ModelParams, mask: GradMask) -> Self {
        Self {
            grads: ParamId::ALL
                .iter()
                .map(|&id| vec![0.0; params.param(id).len()])
                .collect(),
            mask,
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.index()]
    }

    pub fn mask(&self) -> GradMask {
        self.mask
    }

    fn set(&mut self, id: ParamId, g: Vec<f64>) {
        if self.mask.includes(id) {
            debug_assert_eq!(g.len(), self.grads[id.index()].len());
            self.grads[id.index()] = g;
        }
    }

    /// L2 norm over all entries.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Backpropagates `d_logits` (N x C) through the cached forward pass.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_logits: &Tensor,
    mask: GradMask,
) -> Result<GradSet> {
    let n = cache.n;
    if d_logits.shape() != [n, params.classes()] {
        return Err(Error::Shape(format!(
            "d_logits {:?} vs expected [{n}, {}]",
            d_logits.shape(),
            params.classes()
        )));
    }
    let a = params.arch;
    let (s1, s2) = (a.input, a.input / 2);
    let batch_stats = cache.mode == StatMode::BatchStats;
    let full = mask == GradMask::All;
    let mut grads = GradSet::zeros(params, mask);

    let (dw_fc, db_fc, dpool2) = layers::dense_backward(
        &cache.pool2,
        n,
        a.fc_in(),
        &params.fc_weight,
        d_logits.data(),
        full,
    );
    grads.set(ParamId::FcWeight, dw_fc);
    grads.set(ParamId::FcBias, db_fc);

    let drelu2 = layers::maxpool_backward(&dpool2, &cache.pool2_idx, cache.relu2.len());
    let dy2 = layers::relu_backward(&drelu2, &cache.relu2);
    let (dg2, db2, dz2) = layers::bn_backward(
        &dy2,
        &cache.bn2.xhat,
        n,
        a.conv2,
        s2 * s2,
        &params.bn2.gamma,
        &cache.bn2.inv_std,
        batch_stats,
    );
    grads.set(ParamId::Bn2Gamma, dg2);
    grads.set(ParamId::Bn2Beta, db2);

    let shape2 = ConvShape {
        n,
        cin: a.conv1,
        cout: a.conv2,
        h: s2,
        w: s2,
    };
    let (dw2, dcb2, dpool1) =
        layers::conv_backward(&cache.pool1, shape2, &params.conv2_weight, &dz2, full, true);
    grads.set(ParamId::Conv2Weight, dw2);
    grads.set(ParamId::Conv2Bias, dcb2);

    let drelu1 = layers::maxpool_backward(&dpool1, &cache.pool1_idx, cache.relu1.len());
    let dy1 = layers::relu_backward(&drelu1, &cache.relu1);
    let (dg1, db1, dz1) = layers::bn_backward(
        &dy1,
        &cache.bn1.xhat,
        n,
        a.conv1,
        s1 * s1,
        &params.bn1.gamma,
        &cache.bn1.inv_std,
        batch_stats,
    );
    grads.set(ParamId::Bn1Gamma, dg1);
    grads.set(ParamId::Bn1Beta, db1);

    if full {
        let shape1 = ConvShape {
            n,
            cin: 1,
            cout: a.conv1,
            h: s1,
            w: s1,
        };
        let (dw1, dcb1, _) =
            layers::conv_backward(&cache.input, shape1, &params.conv1_weight, &dz1, true, false);
        grads.set(ParamId::Conv1Weight, dw1);
        grads.set(ParamId::Conv1Bias, dcb1);
    }
    Ok(grads)
}

/// Row-wise softmax of a logits tensor.
pub fn probabilities(logits: &Tensor) -> Vec<Distribution> {
    let c = logits.shape()[1];
    (0..logits.shape()[0])
        .map(|i| {
            let mut p = vec![0.0; c];
            softmax_into(logits.row(i), &mut p);
            Distribution::normalized(p, 1e-6).expect("softmax output is a distribution")
        })
        .collect()
}

/// Number of sliding windows over a strip of width `width`.
pub fn window_count(width: usize, window: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::contract("stride must be positive"));
    }
    if width < window {
        return Err(Error::Shape(format!(
            "strip width {width} narrower than window {window}"
        )));
    }
    Ok((width - window) / stride + 1)
}

/// Cuts a `1 x H x W` strip into `T x 1 x H x H` windows.
pub fn strip_windows(strip: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (h, w) = match strip.shape() {
        &[1, h, w] => (h, w),
        other => return Err(Error::Shape(format!("expected 1 x H x W strip, got {other:?}"))),
    };
    if h != window {
        return Err(Error::Shape(format!("strip height {h} != window {window}")));
    }
    let t = window_count(w, window, stride)?;
    let mut data = Vec::with_capacity(t * window * window);
    for k in 0..t {
        let x0 = k * stride;
        for y in 0..h {
            data.extend_from_slice(&strip.data()[y * w + x0..y * w + x0 + window]);
        }
    }
    Tensor::new(vec![t, 1, window, window], data)
}

/// Lattice of softmax rows over sliding windows, running statistics.
pub fn classify_strip(params: &ModelParams, strip: &Tensor, window: usize, stride: usize) -> Result<ProbLattice> {
    if window != params.arch.input {
        return Err(Error::Shape(format!(
            "window {window} does not match model input {}",
            params.arch.input
        )));
    }
    let windows = strip_windows(strip, window, stride)?;
    let (logits, _) = forward(params, &windows, StatMode::RunningStats)?;
    ProbLattice::new(params.alphabet.clone(), probabilities(&logits))
}

pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_STRIDE: usize = 8;

#[cfg(test)]
mod tests;
