//! Test-time adaptation: BN layers normalize with the current batch's
//! statistics and only the BN scale/shift are updated, by descending the
//! mean prediction entropy of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backward, entropy_loss_grad, forward, Adam, AdamConfig, GradMask, GradSet, ModelParams,
    ParamId, StatMode,
};
use crate::numeric::{argmax, Tensor};

pub const DEFAULT_TTA_LR: f64 = 1e-3;
pub const DEFAULT_TTA_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Carry BN parameters and optimizer state from batch to batch.
    #[default]
    Continual,
    /// Restore the snapshot before every batch.
    Episodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    pub mode: AdaptMode,
    pub steps_per_batch: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_TTA_LR,
            optimizer: Optimizer::default(),
            mode: AdaptMode::default(),
            steps_per_batch: 1,
        }
    }
}

impl AdaptConfig {
    /// `lr = 0` is accepted so that a run can log entropies without moving.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.steps_per_batch == 0 {
            return Err(Error::contract("steps_per_batch must be at least 1"));
        }
        if let Optimizer::Adam { beta1, beta2 } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::contract("Adam betas must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One row of the adaptation trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    /// Mean entropy of the batch before this batch's update.
    pub mean_entropy: f64,
    pub accuracy: Option<f64>,
    /// Norm of the first step's gradient.
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    snapshot: Vec<Vec<f64>>,
    adam: Option<Adam>,
    batches_seen: usize,
    log: Vec<BatchRecord>,
}

impl AdaptState {
    /// Snapshots the current BN scale/shift.
    pub fn new(params: &ModelParams, cfg: &AdaptConfig) -> Self {
        let adam = match cfg.optimizer {
            Optimizer::Sgd => None,
            Optimizer::Adam { beta1, beta2 } => Some(Adam::new(
                params,
                &ParamId::BN_AFFINE,
                AdamConfig {
                    beta1,
                    beta2,
                    ..AdamConfig::default()
                },
            )),
        };
        Self {
            snapshot: ParamId::BN_AFFINE.iter().map(|&id| params.param(id).to_vec()).collect(),
            adam,
            batches_seen: 0,
            log: Vec::new(),
        }
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub fn log(&self) -> &[BatchRecord] {
        &self.log
    }

    pub fn snapshot(&self, id: ParamId) -> Option<&[f64]> {
        ParamId::BN_AFFINE
            .iter()
            .position(|&p| p == id)
            .map(|k| self.snapshot[k].as_slice())
    }
}

/// What one adaptation call saw before it moved anything.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub mean_entropy: f64,
    /// Batch-statistics logits computed before the update.
    pub logits: Tensor,
    pub gradient_norm: f64,
}

fn apply_step(params: &mut ModelParams, state: &mut AdaptState, grads: &GradSet, lr: f64) {
    match &mut state.adam {
        Some(adam) => adam.step(params, grads, lr),
        None => {
            for id in ParamId::BN_AFFINE {
                let g = grads.get(id);
                for (p, &g) in params.param_mut(id).iter_mut().zip(g) {
                    *p -= lr * g;
                }
            }
        }
    }
}

/// Adapts on one batch and logs its pre-update entropy.
pub fn adapt_batch(
    params: &mut ModelParams,
    state: &mut AdaptState,
    batch: &Tensor,
    cfg: &AdaptConfig,
) -> Result<BatchOutcome> {
    adapt_batch_labeled(params, state, batch, None, cfg)
}

/// As [`adapt_batch`], also logging the accuracy of the pre-update argmax
/// predictions when labels are given.
pub fn adapt_batch_labeled(
    params: &mut ModelParams,
    state: &mut AdaptState,
    batch: &Tensor,
    labels: Option<&[usize]>,
    cfg: &AdaptConfig,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    if let Some(l) = labels {
        if l.len() != batch.shape().first().copied().unwrap_or(0) {
            return Err(Error::Shape("labels and batch differ in length".into()));
        }
    }
    let mut first: Option<BatchOutcome> = None;
    for _ in 0..cfg.steps_per_batch {
        let (logits, cache) = forward(params, batch, StatMode::BatchStats)?;
        let (h, d_logits) = entropy_loss_grad(&logits)?;
        let grads = backward(params, &cache, &d_logits, GradMask::BnAffine)?;
        if first.is_none() {
            first = Some(BatchOutcome {
                mean_entropy: h,
                logits,
                gradient_norm: grads.norm(),
            });
        }
        apply_step(params, state, &grads, cfg.lr);
    }
    let outcome = first.expect("steps_per_batch >= 1");
    let accuracy = labels.map(|l| {
        let hits = l
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(outcome.logits.row(i)) == y)
            .count();
        hits as f64 / l.len() as f64
    });
    state.log.push(BatchRecord {
        batch_index: state.batches_seen,
        mean_entropy: outcome.mean_entropy,
        accuracy,
        gradient_norm: outcome.gradient_norm,
    });
    state.batches_seen += 1;
    Ok(outcome)
}

/// Restores the snapshotted BN scale/shift bit-exactly and clears the
/// optimizer moments. The batch counter and log are kept.
pub fn reset(params: &mut ModelParams, state: &mut AdaptState) {
    for (k, id) in ParamId::BN_AFFINE.into_iter().enumerate() {
        params.param_mut(id).copy_from_slice(&state.snapshot[k]);
    }
    if let Some(adam) = &mut state.adam {
        adam.reset();
    }
}

/// Adapts over an ordered sequence of batches. Returns the state, whose log
/// holds one record per batch.
pub fn adapt_stream(
    params: &mut ModelParams,
    batches: &[Tensor],
    labels: Option<&[Vec<usize>]>,
    cfg: &AdaptConfig,
) -> Result<AdaptState> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::Empty("adaptation stream has no batches".into()));
    }
    if let Some(l) = labels {
        if l.len() != batches.len() {
            return Err(Error::Shape("one label vector per batch is required".into()));
        }
    }
    let mut state = AdaptState::new(params, cfg);
    for (i, batch) in batches.iter().enumerate() {
        if cfg.mode == AdaptMode::Episodic {
            reset(params, &mut state);
        }
        adapt_batch_labeled(params, &mut state, batch, labels.map(|l| l[i].as_slice()), cfg)?;
    }
    Ok(state)
}

/// CSV with columns `batch_index,mean_entropy,accuracy,gradient_norm`; the
/// accuracy cell is empty when unknown.
pub fn trajectory_csv(records: &[BatchRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["batch_index", "mean_entropy", "accuracy", "gradient_norm"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::numeric::Alphabet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelParams {
        let arch = Architecture {
            input: 8,
            conv1: 3,
            conv2: 4,
        };
        ModelParams::init(arch, Alphabet::parse("0123").unwrap(), 7).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 64).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![n, 1, 8, 8], data).unwrap()
    }

    fn sgd(lr: f64) -> AdaptConfig {
        AdaptConfig {
            lr,
            optimizer: Optimizer::Sgd,
            ..AdaptConfig::default()
        }
    }

    fn mean_entropy(params: &ModelParams, b: &Tensor) -> f64 {
        let (logits, _) = forward(params, b, StatMode::BatchStats).unwrap();
        entropy_loss_grad(&logits).unwrap().0
    }

    fn assert_footprint(before: &ModelParams, after: &ModelParams) {
        for id in ParamId::ALL {
            if !id.is_bn_affine() {
                assert_eq!(before.param(id), after.param(id), "{} changed", id.name());
            }
        }
        assert_eq!(before.bn1.running_mean, after.bn1.running_mean);
        assert_eq!(before.bn1.running_var, after.bn1.running_var);
        assert_eq!(before.bn2.running_mean, after.bn2.running_mean);
        assert_eq!(before.bn2.running_var, after.bn2.running_var);
    }

    #[test]
    fn zero_lr_changes_nothing_but_logs() {
        for cfg in [sgd(0.0), AdaptConfig { lr: 0.0, ..AdaptConfig::default() }] {
            let mut p = tiny();
            let before = p.clone();
            let mut st = AdaptState::new(&p, &cfg);
            let out = adapt_batch(&mut p, &mut st, &batch(6, 1), &cfg).unwrap();
            assert_eq!(p, before);
            assert_eq!(st.log().len(), 1);
            assert!(out.mean_entropy > 0.0);
        }
    }

    #[test]
    fn peaked_batch_has_vanishing_gradient() {
        let mut p = tiny();
        p.fc_bias[2] = 60.0;
        let b = Tensor::new(vec![4, 1, 8, 8], vec![0.5; 4 * 64]).unwrap();
        let before = p.clone();
        let cfg = sgd(1e-3);
        let mut st = AdaptState::new(&p, &cfg);
        let out = adapt_batch(&mut p, &mut st, &b, &cfg).unwrap();
        assert!(out.mean_entropy < 1e-6);
        assert!(out.gradient_norm < 1e-6);
        for id in ParamId::BN_AFFINE {
            for (a, b) in p.param(id).iter().zip(before.param(id)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_step_descends() {
        for (cfg, seed) in [(sgd(1e-3), 2), (AdaptConfig::default(), 3), (sgd(1e-3), 4)] {
            let mut p = tiny();
            let b = batch(16, seed);
            let before = mean_entropy(&p, &b);
            let mut st = AdaptState::new(&p, &cfg);
            let out = adapt_batch(&mut p, &mut st, &b, &cfg).unwrap();
            assert_eq!(out.mean_entropy, before);
            assert!(mean_entropy(&p, &b) < before);
        }
    }

    #[test]
    fn footprint_is_bn_affine_only() {
        let mut p = tiny();
        let before = p.clone();
        let batches: Vec<Tensor> = (0..5).map(|s| batch(8, s)).collect();
        let cfg = AdaptConfig {
            lr: 0.05,
            steps_per_batch: 2,
            ..AdaptConfig::default()
        };
        adapt_stream(&mut p, &batches, None, &cfg).unwrap();
        assert_footprint(&before, &p);
        assert!(ParamId::BN_AFFINE.iter().any(|&id| p.param(id) != before.param(id)));
    }

    #[test]
    fn degenerate_batch_rejected() {
        let mut p = tiny();
        let cfg = AdaptConfig::default();
        let mut st = AdaptState::new(&p, &cfg);
        let r = adapt_batch(&mut p, &mut st, &batch(1, 0), &cfg);
        assert!(matches!(r, Err(Error::DegenerateBatch(_))));
        assert!(st.log().is_empty());
    }

    #[test]
    fn empty_stream_rejected() {
        let mut p = tiny();
        assert!(matches!(
            adapt_stream(&mut p, &[], None, &AdaptConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn episodic_repeats_are_identical() {
        let mut p = tiny();
        let b = batch(8, 9);
        let cfg = AdaptConfig {
            mode: AdaptMode::Episodic,
            lr: 0.01,
            ..AdaptConfig::default()
        };
        let st = adapt_stream(&mut p, &vec![b; 4], None, &cfg).unwrap();
        let h: Vec<f64> = st.log().iter().map(|r| r.mean_entropy).collect();
        assert!(h.iter().all(|&x| x == h[0]));
    }

    #[test]
    fn episodic_records_are_order_invariant() {
        let batches: Vec<Tensor> = (0..4).map(|s| batch(6, 20 + s)).collect();
        let cfg = AdaptConfig {
            mode: AdaptMode::Episodic,
            lr: 0.01,
            ..AdaptConfig::default()
        };
        let fwd = adapt_stream(&mut tiny(), &batches, None, &cfg).unwrap();
        let rev: Vec<Tensor> = batches.iter().rev().cloned().collect();
        let bwd = adapt_stream(&mut tiny(), &rev, None, &cfg).unwrap();
        for (a, b) in fwd.log().iter().zip(bwd.log().iter().rev()) {
            assert_eq!(a.mean_entropy, b.mean_entropy);
            assert_eq!(a.gradient_norm, b.gradient_norm);
        }
    }

    #[test]
    fn continual_repeats_do_not_increase_entropy() {
        for cfg in [sgd(1e-3), AdaptConfig::default()] {
            let mut p = tiny();
            let b = batch(16, 5);
            let st = adapt_stream(&mut p, &vec![b; 8], None, &cfg).unwrap();
            let h: Vec<f64> = st.log().iter().map(|r| r.mean_entropy).collect();
            assert!(h.windows(2).all(|w| w[1] <= w[0]), "{h:?}");
            assert!(h[7] < h[0]);
        }
    }

    #[test]
    fn reset_restores_snapshot() {
        let mut p = tiny();
        let orig = p.clone();
        let cfg = AdaptConfig::default();
        let mut st = AdaptState::new(&p, &cfg);
        reset(&mut p, &mut st);
        assert_eq!(p, orig);
        for s in 0..10 {
            adapt_batch(&mut p, &mut st, &batch(4, s), &AdaptConfig { lr: 0.05, ..cfg }).unwrap();
        }
        assert_ne!(p, orig);
        reset(&mut p, &mut st);
        assert_eq!(p, orig);
        let once = (p.clone(), st.clone());
        reset(&mut p, &mut st);
        assert_eq!((p, st), once);
    }

    #[test]
    fn reset_zeroes_adam_moments() {
        let cfg = AdaptConfig::default();
        let b = batch(8, 31);
        let mut p = tiny();
        let mut st = AdaptState::new(&p, &cfg);
        adapt_batch(&mut p, &mut st, &b, &cfg).unwrap();
        reset(&mut p, &mut st);
        let after_reset = adapt_batch(&mut p, &mut st, &b, &cfg).unwrap();
        let p_reset = p.clone();
        let mut q = tiny();
        let mut fresh = AdaptState::new(&q, &cfg);
        let first = adapt_batch(&mut q, &mut fresh, &b, &cfg).unwrap();
        assert_eq!(after_reset.mean_entropy, first.mean_entropy);
        assert_eq!(p_reset, q);
    }

    #[test]
    fn trajectory_records_accuracy_and_csv() {
        let mut p = tiny();
        let batches = vec![batch(4, 1), batch(4, 2)];
        let labels = vec![vec![0, 1, 2, 3], vec![4, 4, 4, 4]];
        let st = adapt_stream(&mut p, &batches, Some(&labels), &AdaptConfig::default()).unwrap();
        assert_eq!(st.batches_seen(), 2);
        let csv = trajectory_csv(st.log()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("batch_index,mean_entropy,accuracy,gradient_norm"));
        assert_eq!(lines.count(), 2);
        assert!(st.log().iter().all(|r| r.accuracy.is_some()));
        let empty = trajectory_csv(&[]).unwrap();
        assert_eq!(empty.trim(), "batch_index,mean_entropy,accuracy,gradient_norm");
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig { lr: -1.0, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { lr: f64::NAN, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { steps_per_batch: 0, ..AdaptConfig::default() }.validate().is_err());
    }
}
