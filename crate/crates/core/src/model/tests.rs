use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor {
    let data = (0..n * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, 1, side, side], data).unwrap()
}

fn perturb_bn(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    for bn in [&mut params.bn1, &mut params.bn2] {
        for g in &mut bn.gamma {
            *g = rng.random_range(0.5..1.5);
        }
        for b in &mut bn.beta {
            *b = rng.random_range(-0.5..0.5);
        }
        for m in &mut bn.running_mean {
            *m = rng.random_range(-0.3..0.3);
        }
        for v in &mut bn.running_var {
            *v = rng.random_range(0.5..2.0);
        }
    }
    for b in params.conv1_bias.iter_mut().chain(&mut params.conv2_bias) {
        *b = rng.random_range(-0.2..0.2);
    }
}

/// Max relative error between analytic gradients and central differences of
/// `loss` over every coordinate of every tensor.
fn fd_max_rel_error(
    params: &ModelParams,
    batch: &Tensor,
    mode: StatMode,
    loss: &dyn Fn(&Tensor) -> (f64, Tensor),
) -> f64 {
    let (logits, cache) = forward(params, batch, mode).unwrap();
    let (_, dlogits) = loss(&logits);
    let grads = backward(params, &cache, &dlogits, GradMask::All).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in ParamId::ALL {
        for k in 0..params.param(id).len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.param_mut(id)[k] += delta;
                loss(&forward(&p, batch, mode).unwrap().0).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads.get(id)[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

fn entropy_loss(l: &Tensor) -> (f64, Tensor) {
    entropy_loss_grad(l).unwrap()
}

#[test]
fn gradients_match_finite_differences_tiny_net() {
    let arch = Architecture {
        input: 4,
        conv1: 1,
        conv2: 1,
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(arch, Alphabet::parse("AB").unwrap(), seed).unwrap();
        perturb_bn(&mut params, &mut rng);
        let batch = random_batch(&mut rng, 3, 4);
        let labels = vec![0, 2, 1];
        let ce = |l: &Tensor| cross_entropy_loss_grad(l, &labels).unwrap();
        for mode in [StatMode::BatchStats, StatMode::RunningStats] {
            let e = fd_max_rel_error(&params, &batch, mode, &entropy_loss);
            assert!(e <= 1e-4, "entropy {mode:?} seed {seed}: {e}");
            let e = fd_max_rel_error(&params, &batch, mode, &ce);
            assert!(e <= 1e-4, "cross-entropy {mode:?} seed {seed}: {e}");
        }
    }
}

#[test]
fn gradients_match_finite_differences_multichannel() {
    let arch = Architecture {
        input: 8,
        conv1: 2,
        conv2: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ModelParams::init(arch, Alphabet::parse("ABCD").unwrap(), 11).unwrap();
    perturb_bn(&mut params, &mut rng);
    let batch = random_batch(&mut rng, 4, 8);
    let e = fd_max_rel_error(&params, &batch, StatMode::BatchStats, &entropy_loss);
    assert!(e <= 1e-4, "{e}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logits = Tensor::new(vec![3, 5], data.clone()).unwrap();
    let labels = [4, 0, 2];
    let (_, ge) = entropy_loss_grad(&logits).unwrap();
    let (_, gc) = cross_entropy_loss_grad(&logits, &labels).unwrap();
    let h = 1e-5;
    for k in 0..15 {
        let at = |d: f64| {
            let mut v = data.clone();
            v[k] += d;
            Tensor::new(vec![3, 5], v).unwrap()
        };
        let ne = (entropy_loss_grad(&at(h)).unwrap().0 - entropy_loss_grad(&at(-h)).unwrap().0)
            / (2.0 * h);
        let nc = (cross_entropy_loss_grad(&at(h), &labels).unwrap().0
            - cross_entropy_loss_grad(&at(-h), &labels).unwrap().0)
            / (2.0 * h);
        assert!((ne - ge.data()[k]).abs() <= 1e-6 * ne.abs().max(1e-3), "entropy {k}");
        assert!((nc - gc.data()[k]).abs() <= 1e-6 * nc.abs().max(1e-3), "ce {k}");
    }
}

#[test]
fn entropy_loss_limits() {
    let flat = Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap();
    let (l, g) = entropy_loss_grad(&flat).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);
    assert!(g.data().iter().all(|v| v.abs() < 1e-15));

    let peaked = Tensor::new(vec![1, 3], vec![40.0, 0.0, 5.0]).unwrap();
    let (l, g) = entropy_loss_grad(&peaked).unwrap();
    assert!(l < 1e-10);
    assert!(g.data().iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn cross_entropy_limits() {
    let uniform = Tensor::new(vec![2, 5], vec![1.0; 10]).unwrap();
    let (l, _) = cross_entropy_loss_grad(&uniform, &[0, 3]).unwrap();
    assert!((l - 5f64.ln()).abs() < 1e-12);
    let sure = Tensor::new(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap();
    assert!(cross_entropy_loss_grad(&sure, &[1]).unwrap().0 < 1e-12);
    assert!(matches!(
        cross_entropy_loss_grad(&sure, &[3]),
        Err(Error::Range { index: 3, len: 3 })
    ));
}

#[test]
fn zero_upstream_gradient_gives_zero_gradset() {
    let params = ModelParams::init(Architecture::default(), Alphabet::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&mut rng, 2, 32);
    let (logits, cache) = forward(&params, &batch, StatMode::BatchStats).unwrap();
    let zeros = Tensor::zeros(logits.shape().to_vec());
    let g = backward(&params, &cache, &zeros, GradMask::All).unwrap();
    assert_eq!(g.norm(), 0.0);
}

#[test]
fn bn_affine_mask_zeroes_other_slots() {
    let arch = Architecture {
        input: 8,
        conv1: 2,
        conv2: 2,
    };
    let params = ModelParams::init(arch, Alphabet::parse("AB").unwrap(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(&mut rng, 3, 8);
    let (logits, cache) = forward(&params, &batch, StatMode::BatchStats).unwrap();
    let (_, d) = entropy_loss_grad(&logits).unwrap();
    let masked = backward(&params, &cache, &d, GradMask::BnAffine).unwrap();
    let full = backward(&params, &cache, &d, GradMask::All).unwrap();
    for id in ParamId::ALL {
        if id.is_bn_affine() {
            assert_eq!(masked.get(id), full.get(id), "{}", id.name());
        } else {
            assert!(masked.get(id).iter().all(|&v| v == 0.0), "{}", id.name());
        }
    }
}

#[test]
fn backward_rejects_mismatched_upstream() {
    let params = ModelParams::init(Architecture::default(), Alphabet::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, cache) = forward(&params, &random_batch(&mut rng, 2, 32), StatMode::BatchStats).unwrap();
    let wrong = Tensor::zeros(vec![3, params.classes()]);
    assert!(matches!(
        backward(&params, &cache, &wrong, GradMask::All),
        Err(Error::Shape(_))
    ));
}

#[test]
fn single_sample_batch_stats_is_degenerate() {
    let params = ModelParams::init(Architecture::default(), Alphabet::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random_batch(&mut rng, 1, 32);
    assert!(matches!(
        forward(&params, &b, StatMode::BatchStats),
        Err(Error::DegenerateBatch(_))
    ));
    assert!(forward(&params, &b, StatMode::RunningStats).is_ok());
    assert!(forward(&params, &random_batch(&mut rng, 2, 16), StatMode::RunningStats).is_err());
}

#[test]
fn running_stats_forward_is_deterministic_and_pure() {
    let params = ModelParams::init(Architecture::default(), Alphabet::default(), 9).unwrap();
    let before = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = random_batch(&mut rng, 3, 32);
    let (a, _) = forward(&params, &b, StatMode::RunningStats).unwrap();
    let (c, _) = forward(&params, &b, StatMode::RunningStats).unwrap();
    assert_eq!(a.data(), c.data());
    assert_eq!(params, before);
}

#[test]
fn forward_train_blends_running_stats() {
    let mut params = ModelParams::init(Architecture::default(), Alphabet::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = random_batch(&mut rng, 4, 32);
    let (_, cache) = forward_train(&mut params, &b).unwrap();
    for ch in 0..8 {
        let expected = 0.1 * cache.bn1.mean[ch];
        assert!((params.bn1.running_mean[ch] - expected).abs() < 1e-15);
        let expected = 0.9 + 0.1 * cache.bn1.var[ch];
        assert!((params.bn1.running_var[ch] - expected).abs() < 1e-15);
    }
}

fn assert_normalized(xhat: &[f64], n: usize, c: usize, plane: usize, mean_tol: f64, var_tol: f64) {
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| xhat[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() <= mean_tol, "channel {ch} mean {m}");
        assert!((v - 1.0).abs() <= var_tol, "channel {ch} var {v}");
    }
}

#[test]
fn batch_stats_normalize_each_channel() {
    let mut params = ModelParams::init(Architecture::default(), Alphabet::default(), 4).unwrap();
    params.bn1.eps = 0.0;
    params.bn2.eps = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, cache) = forward(&params, &random_batch(&mut rng, 3, 32), StatMode::BatchStats).unwrap();
    assert_normalized(cache.normalized(1), 3, 8, 1024, 1e-10, 1e-10);
    assert_normalized(cache.normalized(2), 3, 16, 256, 1e-10, 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bn_normalization_holds_for_any_batch(seed in any::<u64>(), n in 2usize..5, scale in 0.1f64..10.0) {
        let arch = Architecture { input: 8, conv1: 3, conv2: 2 };
        let mut params = ModelParams::init(arch, Alphabet::parse("AB").unwrap(), seed).unwrap();
        params.bn1.eps = 0.0;
        params.bn2.eps = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 64).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let batch = Tensor::new(vec![n, 1, 8, 8], data).unwrap();
        let (_, cache) = forward(&params, &batch, StatMode::BatchStats).unwrap();
        assert_normalized(cache.normalized(1), n, 3, 64, 1e-8, 1e-6);
    }
}

#[test]
fn adam_with_vanishing_lr_is_identity() {
    let mut params = ModelParams::init(Architecture::default(), Alphabet::default(), 6).unwrap();
    let before = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (logits, cache) = forward(&params, &random_batch(&mut rng, 2, 32), StatMode::BatchStats).unwrap();
    let (_, d) = cross_entropy_loss_grad(&logits, &[0, 36]).unwrap();
    let g = backward(&params, &cache, &d, GradMask::All).unwrap();
    let mut adam = Adam::new(&params, &ParamId::ALL, AdamConfig::default());
    adam.step(&mut params, &g, 1e-15);
    for id in ParamId::ALL {
        for (a, b) in params.param(id).iter().zip(before.param(id)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn strip_window_counts() {
    assert_eq!(window_count(32, 32, 8).unwrap(), 1);
    assert_eq!(window_count(96, 32, 8).unwrap(), 9);
    assert!(window_count(31, 32, 8).is_err());
    let params = ModelParams::init(Architecture::default(), Alphabet::default(), 0).unwrap();
    let strip = Tensor::zeros(vec![1, 32, 96]);
    let lat = classify_strip(&params, &strip, 32, 8).unwrap();
    assert_eq!(lat.timesteps(), 9);
    assert_eq!(lat.classes(), 37);
    assert!(classify_strip(&params, &Tensor::zeros(vec![1, 32, 20]), 32, 8).is_err());
}

#[test]
fn strip_windows_slice_columns() {
    let data: Vec<f64> = (0..32 * 48).map(|i| (i % 48) as f64).collect();
    let strip = Tensor::new(vec![1, 32, 48], data).unwrap();
    let w = strip_windows(&strip, 32, 8).unwrap();
    assert_eq!(w.shape(), &[3, 1, 32, 32]);
    // second window starts at column 8
    assert_eq!(w.data()[1024], 8.0);
    assert_eq!(w.data()[1024 + 31], 39.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut params = ModelParams::init(Architecture::default(), Alphabet::default(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    perturb_bn(&mut params, &mut rng);
    let bytes = params.to_bytes();
    assert_eq!(&bytes[..4], b"BNET");
    let back = ModelParams::from_bytes(&bytes).unwrap();
    assert_eq!(back, params);
    assert_eq!(back.to_bytes(), bytes);
    assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(ModelParams::from_bytes(&bad).is_err());
}

#[test]
fn train_zero_epochs_leaves_params() {
    let mut params = ModelParams::init(Architecture::default(), Alphabet::default(), 3).unwrap();
    let before = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut frames = FrameSet::new(32);
    let b = random_batch(&mut rng, 4, 32);
    for i in 0..4 {
        frames.push(&b.data()[i * 1024..(i + 1) * 1024], i);
    }
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut params, &frames, &cfg).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(params, before);
    assert!(matches!(
        train(&mut params, &FrameSet::new(32), &cfg),
        Err(Error::Empty(_))
    ));
}

#[test]
fn train_overfits_ten_samples() {
    let mut params = ModelParams::init(Architecture::default(), Alphabet::default(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let b = random_batch(&mut rng, 10, 32);
    let mut frames = FrameSet::new(32);
    for i in 0..10 {
        frames.push(&b.data()[i * 1024..(i + 1) * 1024], (i * 7) % 37);
    }
    let cfg = TrainConfig {
        epochs: 200,
        seed: 10,
        ..TrainConfig::default()
    };
    let report = train(&mut params, &frames, &cfg).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.initial_loss);
    assert_eq!(frame_accuracy(&params, &frames, StatMode::RunningStats).unwrap(), 1.0);
}
