use crate::error::{Error, Result};
use crate::numeric::Tensor;

fn log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

fn check_logits(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        &[n, c] if n >= 1 && c >= 1 => Ok((n, c)),
        other => Err(Error::Shape(format!("expected N x C logits, got {other:?}"))),
    }
}

/// Entropy of each row's softmax.
pub fn row_entropies(logits: &Tensor) -> Vec<f64> {
    let c = logits.shape()[1];
    let mut lp = vec![0.0; c];
    (0..logits.shape()[0])
        .map(|i| {
            log_softmax(logits.row(i), &mut lp);
            -lp.iter().map(|&l| l.exp() * l).sum::<f64>()
        })
        .collect()
}

/// Mean softmax entropy over the batch and its gradient w.r.t. the logits.
///
/// Per row, `dH/dz_j = -p_j (ln p_j + H)`.
pub fn entropy_loss_grad(logits: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c) = check_logits(logits)?;
    let mut grad = vec![0.0; n * c];
    let mut lp = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..n {
        log_softmax(logits.row(i), &mut lp);
        let h = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
        total += h;
        for (g, &l) in grad[i * c..(i + 1) * c].iter_mut().zip(&lp) {
            *g = -l.exp() * (l + h) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, c], grad)?))
}

/// Mean negative log-likelihood and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy_loss_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = check_logits(logits)?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Range { index: bad, len: c });
    }
    let mut grad = vec![0.0; n * c];
    let mut lp = vec![0.0; c];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        log_softmax(logits.row(i), &mut lp);
        total -= lp[label];
        for (j, (g, &l)) in grad[i * c..(i + 1) * c].iter_mut().zip(&lp).enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            *g = (l.exp() - onehot) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, c], grad)?))
}
