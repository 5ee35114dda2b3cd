use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(row);
    row.mapv(|v| v - lse)
}

pub fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = row.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Negative log-likelihood of `target` under softmax(`row`).
pub(crate) fn token_nll(row: ArrayView1<f64>, target: u32) -> f64 {
    log_sum_exp(row) - row[target as usize]
}

/// Mean cross-entropy over all rows of `N×V` logits.
pub fn ce_loss(logits: ArrayView2<f64>, targets: &[u32]) -> f64 {
    assert_eq!(logits.nrows(), targets.len(), "logits/targets length");
    let total: f64 = logits
        .axis_iter(Axis(0))
        .zip(targets)
        .map(|(row, &t)| token_nll(row, t))
        .sum();
    total / targets.len() as f64
}

/// Mean cross-entropy and its gradient `(softmax − onehot) / N`.
pub fn ce_loss_and_grad(logits: ArrayView2<f64>, targets: &[u32]) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), targets.len(), "logits/targets length");
    let n = targets.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut g), &t) in logits
        .axis_iter(Axis(0))
        .zip(grad.axis_iter_mut(Axis(0)))
        .zip(targets)
    {
        total += token_nll(row, t);
        let p = softmax(row);
        g.assign(&(p / n));
        g[t as usize] -= 1.0 / n;
    }
    (total / n, grad)
}
