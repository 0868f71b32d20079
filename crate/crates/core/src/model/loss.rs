use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-example cross-entropy losses and the gradient of their mean.
///
/// `logits` is `[batch, classes, ...]` with the trailing dims flattened into
/// the class axis. Softmax is computed after subtracting the row maximum.
pub fn softmax_xent_per_example(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let batch = logits.shape().first().copied().unwrap_or(0);
    if batch == 0 || batch != labels.len() {
        return Err(Error::Shape {
            op: "softmax_xent",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let classes = logits.len() / batch;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let mut losses = Vec::with_capacity(batch);
    let mut grad = Tensor::zeros(logits.shape());
    let scale = 1.0 / batch as f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        losses.push(log_sum - (row[label] - max));
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (gi, z) in g.iter_mut().zip(row) {
            *gi = (z - max).exp() / sum * scale;
        }
        g[label] -= scale;
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("softmax_xent loss".into()));
    }
    Ok((losses, grad))
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (losses, grad) = softmax_xent_per_example(logits, labels)?;
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((loss, grad))
}
