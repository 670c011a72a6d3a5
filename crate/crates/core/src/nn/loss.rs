use ndarray::Array2;

use super::{Logits, NnError};

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Row-wise softmax computed with the max-shift for stability.
pub fn softmax_rows(logits: &Logits) -> Array2<f64> {
    let mut out = logits.0.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    out
}

/// Mean negative log-likelihood over the masked rows and its gradient with
/// respect to the logits: `(softmax - onehot) / count` on masked rows.
pub fn softmax_ce_loss_and_grad(
    logits: &Logits,
    labels: &[Option<usize>],
    mask: &[bool],
) -> Result<(f64, Array2<f64>), NnError> {
    let (n, c) = logits.0.dim();
    if labels.len() != n || mask.len() != n {
        return Err(NnError::Shape(format!(
            "{n} logit rows but {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NnError::EmptyMask);
    }
    let probs = softmax_rows(logits);
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    let inv = 1.0 / count as f64;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let y = labels[i].ok_or(NnError::MissingLabel(i))?;
        if y >= c {
            return Err(NnError::Shape(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.0.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for j in 0..c {
            grad[[i, j]] = (probs[[i, j]] - if j == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Mean binary cross-entropy and its gradient with respect to the
/// probabilities, with probabilities clamped to `[ε, 1-ε]`.
pub fn bce_loss_and_grad(probs: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if probs.len() != targets.len() {
        return Err(NnError::Shape(format!(
            "{} probabilities vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    if probs.is_empty() {
        return Err(NnError::EmptyMask);
    }
    let inv = 1.0 / probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(targets) {
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        grad.push(-(y / q - (1.0 - y) / (1.0 - q)) * inv);
    }
    Ok((loss * inv, grad))
}
