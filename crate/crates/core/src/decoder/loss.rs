use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Mean next-token cross-entropy over positions whose target is not `ignore`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize], ignore: Option<usize>) -> Result<f64> {
    let (sum, count, _) = cross_entropy_parts(logits, targets, ignore, false)?;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Summed cross-entropy, the number of scored positions and the gradient of
/// the sum with respect to `logits` (`softmax - onehot` on scored rows).
pub(crate) fn cross_entropy_sum_grad(
    logits: &Matrix,
    targets: &[usize],
    ignore: Option<usize>,
) -> Result<(f64, usize, Matrix)> {
    let (sum, count, grad) = cross_entropy_parts(logits, targets, ignore, true)?;
    Ok((sum, count, grad.expect("gradient requested")))
}

fn cross_entropy_parts(
    logits: &Matrix,
    targets: &[usize],
    ignore: Option<usize>,
    want_grad: bool,
) -> Result<(f64, usize, Option<Matrix>)> {
    if targets.len() != logits.rows() {
        return Err(Error::shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let vocab = logits.cols();
    let mut grad = want_grad.then(|| Matrix::zeros(logits.rows(), vocab));
    let (mut sum, mut count) = (0.0, 0);
    for (t, &target) in targets.iter().enumerate() {
        if Some(target) == ignore {
            continue;
        }
        if target >= vocab {
            return Err(Error::invalid(format!("target {target} outside vocabulary of {vocab}")));
        }
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - row[target];
        count += 1;
        if let Some(g) = grad.as_mut() {
            let g_row = g.row_mut(t);
            for (gv, v) in g_row.iter_mut().zip(row) {
                *gv = (v - lse).exp();
            }
            g_row[target] -= 1.0;
        }
    }
    Ok((sum, count, grad))
}
