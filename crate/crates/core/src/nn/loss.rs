use ndarray::Array1;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Scalar};

/// Mean binary cross-entropy and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct BceOutput<T> {
    pub loss: f64,
    pub dlogits: Array1<T>,
}

/// Binary cross-entropy on sigmoid outputs, evaluated from logits for
/// stability. `pos_weight` scales the positive-class term.
pub fn bce_with_logits<T: Scalar>(
    logits: &Array1<T>,
    labels: &[u8],
    pos_weight: Option<f64>,
) -> Result<BceOutput<T>> {
    if logits.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "loss needs equal, non-zero numbers of logits and labels ({} vs {})",
            logits.len(),
            labels.len()
        )));
    }
    let pw = pos_weight.unwrap_or(1.0);
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Array1::<T>::zeros(labels.len());
    for ((&z, &y), d) in logits.iter().zip(labels).zip(dlogits.iter_mut()) {
        let zf = z.to_f64_lossless();
        let p = sigmoid(zf);
        if y == 1 {
            loss += pw * softplus(-zf);
            *d = T::lit(pw * (p - 1.0) / n);
        } else {
            loss += softplus(zf);
            *d = T::lit(p / n);
        }
    }
    Ok(BceOutput {
        loss: loss / n,
        dlogits,
    })
}
