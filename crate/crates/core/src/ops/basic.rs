use crate::error::{Error, Result};
use crate::tensor::{NdArray, Scalar};

pub fn relu<T: Scalar>(x: &NdArray<T>) -> NdArray<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn matrix_dims(m: &NdArray<impl Scalar>, what: &str) -> Result<(usize, usize)> {
    match m.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be a matrix, got {s:?}"))),
    }
}

/// Row-wise softmax of a `[R, G]` matrix, max-shifted for stability.
pub fn softmax_rows<T: Scalar>(m: &NdArray<T>) -> Result<NdArray<T>> {
    let (_, cols) = matrix_dims(m, "softmax input")?;
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    NdArray::new(m.shape().to_vec(), out)
}

/// `a · bᵀ` for `a: [M, K]`, `b: [N, K]`.
pub fn matmul_nt<T: Scalar>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (n, k2) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(Error::dim("inner dimension", k, k2));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for t in 0..k {
                acc += ad[i * k + t] * bd[j * k + t];
            }
            out[i * n + j] = acc;
        }
    }
    NdArray::new(vec![m, n], out)
}

/// `x · wᵀ + b` for `x: [B, F]`, `w: [K, F]`, `b: [K]`.
pub fn linear<T: Scalar>(x: &NdArray<T>, w: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>> {
    let mut y = matmul_nt(x, w)?;
    let k = w.shape()[0];
    if b.shape() != [k] {
        return Err(Error::dim("bias length", k, b.len()));
    }
    for row in y.data_mut().chunks_mut(k) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

pub fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::dim("label count", batch, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Range(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Batch-mean cross entropy; returns `(loss, softmax probabilities)`.
pub fn cross_entropy<T: Scalar>(logits: &NdArray<T>, labels: &[usize]) -> Result<(T, NdArray<T>)> {
    let (batch, classes) = matrix_dims(logits, "logits")?;
    check_labels(labels, batch, classes)?;
    let probs = softmax_rows(logits)?;
    let mut loss = T::zero();
    for (row, &l) in probs.data().chunks(classes).zip(labels) {
        loss += -(row[l].max(T::min_positive_value())).ln();
    }
    Ok((loss / T::lit(batch as f64), probs))
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(m: &NdArray<T>) -> Vec<usize> {
    let cols = *m.shape().last().unwrap_or(&1);
    m.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps() {
        let x = NdArray::new(vec![2], vec![-3.0f64, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let m = NdArray::<f64>::zeros(&[1, 2]);
        assert_eq!(softmax_rows(&m).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = NdArray::<f64>::full(&[3, 5], 0.7);
        let (loss, _) = cross_entropy(&logits, &[0, 4, 2]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = NdArray::<f32>::zeros(&[1, 3]);
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::Range(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let m = NdArray::new(vec![2, 3], vec![0.5f32, 0.5, 0.1, 0.0, 0.2, 0.9]).unwrap();
        assert_eq!(argmax_rows(&m), vec![0, 2]);
    }
}
