//! Per-channel batch normalization over `[B, C, ...]` arrays.

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Scalar};

pub const BN_EPS: f64 = 1e-5;

/// Values saved by the training-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub x_hat: NdArray<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn layout(x: &NdArray<impl Scalar>, channels_expected: usize) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::Shape("batch norm needs rank >= 2".into()));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if c != channels_expected {
        return Err(Error::dim("batch-norm channels", channels_expected, c));
    }
    Ok((b, c, x.shape()[2..].iter().product()))
}

fn check_params<T: Scalar>(gamma: &NdArray<T>, beta: &NdArray<T>) -> Result<usize> {
    if gamma.ndim() != 1 || beta.shape() != gamma.shape() {
        return Err(Error::Shape(format!(
            "gamma {:?} / beta {:?} must be equal-length vectors",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(gamma.len())
}

/// Training-mode batch norm: normalizes with the batch statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &NdArray<T>,
    gamma: &NdArray<T>,
    beta: &NdArray<T>,
) -> Result<(NdArray<T>, BatchNormCache<T>)> {
    let channels = check_params(gamma, beta)?;
    let (b, c, inner) = layout(x, channels)?;
    let m = T::lit((b * inner) as f64);
    let eps = T::lit(BN_EPS);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += xd[(bi * c + ch) * inner..][..inner].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for bi in 0..b {
            for &val in &xd[(bi * c + ch) * inner..][..inner] {
                v += (val - mu) * (val - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    let (g, be) = (gamma.data(), beta.data());
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                y[i] = g[ch] * h + be[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        NdArray::new(shape.clone(), y)?,
        BatchNormCache {
            x_hat: NdArray::new(shape, x_hat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)` for the training-mode forward pass.
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &NdArray<T>,
    gamma: &NdArray<T>,
    cache: &BatchNormCache<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>)> {
    let (b, c, inner) = layout(dy, gamma.len())?;
    let m = T::lit((b * inner) as f64);
    let (dyd, xh) = (dy.data(), cache.x_hat.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                dbeta[ch] += dyd[i];
                dgamma[ch] += dyd[i] * xh[i];
            }
        }
    }
    let g = gamma.data();
    let mut dx = vec![T::zero(); dyd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let k = g[ch] * cache.inv_std[ch] / m;
            let base = (bi * c + ch) * inner;
            for i in base..base + inner {
                dx[i] = k * (m * dyd[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok((
        NdArray::new(dy.shape().to_vec(), dx)?,
        NdArray::new(vec![c], dgamma)?,
        NdArray::new(vec![c], dbeta)?,
    ))
}

/// Eval-mode batch norm with fixed statistics: `y = gamma (x - mean)/sqrt(var + eps) + beta`.
pub fn batch_norm_eval<T: Scalar>(
    x: &NdArray<T>,
    gamma: &NdArray<T>,
    beta: &NdArray<T>,
    mean: &NdArray<T>,
    var: &NdArray<T>,
) -> Result<NdArray<T>> {
    let channels = check_params(gamma, beta)?;
    if mean.shape() != gamma.shape() || var.shape() != gamma.shape() {
        return Err(Error::dim("running statistics", channels, mean.len()));
    }
    let (scale, shift) = eval_affine(gamma, beta, mean, var);
    channel_affine(x, &scale, &shift)
}

/// Fold eval-mode statistics into a per-channel `(scale, shift)`.
pub fn eval_affine<T: Scalar>(
    gamma: &NdArray<T>,
    beta: &NdArray<T>,
    mean: &NdArray<T>,
    var: &NdArray<T>,
) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(BN_EPS);
    let scale: Vec<T> = gamma
        .data()
        .iter()
        .zip(var.data())
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(mean.data())
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}

/// `y[b, c, ...] = scale[c] * x[b, c, ...] + shift[c]`.
pub fn channel_affine<T: Scalar>(x: &NdArray<T>, scale: &[T], shift: &[T]) -> Result<NdArray<T>> {
    let (b, c, inner) = layout(x, scale.len())?;
    let mut y = x.data().to_vec();
    for bi in 0..b {
        for ch in 0..c {
            for v in &mut y[(bi * c + ch) * inner..][..inner] {
                *v = scale[ch] * *v + shift[ch];
            }
        }
    }
    NdArray::new(x.shape().to_vec(), y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_moments(y: &NdArray<f64>, ch: usize) -> (f64, f64) {
        let (b, c) = (y.shape()[0], y.shape()[1]);
        let inner: usize = y.shape()[2..].iter().product();
        let vals: Vec<f64> = (0..b)
            .flat_map(|bi| y.data()[(bi * c + ch) * inner..][..inner].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = NdArray::<f64>::randn(&[4, 2, 2, 3, 3], 1.0, &mut rng);
        let ones = NdArray::full(&[2], 1.0);
        let zeros = NdArray::zeros(&[2]);
        let (z, _) = batch_norm_train(&x, &ones, &zeros).unwrap();
        let (y, _) = batch_norm_train(&z, &ones, &zeros).unwrap();
        assert!(y.max_abs_diff(&z) < 1e-4);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = NdArray::<f64>::full(&[3, 2, 2, 2, 2], 4.2);
        let gamma = NdArray::full(&[2], 1.3);
        let beta = NdArray::full(&[2], 5.0);
        let (y, _) = batch_norm_train(&x, &gamma, &beta).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn batch_moments_are_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = NdArray::<f64>::randn(&[5, 3, 2, 4, 4], 3.0, &mut rng).map(|v| v + 2.0);
        let (y, _) = batch_norm_train(&x, &NdArray::full(&[3], 1.0), &NdArray::zeros(&[3])).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() <= 1e-6, "mean {m}");
            assert!((v - 1.0).abs() <= 1e-4, "var {v}");
        }
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = NdArray::<f32>::zeros(&[1, 3, 2, 2, 2]);
        let p = NdArray::zeros(&[2]);
        assert!(batch_norm_train(&x, &p, &p).is_err());
        assert!(batch_norm_eval(&x, &p, &p, &p, &p).is_err());
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = NdArray::<f64>::full(&[1, 1, 1, 1, 2], 3.0);
        let one = NdArray::full(&[1], 1.0);
        let y = batch_norm_eval(&x, &one, &NdArray::zeros(&[1]), &one, &NdArray::full(&[1], 4.0)).unwrap();
        let expect = 2.0 / (4.0 + BN_EPS).sqrt();
        assert!(y.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }
}
