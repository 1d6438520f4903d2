use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Scalar};

fn pool_dims(input: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for axis in 0..3 {
        if window[axis] == 0 || stride[axis] == 0 {
            return Err(Error::Config("pooling window and stride must be >= 1".into()));
        }
        if window[axis] > input[axis] {
            return Err(Error::dim(
                format!("pool window {}", ["depth", "height", "width"][axis]),
                input[axis],
                window[axis],
            ));
        }
        out[axis] = (input[axis] - window[axis]) / stride[axis] + 1;
    }
    Ok(out)
}

fn spatial(x: &NdArray<impl Scalar>) -> Result<[usize; 3]> {
    if x.ndim() != 5 {
        return Err(Error::Shape(format!("expected [B,C,D,H,W], got {:?}", x.shape())));
    }
    let s = x.shape();
    Ok([s[2], s[3], s[4]])
}

/// Unpadded average pooling; each output is the mean of its window.
pub fn avg_pool3d<T: Scalar>(x: &NdArray<T>, window: [usize; 3], stride: [usize; 3]) -> Result<NdArray<T>> {
    let input = spatial(x)?;
    let out_dims = pool_dims(input, window, stride)?;
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let in_vol: usize = input.iter().product();
    let out_vol: usize = out_dims.iter().product();
    let inv = T::one() / T::lit(window.iter().product::<usize>() as f64);
    let mut out = vec![T::zero(); b * c * out_vol];
    out.par_chunks_mut(out_vol)
        .zip(x.data().par_chunks(in_vol))
        .for_each(|(dst, src)| {
            for od in 0..out_dims[0] {
                for oh in 0..out_dims[1] {
                    for ow in 0..out_dims[2] {
                        let mut acc = T::zero();
                        for i in 0..window[0] {
                            let z = od * stride[0] + i;
                            for j in 0..window[1] {
                                let y = oh * stride[1] + j;
                                let row = (z * input[1] + y) * input[2] + ow * stride[2];
                                for &v in &src[row..row + window[2]] {
                                    acc += v;
                                }
                            }
                        }
                        dst[(od * out_dims[1] + oh) * out_dims[2] + ow] = acc * inv;
                    }
                }
            }
        });
    NdArray::new(vec![b, c, out_dims[0], out_dims[1], out_dims[2]], out)
}

pub fn avg_pool3d_backward<T: Scalar>(
    dy: &NdArray<T>,
    input: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<NdArray<T>> {
    let out_dims = pool_dims(input, window, stride)?;
    let (b, c) = (dy.shape()[0], dy.shape()[1]);
    let in_vol: usize = input.iter().product();
    let out_vol: usize = out_dims.iter().product();
    let inv = T::one() / T::lit(window.iter().product::<usize>() as f64);
    let mut dx = vec![T::zero(); b * c * in_vol];
    dx.par_chunks_mut(in_vol)
        .zip(dy.data().par_chunks(out_vol))
        .for_each(|(dst, g)| {
            for od in 0..out_dims[0] {
                for oh in 0..out_dims[1] {
                    for ow in 0..out_dims[2] {
                        let gv = g[(od * out_dims[1] + oh) * out_dims[2] + ow] * inv;
                        for i in 0..window[0] {
                            let z = od * stride[0] + i;
                            for j in 0..window[1] {
                                let y = oh * stride[1] + j;
                                let row = (z * input[1] + y) * input[2] + ow * stride[2];
                                for v in &mut dst[row..row + window[2]] {
                                    *v += gv;
                                }
                            }
                        }
                    }
                }
            }
        });
    NdArray::new(vec![b, c, input[0], input[1], input[2]], dx)
}

/// Mean over all spatial axes: `[B,C,D,H,W] -> [B,C]`.
pub fn global_avg_pool<T: Scalar>(x: &NdArray<T>) -> Result<NdArray<T>> {
    let input = spatial(x)?;
    let vol: usize = input.iter().product();
    let inv = T::one() / T::lit(vol as f64);
    let data = x
        .data()
        .chunks(vol)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    NdArray::new(vec![x.shape()[0], x.shape()[1]], data)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &NdArray<T>, input: [usize; 3]) -> Result<NdArray<T>> {
    let vol: usize = input.iter().product();
    let inv = T::one() / T::lit(vol as f64);
    let mut data = Vec::with_capacity(dy.len() * vol);
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, vol));
    }
    NdArray::new(vec![dy.shape()[0], dy.shape()[1], input[0], input[1], input[2]], data)
}
