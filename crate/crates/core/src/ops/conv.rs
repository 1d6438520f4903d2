//! Direct 3D cross-correlation kernels over `(batch, channel, depth, height, width)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_kernels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    /// Stride 1, "same" padding for odd cubic kernels.
    pub fn same(in_channels: usize, out_kernels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_kernels,
            kernel: [k; 3],
            stride: [1; 3],
            padding: [k / 2; 3],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_kernels, self.in_channels, kd, kh, kw]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.in_channels, self.out_kernels]
            .into_iter()
            .chain(self.kernel)
            .chain(self.stride);
        if dims.into_iter().any(|d| d == 0) {
            return Err(Error::Config(format!("conv spec has a zero dimension: {self:?}")));
        }
        Ok(())
    }

    /// Output spatial dims for an input of `(D, H, W)`.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] {
                return Err(Error::dim(
                    ["depth", "height", "width"][axis],
                    self.kernel[axis],
                    padded,
                ));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }
}

/// Geometry shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(spec: &Conv3dSpec, input: [usize; 3]) -> Result<Self> {
        Ok(Self {
            input,
            output: spec.output_dims(input)?,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Output index range along `axis` whose input tap `k` lands inside the input.
    #[inline]
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (
            self.stride[axis] as isize,
            self.padding[axis] as isize,
            self.input[axis] as isize,
            self.output[axis] as isize,
        );
        let k = k as isize;
        // o*s + k - p in [0, n)
        let lo = (p - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (n - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.min(o);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    #[inline]
    fn input_pos(&self, axis: usize, o: usize, k: usize) -> usize {
        o * self.stride[axis] + k - self.padding[axis]
    }

    /// 1x1x1 taps with unit stride and no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// Above this many kernels the unfolded GEMM path is at least as fast for the forward
/// and input-gradient kernels.
const FRAME_MAX_KERNELS: usize = 8;

/// Unit-stride layout where every tap is a constant offset: inputs are zero padded to
/// `(Dp, Hp, Wp)` and output `(od, oh, ow)` sits at `q = (od * Hp + oh) * Wp + ow`.
/// Positions with `oh >= H'` or `ow >= W'` are scratch and never read back.
struct Frame {
    padded: [usize; 3],
    /// Frame length covering the last valid output.
    len: usize,
    /// Input offset of each tap, in weight order.
    taps: Vec<usize>,
}

impl Frame {
    fn new(geo: &ConvGeometry) -> Option<Self> {
        if geo.stride != [1; 3] {
            return None;
        }
        let padded: [usize; 3] = std::array::from_fn(|a| geo.input[a] + 2 * geo.padding[a]);
        let [_, hp, wp] = padded;
        let [od, oh, ow] = geo.output;
        let len = ((od - 1) * hp + oh - 1) * wp + ow;
        let [kd, kh, kw] = geo.kernel;
        let taps = (0..kd)
            .flat_map(|a| (0..kh).flat_map(move |b| (0..kw).map(move |c| (a * hp + b) * wp + c)))
            .collect();
        Some(Self { padded, len, taps })
    }

    fn volume(&self) -> usize {
        self.padded.iter().product()
    }

    /// Copy one `[D, H, W]` channel into the zeroed padded block `dst`.
    fn pad<T: Scalar>(&self, geo: &ConvGeometry, x: &[T], dst: &mut [T]) {
        let [d, h, w] = geo.input;
        let [pd, ph, pw] = geo.padding;
        let [_, hp, wp] = self.padded;
        for (i, row) in x.chunks_exact(w).enumerate() {
            let (z, y) = (i / h, i % h);
            let at = ((z + pd) * hp + y + ph) * wp + pw;
            dst[at..at + w].copy_from_slice(row);
        }
        debug_assert_eq!(x.len(), d * h * w);
    }

    /// `out[o] += frame[q(o)]` for every valid output.
    fn add_to_output<T: Scalar>(&self, geo: &ConvGeometry, frame: &[T], out: &mut [T]) {
        let [_, oh, ow] = geo.output;
        let [_, hp, wp] = self.padded;
        for (i, row) in out.chunks_exact_mut(ow).enumerate() {
            let at = ((i / oh) * hp + i % oh) * wp;
            row.iter_mut().zip(&frame[at..at + ow]).for_each(|(o, &v)| *o += v);
        }
    }

    /// Place an output-shaped block onto the zeroed frame `dst`.
    fn scatter_output<T: Scalar>(&self, geo: &ConvGeometry, y: &[T], dst: &mut [T]) {
        let [_, oh, ow] = geo.output;
        let [_, hp, wp] = self.padded;
        for (i, row) in y.chunks_exact(ow).enumerate() {
            let at = ((i / oh) * hp + i % oh) * wp;
            dst[at..at + ow].copy_from_slice(row);
        }
    }

    /// Inverse of `pad`: the interior of a padded block.
    fn crop<T: Scalar>(&self, geo: &ConvGeometry, src: &[T], dx: &mut [T]) {
        let [_, h, w] = geo.input;
        let [pd, ph, pw] = geo.padding;
        let [_, hp, wp] = self.padded;
        for (i, row) in dx.chunks_exact_mut(w).enumerate() {
            let at = ((i / h + pd) * hp + i % h + ph) * wp + pw;
            row.copy_from_slice(&src[at..at + w]);
        }
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    y.iter_mut().zip(x).for_each(|(yi, &xi)| *yi += a * xi);
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Unfold `c_len` channels (`x` is `[c_len, D, H, W]`) into the column matrix
/// `[c_len * kvol, D' * H' * W']`; `cols` must be zeroed.
fn im2col<T: Scalar>(x: &[T], c_len: usize, geo: &ConvGeometry, cols: &mut [T]) {
    let in_vol = geo.in_volume();
    let out_vol = geo.out_volume();
    let [kd_n, kh_n, kw_n] = geo.kernel;
    let [_, ih_n, iw_n] = geo.input;
    let [_, oh_n, ow_n] = geo.output;
    let sw = geo.stride[2];
    let mut row = 0;
    for c in 0..c_len {
        let xc = &x[c * in_vol..][..in_vol];
        for kd in 0..kd_n {
            let (od0, od1) = geo.valid_range(0, kd);
            for kh in 0..kh_n {
                let (oh0, oh1) = geo.valid_range(1, kh);
                for kw in 0..kw_n {
                    let (ow0, ow1) = geo.valid_range(2, kw);
                    let dst = &mut cols[row * out_vol..][..out_vol];
                    row += 1;
                    if ow0 == ow1 {
                        continue;
                    }
                    let iw0 = geo.input_pos(2, ow0, kw);
                    for od in od0..od1 {
                        let id = geo.input_pos(0, od, kd);
                        for oh in oh0..oh1 {
                            let ih = geo.input_pos(1, oh, kh);
                            let xrow = &xc[(id * ih_n + ih) * iw_n..][..iw_n];
                            let drow = &mut dst[(od * oh_n + oh) * ow_n..][ow0..ow1];
                            if sw == 1 {
                                drow.copy_from_slice(&xrow[iw0..iw0 + drow.len()]);
                            } else {
                                for (j, d) in drow.iter_mut().enumerate() {
                                    *d = xrow[iw0 + j * sw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add the column matrix back onto `dx` (`[c_len, D, H, W]`).
fn col2im<T: Scalar>(cols: &[T], c_len: usize, geo: &ConvGeometry, dx: &mut [T]) {
    let in_vol = geo.in_volume();
    let out_vol = geo.out_volume();
    let [kd_n, kh_n, kw_n] = geo.kernel;
    let [_, ih_n, iw_n] = geo.input;
    let [_, oh_n, ow_n] = geo.output;
    let sw = geo.stride[2];
    let mut row = 0;
    for c in 0..c_len {
        let xc = &mut dx[c * in_vol..][..in_vol];
        for kd in 0..kd_n {
            let (od0, od1) = geo.valid_range(0, kd);
            for kh in 0..kh_n {
                let (oh0, oh1) = geo.valid_range(1, kh);
                for kw in 0..kw_n {
                    let (ow0, ow1) = geo.valid_range(2, kw);
                    let src = &cols[row * out_vol..][..out_vol];
                    row += 1;
                    if ow0 == ow1 {
                        continue;
                    }
                    let iw0 = geo.input_pos(2, ow0, kw);
                    for od in od0..od1 {
                        let id = geo.input_pos(0, od, kd);
                        for oh in oh0..oh1 {
                            let ih = geo.input_pos(1, oh, kh);
                            let xrow = &mut xc[(id * ih_n + ih) * iw_n..][..iw_n];
                            let srow = &src[(od * oh_n + oh) * ow_n..][ow0..ow1];
                            if sw == 1 {
                                for (x, &v) in xrow[iw0..iw0 + srow.len()].iter_mut().zip(srow) {
                                    *x += v;
                                }
                            } else {
                                for (j, &v) in srow.iter().enumerate() {
                                    xrow[iw0 + j * sw] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate `Σ_c w[n, c] ⋆ x[c_off + c]` into `out[n_off + n]` for every batch entry.
///
/// `x` is `[B, x_channels, D, H, W]`, `w` is `[n_len, c_len, kd, kh, kw]` and `out` is
/// `[B, out_channels, D', H', W']`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_accumulate<T: Scalar>(
    x: &[T],
    x_channels: usize,
    c_off: usize,
    c_len: usize,
    w: &[T],
    geo: &ConvGeometry,
    out: &mut [T],
    out_channels: usize,
    n_off: usize,
    n_len: usize,
) {
    let in_vol = geo.in_volume();
    let out_vol = geo.out_volume();
    let kvol: usize = geo.kernel.iter().product();
    let rows = c_len * kvol;
    if let Some(frame) = Frame::new(geo).filter(|_| !geo.is_pointwise() && n_len <= FRAME_MAX_KERNELS) {
        let pvol = frame.volume();
        out.par_chunks_mut(out_channels * out_vol)
            .zip(x.par_chunks(x_channels * in_vol))
            .for_each(|(ob, xb)| {
                let mut xpad = vec![T::zero(); c_len * pvol];
                for c in 0..c_len {
                    frame.pad(
                        geo,
                        &xb[(c_off + c) * in_vol..][..in_vol],
                        &mut xpad[c * pvol..][..pvol],
                    );
                }
                let mut acc = vec![T::zero(); frame.len];
                for n in 0..n_len {
                    acc.iter_mut().for_each(|v| *v = T::zero());
                    for c in 0..c_len {
                        let xc = &xpad[c * pvol..][..pvol];
                        let wn = &w[(n * c_len + c) * kvol..][..kvol];
                        for (&wv, &off) in wn.iter().zip(&frame.taps) {
                            axpy(&mut acc, &xc[off..off + frame.len], wv);
                        }
                    }
                    frame.add_to_output(geo, &acc, &mut ob[(n_off + n) * out_vol..][..out_vol]);
                }
            });
        return;
    }
    out.par_chunks_mut(out_channels * out_vol)
        .zip(x.par_chunks(x_channels * in_vol))
        .for_each(|(ob, xb)| {
            let xs = &xb[c_off * in_vol..(c_off + c_len) * in_vol];
            let dst = (&mut ob[n_off * out_vol..(n_off + n_len) * out_vol], out_vol, 1);
            if geo.is_pointwise() {
                T::gemm(
                    [n_len, rows, out_vol],
                    T::one(),
                    (w, rows, 1),
                    (xs, out_vol, 1),
                    T::one(),
                    dst,
                );
            } else {
                let mut cols = vec![T::zero(); rows * out_vol];
                im2col(xs, c_len, geo, &mut cols);
                T::gemm(
                    [n_len, rows, out_vol],
                    T::one(),
                    (w, rows, 1),
                    (&cols, out_vol, 1),
                    T::one(),
                    dst,
                );
            }
        });
}

fn conv_dims<T: Scalar>(x: &NdArray<T>, w: &NdArray<T>, spec: &Conv3dSpec) -> Result<(usize, ConvGeometry)> {
    if x.ndim() != 5 {
        return Err(Error::Shape(format!(
            "conv3d input must be [B,C,D,H,W], got {:?}",
            x.shape()
        )));
    }
    let ws = spec.weight_shape();
    if w.shape() != ws {
        let axis = (0..5).find(|&i| w.shape().get(i) != Some(&ws[i])).unwrap_or(0);
        let names = ["kernels", "channels", "kernel depth", "kernel height", "kernel width"];
        return Err(Error::dim(
            format!("weight {}", names[axis]),
            ws[axis],
            w.shape().get(axis).copied().unwrap_or(0),
        ));
    }
    if x.shape()[1] != spec.in_channels {
        return Err(Error::dim("input channels", spec.in_channels, x.shape()[1]));
    }
    let s = x.shape();
    Ok((s[0], ConvGeometry::new(spec, [s[2], s[3], s[4]])?))
}

/// `out[b, n] = Σ_c w[n, c] ⋆ x[b, c]` with zero padding, no kernel flip.
pub fn conv3d<T: Scalar>(x: &NdArray<T>, w: &NdArray<T>, spec: &Conv3dSpec) -> Result<NdArray<T>> {
    let (batch, geo) = conv_dims(x, w, spec)?;
    let [od, oh, ow] = geo.output;
    let n = spec.out_kernels;
    let mut out = vec![T::zero(); batch * n * od * oh * ow];
    conv3d_accumulate(
        x.data(),
        spec.in_channels,
        0,
        spec.in_channels,
        w.data(),
        &geo,
        &mut out,
        n,
        0,
        n,
    );
    NdArray::new(vec![batch, n, od, oh, ow], out)
}

/// Gradient of `conv3d` with respect to its input.
pub fn conv3d_backward_input<T: Scalar>(
    dy: &NdArray<T>,
    w: &NdArray<T>,
    spec: &Conv3dSpec,
    input_dims: [usize; 3],
) -> Result<NdArray<T>> {
    let geo = ConvGeometry::new(spec, input_dims)?;
    let batch = dy.shape()[0];
    let (c_n, n_n) = (spec.in_channels, spec.out_kernels);
    let in_vol = geo.in_volume();
    let out_vol = geo.out_volume();
    let rows = c_n * spec.kernel_volume();
    let wd = w.data();

    let mut dx = vec![T::zero(); batch * c_n * in_vol];
    if let Some(frame) = Frame::new(&geo).filter(|_| !geo.is_pointwise() && n_n <= FRAME_MAX_KERNELS) {
        let kvol = spec.kernel_volume();
        let pvol = frame.volume();
        dx.par_chunks_mut(c_n * in_vol)
            .zip(dy.data().par_chunks(n_n * out_vol))
            .for_each(|(dst, g)| {
                let mut gq = vec![T::zero(); n_n * pvol];
                for n in 0..n_n {
                    frame.scatter_output(&geo, &g[n * out_vol..][..out_vol], &mut gq[n * pvol..][..pvol]);
                }
                let mut dpad = vec![T::zero(); pvol];
                for c in 0..c_n {
                    dpad.iter_mut().for_each(|v| *v = T::zero());
                    for n in 0..n_n {
                        let gn = &gq[n * pvol..][..frame.len];
                        let wn = &wd[(n * c_n + c) * kvol..][..kvol];
                        for (&wv, &off) in wn.iter().zip(&frame.taps) {
                            axpy(&mut dpad[off..off + frame.len], gn, wv);
                        }
                    }
                    frame.crop(&geo, &dpad, &mut dst[c * in_vol..][..in_vol]);
                }
            });
        return NdArray::new(vec![batch, c_n, input_dims[0], input_dims[1], input_dims[2]], dx);
    }
    dx.par_chunks_mut(c_n * in_vol)
        .zip(dy.data().par_chunks(n_n * out_vol))
        .for_each(|(dst, g)| {
            // w^T: [rows, N] read from the row-major [N, rows] bank
            let wt = (wd, 1, rows);
            if geo.is_pointwise() {
                T::gemm(
                    [rows, n_n, out_vol],
                    T::one(),
                    wt,
                    (g, out_vol, 1),
                    T::zero(),
                    (dst, out_vol, 1),
                );
            } else {
                let mut cols = vec![T::zero(); rows * out_vol];
                T::gemm(
                    [rows, n_n, out_vol],
                    T::one(),
                    wt,
                    (g, out_vol, 1),
                    T::zero(),
                    (&mut cols, out_vol, 1),
                );
                col2im(&cols, c_n, &geo, dst);
            }
        });
    NdArray::new(vec![batch, c_n, input_dims[0], input_dims[1], input_dims[2]], dx)
}

/// Gradient of `conv3d` with respect to its kernel bank.
pub fn conv3d_backward_weight<T: Scalar>(dy: &NdArray<T>, x: &NdArray<T>, spec: &Conv3dSpec) -> Result<NdArray<T>> {
    let s = x.shape();
    let geo = ConvGeometry::new(spec, [s[2], s[3], s[4]])?;
    let batch = s[0];
    let (c_n, n_n) = (spec.in_channels, spec.out_kernels);
    let in_vol = geo.in_volume();
    let out_vol = geo.out_volume();
    let rows = c_n * spec.kernel_volume();

    let mut dw = vec![T::zero(); n_n * rows];
    if let Some(frame) = Frame::new(&geo).filter(|_| !geo.is_pointwise()) {
        let kvol = spec.kernel_volume();
        let pvol = frame.volume();
        let mut xpad = vec![T::zero(); batch * c_n * pvol];
        xpad.par_chunks_mut(pvol)
            .zip(x.data().par_chunks(in_vol))
            .for_each(|(dst, xc)| frame.pad(&geo, xc, dst));
        let mut gq = vec![T::zero(); batch * n_n * pvol];
        gq.par_chunks_mut(pvol)
            .zip(dy.data().par_chunks(out_vol))
            .for_each(|(dst, gn)| frame.scatter_output(&geo, gn, dst));
        // scratch frame positions of gq are zero, so full-frame dots only see valid outputs
        dw.par_chunks_mut(rows).enumerate().for_each(|(n, dst)| {
            for b in 0..batch {
                let gn = &gq[(b * n_n + n) * pvol..][..frame.len];
                for c in 0..c_n {
                    let xc = &xpad[(b * c_n + c) * pvol..][..pvol];
                    for (d, &off) in dst[c * kvol..][..kvol].iter_mut().zip(&frame.taps) {
                        *d += dot(gn, &xc[off..off + frame.len]);
                    }
                }
            }
        });
        return NdArray::new(spec.weight_shape().to_vec(), dw);
    }
    let mut cols = vec![T::zero(); rows * out_vol];
    for b in 0..batch {
        let g = &dy.data()[b * n_n * out_vol..][..n_n * out_vol];
        let xb = &x.data()[b * c_n * in_vol..][..c_n * in_vol];
        let src: &[T] = if geo.is_pointwise() {
            xb
        } else {
            cols.iter_mut().for_each(|v| *v = T::zero());
            im2col(xb, c_n, &geo, &mut cols);
            &cols
        };
        // dW^T [rows, N] += cols_b [rows, P] * dy_b^T [P, N]; keeps the large operand row-major
        T::gemm(
            [rows, out_vol, n_n],
            T::one(),
            (src, out_vol, 1),
            (g, 1, out_vol),
            T::one(),
            (&mut dw, 1, rows),
        );
    }
    NdArray::new(spec.weight_shape().to_vec(), dw)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop direct summation.
    pub(crate) fn conv3d_oracle(x: &NdArray<f64>, w: &NdArray<f64>, spec: &Conv3dSpec) -> NdArray<f64> {
        let s = x.shape();
        let (b_n, c_n, d, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
        let [kd, kh, kw] = spec.kernel;
        let [sd, sh, sw] = spec.stride;
        let [pd, ph, pw] = spec.padding;
        let od = (d + 2 * pd - kd) / sd + 1;
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (wd + 2 * pw - kw) / sw + 1;
        let n_n = spec.out_kernels;
        let mut out = NdArray::zeros(&[b_n, n_n, od, oh, ow]);
        for b in 0..b_n {
            for n in 0..n_n {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..c_n {
                                for i in 0..kd {
                                    for j in 0..kh {
                                        for k in 0..kw {
                                            let zi = (z * sd + i) as isize - pd as isize;
                                            let yi = (y * sh + j) as isize - ph as isize;
                                            let xi = (xx * sw + k) as isize - pw as isize;
                                            if zi < 0
                                                || yi < 0
                                                || xi < 0
                                                || zi >= d as isize
                                                || yi >= h as isize
                                                || xi >= wd as isize
                                            {
                                                continue;
                                            }
                                            acc += w.at(&[n, c, i, j, k])
                                                * x.at(&[b, c, zi as usize, yi as usize, xi as usize]);
                                        }
                                    }
                                }
                            }
                            out.set(&[b, n, z, y, xx], acc);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = NdArray::<f64>::randn(&[1, 1, 3, 4, 5], 1.0, &mut rng);
        let w = NdArray::full(&[1, 1, 1, 1, 1], 1.0);
        let spec = Conv3dSpec::same(1, 1, 1);
        assert_eq!(conv3d(&x, &w, &spec).unwrap(), x);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = NdArray::<f64>::randn(&[2, 2, 4, 4, 4], 1.0, &mut rng);
        let w = NdArray::zeros(&[3, 2, 3, 3, 3]);
        let y = conv3d(&x, &w, &Conv3dSpec::same(2, 3, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = NdArray::<f64>::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
        let w = NdArray::<f64>::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng);
        let spec = Conv3dSpec::same(2, 3, 3);
        let y = conv3d(&x, &w, &spec).unwrap();
        assert!(y.max_abs_diff(&conv3d_oracle(&x, &w, &spec)) <= 1e-6);
    }

    #[test]
    fn strided_unpadded_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = NdArray::<f64>::randn(&[2, 3, 5, 6, 7], 1.0, &mut rng);
        let w = NdArray::<f64>::randn(&[2, 3, 2, 3, 2], 1.0, &mut rng);
        let spec = Conv3dSpec {
            in_channels: 3,
            out_kernels: 2,
            kernel: [2, 3, 2],
            stride: [2, 1, 3],
            padding: [1, 0, 1],
        };
        let y = conv3d(&x, &w, &spec).unwrap();
        assert!(y.max_abs_diff(&conv3d_oracle(&x, &w, &spec)) <= 1e-10);
    }

    /// Forward against the oracle; both backward kernels through
    /// `<conv(x, w), g> = <x, dx(g)> = <w, dw(g, x)>`.
    #[test]
    fn every_kernel_path_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cases = [
            ([3, 1, 5], [1, 1, 1], [1, 0, 2], 3),
            ([3, 3, 3], [1, 1, 1], [1, 1, 1], FRAME_MAX_KERNELS + 2),
            ([2, 2, 1], [1, 1, 1], [0, 1, 0], 2),
            ([1, 1, 1], [1, 1, 1], [0, 0, 0], 4),
            ([3, 2, 3], [2, 1, 2], [1, 0, 1], 3),
        ];
        for (kernel, stride, padding, n) in cases {
            let spec = Conv3dSpec {
                in_channels: 3,
                out_kernels: n,
                kernel,
                stride,
                padding,
            };
            let dims = [4, 5, 6];
            let x = NdArray::<f64>::randn(&[2, 3, dims[0], dims[1], dims[2]], 1.0, &mut rng);
            let w = NdArray::<f64>::randn(&spec.weight_shape(), 1.0, &mut rng);
            let y = conv3d_oracle(&x, &w, &spec);
            assert!(conv3d(&x, &w, &spec).unwrap().max_abs_diff(&y) <= 1e-10, "{spec:?}");
            let g = NdArray::<f64>::randn(y.shape(), 1.0, &mut rng);
            let inner =
                |a: &NdArray<f64>, b: &NdArray<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
            let lhs = inner(&y, &g);
            let dx = conv3d_backward_input(&g, &w, &spec, dims).unwrap();
            let dw = conv3d_backward_weight(&g, &x, &spec).unwrap();
            assert!((inner(&x, &dx) - lhs).abs() <= 1e-9 * lhs.abs().max(1.0), "{spec:?}");
            assert!((inner(&w, &dw) - lhs).abs() <= 1e-9 * lhs.abs().max(1.0), "{spec:?}");
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = Conv3dSpec::same(2, 2, 3);
        let x1 = NdArray::<f64>::randn(&[1, 2, 3, 4, 4], 1.0, &mut rng);
        let x2 = NdArray::<f64>::randn(&[1, 2, 3, 4, 4], 1.0, &mut rng);
        let w = NdArray::<f64>::randn(&[2, 2, 3, 3, 3], 1.0, &mut rng);
        let (a, b) = (1.7, -0.6);
        let mix = x1.zip_map(&x2, |p, q| a * p + b * q).unwrap();
        let lhs = conv3d(&mix, &w, &spec).unwrap();
        let y1 = conv3d(&x1, &w, &spec).unwrap();
        let y2 = conv3d(&x2, &w, &spec).unwrap();
        let rhs = y1.zip_map(&y2, |p, q| a * p + b * q).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = NdArray::<f32>::zeros(&[1, 3, 4, 4, 4]);
        let w = NdArray::<f32>::zeros(&[2, 2, 3, 3, 3]);
        match conv3d(&x, &w, &Conv3dSpec::same(2, 2, 3)) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
        let w = NdArray::<f32>::zeros(&[2, 3, 3, 1, 3]);
        match conv3d(&x, &w, &Conv3dSpec::same(3, 2, 3)) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "weight kernel height"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_fails() {
        let spec = Conv3dSpec {
            in_channels: 1,
            out_kernels: 1,
            kernel: [5, 1, 1],
            stride: [1; 3],
            padding: [0; 3],
        };
        assert!(spec.output_dims([3, 4, 4]).is_err());
    }
}
