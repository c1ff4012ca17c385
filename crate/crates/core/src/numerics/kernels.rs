use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one spatial axis.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Resolved dimensions of one `[n, h, w, c_in] * [k, k, c_in, c_out]` convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, h, w, c_in) = match *input {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(Error::shape(format!("conv2d input must be rank 3 or 4, got {input:?}"))),
        };
        let [kh, kw, kc, c_out] = *kernel else {
            return Err(Error::shape(format!(
                "conv2d kernel must be [k,k,c_in,c_out], got {kernel:?}"
            )));
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(format!(
                "conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}"
            )));
        }
        if kc != c_in {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "input {h}x{w} too small for kernel {kh} with pad {pad}"
            )));
        }
        Ok(Conv2dGeometry {
            n,
            h,
            w,
            c_in,
            c_out,
            k: kh,
            stride,
            pad,
            oh: conv_out_extent(h, kh, stride, pad),
            ow: conv_out_extent(w, kw, stride, pad),
        })
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.c_in
    }

    /// A 1x1 stride-1 unpadded convolution reads its input as the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.c_out]
    }
}

/// Patch matrix `[n*oh*ow, k*k*c_in]`, columns ordered `(ky, kx, ci)`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let row_len = g.k * g.c_in;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let r = (b * g.oh + oy) * g.ow + ox;
                let dst = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst_row = &mut dst[ky * row_len..(ky + 1) * row_len];
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy) * g.w + ix as usize) * g.c_in;
                        dst_row[kx * g.c_in..(kx + 1) * g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &Conv2dGeometry, dx: &mut [T]) {
    let patch = g.patch();
    let row_len = g.k * g.c_in;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let r = (b * g.oh + oy) * g.ow + ox;
                let src = &cols[r * patch..(r + 1) * patch];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy) * g.w + ix as usize) * g.c_in;
                        let s = &src[ky * row_len + kx * g.c_in..ky * row_len + (kx + 1) * g.c_in];
                        for (d, &v) in dx[dst..dst + g.c_in].iter_mut().zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and, unless the convolution is pointwise, the patch
/// matrix for reuse in the backward pass.
pub(crate) fn conv_forward<T: Real>(x: &[T], kernel: &[T], bias: &[T], g: &Conv2dGeometry) -> (Vec<T>, Option<Vec<T>>) {
    let rows = g.rows();
    let mut out = Vec::with_capacity(rows * g.c_out);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    let cols = if g.is_pointwise() { None } else { Some(im2col(x, g)) };
    let a = cols.as_deref().unwrap_or(x);
    T::gemm(
        false,
        false,
        rows,
        g.patch(),
        g.c_out,
        T::one(),
        a,
        kernel,
        T::one(),
        &mut out,
    );
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dkernel: Vec<T>,
    pub dbias: Vec<T>,
}

pub(crate) fn conv_backward<T: Real>(
    dy: &[T],
    x: &[T],
    cols: Option<&[T]>,
    kernel: &[T],
    g: &Conv2dGeometry,
) -> ConvGrads<T> {
    let rows = g.rows();
    let patch = g.patch();
    let a = cols.unwrap_or(x);

    let mut dkernel = vec![T::zero(); patch * g.c_out];
    T::gemm(
        true,
        false,
        patch,
        rows,
        g.c_out,
        T::one(),
        a,
        dy,
        T::zero(),
        &mut dkernel,
    );

    let mut dbias = vec![T::zero(); g.c_out];
    for r in 0..rows {
        for (d, &v) in dbias.iter_mut().zip(&dy[r * g.c_out..(r + 1) * g.c_out]) {
            *d += v;
        }
    }

    let mut dcols = vec![T::zero(); rows * patch];
    T::gemm(
        false,
        true,
        rows,
        g.c_out,
        patch,
        T::one(),
        dy,
        kernel,
        T::zero(),
        &mut dcols,
    );
    let dx = if g.is_pointwise() {
        dcols
    } else {
        let mut dx = vec![T::zero(); x.len()];
        col2im_add(&dcols, g, &mut dx);
        dx
    };
    ConvGrads { dx, dkernel, dbias }
}

/// Zero-padded cross-correlation of `[h, w, c_in]` or `[n, h, w, c_in]`
/// input with a `[k, k, c_in, c_out]` kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    if bias.len() != g.c_out {
        return Err(Error::shape(format!(
            "bias has {} entries, kernel has {} outputs",
            bias.len(),
            g.c_out
        )));
    }
    let (out, _) = conv_forward(input.data(), kernel.data(), bias.data(), &g);
    let shape: Vec<usize> = if input.shape().len() == 3 {
        vec![g.oh, g.ow, g.c_out]
    } else {
        g.out_shape().to_vec()
    };
    let out = Tensor::new(&shape, out)?;
    out.check_finite("conv2d output")?;
    Ok(out)
}

/// `input . weight + bias` for `[n_in]` or `[batch, n_in]` input and an
/// `[n_in, n_out]` weight.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n_in, n_out] = *weight.shape() else {
        return Err(Error::shape(format!(
            "linear weight must be 2-D, got {:?}",
            weight.shape()
        )));
    };
    if input.last_dim() != n_in || bias.len() != n_out {
        return Err(Error::shape(format!(
            "linear {n_in}->{n_out} applied to {:?} with bias {:?}",
            input.shape(),
            bias.shape()
        )));
    }
    let rows = input.len() / n_in;
    let mut out = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        false,
        false,
        rows,
        n_in,
        n_out,
        T::one(),
        input.data(),
        weight.data(),
        T::one(),
        &mut out,
    );
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = n_out;
    let out = Tensor::new(&shape, out)?;
    out.check_finite("linear output")?;
    Ok(out)
}

#[inline]
pub(crate) fn elu_scalar<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp() - T::one()
    }
}

/// Exponential linear unit, elementwise.
pub fn elu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(elu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [h, w, ci] = *x.shape() else { panic!() };
        let [ks, _, _, co] = *k.shape() else { panic!() };
        let oh = conv_out_extent(h, ks, stride, pad);
        let ow = conv_out_extent(w, ks, stride, pad);
        let mut out = Tensor::zeros(&[oh, ow, co]);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = b.data()[o];
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.data()[(iy as usize * w + ix as usize) * ci + c]
                                    * k.data()[((ky * ks + kx) * ci + c) * co + o];
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * co + o] = acc;
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = pseudo(&[3, 3, 4], 1);
        let mut k = Tensor::zeros(&[1, 1, 4, 4]);
        for c in 0..4 {
            k.data_mut()[c * 4 + c] = 1.0;
        }
        let y = conv2d(&x, &k, &Tensor::zeros(&[4]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = pseudo(&[4, 4, 2], 2);
        let k = Tensor::zeros(&[3, 3, 2, 3]);
        let b = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        for px in y.data().chunks(3) {
            assert_eq!(px, b.data());
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = pseudo(&[5, 6, 3], 3);
        let k = pseudo(&[3, 3, 3, 4], 4);
        let b = pseudo(&[4], 5);
        for stride in [1, 2] {
            let fast = conv2d(&x, &k, &b, stride, 1).unwrap();
            let slow = naive_conv(&x, &k, &b, stride, 1);
            assert_eq!(fast.shape(), &[5usize.div_ceil(stride), 6usize.div_ceil(stride), 4]);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = pseudo(&[4, 4, 2], 1);
        let k = pseudo(&[3, 3, 3, 1], 2);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).is_err());
        let k5 = pseudo(&[5, 5, 2, 1], 2);
        assert!(conv2d(&x, &k5, &Tensor::zeros(&[1]), 1, 2).is_err());
    }

    #[test]
    fn conv_and_linear_are_linear_in_input() {
        let x1 = pseudo(&[4, 4, 2], 7);
        let x2 = pseudo(&[4, 4, 2], 8);
        let k = pseudo(&[3, 3, 2, 3], 9);
        let zero = Tensor::zeros(&[3]);
        let (a, b) = (0.7, -1.3);
        let mix = x1.zip_map(&x2, |u, v| a * u + b * v);
        let lhs = conv2d(&mix, &k, &zero, 1, 1).unwrap();
        let y1 = conv2d(&x1, &k, &zero, 1, 1).unwrap();
        let y2 = conv2d(&x2, &k, &zero, 1, 1).unwrap();
        let rhs = y1.zip_map(&y2, |u, v| a * u + b * v);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);

        let w = pseudo(&[8, 4], 10);
        let v1 = pseudo(&[8], 11);
        let v2 = pseudo(&[8], 12);
        let mixv = v1.zip_map(&v2, |u, v| a * u + b * v);
        let zero4 = Tensor::zeros(&[4]);
        let l = linear(&mixv, &w, &zero4).unwrap();
        let r1 = linear(&v1, &w, &zero4).unwrap();
        let r2 = linear(&v2, &w, &zero4).unwrap();
        assert!(l.max_abs_diff(&r1.zip_map(&r2, |u, v| a * u + b * v)) < 1e-12);
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let x = pseudo(&[5], 3);
        let y = linear(&x, &Tensor::identity(5), &Tensor::zeros(&[5])).unwrap();
        assert_eq!(y, x);
        let bias = pseudo(&[3], 4);
        let y = linear(&Tensor::zeros(&[4]), &pseudo(&[4, 3], 5), &bias).unwrap();
        assert_eq!(y, bias);
        assert!(linear(&x, &Tensor::identity(4), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn elu_values() {
        let x = Tensor::from_f64(&[4], &[0.0, -1.0, 2.0, -50.0]).unwrap();
        let y: Tensor<f64> = elu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - (-0.6321205588285577f64)).abs() < 1e-15);
        assert_eq!(y.data()[2], 2.0);
        assert!((y.data()[3] + 1.0).abs() < 1e-15);
    }
}
