//! Raw numeric kernels behind the recorded ops. No graph logic lives here.

use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

pub(crate) fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Broadcasts `src` to `shape`. Both must have the same rank and every
/// source dimension must be 1 or equal to the target.
pub(crate) fn expand(src: &Tensor, shape: &[usize]) -> Result<Tensor> {
    check_broadcastable("expand", src.shape(), shape)?;
    let src_strides = broadcast_strides(src.shape());
    let out_strides = strides(shape);
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    for flat in 0..n {
        let mut rem = flat;
        let mut idx = 0;
        for (d, &os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            idx += coord * src_strides[d];
        }
        out.push(src.data()[idx]);
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Sums `src` down to `shape` (same rank, dims 1 or equal). Adjoint of [`expand`].
pub(crate) fn sum_to(src: &Tensor, shape: &[usize]) -> Result<Tensor> {
    check_broadcastable("sum_to", shape, src.shape())?;
    let dst_strides = broadcast_strides(shape);
    let src_strides = strides(src.shape());
    let mut out = vec![0.0; shape.iter().product()];
    for (flat, &v) in src.data().iter().enumerate() {
        let mut rem = flat;
        let mut idx = 0;
        for (d, &ss) in src_strides.iter().enumerate() {
            let coord = rem / ss;
            rem %= ss;
            idx += coord * dst_strides[d];
        }
        out[idx] += v;
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

fn check_broadcastable(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    if small.len() != big.len() || small.iter().zip(big).any(|(&s, &b)| s != 1 && s != b) {
        return Err(Error::shape(op, format!("{small:?} does not broadcast to {big:?}")));
    }
    Ok(())
}

/// Row-major strides with zeros on size-1 dimensions.
fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = strides(shape);
    for (st, &d) in s.iter_mut().zip(shape) {
        if d == 1 {
            *st = 0;
        }
    }
    s
}

pub(crate) fn gather(src: &Tensor, indices: &[usize], shape: &[usize]) -> Result<Tensor> {
    if indices.len() != shape.iter().product::<usize>() {
        return Err(Error::shape("gather", format!("{} indices for output {shape:?}", indices.len())));
    }
    let data = indices
        .iter()
        .map(|&i| {
            src.data()
                .get(i)
                .copied()
                .ok_or_else(|| Error::shape("gather", format!("index {i} out of range for {} values", src.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Adjoint of [`gather`]: accumulates `src[i]` into `out[indices[i]]`.
pub(crate) fn scatter(src: &Tensor, indices: &[usize], shape: &[usize]) -> Result<Tensor> {
    if indices.len() != src.len() {
        return Err(Error::shape("scatter", format!("{} indices for {} values", indices.len(), src.len())));
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (&i, &v) in indices.iter().zip(src.data()) {
        if i >= n {
            return Err(Error::shape("scatter", format!("index {i} out of range for {n} values")));
        }
        out[i] += v;
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("matmul", format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    let &[m, n] = a.shape() else {
        return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", a.shape())));
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c_in, h, w], &[c_out, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [N,C,H,W] and kernel [Co,Ci,kh,kw], got {input:?} and {kernel:?}"),
            ));
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {kc} (input {input:?}, kernel {kernel:?})"),
            ));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_in, self.h, self.w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }

    /// Output columns `ow` for which input column `ow*stride + kj - pad` is in bounds.
    fn col_range(&self, kj: usize) -> std::ops::Range<usize> {
        axis_range(self.w, self.ow, self.stride, self.pad, kj)
    }

    fn row_range(&self, ki: usize) -> std::ops::Range<usize> {
        axis_range(self.h, self.oh, self.stride, self.pad, ki)
    }
}

fn axis_range(len: usize, out_len: usize, stride: usize, pad: usize, k: usize) -> std::ops::Range<usize> {
    // need 0 <= o*stride + k - pad <= len - 1
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { (len - 1 + pad - k) / stride + 1 } else { 0 };
    lo.min(out_len)..hi.min(out_len).max(lo.min(out_len))
}

/// Cross-correlation of `x` [N,Ci,H,W] with `k` [Co,Ci,kh,kw].
pub(crate) fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), k.shape(), stride, pad)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let plane = &mut out[(n * g.c_out + co) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..g.c_in {
                let xin = &xd[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = kd[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                        let cols = g.col_range(kj);
                        for oh in g.row_range(ki) {
                            let ih = oh * g.stride + ki - g.pad;
                            let xrow = &xin[ih * g.w..(ih + 1) * g.w];
                            let orow = &mut plane[oh * g.ow..(oh + 1) * g.ow];
                            if g.stride == 1 {
                                let off = kj as isize - g.pad as isize;
                                let src = &xrow[(cols.start as isize + off) as usize..(cols.end as isize + off) as usize];
                                for (o, &xv) in orow[cols.clone()].iter_mut().zip(src) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ow in cols.clone() {
                                    orow[ow] += wv * xrow[ow * g.stride + kj - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.output_shape(), out))
}

/// Gradient of `<gy, conv2d(x, k)>` with respect to `x`: the transposed correlation.
pub(crate) fn conv2d_input_grad(gy: &Tensor, k: &Tensor, stride: usize, pad: usize, h: usize, w: usize) -> Result<Tensor> {
    let (&[n, c_out, _, _], &[_, c_in, _, _]) = (gy.shape(), k.shape()) else {
        return Err(Error::shape("conv2d_input_grad", format!("got {:?} and {:?}", gy.shape(), k.shape())));
    };
    let g = ConvGeom::new(&[n, c_in, h, w], k.shape(), stride, pad)?;
    if gy.shape() != g.output_shape().as_slice() || c_out != g.c_out {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!("upstream {:?} does not match conv output {:?}", gy.shape(), g.output_shape()),
        ));
    }
    let (gd, kd) = (gy.data(), k.data());
    let mut out = vec![0.0; g.n * g.c_in * g.h * g.w];
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let xin = &mut out[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            for co in 0..g.c_out {
                let plane = &gd[(n * g.c_out + co) * g.oh * g.ow..][..g.oh * g.ow];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = kd[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                        let cols = g.col_range(kj);
                        for oh in g.row_range(ki) {
                            let ih = oh * g.stride + ki - g.pad;
                            let xrow = &mut xin[ih * g.w..(ih + 1) * g.w];
                            let grow = &plane[oh * g.ow..(oh + 1) * g.ow];
                            if g.stride == 1 {
                                let off = kj as isize - g.pad as isize;
                                let dst = &mut xrow[(cols.start as isize + off) as usize..(cols.end as isize + off) as usize];
                                for (x, &gv) in dst.iter_mut().zip(&grow[cols.clone()]) {
                                    *x += wv * gv;
                                }
                            } else {
                                for ow in cols.clone() {
                                    xrow[ow * g.stride + kj - g.pad] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.input_shape(), out))
}

/// Gradient of `<gy, conv2d(x, k)>` with respect to `k`.
pub(crate) fn conv2d_kernel_grad(x: &Tensor, gy: &Tensor, stride: usize, pad: usize, kh: usize, kw: usize) -> Result<Tensor> {
    let (&[_, c_in, _, _], &[_, c_out, _, _]) = (x.shape(), gy.shape()) else {
        return Err(Error::shape("conv2d_kernel_grad", format!("got {:?} and {:?}", x.shape(), gy.shape())));
    };
    let g = ConvGeom::new(x.shape(), &[c_out, c_in, kh, kw], stride, pad)?;
    if gy.shape() != g.output_shape().as_slice() {
        return Err(Error::shape(
            "conv2d_kernel_grad",
            format!("upstream {:?} does not match conv output {:?}", gy.shape(), g.output_shape()),
        ));
    }
    let (xd, gd) = (x.data(), gy.data());
    let mut out = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let cols = g.col_range(kj);
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let xin = &xd[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                        let plane = &gd[(n * g.c_out + co) * g.oh * g.ow..][..g.oh * g.ow];
                        for oh in g.row_range(ki) {
                            let ih = oh * g.stride + ki - g.pad;
                            let xrow = &xin[ih * g.w..(ih + 1) * g.w];
                            let grow = &plane[oh * g.ow..(oh + 1) * g.ow];
                            if g.stride == 1 {
                                let off = kj as isize - g.pad as isize;
                                let src = &xrow[(cols.start as isize + off) as usize..(cols.end as isize + off) as usize];
                                for (&xv, &gv) in src.iter().zip(&grow[cols.clone()]) {
                                    acc += xv * gv;
                                }
                            } else {
                                for ow in cols.clone() {
                                    acc += xrow[ow * g.stride + kj - g.pad] * grow[ow];
                                }
                            }
                        }
                    }
                    out[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.kernel_shape(), out))
}

/// Interpolation taps for one axis of an align-corners-false bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            if in_len == out_len {
                return Tap { i0: o, i1: o, w0: 1.0, w1: 0.0 };
            }
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - frac, w1: frac }
        })
        .collect()
}

fn split_spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("upsample", format!("need at least 2 dims, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape.iter().product::<usize>() / (h * w), h, w))
}

pub(crate) fn upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("upsample target must be at least 1x1".into()));
    }
    let (planes, h, w) = split_spatial(x.shape())?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in &ty {
            let (r0, r1) = (&src[y.i0 * w..][..w], &src[y.i1 * w..][..w]);
            for t in &tx {
                let top = t.w0 * r0[t.i0] + t.w1 * r0[t.i1];
                let bot = t.w0 * r1[t.i0] + t.w1 * r1[t.i1];
                out.push(y.w0 * top + y.w1 * bot);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`upsample`]: maps a gradient at `[..., out_h, out_w]` back to `[..., h, w]`.
pub(crate) fn upsample_adjoint(g: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (planes, out_h, out_w) = split_spatial(g.shape())?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (yi, y) in ty.iter().enumerate() {
            for (xi, t) in tx.iter().enumerate() {
                let v = src[yi * out_w + xi];
                dst[y.i0 * w + t.i0] += y.w0 * t.w0 * v;
                dst[y.i0 * w + t.i1] += y.w0 * t.w1 * v;
                dst[y.i1 * w + t.i0] += y.w1 * t.w0 * v;
                dst[y.i1 * w + t.i1] += y.w1 * t.w1 * v;
            }
        }
    }
    let mut shape = g.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Ok(Tensor::from_parts(shape, out))
}

/// Flat indices of the maxima of each non-overlapping `size x size` window over
/// the trailing two dims. Ties resolve to the first maximum in row-major order.
pub(crate) fn max_pool_indices(x: &Tensor, size: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (planes, h, w) = split_spatial(x.shape())?;
    if size == 0 || h < size || w < size {
        return Err(Error::shape("max_pool2d", format!("window {size} does not fit {:?}", x.shape())));
    }
    let (oh, ow) = (h / size, w / size);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (i * size) * w + j * size;
                for di in 0..size {
                    for dj in 0..size {
                        let cand = base + (i * size + di) * w + j * size + dj;
                        if x.data()[cand] > x.data()[best] {
                            best = cand;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok((idx, shape))
}
