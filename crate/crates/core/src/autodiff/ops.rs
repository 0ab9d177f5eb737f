use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A recorded operation. Each variant carries everything needed to recompute
/// its output from its inputs.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Shift(f64),
    Relu,
    Sigmoid,
    Softplus,
    Reshape(Vec<usize>),
    Expand(Vec<usize>),
    SumTo(Vec<usize>),
    Gather { indices: Rc<[usize]>, shape: Vec<usize> },
    Scatter { indices: Rc<[usize]>, shape: Vec<usize> },
    MatMul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    Conv2dInputGrad { stride: usize, pad: usize, h: usize, w: usize },
    Conv2dKernelGrad { stride: usize, pad: usize, kh: usize, kw: usize },
    Upsample { h: usize, w: usize },
    UpsampleAdjoint { h: usize, w: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Reshape(_) => "reshape",
            Op::Expand(_) => "expand",
            Op::SumTo(_) => "sum_to",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dKernelGrad { .. } => "conv2d_kernel_grad",
            Op::Upsample { .. } => "upsample",
            Op::UpsampleAdjoint { .. } => "upsample_adjoint",
        }
    }

    pub(crate) fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let unary = |f: fn(f64) -> f64| x[0].map(f);
        Ok(match self {
            Op::Leaf => return Err(Error::Graph("leaf nodes have no forward".into())),
            Op::Add => kernels::zip_with("add", x[0], x[1], |a, b| a + b)?,
            Op::Sub => kernels::zip_with("sub", x[0], x[1], |a, b| a - b)?,
            Op::Mul => kernels::zip_with("mul", x[0], x[1], |a, b| a * b)?,
            Op::Div => kernels::zip_with("div", x[0], x[1], |a, b| a / b)?,
            Op::Scale(c) => x[0].map(|v| v * c),
            Op::Shift(c) => x[0].map(|v| v + c),
            Op::Relu => unary(|v| if v > 0.0 { v } else { 0.0 }),
            Op::Sigmoid => unary(kernels::sigmoid),
            Op::Softplus => unary(kernels::softplus),
            Op::Reshape(shape) => x[0]
                .reshape(shape)
                .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", x[0].shape())))?,
            Op::Expand(shape) => kernels::expand(x[0], shape)?,
            Op::SumTo(shape) => kernels::sum_to(x[0], shape)?,
            Op::Gather { indices, shape } => kernels::gather(x[0], indices, shape)?,
            Op::Scatter { indices, shape } => kernels::scatter(x[0], indices, shape)?,
            Op::MatMul => kernels::matmul(x[0], x[1])?,
            Op::Transpose => kernels::transpose(x[0])?,
            Op::Conv2d { stride, pad } => kernels::conv2d(x[0], x[1], *stride, *pad)?,
            Op::Conv2dInputGrad { stride, pad, h, w } => kernels::conv2d_input_grad(x[0], x[1], *stride, *pad, *h, *w)?,
            Op::Conv2dKernelGrad { stride, pad, kh, kw } => {
                kernels::conv2d_kernel_grad(x[0], x[1], *stride, *pad, *kh, *kw)?
            }
            Op::Upsample { h, w } => kernels::upsample(x[0], *h, *w)?,
            Op::UpsampleAdjoint { h, w } => kernels::upsample_adjoint(x[0], *h, *w)?,
        })
    }

    /// Vector-Jacobian products for each input, expressed with recorded ops so
    /// they can be differentiated again. `needs[i]` is false for inputs whose
    /// gradient is not wanted.
    pub(crate) fn backward(&self, x: &[Var], y: &Var, g: &Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let one = |v: Result<Var>| -> Result<Vec<Option<Var>>> { Ok(vec![Some(v?)]) };
        match self {
            Op::Leaf => Ok(vec![]),
            Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Op::Sub => Ok(vec![Some(g.clone()), if want(1) { Some(g.neg()?) } else { None }]),
            Op::Mul => Ok(vec![
                if want(0) { Some(g.mul(&x[1])?) } else { None },
                if want(1) { Some(g.mul(&x[0])?) } else { None },
            ]),
            Op::Div => Ok(vec![
                if want(0) { Some(g.div(&x[1])?) } else { None },
                // d(a/b)/db = -(a/b)/b
                if want(1) { Some(g.mul(y)?.div(&x[1])?.neg()?) } else { None },
            ]),
            Op::Scale(c) => one(g.scale(*c)),
            Op::Shift(_) => Ok(vec![Some(g.clone())]),
            Op::Relu => {
                let step = x[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let step = g.graph().constant(step);
                one(g.mul(&step))
            }
            Op::Sigmoid => {
                // y (1 - y)
                let d = y.sub(&y.mul(y)?)?;
                one(g.mul(&d))
            }
            Op::Softplus => one(g.mul(&x[0].sigmoid()?)),
            Op::Reshape(_) => one(g.reshape(x[0].value().shape())),
            Op::Expand(_) => one(g.sum_to(x[0].value().shape())),
            Op::SumTo(_) => one(g.expand(x[0].value().shape())),
            Op::Gather { indices, .. } => one(g.scatter(indices.clone(), x[0].value().shape())),
            Op::Scatter { indices, .. } => one(g.gather(indices.clone(), x[0].value().shape())),
            Op::MatMul => Ok(vec![
                if want(0) { Some(g.matmul(&x[1].transpose()?)?) } else { None },
                if want(1) { Some(x[0].transpose()?.matmul(g)?) } else { None },
            ]),
            Op::Transpose => one(g.transpose()),
            Op::Conv2d { stride, pad } => {
                let (h, w) = spatial(&x[0]);
                let (kh, kw) = spatial(&x[1]);
                Ok(vec![
                    if want(0) { Some(g.conv2d_input_grad(&x[1], *stride, *pad, h, w)?) } else { None },
                    if want(1) { Some(x[0].conv2d_kernel_grad(g, *stride, *pad, kh, kw)?) } else { None },
                ])
            }
            Op::Conv2dInputGrad { stride, pad, .. } => {
                // y = T(gy, k);  <u, T(gy, k)> = <conv(u, k), gy>
                let (kh, kw) = spatial(&x[1]);
                Ok(vec![
                    if want(0) { Some(g.conv2d(&x[1], *stride, *pad)?) } else { None },
                    if want(1) { Some(g.conv2d_kernel_grad(&x[0], *stride, *pad, kh, kw)?) } else { None },
                ])
            }
            Op::Conv2dKernelGrad { stride, pad, .. } => {
                // y = K(x, gy);  <v, K(x, gy)> = <conv(x, v), gy>
                let (h, w) = spatial(&x[0]);
                Ok(vec![
                    if want(0) { Some(x[1].conv2d_input_grad(g, *stride, *pad, h, w)?) } else { None },
                    if want(1) { Some(x[0].conv2d(g, *stride, *pad)?) } else { None },
                ])
            }
            Op::Upsample { .. } => {
                let (h, w) = spatial(&x[0]);
                one(g.apply1(Op::UpsampleAdjoint { h, w }))
            }
            Op::UpsampleAdjoint { .. } => {
                let (h, w) = spatial(&x[0]);
                one(g.apply1(Op::Upsample { h, w }))
            }
        }
    }
}

fn spatial(v: &Var) -> (usize, usize) {
    let s = v.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

/// Differentiable operations.
impl Var {
    fn apply1(&self, op: Op) -> Result<Var> {
        self.graph.apply(op, &[self])
    }

    fn apply2(&self, op: Op, other: &Var) -> Result<Var> {
        self.graph.apply(op, &[self, other])
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.apply2(Op::Add, other)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.apply2(Op::Sub, other)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.apply2(Op::Mul, other)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.apply2(Op::Div, other)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.apply1(Op::Scale(c))
    }

    pub fn shift(&self, c: f64) -> Result<Var> {
        self.apply1(Op::Shift(c))
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Var> {
        self.apply1(Op::Relu)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.apply1(Op::Sigmoid)
    }

    /// `ln(1 + e^x)`, used for numerically stable log-sigmoid terms.
    pub fn softplus(&self) -> Result<Var> {
        self.apply1(Op::Softplus)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        self.apply1(Op::Reshape(shape.to_vec()))
    }

    /// Broadcasts size-1 dimensions up to `shape` (same rank).
    pub fn expand(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        self.apply1(Op::Expand(shape.to_vec()))
    }

    /// Sums down to `shape` (same rank, dims 1 or unchanged).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        self.apply1(Op::SumTo(shape.to_vec()))
    }

    /// Expands `self` to `shape` after left-padding its shape with ones.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let own = self.shape();
        if own.len() > shape.len() {
            return Err(Error::shape("broadcast_to", format!("{own:?} has more dims than {shape:?}")));
        }
        let mut padded = vec![1; shape.len() - own.len()];
        padded.extend(own);
        self.reshape(&padded)?.expand(shape)
    }

    pub fn gather(&self, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.apply1(Op::Gather { indices, shape: shape.to_vec() })
    }

    pub fn scatter(&self, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.apply1(Op::Scatter { indices, shape: shape.to_vec() })
    }

    /// Element at a flat row-major index, as a shape-`[]` scalar.
    pub fn at(&self, flat: usize) -> Result<Var> {
        self.gather(Rc::from(vec![flat]), &[])
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.apply2(Op::MatMul, other)
    }

    pub fn transpose(&self) -> Result<Var> {
        self.apply1(Op::Transpose)
    }

    /// Reduces over `axes`, keeping them as size-1 dims when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape("sum", format!("axis {bad} out of range for {shape:?}")));
        }
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(d, &n)| if axes.contains(&d) { 1 } else { n })
            .collect();
        let out = self.sum_to(&kept)?;
        if keepdim {
            Ok(out)
        } else {
            let squeezed: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(d, _)| !axes.contains(d))
                .map(|(_, &n)| n)
                .collect();
            out.reshape(&squeezed)
        }
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        self.sum_axes(axes, keepdim)?.scale(1.0 / count as f64)
    }

    /// Sum of all elements as a shape-`[]` scalar.
    pub fn sum_all(&self) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Var> {
        let n = self.value().len();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Cross-correlation. `self` is `[N,Ci,H,W]` or `[Ci,H,W]`; `kernel` is `[Co,Ci,kh,kw]`.
    pub fn conv2d(&self, kernel: &Var, stride: usize, pad: usize) -> Result<Var> {
        let shape = self.shape();
        if shape.len() == 3 {
            let batched = self.reshape(&[1, shape[0], shape[1], shape[2]])?;
            let out = batched.conv2d(kernel, stride, pad)?;
            let os = out.shape();
            return out.reshape(&os[1..]);
        }
        ConvGeom::new(&shape, &kernel.shape(), stride, pad)?;
        self.apply2(Op::Conv2d { stride, pad }, kernel)
    }

    pub(crate) fn conv2d_input_grad(&self, kernel: &Var, stride: usize, pad: usize, h: usize, w: usize) -> Result<Var> {
        self.apply2(Op::Conv2dInputGrad { stride, pad, h, w }, kernel)
    }

    pub(crate) fn conv2d_kernel_grad(&self, gy: &Var, stride: usize, pad: usize, kh: usize, kw: usize) -> Result<Var> {
        self.apply2(Op::Conv2dKernelGrad { stride, pad, kh, kw }, gy)
    }

    /// Mean over the trailing two (spatial) dims.
    pub fn global_avg_pool(&self) -> Result<Var> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("global_avg_pool", format!("need at least 2 dims, got {:?}", self.shape())));
        }
        self.mean_axes(&[r - 2, r - 1], false)
    }

    /// Non-overlapping `size x size` max pooling over the trailing two dims.
    pub fn max_pool2d(&self, size: usize) -> Result<Var> {
        let (idx, shape) = kernels::max_pool_indices(&self.value(), size)?;
        self.gather(Rc::from(idx), &shape)
    }

    /// Align-corners-false bilinear resize of the trailing two dims.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w) = spatial(self);
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        self.apply1(Op::Upsample { h: out_h, w: out_w })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Graph};
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_one_by_one_is_channel_weighted_sum() {
        let g = Graph::new();
        let f: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, -3.0];
        let x = g.constant(t(&[1, 2, 2, 2], &f));
        let k = g.constant(t(&[1, 2, 1, 1], &[0.5, -2.0]));
        let y = x.conv2d(&k, 1, 0).unwrap();
        for i in 0..4 {
            assert_eq!(y.value().data()[i], 0.5 * f[i] - 2.0 * f[4 + i]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 4, 4]));
        let k = g.constant(Tensor::ones(&[1, 3, 3, 3]));
        let err = x.conv2d(&k, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn conv_output_size_with_stride_and_pad() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 7, 6]));
        let k = g.constant(Tensor::ones(&[2, 1, 3, 2]));
        let y = x.conv2d(&k, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 2, (7 + 2 - 3) / 2 + 1, (6 + 2 - 2) / 2 + 1]);
    }

    #[test]
    fn conv_accepts_unbatched_input() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 4, 4]));
        let k = g.constant(Tensor::ones(&[3, 2, 3, 3]));
        assert_eq!(x.conv2d(&k, 1, 1).unwrap().shape(), vec![3, 4, 4]);
    }

    #[test]
    fn gap_examples() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.global_avg_pool().unwrap().value().data(), &[2.5]);
        let c = g.constant(Tensor::full(&[2, 3, 4, 4], 1.75));
        assert!(c.global_avg_pool().unwrap().value().data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn activations() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(g.scalar(0.0).sigmoid().unwrap().item().unwrap(), 0.5);
        let s = g.scalar(-4.0).sigmoid().unwrap().item().unwrap();
        assert!((s - 1.0 / (1.0 + 4f64.exp())).abs() < 1e-15);
        assert!((s - 0.01799).abs() < 1e-5);
        let big = g.constant(t(&[2], &[-800.0, 800.0])).sigmoid().unwrap();
        assert!(big.value().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn upsample_identity_and_constant() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.1, 0.7, -0.3, 2.0]));
        assert_eq!(x.upsample_bilinear(2, 2).unwrap().value().data(), x.value().data());
        let c = g.constant(Tensor::full(&[1, 3, 3], 0.4));
        let up = c.upsample_bilinear(7, 5).unwrap();
        assert_eq!(up.shape(), vec![1, 7, 5]);
        assert!(up.value().data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn upsample_column_ramp() {
        // [0,1;0,1] -> 4x4: rows identical, columns nondecreasing
        let g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let up = x.upsample_bilinear(4, 4).unwrap().value();
        let d = up.data();
        // closed-form taps for 2 -> 4: src = (o + 0.5)/2 - 0.5 = [-0.25, 0.25, 0.75, 1.25] clamped
        let expected_row = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            assert_eq!(&d[r * 4..r * 4 + 4], &expected_row);
        }
    }

    #[test]
    fn sums_and_means() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.sum_all().unwrap().item().unwrap(), 6.0);
        let c = g.constant(Tensor::full(&[2, 5], -0.5));
        assert_eq!(c.mean_all().unwrap().item().unwrap(), -0.5);
        let m = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(m.sum_axes(&[0], false).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.mean_axes(&[1], true).unwrap().shape(), vec![2, 1]);
        assert!(m.sum_axes(&[2], false).is_err());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]));
        let y = x.max_pool2d(2).unwrap();
        assert_eq!(y.value().data(), &[5.0, 9.0]);
        let gm = backward(&y.sum_all().unwrap(), false).unwrap();
        assert_eq!(gm.get(&x).unwrap().value().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_and_transpose() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[3, 1], &[1.0, 0.0, -1.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[-2.0, -2.0]);
        assert_eq!(a.transpose().unwrap().shape(), vec![3, 2]);
        assert!(a.matmul(&a).is_err());
    }
}
