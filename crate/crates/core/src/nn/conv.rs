//! Square-kernel 2-D cross-correlation with "same" padding, via im2col + GEMM.

use crate::error::{Error, Result};
use crate::nn::GradientTape;
use crate::tensor::{gemm, Element, MatRef, Shape, Tensor};

/// Convolution parameters. The weight is laid out `(out_c, in_c, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Element> Conv2d<T> {
    pub fn zeros(in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel must be odd, got {kernel}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        Ok(Self {
            weight: Tensor::zeros(Shape::new(out_c, in_c, kernel, kernel)),
            bias: vec![T::zero(); out_c],
            stride,
        })
    }

    pub fn from_parts(weight: Tensor<T>, bias: Vec<T>, stride: usize) -> Result<Self> {
        let s = weight.shape();
        if s.h != s.w || s.h % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel must be square and odd, got {s}")));
        }
        if bias.len() != s.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![s.n],
                got: vec![bias.len()],
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
        })
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    #[inline]
    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    #[inline]
    pub fn padding(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(
            input.n,
            self.out_channels(),
            input.h.div_ceil(self.stride),
            input.w.div_ceil(self.stride),
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.shape().len() + self.bias.len()
    }

    pub fn zero_grads(&self) -> ConvGrads<T> {
        ConvGrads {
            weight: Tensor::zeros(self.weight.shape()),
            bias: vec![T::zero(); self.bias.len()],
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1
    }
}

/// Unrolls one sample into a `(in_c·k·k) × (ho·wo)` patch matrix.
fn im2col<T: Element>(
    sample: &[T],
    in_shape: Shape,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let pad = (k - 1) / 2;
    let p = out_h * out_w;
    let (h, w) = (in_shape.h, in_shape.w);
    for ci in 0..in_shape.c {
        let plane = &sample[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto a sample-shaped gradient.
fn col2im<T: Element>(
    cols: &[T],
    in_shape: Shape,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    grad: &mut [T],
) {
    let pad = (k - 1) / 2;
    let p = out_h * out_w;
    let (h, w) = (in_shape.h, in_shape.w);
    for ci in 0..in_shape.c {
        let plane = &mut grad[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(input: &Tensor<T>, conv: &Conv2d<T>) -> Result<Tensor<T>> {
    let in_shape = input.shape();
    if in_shape.c != conv.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_forward",
            expected: vec![in_shape.n, conv.in_channels(), in_shape.h, in_shape.w],
            got: in_shape.dims(),
        });
    }
    let out_shape = conv.output_shape(in_shape);
    let k = conv.kernel();
    let ckk = conv.in_channels() * k * k;
    let p = out_shape.plane_len();
    let weight = MatRef::new(conv.weight.data(), conv.out_channels(), ckk);
    let mut out = Tensor::zeros(out_shape);
    let mut cols = if conv.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * p]
    };
    for n in 0..in_shape.n {
        let sample = input.sample(n);
        let patches = if conv.is_pointwise() {
            MatRef::new(sample, ckk, p)
        } else {
            im2col(sample, in_shape, k, conv.stride, out_shape.h, out_shape.w, &mut cols);
            MatRef::new(&cols, ckk, p)
        };
        let dst = out.sample_mut(n);
        gemm(weight, patches, dst, false);
        for (o, &b) in conv.bias.iter().enumerate() {
            for v in &mut dst[o * p..(o + 1) * p] {
                *v = *v + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of a downstream scalar w.r.t. the conv input and parameters.
/// The forward input for `layer` must have been cached on `tape`.
pub fn conv2d_backward<T: Element>(
    grad_out: &Tensor<T>,
    tape: &GradientTape<T>,
    layer: usize,
    conv: &Conv2d<T>,
) -> Result<(Tensor<T>, ConvGrads<T>)> {
    let input = tape.cached_input(layer, "conv2d_backward")?;
    let mut grads = conv.zero_grads();
    let grad_in = conv2d_backward_into(grad_out, input, conv, &mut grads)?;
    Ok((grad_in, grads))
}

/// Like [`conv2d_backward`] but accumulates parameter gradients into `grads`.
pub(crate) fn conv2d_backward_into<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    conv: &Conv2d<T>,
    grads: &mut ConvGrads<T>,
) -> Result<Tensor<T>> {
    let in_shape = input.shape();
    let out_shape = conv.output_shape(in_shape);
    grad_out.check_shape("conv2d_backward", out_shape)?;
    let k = conv.kernel();
    let ckk = conv.in_channels() * k * k;
    let p = out_shape.plane_len();
    let oc = conv.out_channels();
    let weight = MatRef::new(conv.weight.data(), oc, ckk);
    let mut grad_in = Tensor::zeros(in_shape);
    let mut cols = vec![T::zero(); if conv.is_pointwise() { 0 } else { ckk * p }];
    let mut grad_cols = vec![T::zero(); ckk * p];
    for n in 0..in_shape.n {
        let go = MatRef::new(grad_out.sample(n), oc, p);
        let sample = input.sample(n);
        let patches = if conv.is_pointwise() {
            MatRef::new(sample, ckk, p)
        } else {
            im2col(sample, in_shape, k, conv.stride, out_shape.h, out_shape.w, &mut cols);
            MatRef::new(&cols, ckk, p)
        };
        gemm(go, patches.t(), grads.weight.data_mut(), true);
        for (o, gb) in grads.bias.iter_mut().enumerate() {
            *gb = grad_out.sample(n)[o * p..(o + 1) * p]
                .iter()
                .fold(*gb, |acc, &g| acc + g);
        }
        if conv.is_pointwise() {
            gemm(weight.t(), go, grad_in.sample_mut(n), false);
        } else {
            gemm(weight.t(), go, &mut grad_cols, false);
            col2im(
                &grad_cols,
                in_shape,
                k,
                conv.stride,
                out_shape.h,
                out_shape.w,
                grad_in.sample_mut(n),
            );
        }
    }
    Ok(grad_in)
}
