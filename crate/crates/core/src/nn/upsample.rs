use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Nearest-neighbour upsampling: every pixel becomes a `factor × factor` block.
pub fn upsample_nearest<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(out_shape);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..s.n * s.c {
        let sp = &src[plane * s.h * s.w..(plane + 1) * s.h * s.w];
        let dp = &mut dst[plane * out_shape.h * out_shape.w..(plane + 1) * out_shape.h * out_shape.w];
        for oy in 0..out_shape.h {
            let row = &sp[(oy / factor) * s.w..(oy / factor + 1) * s.w];
            let line = &mut dp[oy * out_shape.w..(oy + 1) * out_shape.w];
            for (ox, d) in line.iter_mut().enumerate() {
                *d = row[ox / factor];
            }
        }
    }
    Ok(out)
}

/// Sums each `factor × factor` gradient block back onto its source pixel.
pub fn upsample_nearest_backward<T: Element>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let s = grad_out.shape();
    if s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::ShapeMismatch {
            op: "upsample_nearest_backward",
            expected: vec![s.n, s.c, s.h / factor * factor, s.w / factor * factor],
            got: s.dims(),
        });
    }
    let in_shape = Shape::new(s.n, s.c, s.h / factor, s.w / factor);
    let mut grad_in = Tensor::zeros(in_shape);
    let src = grad_out.data();
    let dst = grad_in.data_mut();
    for plane in 0..s.n * s.c {
        let sp = &src[plane * s.h * s.w..(plane + 1) * s.h * s.w];
        let dp = &mut dst[plane * in_shape.h * in_shape.w..(plane + 1) * in_shape.h * in_shape.w];
        for oy in 0..s.h {
            for ox in 0..s.w {
                let d = &mut dp[(oy / factor) * in_shape.w + ox / factor];
                *d = *d + sp[oy * s.w + ox];
            }
        }
    }
    Ok(grad_in)
}
