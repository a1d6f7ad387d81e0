use super::{Result, Shape, Tensor, TensorError};

pub(crate) fn pool_output_shape(input: Shape, kernel: usize, stride: usize) -> Result<Shape> {
    if kernel == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "maxpool2d",
            reason: "kernel and stride must be positive".into(),
        });
    }
    if input.h < kernel || input.w < kernel {
        return Err(TensorError::PoolKernelTooLarge {
            kernel,
            h: input.h,
            w: input.w,
        });
    }
    Ok(Shape::new(
        input.n,
        input.c,
        (input.h - kernel) / stride + 1,
        (input.w - kernel) / stride + 1,
    ))
}

/// Window maxima plus, per output element, the flat input index that won.
///
/// Ties go to the first maximum in row-major window order.
pub fn maxpool2d_forward(
    input: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    let out_shape = pool_output_shape(s, kernel, stride)?;
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let x = input.data();
    let mut o = 0;
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * s.w + ox * stride;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * s.w + ox * stride;
                    for kx in 0..kernel {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.data_mut()[o] = x[best_idx];
                argmax.push(best_idx);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}
