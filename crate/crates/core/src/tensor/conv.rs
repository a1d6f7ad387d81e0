//! Stride-1 dilated grouped 2-D convolution lowered to GEMM via im2col.

use super::{Result, Shape, Tensor, TensorError};

/// Zero padding applied symmetrically to both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Explicit(usize),
    /// `dilation * (k - 1) / 2`, preserving resolution for odd `k`.
    Same,
}

/// Fully resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub padding: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: Shape,
        weight: Shape,
        dilation: usize,
        groups: usize,
        padding: Padding,
    ) -> Result<Self> {
        if dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "dilation must be positive".into(),
            });
        }
        if groups == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "groups must be positive".into(),
            });
        }
        if !input.c.is_multiple_of(groups) {
            return Err(TensorError::GroupsMismatch {
                side: "input",
                channels: input.c,
                groups,
            });
        }
        if !weight.n.is_multiple_of(groups) {
            return Err(TensorError::GroupsMismatch {
                side: "output",
                channels: weight.n,
                groups,
            });
        }
        if weight.h != weight.w {
            return Err(TensorError::NonSquareKernel {
                kh: weight.h,
                kw: weight.w,
            });
        }
        if weight.c != input.c / groups || weight.h == 0 || weight.n == 0 {
            return Err(TensorError::WeightMismatch {
                input,
                weight,
                groups,
            });
        }
        let kernel = weight.h;
        let padding = match padding {
            Padding::Explicit(p) => p,
            Padding::Same if kernel.is_multiple_of(2) => {
                return Err(TensorError::EvenKernelSame { kernel });
            }
            Padding::Same => dilation * (kernel - 1) / 2,
        };
        let extent = dilation * (kernel - 1) + 1;
        let padded = (input.h + 2 * padding).min(input.w + 2 * padding);
        if extent > padded {
            return Err(TensorError::KernelExceedsInput { extent, padded });
        }
        Ok(Self {
            batch: input.n,
            c_in: input.c,
            c_out: weight.n,
            groups,
            kernel,
            dilation,
            padding,
            h_in: input.h,
            w_in: input.w,
            h_out: input.h + 2 * padding - (extent - 1),
            w_out: input.w + 2 * padding - (extent - 1),
        })
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.batch, self.c_out, self.h_out, self.w_out)
    }

    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the im2col matrix for one group.
    fn col_rows(&self) -> usize {
        self.cin_per_group() * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }

    /// Multiply-accumulates of the kernel taps, bias excluded.
    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.out_pixels() * self.col_rows()) as u64
    }
}

/// `(valid_lo, valid_hi)` output coordinates whose tap at `offset` lands in `[0, len)`.
#[inline]
fn valid_range(offset: isize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfold group `g` of one image (`c_in x H x W`) into `col_rows x out_pixels`.
fn im2col(image: &[f64], g: &ConvGeometry, group: usize, cols: &mut [f64]) {
    let (k, d, p) = (g.kernel, g.dilation as isize, g.padding as isize);
    let plane = g.h_in * g.w_in;
    let pixels = g.out_pixels();
    let cin_g = g.cin_per_group();
    for ci in 0..cin_g {
        let src = &image[(group * cin_g + ci) * plane..][..plane];
        for ky in 0..k {
            let oy_off = ky as isize * d - p;
            let (y_lo, y_hi) = valid_range(oy_off, g.h_in, g.h_out);
            for kx in 0..k {
                let ox_off = kx as isize * d - p;
                let (x_lo, x_hi) = valid_range(ox_off, g.w_in, g.w_out);
                let row = &mut cols[((ci * k + ky) * k + kx) * pixels..][..pixels];
                row.fill(0.0);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + oy_off) as usize;
                    let ix0 = (x_lo as isize + ox_off) as usize;
                    let n = x_hi - x_lo;
                    row[oy * g.w_out + x_lo..][..n].copy_from_slice(&src[iy * g.w_in + ix0..][..n]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image gradient.
fn col2im(cols: &[f64], g: &ConvGeometry, group: usize, image: &mut [f64]) {
    let (k, d, p) = (g.kernel, g.dilation as isize, g.padding as isize);
    let plane = g.h_in * g.w_in;
    let pixels = g.out_pixels();
    let cin_g = g.cin_per_group();
    for ci in 0..cin_g {
        let dst = &mut image[(group * cin_g + ci) * plane..][..plane];
        for ky in 0..k {
            let oy_off = ky as isize * d - p;
            let (y_lo, y_hi) = valid_range(oy_off, g.h_in, g.h_out);
            for kx in 0..k {
                let ox_off = kx as isize * d - p;
                let (x_lo, x_hi) = valid_range(ox_off, g.w_in, g.w_out);
                if x_lo >= x_hi {
                    continue;
                }
                let row = &cols[((ci * k + ky) * k + kx) * pixels..][..pixels];
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + oy_off) as usize;
                    let ix0 = (x_lo as isize + ox_off) as usize;
                    let n = x_hi - x_lo;
                    let src = &row[oy * g.w_out + x_lo..][..n];
                    for (o, s) in dst[iy * g.w_in + ix0..][..n].iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
    }
}

/// Row-major `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with
/// explicit strides on `a` and `b` so transposes come for free.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    let last_a = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
    let last_b = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
    assert!(m > 0 && k > 0 && n > 0);
    assert!((last_a as usize) < a.len() && (last_b as usize) < b.len() && m * n <= c.len());
    // SAFETY: the asserts above bound every strided access within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution; shapes must already be validated into `geom`.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeometry,
) -> Tensor {
    let mut out = Tensor::zeros(geom.output_shape());
    let pixels = geom.out_pixels();
    let rows = geom.col_rows();
    let cout_g = geom.cout_per_group();
    let item_in = input.shape().item();
    let item_out = geom.c_out * pixels;
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * pixels]
    };
    let w = weight.data();
    for n in 0..geom.batch {
        let image = &input.data()[n * item_in..][..item_in];
        let out_item = &mut out.data_mut()[n * item_out..][..item_out];
        if let Some(b) = bias {
            for (co, chunk) in out_item.chunks_mut(pixels).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        for g in 0..geom.groups {
            let b_mat: &[f64] = if geom.is_pointwise() {
                &image[g * rows * pixels..][..rows * pixels]
            } else {
                im2col(image, geom, g, &mut cols);
                &cols
            };
            gemm(
                cout_g,
                rows,
                pixels,
                &w[g * cout_g * rows..][..cout_g * rows],
                (rows as isize, 1),
                b_mat,
                (pixels as isize, 1),
                beta,
                &mut out_item[g * cout_g * pixels..][..cout_g * pixels],
            );
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    geom: &ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (want_input, want_weight, want_bias) = want;
    let pixels = geom.out_pixels();
    let rows = geom.col_rows();
    let cout_g = geom.cout_per_group();
    let item_in = input.shape().item();
    let item_out = geom.c_out * pixels;
    let w = weight.data();

    let mut g_input = want_input.then(|| vec![0.0; input.numel()]);
    let mut g_weight = want_weight.then(|| vec![0.0; weight.numel()]);
    let g_bias = want_bias.then(|| {
        let mut gb = vec![0.0; geom.c_out];
        for n in 0..geom.batch {
            for (co, chunk) in grad_out[n * item_out..][..item_out]
                .chunks(pixels)
                .enumerate()
            {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        gb
    });

    let pointwise = geom.is_pointwise();
    let mut cols = vec![0.0; if pointwise { 0 } else { rows * pixels }];
    let mut gcols = vec![0.0; if pointwise || !want_input { 0 } else { rows * pixels }];
    for n in 0..geom.batch {
        let image = &input.data()[n * item_in..][..item_in];
        let go_item = &grad_out[n * item_out..][..item_out];
        for g in 0..geom.groups {
            let go = &go_item[g * cout_g * pixels..][..cout_g * pixels];
            let w_g = &w[g * cout_g * rows..][..cout_g * rows];
            if let Some(gw) = g_weight.as_mut() {
                let b_mat: &[f64] = if pointwise {
                    &image[g * rows * pixels..][..rows * pixels]
                } else {
                    im2col(image, geom, g, &mut cols);
                    &cols
                };
                // dW_g += dY_g * cols^T
                gemm(
                    cout_g,
                    pixels,
                    rows,
                    go,
                    (pixels as isize, 1),
                    b_mat,
                    (1, pixels as isize),
                    1.0,
                    &mut gw[g * cout_g * rows..][..cout_g * rows],
                );
            }
            if let Some(gi) = g_input.as_mut() {
                let gi_item = &mut gi[n * item_in..][..item_in];
                // dcols = W_g^T * dY_g
                if pointwise {
                    gemm(
                        rows,
                        cout_g,
                        pixels,
                        w_g,
                        (1, rows as isize),
                        go,
                        (pixels as isize, 1),
                        1.0,
                        &mut gi_item[g * rows * pixels..][..rows * pixels],
                    );
                } else {
                    gemm(
                        rows,
                        cout_g,
                        pixels,
                        w_g,
                        (1, rows as isize),
                        go,
                        (pixels as isize, 1),
                        0.0,
                        &mut gcols,
                    );
                    col2im(&gcols, geom, g, gi_item);
                }
            }
        }
    }
    ConvGrads {
        input: g_input,
        weight: g_weight,
        bias: g_bias,
    }
}
