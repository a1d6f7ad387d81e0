//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use stnet_core::tensor::{Shape, Tensor};

/// Direct seven-loop convolution, stride 1, zero padding.
pub fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
    groups: usize,
    pad: usize,
) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let span = dilation * (k - 1);
    let (ho, wo) = (xs.h + 2 * pad - span, xs.w + 2 * pad - span);
    let cin_g = xs.c / groups;
    let cout_g = ws.n / groups;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, ho, wo));
    for n in 0..xs.n {
        for co in 0..ws.n {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy + ky * dilation) as isize - pad as isize;
                                let ix = (ox + kx * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, g * cin_g + ci, iy as usize, ix as usize)
                                    * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn naive_maxpool(x: &Tensor, k: usize, s: usize) -> Tensor {
    let xs = x.shape();
    let (ho, wo) = ((xs.h - k) / s + 1, (xs.w - k) / s + 1);
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, ho, wo));
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            m = m.max(x.at(n, c, oy * s + ky, ox * s + kx));
                        }
                    }
                    out.set(n, c, oy, ox, m);
                }
            }
        }
    }
    out
}

/// Channels `start..start + len` of every batch item.
pub fn channel_slice(x: &Tensor, start: usize, len: usize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, len, s.h, s.w));
    for n in 0..s.n {
        for c in 0..len {
            for i in 0..s.h {
                for j in 0..s.w {
                    out.set(n, c, i, j, x.at(n, start + c, i, j));
                }
            }
        }
    }
    out
}

pub fn channel_concat(parts: &[Tensor]) -> Tensor {
    let s = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let mut out = Tensor::zeros(Shape::new(s.n, c, s.h, s.w));
    let mut base = 0;
    for p in parts {
        for n in 0..s.n {
            for k in 0..p.shape().c {
                for i in 0..s.h {
                    for j in 0..s.w {
                        out.set(n, base + k, i, j, p.at(n, k, i, j));
                    }
                }
            }
        }
        base += p.shape().c;
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `g a + (1 - g) b`.
pub fn mix(a: &Tensor, b: &Tensor, g: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| g * x + (1.0 - g) * y).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}
