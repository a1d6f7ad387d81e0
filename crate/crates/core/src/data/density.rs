use super::{DataError, Point};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SIGMA: f64 = 4.0;

/// Kernels are truncated at this many standard deviations.
const TRUNCATE: f64 = 4.0;

/// Sum of one Gaussian per point, each renormalized to unit mass over the
/// pixels it covers inside the image. Returns a `1 x 1 x H x W` map.
pub fn render_density_gt(
    points: &[Point],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Tensor, DataError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DataError::InvalidSpec(format!("sigma must be positive, got {sigma}")));
    }
    let mut map = Tensor::zeros(Shape::new(1, 1, height, width));
    let radius = (TRUNCATE * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::new();
    for p in points {
        let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64;
        if !inside || !p.x.is_finite() || !p.y.is_finite() {
            return Err(DataError::PointOutOfBounds {
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
        let (cx, cy) = (p.x.floor() as isize, p.y.floor() as isize);
        let y0 = (cy - radius).max(0) as usize;
        let y1 = ((cy + radius) as usize).min(height - 1);
        let x0 = (cx - radius).max(0) as usize;
        let x1 = ((cx + radius) as usize).min(width - 1);
        weights.clear();
        let mut total = 0.0;
        for i in y0..=y1 {
            let dy = i as f64 + 0.5 - p.y;
            for j in x0..=x1 {
                let dx = j as f64 + 0.5 - p.x;
                let w = (-(dx * dx + dy * dy) * inv).exp();
                weights.push(w);
                total += w;
            }
        }
        let data = map.data_mut();
        let mut k = 0;
        for i in y0..=y1 {
            for j in x0..=x1 {
                data[i * width + j] += weights[k] / total;
                k += 1;
            }
        }
    }
    Ok(map)
}

/// Non-overlapping `factor x factor` sum-pooling; total mass is preserved.
pub fn downsample_density(density: &Tensor, factor: usize) -> Result<Tensor, DataError> {
    let s = density.shape();
    if factor == 0 || !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
        return Err(DataError::Indivisible {
            height: s.h,
            width: s.w,
            factor,
        });
    }
    if factor == 1 {
        return Ok(density.clone());
    }
    let (h, w) = (s.h / factor, s.w / factor);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    let src = density.data();
    let dst = out.data_mut();
    for plane in 0..s.n * s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                dst[(plane * h + i / factor) * w + j / factor] += src[(plane * s.h + i) * s.w + j];
            }
        }
    }
    Ok(out)
}
