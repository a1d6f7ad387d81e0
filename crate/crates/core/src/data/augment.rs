use rand::Rng;

use super::{CrowdSample, DataError, Point};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Square crop side; `None` keeps the full image.
    pub crop: Option<usize>,
    /// Independent probability of each of the horizontal and vertical flips.
    pub flip_prob: f64,
    /// Additive brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl AugmentConfig {
    pub fn training(crop: usize) -> Self {
        Self {
            crop: Some(crop),
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
        }
    }

    pub fn identity() -> Self {
        Self {
            crop: None,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

fn crop_tensor(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let mut data = Vec::with_capacity(s.n * s.c * h * w);
    for plane in 0..s.n * s.c {
        for i in top..top + h {
            let row = (plane * s.h + i) * s.w;
            data.extend_from_slice(&t.data()[row + left..row + left + w]);
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, h, w), data).expect("crop shape")
}

fn flip_tensor(t: &Tensor, horizontal: bool) -> Tensor {
    let s = t.shape();
    let mut out = t.clone();
    for plane in 0..s.n * s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                let (si, sj) = if horizontal {
                    (i, s.w - 1 - j)
                } else {
                    (s.h - 1 - i, j)
                };
                out.data_mut()[(plane * s.h + i) * s.w + j] = t.data()[(plane * s.h + si) * s.w + sj];
            }
        }
    }
    out
}

/// Mirror left-right: image and density flip, `x -> W - x`.
pub fn flip_horizontal(sample: &CrowdSample) -> CrowdSample {
    let w = sample.width() as f64;
    CrowdSample {
        image: flip_tensor(&sample.image, true),
        points: sample.points.iter().map(|p| Point::new(w - p.x, p.y)).collect(),
        density: sample.density.as_ref().map(|d| flip_tensor(d, true)),
        is_background: sample.is_background,
    }
}

/// Mirror top-bottom: `y -> H - y`.
pub fn flip_vertical(sample: &CrowdSample) -> CrowdSample {
    let h = sample.height() as f64;
    CrowdSample {
        image: flip_tensor(&sample.image, false),
        points: sample.points.iter().map(|p| Point::new(p.x, h - p.y)).collect(),
        density: sample.density.as_ref().map(|d| flip_tensor(d, false)),
        is_background: sample.is_background,
    }
}

/// Random crop, independent flips and brightness/contrast jitter.
///
/// Density and points follow the geometric transforms exactly; jitter only
/// touches the image. Density from heads cut by the crop keeps whatever mass
/// falls inside it.
pub fn augment<R: Rng + ?Sized>(
    sample: &CrowdSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<CrowdSample, DataError> {
    let (h, w) = (sample.height(), sample.width());
    let mut out = match cfg.crop {
        Some(crop) if crop > h || crop > w || crop == 0 => {
            return Err(DataError::CropTooLarge {
                crop,
                width: w,
                height: h,
            });
        }
        Some(crop) if crop < h || crop < w => {
            let top = rng.random_range(0..=h - crop);
            let left = rng.random_range(0..=w - crop);
            let (t, l) = (top as f64, left as f64);
            let c = crop as f64;
            CrowdSample {
                image: crop_tensor(&sample.image, top, left, crop, crop),
                points: sample
                    .points
                    .iter()
                    .filter(|p| p.x >= l && p.x < l + c && p.y >= t && p.y < t + c)
                    .map(|p| Point::new(p.x - l, p.y - t))
                    .collect(),
                density: sample
                    .density
                    .as_ref()
                    .map(|d| crop_tensor(d, top, left, crop, crop)),
                is_background: sample.is_background,
            }
        }
        _ => sample.clone(),
    };
    if rng.random::<f64>() < cfg.flip_prob {
        out = flip_horizontal(&out);
    }
    if rng.random::<f64>() < cfg.flip_prob {
        out = flip_vertical(&out);
    }
    let b = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let k = if cfg.contrast > 0.0 {
        rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
    } else {
        1.0
    };
    if b != 0.0 || k != 1.0 {
        out.image = out.image.map(|v| ((v - 0.5) * k + 0.5 + b).clamp(0.0, 1.0));
    }
    Ok(out)
}
