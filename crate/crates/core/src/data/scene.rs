use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render_density_gt, CrowdSample, DataError, Point, DEFAULT_SIGMA};
use crate::tensor::{Shape, Tensor};

/// Parameters of one synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive `[min, max]` head count.
    pub count_range: (usize, usize),
    /// Head radius at the top row and at the bottom row, in pixels.
    pub head_radius_range: (f64, f64),
    /// Amplitude and number of background distractors, in `[0, 1]`.
    pub clutter_level: f64,
    pub channels: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            count_range: (0, 20),
            head_radius_range: (1.5, 4.0),
            clutter_level: 0.5,
            channels: 3,
            sigma: DEFAULT_SIGMA,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.count_range;
        let (r0, r1) = self.head_radius_range;
        if self.width == 0 || self.height == 0 {
            return Err(DataError::InvalidSpec("image size must be positive".into()));
        }
        if lo > hi {
            return Err(DataError::InvalidSpec(format!("count range [{lo}, {hi}] is empty")));
        }
        if !(r0 >= 1.0 && r1 >= 1.0 && r0.is_finite() && r1.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "head radii must be >= 1, got ({r0}, {r1})"
            )));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return Err(DataError::InvalidSpec(format!(
                "clutter level {} outside [0, 1]",
                self.clutter_level
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(DataError::InvalidSpec(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(DataError::InvalidSpec("sigma must be positive".into()));
        }
        let rmin = r0.min(r1);
        let footprint = (2.0 * rmin) * (2.0 * rmin);
        if hi as f64 * footprint > (self.width * self.height) as f64 {
            return Err(DataError::InfeasibleCount {
                max: hi,
                radius: rmin,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    fn radius_at(&self, y: f64) -> f64 {
        let (top, bottom) = self.head_radius_range;
        let t = if self.height > 1 {
            y / (self.height - 1) as f64
        } else {
            0.0
        };
        top + (bottom - top) * t.clamp(0.0, 1.0)
    }
}

struct Canvas {
    w: usize,
    h: usize,
    c: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Alpha-blend `color` at pixel `(i, j)`.
    fn blend(&mut self, i: usize, j: usize, color: &[f64; 3], alpha: f64) {
        for ch in 0..self.c {
            let v = &mut self.px[(ch * self.h + i) * self.w + j];
            *v += alpha * (color[ch] - *v);
        }
    }
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

/// Render a scene: gradient backdrop, clutter, then dark heads whose radius
/// grows with the row (smaller near the top). Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<CrowdSample, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut canvas = Canvas {
        w,
        h,
        c: spec.channels,
        px: vec![0.0; spec.channels * w * h],
    };

    // backdrop: linear gradient between two light colours
    let c0 = random_color(&mut rng, 0.45, 0.9);
    let c1 = random_color(&mut rng, 0.45, 0.9);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let span = (w as f64 * dx.abs() + h as f64 * dy.abs()).max(1.0);
    for i in 0..h {
        for j in 0..w {
            let proj = (j as f64 - w as f64 / 2.0) * dx + (i as f64 - h as f64 / 2.0) * dy;
            let t = (proj / span + 0.5).clamp(0.0, 1.0);
            let color: [f64; 3] = std::array::from_fn(|k| c0[k] + (c1[k] - c0[k]) * t);
            canvas.blend(i, j, &color, 1.0);
        }
    }

    // clutter: soft elongated blobs and bars of arbitrary colour
    let blobs = (spec.clutter_level * 14.0).round() as usize;
    for _ in 0..blobs {
        let color = random_color(&mut rng, 0.0, 1.0);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sx = rng.random_range(3.0..14.0);
        let sy = rng.random_range(3.0..14.0);
        let bar = rng.random_bool(0.4);
        let amp = spec.clutter_level * rng.random_range(0.4..0.9);
        for i in 0..h {
            for j in 0..w {
                let u = (j as f64 + 0.5 - cx) / sx;
                let v = (i as f64 + 0.5 - cy) / sy;
                let alpha = if bar {
                    if u.abs() <= 1.0 && v.abs() <= 0.35 {
                        amp
                    } else {
                        0.0
                    }
                } else {
                    amp * (-(u * u + v * v)).exp()
                };
                if alpha > 1e-3 {
                    canvas.blend(i, j, &color, alpha);
                }
            }
        }
    }

    // heads: dark discs with a soft rim
    let (lo, hi) = spec.count_range;
    let count = rng.random_range(lo..=hi);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.random_range(0.0..w as f64);
        let y = rng.random_range(0.0..h as f64);
        let r = spec.radius_at(y);
        let tone = rng.random_range(0.03..0.18);
        let color = [tone, tone * 0.9, tone * 0.8];
        let reach = (r + 1.0).ceil() as isize;
        let (ci, cj) = (y.floor() as isize, x.floor() as isize);
        for i in (ci - reach).max(0)..=(ci + reach).min(h as isize - 1) {
            for j in (cj - reach).max(0)..=(cj + reach).min(w as isize - 1) {
                let d = ((j as f64 + 0.5 - x).powi(2) + (i as f64 + 0.5 - y).powi(2)).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    canvas.blend(i as usize, j as usize, &color, alpha);
                }
            }
        }
        points.push(Point::new(x, y));
    }

    let image = Tensor::from_vec(Shape::new(1, spec.channels, h, w), canvas.px)
        .expect("canvas matches shape");
    if points.is_empty() {
        return Ok(CrowdSample::background(image));
    }
    let density = render_density_gt(&points, h, w, spec.sigma)?;
    Ok(CrowdSample {
        image,
        points,
        density: Some(density),
        is_background: false,
    })
}

/// `count` scenes sharing `base` except for per-scene seeds derived from
/// `base.seed`.
pub fn generate_dataset(base: &SceneSpec, count: usize) -> Result<Vec<CrowdSample>, DataError> {
    let mut seeder = ChaCha8Rng::seed_from_u64(base.seed);
    (0..count)
        .map(|_| {
            let spec = SceneSpec {
                seed: seeder.random(),
                ..base.clone()
            };
            generate_scene(&spec)
        })
        .collect()
}
