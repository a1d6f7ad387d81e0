//! Synthetic crowd scenes, density ground truth, augmentation and dataset files.

mod augment;
mod density;
mod io;
mod scene;

pub use augment::{augment, flip_horizontal, flip_vertical, AugmentConfig};
pub use density::{downsample_density, render_density_gt, DEFAULT_SIGMA};
pub use io::{
    read_dataset, read_image, write_dataset, write_density_grid, write_density_heatmap, write_image, MANIFEST_NAME,
};
pub use scene::{generate_dataset, generate_scene, SceneSpec};

use std::path::PathBuf;

use crate::supervision::CrowdLabel;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("cannot place up to {max} heads of radius >= {radius} in a {width}x{height} image")]
    InfeasibleCount {
        max: usize,
        radius: f64,
        width: usize,
        height: usize,
    },
    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("crop {crop} larger than image {width}x{height}")]
    CropTooLarge {
        crop: usize,
        width: usize,
        height: usize,
    },
    #[error("{height}x{width} map is not divisible by factor {factor}")]
    Indivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("cannot decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("malformed manifest {path}, line {line}: {reason}")]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("malformed annotation {path}, line {line}: {reason}")]
    MalformedAnnotation {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("annotation {path}, line {line}: coordinate ({x}, {y}) outside the {width}x{height} image")]
    CoordinateOutOfBounds {
        path: PathBuf,
        line: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
}

/// Head centre in pixel coordinates: origin top-left, `x` rightward, pixel
/// `(row i, col j)` spans `[j, j + 1) x [i, i + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// One image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdSample {
    /// `1 x C x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub points: Vec<Point>,
    /// `1 x 1 x H x W`; absent for background-only samples.
    pub density: Option<Tensor>,
    pub is_background: bool,
}

impl CrowdSample {
    pub fn background(image: Tensor) -> Self {
        Self {
            image,
            points: Vec::new(),
            density: None,
            is_background: true,
        }
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Ground-truth density, or an all-zero map for background samples.
    pub fn density_or_zeros(&self) -> Tensor {
        self.density
            .clone()
            .unwrap_or_else(|| Tensor::zeros(Shape::new(1, 1, self.height(), self.width())))
    }
}

/// `(background fraction, crowd fraction)` over every pixel of every label.
pub fn imbalance_stats(labels: &[CrowdLabel]) -> crate::Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(crate::Error::Input("imbalance_stats needs at least one label".into()));
    }
    let (crowd, total) = labels.iter().fold((0usize, 0usize), |(c, t), l| {
        let m = l.map();
        (c + m.data().iter().filter(|&&v| v == 1.0).count(), t + m.numel())
    });
    let crowd_fraction = crowd as f64 / total as f64;
    Ok((1.0 - crowd_fraction, crowd_fraction))
}
