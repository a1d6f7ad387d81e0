use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use super::{render_density_gt, CrowdSample, DataError, Point};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_NAME: &str = "manifest.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `1 x C x H x W` image in `[0, 1]` as binary PPM (C = 3) or PGM (C = 1).
pub fn write_image(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let s = image.shape();
    let d = image.data();
    let plane = s.plane();
    let (subtype, color, bytes): (_, _, Vec<u8>) = match s.c {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8, d[..plane].iter().map(|&v| quantize(v)).collect()),
        3 => (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
            (0..plane).flat_map(|k| [d[k], d[plane + k], d[2 * plane + k]]).map(quantize).collect(),
        ),
        c => {
            return Err(DataError::Image {
                path: path.to_path_buf(),
                reason: format!("cannot store a {c}-channel image"),
            })
        }
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(&bytes, s.w as u32, s.h as u32, color)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    fs::write(path, buf).map_err(io_err(path))
}

/// Read a PPM/PGM file into a `1 x C x H x W` tensor scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let img = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, bytes) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.into_rgb8().into_raw()),
    };
    let mut data = vec![0.0; c * h * w];
    for (k, px) in bytes.chunks_exact(c).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            data[ch * h * w + k] = b as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, c, h, w), data).expect("decoded size"))
}

fn read_points(path: &Path, width: usize, height: usize) -> Result<Vec<Point>, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| DataError::MalformedAnnotation {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(bad(format!("expected \"x y\", found {} fields", fields.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("not a number: {s:?}")))
        };
        let (x, y) = (parse(fields[0])?, parse(fields[1])?);
        if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            return Err(DataError::CoordinateOutOfBounds {
                path: path.to_path_buf(),
                line: idx + 1,
                x,
                y,
                width,
                height,
            });
        }
        points.push(Point::new(x, y));
    }
    Ok(points)
}

/// Write images, annotation sidecars and a manifest into `dir`; returns the
/// manifest path. Coordinates are written with round-trip precision.
pub fn write_dataset(dir: &Path, samples: &[CrowdSample]) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let ext = if s.image.shape().c == 1 { "pgm" } else { "ppm" };
        let img_name = format!("img_{i:05}.{ext}");
        let ann_name = format!("img_{i:05}.txt");
        write_image(&dir.join(&img_name), &s.image)?;
        let mut ann = String::new();
        for p in &s.points {
            writeln!(ann, "{:?} {:?}", p.x, p.y).unwrap();
        }
        let ann_path = dir.join(&ann_name);
        fs::write(&ann_path, ann).map_err(io_err(&ann_path))?;
        writeln!(manifest, "{img_name} {ann_name} {}", u8::from(s.is_background)).unwrap();
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}

/// Load every manifest entry. Paths are relative to the manifest's directory.
/// Densities are re-rendered from the points with `sigma`; an empty annotation
/// yields a background sample.
pub fn read_dataset(manifest: &Path, sigma: f64) -> Result<Vec<CrowdSample>, DataError> {
    if !manifest.is_file() {
        return Err(DataError::MissingFile(manifest.to_path_buf()));
    }
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| DataError::MalformedManifest {
            path: manifest.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [img, ann, flag] = fields[..] else {
            return Err(bad(format!(
                "expected \"image_path annotation_path background_flag\", found {} fields",
                fields.len()
            )));
        };
        let flagged = match flag {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("background flag must be 0 or 1, got {other:?}"))),
        };
        let image = read_image(&root.join(img))?;
        let (h, w) = (image.shape().h, image.shape().w);
        let points = read_points(&root.join(ann), w, h)?;
        if flagged && !points.is_empty() {
            return Err(bad(format!(
                "flagged as background but {ann} lists {} heads",
                points.len()
            )));
        }
        if points.is_empty() {
            samples.push(CrowdSample::background(image));
        } else {
            let density = render_density_gt(&points, h, w, sigma)?;
            samples.push(CrowdSample {
                image,
                points,
                density: Some(density),
                is_background: false,
            });
        }
    }
    Ok(samples)
}

/// Black -> red -> yellow -> white ramp over `t` in `[0, 1]`.
fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]
}

/// Export a `1 x 1 x H x W` density map as a PPM heatmap scaled to its own
/// maximum (an all-zero map is black).
pub fn write_density_heatmap(path: &Path, density: &Tensor) -> Result<(), DataError> {
    let s = density.shape();
    if s.n != 1 || s.c != 1 {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            reason: format!("heatmaps take a single-channel map, got {s}"),
        });
    }
    let peak = density.data().iter().cloned().fold(0.0, f64::max);
    let mut rgb = Tensor::zeros(Shape::new(1, 3, s.h, s.w));
    let plane = s.plane();
    for (k, &v) in density.data().iter().enumerate() {
        let c = heat(if peak > 0.0 { v / peak } else { 0.0 });
        for (ch, value) in c.into_iter().enumerate() {
            rgb.data_mut()[ch * plane + k] = value;
        }
    }
    write_image(path, &rgb)
}

/// Export a density map as text: a `# rows cols sum` header, then one row of
/// whitespace-separated per-pixel values per line.
pub fn write_density_grid(path: &Path, density: &Tensor) -> Result<(), DataError> {
    let s = density.shape();
    let mut out = String::new();
    writeln!(out, "# {} {} {:?}", s.h, s.w, density.sum()).unwrap();
    for row in density.data().chunks(s.w.max(1)).take(s.h) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(out, "{}", cells.join(" ")).unwrap();
    }
    fs::write(path, out).map_err(io_err(path))
}
