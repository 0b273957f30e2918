//! Image sources: a seeded generator of textured shapes, or a directory of
//! binary PPM/PGM files.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::patchify;
use crate::tensor::Tensor;

/// Shape classes drawn by the synthetic generator.
pub const SHAPE_CLASSES: [&str; 4] = ["disc", "square", "triangle", "cross"];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, seed: u64 },
    Directory(PathBuf),
}

/// Patchified images, with shape labels when the source provides them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub patches: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Draws one `size×size×channels` image with pixel values in `[-1, 1]`.
pub fn synthetic_image(size: usize, channels: usize, class: usize, rng: &mut impl Rng) -> Tensor {
    let s = size as f64;
    let color = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let bg = color(rng);
    let mut fg = color(rng);
    // Keep the shape visible against the background.
    let dist: f64 = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / channels as f64;
    if dist < 0.5 {
        fg.iter_mut().zip(&bg).for_each(|(f, b)| *f = if *b > 0.0 { *b - 1.0 } else { *b + 1.0 });
    }
    let radius = rng.random_range(0.18 * s..0.36 * s);
    let cx = rng.random_range(radius..s - radius);
    let cy = rng.random_range(radius..s - radius);
    let freq = rng.random_range(0.2..0.9);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.05..0.25);
    let noise = Normal::new(0.0, 0.05).expect("valid std");

    let inside = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match class {
            0 => dx * dx + dy * dy <= radius * radius,
            1 => dx.abs() <= radius * 0.8 && dy.abs() <= radius * 0.8,
            2 => dy <= radius * 0.8 && dy >= -radius && dx.abs() <= (dy + radius) * 0.55,
            _ => {
                let arm = radius * 0.3;
                (dx.abs() <= arm && dy.abs() <= radius) || (dy.abs() <= arm && dx.abs() <= radius)
            }
        }
    };

    let mut data = Vec::with_capacity(size * size * channels);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let texture = amp * (freq * (x * angle.cos() + y * angle.sin()) + phase).sin();
            let base = if inside(x, y) { &fg } else { &bg };
            for &b in base {
                let v = b + texture + noise.sample(rng);
                data.push(v.clamp(-1.0, 1.0));
            }
        }
    }
    Tensor::from_parts(vec![size, size, channels], data)
}

/// `count` labelled images, classes cycling through [`SHAPE_CLASSES`].
pub fn synthetic_dataset(count: usize, image_size: usize, channels: usize, patch: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % SHAPE_CLASSES.len();
        let img = synthetic_image(image_size, channels, class, &mut rng);
        patches.push(patchify(&img, patch)?);
        labels.push(class);
    }
    Ok(Dataset {
        patches,
        labels: Some(labels),
    })
}

/// Decodes one binary PPM (3 channels) or PGM (1 channel) file.
pub fn load_image(path: &Path, image_size: usize, channels: usize) -> Result<Tensor> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    if img.width() as usize != image_size || img.height() as usize != image_size {
        return Err(decode_err(format!(
            "expected {image_size}×{image_size} pixels, found {}×{}",
            img.width(),
            img.height()
        )));
    }
    let raw: Vec<u8> = match channels {
        1 => img.into_luma8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        c => return Err(decode_err(format!("unsupported channel count {c}"))),
    };
    let data = raw.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    Tensor::new(vec![image_size, image_size, channels], data)
}

/// Every `.ppm`, `.pgm` or `.pnm` file in `dir`, in file-name order.
pub fn directory_dataset(dir: &Path, image_size: usize, channels: usize, patch: usize) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("ppm" | "pgm" | "pnm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Decode {
            path: dir.to_path_buf(),
            message: "no .ppm/.pgm/.pnm images found".into(),
        });
    }
    let patches = files
        .iter()
        .map(|f| patchify(&load_image(f, image_size, channels)?, patch))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        patches,
        labels: None,
    })
}

pub fn load(source: &DataSource, image_size: usize, channels: usize, patch: usize) -> Result<Dataset> {
    match source {
        DataSource::Synthetic { count, seed } => synthetic_dataset(*count, image_size, channels, patch, *seed),
        DataSource::Directory(dir) => directory_dataset(dir, image_size, channels, patch),
    }
}
