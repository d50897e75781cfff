//! Deterministic product-image rendering and its inverse: a pixel-statistics
//! classifier that recovers the image-expressed attributes. The renderer and
//! classifier are co-designed; the classifier is what the synthetic caption
//! generator uses, so image-routed attributes really do travel through
//! pixels and nothing else.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::catalog::{color_rgb, Category, ProductSpec, COLORS};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Background gray value.
const BACKGROUND: f64 = 0.92;
/// Pattern overlays scale the fill by this factor.
const PATTERN_DARKEN: f64 = 0.45;
/// Pattern block edge in pixels.
const BLOCK: usize = 2;

/// On-disk image encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// Lossless PNG, the default.
    Png,
    /// Headerless interleaved RGB bytes; the size comes from config.
    Raw,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Raw => "rgb",
        }
    }
}

fn shape_mask(spec: &ProductSpec, size: usize) -> Vec<bool> {
    let s = size as f64;
    let mut mask = vec![false; size * size];
    let fill = |x0: f64, x1: f64, y0: f64, y1: f64, mask: &mut Vec<bool>| {
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 / s, y as f64 / s);
                if fx >= x0 && fx < x1 && fy >= y0 && fy < y1 {
                    mask[y * size + x] = true;
                }
            }
        }
    };
    match spec.category {
        Category::Dress => {
            // Triangle silhouette, apex up; garment size scales the skirt.
            let scale = match spec.size.as_deref() {
                Some("small") => 0.75,
                Some("large") => 1.05,
                _ => 0.90,
            };
            for y in 0..size {
                let fy = y as f64 / s;
                if !(0.12..0.90).contains(&fy) {
                    continue;
                }
                let progress = (fy - 0.12) / 0.78;
                let half_width = (0.04 + 0.34 * progress) * scale;
                for x in 0..size {
                    let fx = x as f64 / s;
                    if (fx - 0.5).abs() <= half_width {
                        mask[y * size + x] = true;
                    }
                }
            }
        }
        Category::Monitor => fill(0.10, 0.90, 0.22, 0.72, &mut mask),
        Category::Phone => fill(0.34, 0.66, 0.08, 0.92, &mut mask),
    }
    mask
}

/// Renders the product as interleaved RGB bytes, row-major.
pub fn render_image(spec: &ProductSpec, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let rgb = color_rgb(&spec.color).expect("catalog color");
    let mask = shape_mask(spec, size);
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut pixel = if mask[y * size + x] { rgb } else { [BACKGROUND; 3] };
            if mask[y * size + x] {
                let darken = match spec.pattern.as_deref() {
                    Some("stripes") => (y / BLOCK) % 2 == 1,
                    Some("checker") => (x / BLOCK + y / BLOCK) % 2 == 1,
                    _ => false,
                };
                if darken {
                    for c in &mut pixel {
                        *c *= PATTERN_DARKEN;
                    }
                }
            }
            for c in pixel {
                let v = (c + (rng.gen::<f64>() * 2.0 - 1.0) * noise).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Writes interleaved RGB bytes in the chosen format.
pub fn save_image(path: &Path, rgb: &[u8], size: usize, format: ImageFormat) -> Result<()> {
    if rgb.len() != size * size * 3 {
        return Err(Error::contract(format!(
            "image buffer holds {} bytes, expected {}",
            rgb.len(),
            size * size * 3
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        ImageFormat::Png => PngEncoder::new(&mut writer)
            .write_image(rgb, size as u32, size as u32, ExtendedColorType::Rgb8)
            .map_err(|e| Error::contract(format!("png encode {}: {e}", path.display())))?,
        ImageFormat::Raw => writer.write_all(rgb).map_err(|e| Error::io(path, e))?,
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads an image back into interleaved RGB bytes, checking the edge length.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput { path: path.to_path_buf() });
    }
    let expected = size * size * 3;
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("rgb") => std::fs::read(path).map_err(|e| Error::io(path, e))?,
        _ => {
            let img = ImageReader::open(path)
                .map_err(|e| Error::io(path, e))?
                .decode()
                .map_err(|e| Error::contract(format!("decode {}: {e}", path.display())))?;
            img.to_rgb8().into_raw()
        }
    };
    if bytes.len() != expected {
        return Err(Error::contract(format!(
            "{} holds {} bytes, expected {expected} for edge {size}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Converts interleaved RGB bytes to the training layout `[3, size, size]`
/// in unit range.
pub fn to_planar<S: Scalar>(rgb: &[u8], size: usize) -> Tensor<S> {
    let mut data = vec![S::ZERO; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                data[c * size * size + y * size + x] =
                    S::from_f64(rgb[(y * size + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("planar layout")
}

/// What the classifier reads off the pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageReading {
    pub category: Category,
    pub color: String,
    pub pattern: Option<String>,
}

impl ImageReading {
    /// Caption tokens for the synthetic generator.
    pub fn caption(&self) -> String {
        let mut parts = vec![self.category.name().to_string(), self.color.clone()];
        if let Some(p) = &self.pattern {
            parts.push(p.clone());
        }
        parts.join(" ")
    }
}

/// Recovers category, color and pattern from pixels alone.
pub fn classify_image(rgb: &[u8], size: usize) -> Result<ImageReading> {
    if rgb.len() != size * size * 3 {
        return Err(Error::contract("image buffer does not match the edge length"));
    }
    let px = |x: usize, y: usize| -> [f64; 3] {
        let i = (y * size + x) * 3;
        [rgb[i] as f64 / 255.0, rgb[i + 1] as f64 / 255.0, rgb[i + 2] as f64 / 255.0]
    };
    // Foreground: pixels far from the background gray.
    let is_fg = |p: [f64; 3]| -> bool {
        let d: f64 = p.iter().map(|c| (c - BACKGROUND).powi(2)).sum();
        d.sqrt() > 0.25
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut fg = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let p = px(x, y);
            if is_fg(p) {
                xs.push(x);
                ys.push(y);
                fg.push((x, y, p));
            }
        }
    }
    if fg.len() < 4 {
        return Err(Error::contract("no foreground shape found"));
    }
    let (xmin, xmax) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
    let (ymin, ymax) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
    let aspect = (xmax - xmin + 1) as f64 / (ymax - ymin + 1) as f64;
    let category = if aspect < 0.60 {
        Category::Phone
    } else if aspect > 1.20 {
        Category::Monitor
    } else {
        Category::Dress
    };

    // Color from the brighter half of the shape, so pattern darkening does
    // not drag the estimate.
    let mut brightness: Vec<f64> = fg.iter().map(|(_, _, p)| p.iter().sum()).collect();
    let mut sorted = brightness.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let bright: Vec<&(usize, usize, [f64; 3])> = fg
        .iter()
        .zip(&brightness)
        .filter(|(_, &b)| b >= median)
        .map(|(p, _)| p)
        .collect();
    let mut mean = [0.0f64; 3];
    for (_, _, p) in &bright {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    for c in &mut mean {
        *c /= bright.len() as f64;
    }
    let color = COLORS
        .iter()
        .min_by(|a, b| {
            let da: f64 = a.1.iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum();
            let db: f64 = b.1.iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum();
            da.partial_cmp(&db).unwrap()
        })
        .map(|(n, _)| n.to_string())
        .expect("color table non-empty");

    let pattern = if category == Category::Dress {
        // Correlate brightness deviation against the block parities: stripes
        // light up the row signal, checkerboards the row-times-column signal.
        let mean_b = brightness.iter().sum::<f64>() / brightness.len() as f64;
        for b in &mut brightness {
            *b -= mean_b;
        }
        let sign = |v: usize| if (v / BLOCK) % 2 == 0 { 1.0 } else { -1.0 };
        let mut row_corr = 0.0;
        let mut cross_corr = 0.0;
        for ((x, y, _), b) in fg.iter().zip(&brightness) {
            row_corr += b * sign(*y);
            cross_corr += b * sign(*x) * sign(*y);
        }
        row_corr = (row_corr / fg.len() as f64).abs();
        cross_corr = (cross_corr / fg.len() as f64).abs();
        let name = if row_corr < 0.08 && cross_corr < 0.08 {
            "plain"
        } else if row_corr >= cross_corr {
            "stripes"
        } else {
            "checker"
        };
        Some(name.to_string())
    } else {
        None
    };

    Ok(ImageReading { category, color, pattern })
}
