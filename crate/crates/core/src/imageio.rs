//! PNG import and export.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, Normalization};

/// Sorted list of `.png` files in a flat directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Ingestion {
        entry: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads an 8-bit grayscale or RGB PNG with raw values in `[0, 255]`.
pub fn load_png(path: &Path) -> Result<GridFunction> {
    let entry = || path.display().to_string();
    let img = image::open(path).map_err(|e| Error::Ingestion {
        entry: entry(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::Ingestion {
            entry: entry(),
            reason: format!("image is {w}×{h}, expected square"),
        });
    }
    let gray = matches!(img, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_));
    let (channels, planar) = if gray {
        let buf = img.to_luma8();
        (1, buf.pixels().map(|p| p.0[0] as f64).collect::<Vec<_>>())
    } else {
        let buf = img.to_rgb8();
        let n = w * h;
        let mut planar = vec![0.0; 3 * n];
        for (k, p) in buf.pixels().enumerate() {
            for c in 0..3 {
                planar[c * n + k] = p.0[c] as f64;
            }
        }
        (3, planar)
    };
    GridFunction::new(channels, w, planar)
}

fn to_byte(v: f64, norm: Normalization) -> u8 {
    norm.invert(v).round().clamp(0.0, 255.0) as u8
}

/// Writes images side by side in a grid of `cols` columns, undoing `norm` and clamping to `[0, 255]`.
pub fn save_png_grid(images: &[GridFunction], cols: usize, norm: &[Normalization], path: &Path) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::Contract("no images to write".into()));
    };
    let (c, r) = (first.channels(), first.resolution());
    if images.iter().any(|g| g.channels() != c || g.resolution() != r) || !(c == 1 || c == 3) {
        return Err(Error::Contract("image grid needs equal-size 1- or 3-channel images".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let pad = 2;
    let (w, h) = (cols * (r + pad) - pad, rows * (r + pad) - pad);
    let nrm = |ch: usize| norm.get(ch).or(norm.first()).copied().unwrap_or(Normalization::IDENTITY);
    let place = |k: usize, i: usize, j: usize| ((k / cols) * (r + pad) + i, (k % cols) * (r + pad) + j);
    let result = if c == 1 {
        let mut out = GrayImage::new(w as u32, h as u32);
        for (k, g) in images.iter().enumerate() {
            for i in 0..r {
                for j in 0..r {
                    let (y, x) = place(k, i, j);
                    out.put_pixel(x as u32, y as u32, image::Luma([to_byte(g.get(0, i, j), nrm(0))]));
                }
            }
        }
        out.save(path)
    } else {
        let mut out = RgbImage::new(w as u32, h as u32);
        for (k, g) in images.iter().enumerate() {
            for i in 0..r {
                for j in 0..r {
                    let (y, x) = place(k, i, j);
                    let px = [0, 1, 2].map(|ch| to_byte(g.get(ch, i, j), nrm(ch)));
                    out.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
        }
        out.save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
