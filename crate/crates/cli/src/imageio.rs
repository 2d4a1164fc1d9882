//! Image files: PFM for float data, 8-bit PNG for previews and textures read
//! from photographs, 16-bit grayscale PNG for label channels.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use facecap::io::{read_pfm, write_pfm};
use facecap::Image;

fn is_pfm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

pub fn load(path: &Path) -> Result<Image> {
    if is_pfm(path) {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        return read_pfm(BufReader::new(file)).with_context(|| format!("decoding {}", path.display()));
    }
    let rgb = image::open(path)
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let values: Vec<f64> = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::from_flat(w, h, &values))
}

pub fn save_pfm(image: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    write_pfm(image, &mut out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let raw: Vec<u8> = image.pixels.iter().flat_map(|p| p.map(to_byte)).collect();
    image::RgbImage::from_raw(image.width as u32, image.height as u32, raw)
        .context("pixel buffer size")?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn save_labels(labels: &[u16], width: usize, height: usize, path: &Path) -> Result<()> {
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width as u32, height as u32, labels.to_vec())
        .context("label buffer size")?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// PFM plus, when the image carries labels, a `<stem>_labels.png` beside it.
pub fn save_float(image: &Image, path: &Path) -> Result<()> {
    save_pfm(image, path)?;
    if let Some(labels) = &image.labels {
        save_labels(labels, image.width, image.height, &path.with_file_name(format!("{}_labels.png", stem(path))))?;
    }
    Ok(())
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Image files of a directory sorted by name, label side files excluded.
/// A PNG preview beside a PFM of the same stem is skipped.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
            matches!(ext.as_deref(), Some("pfm" | "png")) && !stem(p).ends_with("_labels")
        })
        .collect();
    out.retain(|p| is_pfm(p) || !p.with_extension("pfm").exists());
    out.sort();
    if out.is_empty() {
        bail!("no images in {}", dir.display());
    }
    Ok(out)
}

/// Finds `<dir>/<id>.pfm` or `<dir>/<id>.png`.
pub fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["pfm", "png"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("no image named {id} in {}", dir.display())
}

/// Draws `points` (pixel coordinates) into a copy of `image`.
pub fn overlay_points(image: &Image, points: &[(f64, f64)], color: [f64; 3]) -> Image {
    let mut out = image.clone();
    for &(x, y) in points {
        if x >= 0.0 && y >= 0.0 && (x as usize) < out.width && (y as usize) < out.height {
            out.set(x as usize, y as usize, color);
        }
    }
    out
}

/// Log-scale line plot of a loss trace.
pub fn plot_trace(trace: &[f64], width: usize, height: usize) -> Image {
    let mut img = Image::filled(width, height, [1.0; 3]);
    let vals: Vec<f64> = trace.iter().map(|v| v.max(1e-12).ln()).collect();
    if vals.len() < 2 {
        return img;
    }
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-9);
    let to_px = |i: usize, v: f64| {
        let x = i as f64 / (vals.len() - 1) as f64 * (width - 1) as f64;
        let y = (1.0 - (v - lo) / span) * (height - 1) as f64;
        (x, y)
    };
    for i in 1..vals.len() {
        let (x0, y0) = to_px(i - 1, vals[i - 1]);
        let (x1, y1) = to_px(i, vals[i]);
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            img.set(x.round() as usize, y.round() as usize, [0.1, 0.2, 0.8]);
        }
    }
    img
}
