use serde::{Deserialize, Serialize};

/// Row-major RGB raster with float channels, plus an optional label channel
/// for segmented renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
    pub labels: Option<Vec<u16>>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
            labels: None,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
            labels: None,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear lookup at continuous pixel coordinates (pixel centers at
    /// integer + 0.5), clamped to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] * (1.0 - tx) + b[ch] * tx;
            let bot = c[ch] * (1.0 - tx) + d[ch] * tx;
            out[ch] = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    /// Area-average downsample to `width` x `height` (exact box filter).
    pub fn resize_area(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(width, height, |x, y| {
            box_average(self, x as f64 * sx, y as f64 * sy, (x + 1) as f64 * sx, (y + 1) as f64 * sy)
        })
    }

    /// Flattened channel values, row-major, RGB interleaved.
    pub fn to_flat(&self) -> Vec<f64> {
        self.pixels.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(width: usize, height: usize, values: &[f64]) -> Image {
        assert_eq!(values.len(), width * height * 3);
        Image {
            width,
            height,
            pixels: values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            labels: None,
        }
    }

    /// Mean over pixels of the squared RGB distance.
    pub fn mse(&self, other: &Image) -> f64 {
        assert!(self.same_size(other));
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
            .sum();
        sum / self.len().max(1) as f64
    }
}

/// Exact area average of the piecewise-constant image over the continuous
/// rectangle `[x0, x1) x [y0, y1)` in pixel units.
pub fn box_average(img: &Image, x0: f64, y0: f64, x1: f64, y1: f64) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut area = 0.0;
    let px0 = x0.floor().max(0.0) as usize;
    let py0 = y0.floor().max(0.0) as usize;
    let px1 = (x1.ceil() as usize).min(img.width);
    let py1 = (y1.ceil() as usize).min(img.height);
    for py in py0..py1 {
        let oy = (y1.min((py + 1) as f64) - y0.max(py as f64)).max(0.0);
        if oy == 0.0 {
            continue;
        }
        for px in px0..px1 {
            let ox = (x1.min((px + 1) as f64) - x0.max(px as f64)).max(0.0);
            if ox == 0.0 {
                continue;
            }
            let w = ox * oy;
            let c = img.get(px, py);
            for ch in 0..3 {
                acc[ch] += w * c[ch];
            }
            area += w;
        }
    }
    if area > 0.0 {
        for v in &mut acc {
            *v /= area;
        }
    }
    acc
}

/// Separable Gaussian blur with zero padding; the operator is symmetric, so it
/// is its own adjoint.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width as isize, img.height as isize);
    let mut tmp = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sx = x + ki as isize - radius;
                if sx < 0 || sx >= w {
                    continue;
                }
                let c = img.get(sx as usize, y as usize);
                for ch in 0..3 {
                    acc[ch] += k * c[ch];
                }
            }
            tmp.set(x as usize, y as usize, acc);
        }
    }
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sy = y + ki as isize - radius;
                if sy < 0 || sy >= h {
                    continue;
                }
                let c = tmp.get(x as usize, sy as usize);
                for ch in 0..3 {
                    acc[ch] += k * c[ch];
                }
            }
            out.set(x as usize, y as usize, acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_average_of_constant_is_constant() {
        let img = Image::filled(7, 5, [0.25, 0.5, 0.75]);
        let c = box_average(&img, 0.3, 1.2, 5.9, 4.4);
        for (a, b) in c.iter().zip([0.25, 0.5, 0.75]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_is_self_adjoint() {
        let a = Image::from_fn(9, 7, |x, y| [((x * 3 + y) % 5) as f64, (x * y % 3) as f64, 1.0]);
        let b = Image::from_fn(9, 7, |x, y| [(x % 2) as f64, ((x + 2 * y) % 4) as f64, y as f64]);
        let ga = gaussian_blur(&a, 1.3);
        let gb = gaussian_blur(&b, 1.3);
        let dot = |p: &Image, q: &Image| -> f64 {
            p.to_flat().iter().zip(q.to_flat()).map(|(u, v)| u * v).sum()
        };
        assert!((dot(&ga, &b) - dot(&a, &gb)).abs() < 1e-10);
    }

    #[test]
    fn resize_area_preserves_mean() {
        let img = Image::from_fn(8, 8, |x, y| [x as f64 / 7.0, y as f64 / 7.0, 0.5]);
        let small = img.resize_area(2, 2);
        let mean = |i: &Image| i.pixels.iter().map(|p| p[0]).sum::<f64>() / i.len() as f64;
        assert!((mean(&img) - mean(&small)).abs() < 1e-12);
    }
}
