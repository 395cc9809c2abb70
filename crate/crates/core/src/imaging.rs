//! Pixel primitives shared by perturbations and feature extractors.
//!
//! Everything here is integer-in, integer-out and deterministic, so perturbed
//! PNGs are reproducible bit-for-bit.

use std::io::Cursor;
use std::path::Path;

use crate::corpus::BBox;
use crate::error::{Error, Result};
use crate::fsutil;

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    /// Decodes a PNG or JPEG file to 8-bit RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::new(w, h, rgb.into_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }

    /// Writes a PNG via temp-file-and-rename.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.encode_png()?)
    }
}

/// HSV image with all three channels on a 0–255 integer scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsvImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl HsvImage {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Interleaved `(H, S, V)` triples.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = u8> + '_ {
        self.pixels.iter().skip(c).step_by(3).copied()
    }
}

/// Converts one RGB pixel to 0–255 HSV.
///
/// Hue follows the usual 0–360° convention scaled by 256/360 and rounded
/// half away from zero, wrapping 256 to 0. Achromatic pixels get H = 0.
pub fn rgb_to_hsv_pixel([r, g, b]: [u8; 3]) -> [u8; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    if max == min {
        return [0, 0, v];
    }
    let chroma = (max - min) as f64;
    let s = (255.0 * chroma / max as f64).round() as u8;
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let sector = if max as f64 == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max as f64 == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let degrees = 60.0 * sector;
    let h = ((degrees * 256.0 / 360.0).round() as u32 % 256) as u8;
    [h, s, v]
}

/// Inverse of [`rgb_to_hsv_pixel`].
///
/// The maximum channel is exactly V and the minimum is `round(V - V*S/255)`,
/// so re-extracting S and V from the result depends only on the input S and V
/// and never on H.
pub fn hsv_to_rgb_pixel([h, s, v]: [u8; 3]) -> [u8; 3] {
    if s == 0 {
        return [v, v, v];
    }
    let vf = v as f64;
    let chroma = vf * s as f64 / 255.0;
    let min_f = vf - chroma;
    let sector = h as f64 * 6.0 / 256.0;
    let frac = sector - sector.floor();
    let max = v;
    let min = min_f.round() as u8;
    let rising = (min_f + chroma * frac).round() as u8;
    let falling = (min_f + chroma * (1.0 - frac)).round() as u8;
    match sector.floor() as u32 {
        0 => [max, rising, min],
        1 => [falling, max, min],
        2 => [min, max, rising],
        3 => [min, falling, max],
        4 => [rising, min, max],
        _ => [max, min, falling],
    }
}

pub fn rgb_to_hsv(img: &Image) -> HsvImage {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for px in img.pixels.chunks_exact(3) {
        pixels.extend_from_slice(&rgb_to_hsv_pixel([px[0], px[1], px[2]]));
    }
    HsvImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

pub fn hsv_to_rgb(img: &HsvImage) -> Image {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for px in img.pixels.chunks_exact(3) {
        pixels.extend_from_slice(&hsv_to_rgb_pixel([px[0], px[1], px[2]]));
    }
    Image {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Normalized 1-D Gaussian kernel for a blur radius (σ = radius / 2,
/// truncated at 3σ). Radius 0 yields the identity kernel `[1.0]`.
pub fn gaussian_kernel(radius: f64) -> Vec<f64> {
    let sigma = radius / 2.0;
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let half = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for w in &mut k {
        *w /= total;
    }
    k
}

/// Separable blur in floating point, clamp-to-edge, before final rounding.
pub fn gaussian_blur_f64(img: &Image, radius: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(radius);
    let half = (kernel.len() / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let mut horiz = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, kw) in kernel.iter().enumerate() {
                let sx = (x + ki as i64 - half).clamp(0, w - 1);
                let base = ((y * w + sx) * 3) as usize;
                for c in 0..3 {
                    acc[c] += kw * src[base + c];
                }
            }
            let base = ((y * w + x) * 3) as usize;
            horiz[base..base + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, kw) in kernel.iter().enumerate() {
                let sy = (y + ki as i64 - half).clamp(0, h - 1);
                let base = ((sy * w + x) * 3) as usize;
                for c in 0..3 {
                    acc[c] += kw * horiz[base + c];
                }
            }
            let base = ((y * w + x) * 3) as usize;
            out[base..base + 3].copy_from_slice(&acc);
        }
    }
    out
}

/// Gaussian blur with σ = radius / 2, kernel truncated at 3σ, clamp-to-edge.
pub fn gaussian_blur(img: &Image, radius: f64) -> Image {
    if radius <= 0.0 {
        return img.clone();
    }
    let pixels = gaussian_blur_f64(img, radius)
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Image {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: bits.len(),
            });
        }
        Ok(Mask { width, height, bits })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Mask { width, height, bits }
    }

    /// Loads a single-channel PNG; nonzero pixels are set.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        Mask::new(w, h, luma.into_raw().into_iter().map(|v| v != 0).collect())
    }

    /// Writes an 8-bit grayscale PNG (255 = set).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(self.width, self.height, raw).expect("mask length checked");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
        fsutil::write_atomic(path, &out.into_inner())
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

/// A pixel region: a box or an explicit mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Region {
    Box(BBox),
    Mask(Mask),
}

impl Region {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        match self {
            Region::Box(b) => b.contains(x, y),
            Region::Mask(m) => m.get(x, y),
        }
    }

    /// Number of image pixels covered by the region.
    pub fn coverage(&self, width: u32, height: u32) -> usize {
        match self {
            Region::Box(b) => b.clip_to(width, height).map_or(0, |c| c.area() as usize),
            Region::Mask(m) => {
                let mut n = 0;
                for y in 0..height.min(m.height) {
                    for x in 0..width.min(m.width) {
                        n += m.get(x, y) as usize;
                    }
                }
                n
            }
        }
    }
}

/// Sets every pixel inside `region` to `value`; all others are untouched.
/// An empty intersection is a no-op and logs a warning.
pub fn fill_region(img: &Image, region: &Region, value: [u8; 3]) -> Image {
    let mut out = img.clone();
    fill_region_in_place(&mut out, region, value);
    out
}

pub(crate) fn fill_region_in_place(img: &mut Image, region: &Region, value: [u8; 3]) {
    match region {
        Region::Box(b) => {
            let Some(c) = b.clip_to(img.width, img.height) else {
                log::warn!("fill region {b:?} does not intersect {}x{} image", img.width, img.height);
                return;
            };
            for y in c.y..c.y + c.h {
                for x in c.x..c.x + c.w {
                    img.set_pixel(x, y, value);
                }
            }
        }
        Region::Mask(m) => {
            if region.coverage(img.width, img.height) == 0 {
                log::warn!("fill mask does not intersect {}x{} image", img.width, img.height);
                return;
            }
            for y in 0..img.height.min(m.height) {
                for x in 0..img.width.min(m.width) {
                    if m.get(x, y) {
                        img.set_pixel(x, y, value);
                    }
                }
            }
        }
    }
}

/// Even pixel-boundary partition: cell `i` of `cells` spans
/// `floor(i*len/cells) .. floor((i+1)*len/cells)`.
pub(crate) fn cell_bounds(len: u32, cells: u32, i: u32) -> (u32, u32) {
    let lo = (i as u64 * len as u64 / cells as u64) as u32;
    let hi = ((i as u64 + 1) * len as u64 / cells as u64) as u32;
    (lo, hi)
}

/// Per-cell channel sums and pixel counts on a `gw x gh` grid over interleaved
/// `channels`-wide pixels.
pub(crate) fn cell_sums(
    width: u32,
    height: u32,
    pixels: &[u8],
    channels: usize,
    grid: (u32, u32),
) -> Vec<(Vec<u64>, u64)> {
    let (gw, gh) = grid;
    let mut out = Vec::with_capacity((gw * gh) as usize);
    for cy in 0..gh {
        let (y0, y1) = cell_bounds(height, gh, cy);
        for cx in 0..gw {
            let (x0, x1) = cell_bounds(width, gw, cx);
            let mut sums = vec![0u64; channels];
            for y in y0..y1 {
                for x in x0..x1 {
                    let base = (y as usize * width as usize + x as usize) * channels;
                    for (c, s) in sums.iter_mut().enumerate() {
                        *s += pixels[base + c] as u64;
                    }
                }
            }
            out.push((sums, ((y1 - y0) * (x1 - x0)) as u64));
        }
    }
    out
}

fn check_grid(img_w: u32, img_h: u32, gw: u32, gh: u32) -> Result<()> {
    if gw == 0 || gh == 0 || gw > img_w || gh > img_h {
        return Err(Error::invalid(format!(
            "grid {gw}x{gh} does not fit a {img_w}x{img_h} image"
        )));
    }
    Ok(())
}

/// Mean-downsamples to exactly `gw x gh`, rounding means half away from zero.
pub fn downsample_mean(img: &Image, grid: (u32, u32)) -> Result<Image> {
    let (gw, gh) = grid;
    check_grid(img.width, img.height, gw, gh)?;
    let mut pixels = Vec::with_capacity((gw * gh * 3) as usize);
    for (sums, count) in cell_sums(img.width, img.height, &img.pixels, 3, grid) {
        for s in sums {
            // round(s / count) with ties away from zero, in integers.
            pixels.push(((2 * s + count) / (2 * count)) as u8);
        }
    }
    Image::new(gw, gh, pixels)
}

/// Unrounded per-cell means of each HSV channel, row-major cells.
pub fn hsv_cell_means(img: &HsvImage, grid: (u32, u32)) -> Result<Vec<[f64; 3]>> {
    check_grid(img.width, img.height, grid.0, grid.1)?;
    Ok(cell_sums(img.width, img.height, &img.pixels, 3, grid)
        .into_iter()
        .map(|(s, n)| {
            let n = n as f64;
            [s[0] as f64 / n, s[1] as f64 / n, s[2] as f64 / n]
        })
        .collect())
}
