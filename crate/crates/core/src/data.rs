//! Datasets: manifest loading, synthetic image generation, distortion
//! operators and crop sampling.
//!
//! Images are RGB, interleaved (HWC), `f32` in `[0, 1]`. The synthetic
//! generator produces nine procedural scene families matching the scene
//! taxonomy, applies one random distortion, and assigns a pseudo-MOS that
//! decreases with distortion severity.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{distortion_taxonomy, scene_taxonomy};
use crate::error::{Error, Result};
use crate::rng;

/// RGB image, interleaved channels, values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl fmt::Debug for ImageBuf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageBuf<{}x{}>", self.width, self.height)
    }
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(x, y, c, v);
        }
    }

    pub fn clamp_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Axis-aligned crop. The rectangle must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<ImageBuf> {
        if x0 + size > self.width || y0 + size > self.height {
            return Err(Error::Data(format!(
                "crop {}x{} at ({}, {}) exceeds image {}x{}",
                size, size, x0, y0, self.width, self.height
            )));
        }
        let mut out = ImageBuf::new(size, size);
        for y in 0..size {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * size * 3;
            out.data[dst..dst + size * 3].copy_from_slice(&self.data[src..src + size * 3]);
        }
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    (self.get(x, y, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(x, y, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(x, y, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)
            .map_err(|e| Error::Data(format!("failed to write {}: {}", path.display(), e)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ImageBuf> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("failed to decode {}: {}", path.display(), e)))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageBuf::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                out.set_rgb(x, y, [
                    px.0[0] as f32 / 255.0,
                    px.0[1] as f32 / 255.0,
                    px.0[2] as f32 / 255.0,
                ]);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Distortion operators
// ---------------------------------------------------------------------------

/// Apply distortion `kind` (distortion-taxonomy index) at `severity` in
/// `[0, 1]`. Severity 0 returns the input unchanged for every kind. The
/// seed fixes the random draws of the stochastic operators (noise placement,
/// patch position).
///
/// Codec distortions are approximated: JPEG and JPEG2000 map to block-wise
/// value quantization (8 and 16 pixel blocks), `spatially-localized` to a
/// blur patch at a seeded position, and `others` to the identity.
pub fn apply_distortion(img: &ImageBuf, kind: usize, severity: f64, seed: u64) -> Result<ImageBuf> {
    let n_kinds = distortion_taxonomy().len();
    if kind >= n_kinds {
        return Err(Error::Data(format!(
            "distortion kind {} out of range 0..{}",
            kind, n_kinds
        )));
    }
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Data(format!(
            "severity {} outside [0, 1]",
            severity
        )));
    }
    if severity == 0.0 {
        return Ok(img.clone());
    }
    let s = severity as f32;
    let mut rng = rng::rng_for(seed, kind as u64);
    let mut out = match kind {
        0 => gaussian_blur(img, 2.5 * s),
        1 => img_map(img, |px| {
            let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            [
                px[0] + s * (luma - px[0]),
                px[1] + s * (luma - px[1]),
                px[2] + s * (luma - px[2]),
            ]
        }),
        2 => {
            let k = 1.0 - 0.9 * s;
            img_map(img, |px| px.map(|v| 0.5 + (v - 0.5) * k))
        }
        3 => block_quantize(img, 8, s),
        4 => block_quantize(img, 16, s),
        5 => {
            let sigma = 0.25 * s;
            let mut out = img.clone();
            for v in out.data_mut() {
                *v += sigma * rng::normal(&mut rng) as f32;
            }
            out
        }
        6 => {
            let gain = 1.0 + 1.2 * s;
            img_map(img, |px| px.map(|v| v * gain))
        }
        7 => {
            let levels = (2.0 + (1.0 - s) * 62.0).round().max(2.0);
            img_map(img, |px| {
                px.map(|v| (v * (levels - 1.0)).round() / (levels - 1.0))
            })
        }
        8 => {
            let gain = 1.0 - 0.85 * s;
            img_map(img, |px| px.map(|v| v * gain))
        }
        9 => localized_blur(img, s, &mut rng),
        10 => img.clone(),
        _ => unreachable!(),
    };
    out.clamp_in_place();
    Ok(out)
}

fn img_map(img: &ImageBuf, f: impl Fn([f32; 3]) -> [f32; 3]) -> ImageBuf {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let mapped = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&mapped);
    }
    out
}

/// Separable Gaussian blur with edge replication.
fn gaussian_blur(img: &ImageBuf, sigma: f32) -> ImageBuf {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (sigma * 2.5).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / denom).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &ImageBuf, horizontal: bool| {
        let mut dst = ImageBuf::new(img.width, img.height);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (ki, k) in kernel.iter().enumerate() {
                    let off = ki as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x + off).clamp(0, w - 1), y)
                    } else {
                        (x, (y + off).clamp(0, h - 1))
                    };
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += k * src.get(sx as usize, sy as usize, c);
                    }
                }
                dst.set_rgb(x as usize, y as usize, acc);
            }
        }
        dst
    };
    let tmp = pass(img, true);
    pass(&tmp, false)
}

/// Quantize pixel values around each block's mean. Coarser levels at higher
/// severity produce blocking artifacts.
fn block_quantize(img: &ImageBuf, block: usize, s: f32) -> ImageBuf {
    let levels = (2.0 + (1.0 - s) * 30.0).round().max(2.0);
    let mut out = img.clone();
    let (w, h) = (img.width, img.height);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let x1 = (bx + block).min(w);
            let y1 = (by + block).min(h);
            let count = ((x1 - bx) * (y1 - by)) as f32;
            let mut mean = [0.0f32; 3];
            for y in by..y1 {
                for x in bx..x1 {
                    for (c, m) in mean.iter_mut().enumerate() {
                        *m += img.get(x, y, c);
                    }
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            for y in by..y1 {
                for x in bx..x1 {
                    for (c, m) in mean.iter().enumerate() {
                        let r = img.get(x, y, c) - m;
                        let q = (r * levels).round() / levels;
                        out.set(x, y, c, m + q);
                    }
                }
            }
        }
    }
    out
}

fn localized_blur(img: &ImageBuf, s: f32, rng: &mut ChaCha8Rng) -> ImageBuf {
    let side = ((img.width.min(img.height) as f32) * (0.3 + 0.5 * s)).round() as usize;
    let side = side.clamp(1, img.width.min(img.height));
    let x0 = rng.random_range(0..=img.width - side);
    let y0 = rng.random_range(0..=img.height - side);
    let blurred = gaussian_blur(img, 1.0 + 2.0 * s);
    let mut out = img.clone();
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            for c in 0..3 {
                out.set(x, y, c, blurred.get(x, y, c));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Render one procedural base image of the given scene family
/// (scene-taxonomy index), before any distortion.
pub fn render_scene(family: usize, size: usize, rng: &mut ChaCha8Rng) -> ImageBuf {
    let mut img = ImageBuf::new(size, size);
    match family {
        0 => {
            // animal: blobs on a green field
            fill_vgradient(&mut img, [0.35, 0.55, 0.25], [0.45, 0.65, 0.3]);
            for _ in 0..rng.random_range(3..7) {
                let color = [rng.random_range(0.3..0.7), rng.random_range(0.2..0.5), rng.random_range(0.1..0.3)];
                draw_ellipse(&mut img, rng, color, 0.08..0.2);
            }
        }
        1 => {
            // cityscape: vertical slabs against a sky gradient
            fill_vgradient(&mut img, [0.5, 0.65, 0.85], [0.75, 0.8, 0.9]);
            let n = rng.random_range(4..8);
            for i in 0..n {
                let w = size / n;
                let x0 = i * w;
                let top = rng.random_range(size / 4..(3 * size) / 4);
                let shade = rng.random_range(0.15..0.45);
                draw_rect(&mut img, x0, top, w.saturating_sub(2).max(1), size - top, [shade, shade, shade * 1.1]);
            }
        }
        2 => {
            // human: one standing figure
            fill_vgradient(&mut img, [0.7, 0.65, 0.6], [0.55, 0.5, 0.45]);
            let cx = rng.random_range(size / 3..(2 * size) / 3);
            let skin = [0.85, 0.65, 0.5];
            let shirt = [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)];
            draw_rect(&mut img, cx.saturating_sub(size / 10), size / 2, size / 5, size / 2, shirt);
            draw_disc(&mut img, cx, size * 2 / 5, size / 9, skin);
        }
        3 => {
            // indoor scene: wall/floor split with furniture rectangles
            let wall = [0.75, 0.72, 0.65];
            let floor = [0.45, 0.35, 0.25];
            draw_rect(&mut img, 0, 0, size, (2 * size) / 3, wall);
            draw_rect(&mut img, 0, (2 * size) / 3, size, size - (2 * size) / 3, floor);
            for _ in 0..rng.random_range(2..5) {
                let w = rng.random_range(size / 8..size / 3);
                let h = rng.random_range(size / 8..size / 3);
                let x0 = rng.random_range(0..size - w);
                let y0 = rng.random_range(size / 3..size - h);
                let color = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.6), rng.random_range(0.1..0.5)];
                draw_rect(&mut img, x0, y0, w, h, color);
            }
        }
        4 => {
            // landscape: banded horizon
            let horizon = rng.random_range(size / 3..(2 * size) / 3);
            for y in 0..size {
                let color = if y < horizon {
                    let t = y as f32 / horizon as f32;
                    [0.4 + 0.3 * t, 0.6 + 0.2 * t, 0.9]
                } else {
                    let t = (y - horizon) as f32 / (size - horizon) as f32;
                    [0.3 - 0.1 * t, 0.5 - 0.2 * t, 0.2]
                };
                for x in 0..size {
                    img.set_rgb(x, y, color);
                }
            }
        }
        5 => {
            // night scene: sparse bright points on near-black
            fill_vgradient(&mut img, [0.02, 0.02, 0.08], [0.05, 0.05, 0.12]);
            for _ in 0..rng.random_range(10..30) {
                let x = rng.random_range(0..size);
                let y = rng.random_range(0..size);
                let b = rng.random_range(0.7..1.0);
                img.set_rgb(x, y, [b, b, b * 0.9]);
                if x + 1 < size {
                    img.set_rgb(x + 1, y, [b * 0.6, b * 0.6, b * 0.5]);
                }
            }
        }
        6 => {
            // plant: green stalks
            fill_vgradient(&mut img, [0.55, 0.6, 0.4], [0.35, 0.45, 0.25]);
            for _ in 0..rng.random_range(5..10) {
                let x = rng.random_range(0..size);
                let w = rng.random_range(1..size / 16 + 2);
                let h = rng.random_range(size / 3..size);
                let g = rng.random_range(0.4..0.8);
                draw_rect(&mut img, x.min(size - w), size - h, w, h, [0.1, g, 0.15]);
            }
        }
        7 => {
            // still-life: round objects on a table edge
            fill_vgradient(&mut img, [0.3, 0.25, 0.2], [0.2, 0.15, 0.1]);
            draw_rect(&mut img, 0, (3 * size) / 5, size, size - (3 * size) / 5, [0.5, 0.35, 0.2]);
            for _ in 0..rng.random_range(2..5) {
                let r = rng.random_range(size / 12..size / 6);
                let x = rng.random_range(r..size - r);
                let y = (3 * size) / 5;
                let color = [rng.random_range(0.5..0.95), rng.random_range(0.2..0.7), rng.random_range(0.1..0.4)];
                draw_disc(&mut img, x, y.saturating_sub(r / 2), r, color);
            }
        }
        _ => {
            // others: smooth value-noise texture
            let cell = size / 8;
            let gw = size / cell + 2;
            let grid: Vec<[f32; 3]> = (0..gw * gw)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let gx = x / cell;
                    let gy = y / cell;
                    let fx = (x % cell) as f32 / cell as f32;
                    let fy = (y % cell) as f32 / cell as f32;
                    let mut color = [0.0f32; 3];
                    for c in 0..3 {
                        let a = grid[gy * gw + gx][c];
                        let b = grid[gy * gw + gx + 1][c];
                        let d = grid[(gy + 1) * gw + gx][c];
                        let e = grid[(gy + 1) * gw + gx + 1][c];
                        color[c] = a * (1.0 - fx) * (1.0 - fy)
                            + b * fx * (1.0 - fy)
                            + d * (1.0 - fx) * fy
                            + e * fx * fy;
                    }
                    img.set_rgb(x, y, color);
                }
            }
        }
    }
    img.clamp_in_place();
    img
}

fn fill_vgradient(img: &mut ImageBuf, top: [f32; 3], bottom: [f32; 3]) {
    let h = img.height;
    for y in 0..h {
        let t = y as f32 / (h.max(2) - 1) as f32;
        let color = [
            top[0] + (bottom[0] - top[0]) * t,
            top[1] + (bottom[1] - top[1]) * t,
            top[2] + (bottom[2] - top[2]) * t,
        ];
        for x in 0..img.width {
            img.set_rgb(x, y, color);
        }
    }
}

fn draw_rect(img: &mut ImageBuf, x0: usize, y0: usize, w: usize, h: usize, color: [f32; 3]) {
    for y in y0..(y0 + h).min(img.height) {
        for x in x0..(x0 + w).min(img.width) {
            img.set_rgb(x, y, color);
        }
    }
}

fn draw_disc(img: &mut ImageBuf, cx: usize, cy: usize, r: usize, color: [f32; 3]) {
    let r2 = (r * r) as isize;
    for y in cy.saturating_sub(r)..(cy + r).min(img.height) {
        for x in cx.saturating_sub(r)..(cx + r).min(img.width) {
            let dx = x as isize - cx as isize;
            let dy = y as isize - cy as isize;
            if dx * dx + dy * dy <= r2 {
                img.set_rgb(x, y, color);
            }
        }
    }
}

fn draw_ellipse(img: &mut ImageBuf, rng: &mut ChaCha8Rng, color: [f32; 3], radius_frac: std::ops::Range<f64>) {
    let size = img.width;
    let rx = (size as f64 * rng.random_range(radius_frac.clone())) as usize + 1;
    let ry = (size as f64 * rng.random_range(radius_frac)) as usize + 1;
    let cx = rng.random_range(rx..size.saturating_sub(rx).max(rx + 1));
    let cy = rng.random_range(ry..size.saturating_sub(ry).max(ry + 1));
    for y in cy.saturating_sub(ry)..(cy + ry).min(img.height) {
        for x in cx.saturating_sub(rx)..(cx + rx).min(img.width) {
            let dx = (x as f64 - cx as f64) / rx as f64;
            let dy = (y as f64 - cy as f64) / ry as f64;
            if dx * dx + dy * dy <= 1.0 {
                img.set_rgb(x, y, color);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum ImageSource {
    Memory(ImageBuf),
    Path(PathBuf),
}

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub source: ImageSource,
    pub mos: f64,
    pub scene: Option<usize>,
    pub distortion: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<SampleRecord>,
    /// Declared MOS range; MOS values are rescaled to `[0, 100]` from it.
    pub mos_range: (f64, f64),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Decode or copy the image of record `i`.
    pub fn load_image(&self, i: usize) -> Result<ImageBuf> {
        match &self.records[i].source {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::Path(p) => ImageBuf::load(p),
        }
    }

    /// Replace path-backed records with decoded in-memory images.
    pub fn materialize(&mut self) -> Result<()> {
        for i in 0..self.records.len() {
            if let ImageSource::Path(p) = &self.records[i].source {
                let img = ImageBuf::load(p)?;
                self.records[i].source = ImageSource::Memory(img);
            }
        }
        Ok(())
    }

    /// MOS of record `i` rescaled from the declared range to `[0, 100]`.
    pub fn normalized_mos(&self, i: usize) -> f64 {
        let (lo, hi) = self.mos_range;
        let v = self.records[i].mos;
        if hi > lo {
            (v - lo) / (hi - lo) * 100.0
        } else {
            v
        }
    }

    /// Subset view (clones the selected records, keeps name and range).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            mos_range: self.mos_range,
        }
    }

    /// Stable digest over record metadata (paths or pixels, MOS, labels).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.name.as_bytes());
        hasher.update(self.mos_range.0.to_le_bytes());
        hasher.update(self.mos_range.1.to_le_bytes());
        for r in &self.records {
            match &r.source {
                ImageSource::Path(p) => hasher.update(p.to_string_lossy().as_bytes()),
                ImageSource::Memory(img) => {
                    hasher.update((img.width as u64).to_le_bytes());
                    // Hash a sparse pixel sample; full pixels would be slow
                    // for large in-memory sets.
                    for v in img.data().iter().step_by(97) {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
            hasher.update(r.mos.to_le_bytes());
            hasher.update([
                r.scene.map(|s| s as u8 + 1).unwrap_or(0),
                r.distortion.map(|d| d as u8 + 1).unwrap_or(0),
            ]);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Build a synthetic dataset of `n_images` in-memory images of side
/// `image_size`. Scene families rotate through the taxonomy; distortion
/// kind and severity are drawn per image; pseudo-MOS is
/// `100 * (1 - severity)` plus small noise, clipped to `[0, 100]`.
///
/// The `others` distortion is an identity proxy, so its severity is kept
/// near zero to keep the pseudo-MOS consistent with the visible content.
pub fn synthesize_dataset(n_images: usize, seed: u64, image_size: usize) -> Dataset {
    let n_scenes = scene_taxonomy().len();
    let n_dist = distortion_taxonomy().len();
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut r = rng::rng_for(seed, i as u64);
        let family = i % n_scenes;
        let base = render_scene(family, image_size, &mut r);
        let kind = r.random_range(0..n_dist);
        let severity = if kind == n_dist - 1 {
            r.random_range(0.0..0.1)
        } else {
            r.random_range(0.0..1.0)
        };
        let img = apply_distortion(&base, kind, severity, rng::mix(seed, 0x5EED ^ i as u64))
            .expect("synthetic distortion parameters are in range");
        let mos = (100.0 * (1.0 - severity) + r.random_range(-2.0..2.0)).clamp(0.0, 100.0);
        records.push(SampleRecord {
            source: ImageSource::Memory(img),
            mos,
            scene: Some(family),
            distortion: Some(kind),
        });
    }
    Dataset {
        name: format!("synthetic-{n_images}-{seed}"),
        records,
        mos_range: (0.0, 100.0),
    }
}

/// Severity drawn for record `i` can be recovered from the MOS; used by
/// tests that check the MOS follows severity.
pub fn synthetic_severity(record: &SampleRecord) -> f64 {
    1.0 - record.mos / 100.0
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

/// Load a CSV manifest with header `path,mos[,scene,distortion]`.
///
/// Image paths are resolved relative to the manifest's directory and must
/// exist. Label columns are optional; when present, values must name a
/// taxonomy class (empty cells mean unlabeled). The declared MOS range is
/// the observed min/max.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {}", path.display(), e)))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("manifest {}: {}", path.display(), e)))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(path_col), Some(mos_col)) = (col("path"), col("mos")) else {
        return Err(Error::Data(format!(
            "manifest {} must have `path` and `mos` columns, got {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        )));
    };
    let scene_col = col("scene");
    let dist_col = col("distortion");

    let mut records = Vec::new();
    for (rowno, row) in reader.records().enumerate() {
        let row = row.map_err(|e| {
            Error::Data(format!("manifest {} row {}: {}", path.display(), rowno + 2, e))
        })?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let img_path = base.join(field(path_col));
        if !img_path.is_file() {
            return Err(Error::Data(format!(
                "manifest {} row {}: image {} does not exist",
                path.display(),
                rowno + 2,
                img_path.display()
            )));
        }
        let mos: f64 = field(mos_col).parse().map_err(|_| {
            Error::Data(format!(
                "manifest {} row {}: invalid mos {:?}",
                path.display(),
                rowno + 2,
                field(mos_col)
            ))
        })?;
        if !mos.is_finite() {
            return Err(Error::Data(format!(
                "manifest {} row {}: non-finite mos",
                path.display(),
                rowno + 2
            )));
        }
        let parse_label = |c: Option<usize>, tax: &Taxonomy| -> Result<Option<usize>> {
            let Some(c) = c else { return Ok(None) };
            let raw = field(c);
            if raw.is_empty() {
                return Ok(None);
            }
            tax.index_of(raw).map(Some).ok_or_else(|| {
                Error::Data(format!(
                    "manifest {} row {}: unknown {} class {:?}",
                    path.display(),
                    rowno + 2,
                    tax.kind(),
                    raw
                ))
            })
        };
        use crate::config::Taxonomy;
        let scene = parse_label(scene_col, scene_taxonomy())?;
        let distortion = parse_label(dist_col, distortion_taxonomy())?;
        records.push(SampleRecord {
            source: ImageSource::Path(img_path),
            mos,
            scene,
            distortion,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} contains no records",
            path.display()
        )));
    }
    let lo = records.iter().map(|r| r.mos).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.mos).fold(f64::NEG_INFINITY, f64::max);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    Ok(Dataset {
        name,
        records,
        mos_range: if hi > lo { (lo, hi) } else { (0.0, 100.0) },
    })
}

/// Write a dataset to `dir`: one PNG per record under `images/` plus a
/// `manifest.csv` referencing them. Returns the manifest path.
pub fn export_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut wtr = csv::Writer::from_path(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot write {}: {}", manifest_path.display(), e)))?;
    wtr.write_record(["path", "mos", "scene", "distortion"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for (i, rec) in ds.records.iter().enumerate() {
        let rel = format!("images/im_{i:05}.png");
        let img = ds.load_image(i)?;
        img.save_png(dir.join(&rel))?;
        let scene = rec.scene.map(|s| scene_taxonomy().name(s)).unwrap_or("");
        let dist = rec
            .distortion
            .map(|d| distortion_taxonomy().name(d))
            .unwrap_or("");
        wtr.write_record([rel.as_str(), &rec.mos.to_string(), scene, dist])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    wtr.flush()
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Sample `count` axis-aligned square crops of side `size` at uniform
/// positions.
pub fn random_crops(
    img: &ImageBuf,
    count: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImageBuf>> {
    if size == 0 || size > img.width() || size > img.height() {
        return Err(Error::Data(format!(
            "crop size {} invalid for image {}x{}",
            size,
            img.width(),
            img.height()
        )));
    }
    (0..count)
        .map(|_| {
            let x0 = rng.random_range(0..=img.width() - size);
            let y0 = rng.random_range(0..=img.height() - size);
            img.crop(x0, y0, size)
        })
        .collect()
}
