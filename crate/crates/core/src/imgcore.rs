//! Grayscale images, affine maps and the resampling kernels the rest of the
//! pipeline is built on.
//!
//! Pixel `(x, y)` sits at integer coordinates; `x` grows to the right and `y`
//! grows downwards. Intensities are stored as `f32` in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps with `|det|` at or below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "expected {} samples for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite sample at index {i}")));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    /// Image with every pixel set to `value`.
    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_square(&self, side: usize) -> bool {
        self.width == side && self.height == side
    }

    pub(crate) fn expect_size(&self, w: usize, h: usize) -> Result<()> {
        if self.width != w || self.height != h {
            return Err(Error::BadInputSize {
                expected_w: w,
                expected_h: h,
                got_w: self.width,
                got_h: self.height,
            });
        }
        Ok(())
    }
}

/// `p ↦ linear · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        linear: [[1.0, 0.0], [0.0, 1.0]],
        translation: [0.0, 0.0],
    };

    pub fn new(linear: [[f64; 2]; 2], translation: [f64; 2]) -> Self {
        AffineMap {
            linear,
            translation,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineMap::new([[1.0, 0.0], [0.0, 1.0]], [tx, ty])
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        AffineMap::new([[sx, 0.0], [0.0, sy]], [0.0, 0.0])
    }

    /// Counter-clockwise rotation by `angle` radians in a y-down frame, which
    /// looks clockwise on screen.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        AffineMap::new([[c, -s], [s, c]], [0.0, 0.0])
    }

    /// Rotation by `angle` about `center`.
    pub fn rotation_about(angle: f64, center: [f64; 2]) -> Self {
        AffineMap::translation(center[0], center[1])
            .compose(&AffineMap::rotation(angle))
            .compose(&AffineMap::translation(-center[0], -center[1]))
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let l = &self.linear;
        [
            l[0][0] * p[0] + l[0][1] * p[1] + self.translation[0],
            l[1][0] * p[0] + l[1][1] * p[1] + self.translation[1],
        ]
    }

    pub fn det(&self) -> f64 {
        let l = &self.linear;
        l[0][0] * l[1][1] - l[0][1] * l[1][0]
    }

    pub fn is_singular(&self) -> bool {
        !(self.det().abs() > SINGULAR_DET)
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &AffineMap) -> AffineMap {
        let a = &self.linear;
        let b = &inner.linear;
        let mut linear = [[0.0; 2]; 2];
        for (i, row) in linear.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        let t = self.apply(inner.translation);
        AffineMap::new(linear, t)
    }

    pub fn inverse(&self) -> Result<AffineMap> {
        let det = self.det();
        if !(det.abs() > SINGULAR_DET) {
            return Err(Error::SingularMap { det });
        }
        let l = &self.linear;
        let inv = [
            [l[1][1] / det, -l[0][1] / det],
            [-l[1][0] / det, l[0][0] / det],
        ];
        let t = self.translation;
        let translation = [
            -(inv[0][0] * t[0] + inv[0][1] * t[1]),
            -(inv[1][0] * t[0] + inv[1][1] * t[1]),
        ];
        Ok(AffineMap::new(inv, translation))
    }

    /// Coefficients as `[a, b, tx, c, d, ty]`.
    pub fn coefficients(&self) -> [f64; 6] {
        let l = &self.linear;
        [
            l[0][0],
            l[0][1],
            self.translation[0],
            l[1][0],
            l[1][1],
            self.translation[1],
        ]
    }
}

/// Bilinear interpolation; anything outside `[0, w-1] x [0, h-1]` reads 0.
#[inline]
pub fn bilinear_sample(img: &GrayImage, x: f64, y: f64) -> f32 {
    let w = img.width;
    let h = img.height;
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return 0.0;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let d = &img.data;
    let p00 = d[y0 * w + x0];
    if fx == 0.0 && fy == 0.0 {
        return p00;
    }
    let p10 = d[y0 * w + x1];
    let p01 = d[y1 * w + x0];
    let p11 = d[y1 * w + x1];
    let top = p00 + (p10 - p00) * fx;
    let bottom = p01 + (p11 - p01) * fx;
    top + (bottom - top) * fy
}

/// Bilinear interpolation with coordinates clamped to the image border.
#[inline]
pub fn bilinear_sample_clamped(img: &GrayImage, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    bilinear_sample(img, x, y)
}

/// Resample `img` onto an `out_w x out_h` grid. `map` takes output pixel
/// coordinates to source coordinates.
pub fn affine_resample(img: &GrayImage, map: &AffineMap, out_w: usize, out_h: usize) -> Result<GrayImage> {
    let det = map.det();
    if !(det.abs() > SINGULAR_DET) {
        return Err(Error::SingularMap { det });
    }
    let mut data = Vec::with_capacity(out_w * out_h);
    let l = &map.linear;
    for v in 0..out_h {
        let vf = v as f64;
        let bx = l[0][1] * vf + map.translation[0];
        let by = l[1][1] * vf + map.translation[1];
        for u in 0..out_w {
            let uf = u as f64;
            data.push(bilinear_sample(img, l[0][0] * uf + bx, l[1][0] * uf + by));
        }
    }
    GrayImage::new(out_w, out_h, data)
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        data.extend(img.row(y).iter().rev());
    }
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

pub const CONTRAST_RANGE: (f64, f64) = (0.5, 1.5);

/// Stretch or compress intensities about the image mean, clamped to `[0, 1]`.
pub fn adjust_contrast(img: &GrayImage, factor: f64) -> Result<GrayImage> {
    if !(CONTRAST_RANGE.0..=CONTRAST_RANGE.1).contains(&factor) {
        return Err(Error::BadFactor(factor));
    }
    let mean = img.mean();
    let data = img
        .data
        .iter()
        .map(|&v| (mean + factor * (v as f64 - mean)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Load an 8-bit PNG or binary PGM. Colour inputs are reduced with
/// `0.299 R + 0.587 G + 0.114 B`.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let dynamic = image::open(path)?;
    Ok(from_dynamic(&dynamic))
}

pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    let dynamic = image::load_from_memory(bytes)?;
    Ok(from_dynamic(&dynamic))
}

fn from_dynamic(dynamic: &image::DynamicImage) -> GrayImage {
    use image::DynamicImage;
    let (width, height) = (dynamic.width() as usize, dynamic.height() as usize);
    let data: Vec<f32> = match dynamic {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0) as f32
            })
            .collect(),
    };
    GrayImage {
        width,
        height,
        data,
    }
}

pub fn to_luma8(img: &GrayImage) -> image::GrayImage {
    let raw = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length matches dimensions")
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_luma8(img).write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    to_luma8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Binary PGM (P5) encoding.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(to_luma8(img).into_raw());
    out
}
