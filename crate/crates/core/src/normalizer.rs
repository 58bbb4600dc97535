//! Geometric normalization of ear crops and the square detector frames used
//! by the landmark networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{affine_resample, AffineMap, GrayImage};
use crate::landmarks::{principal_frame, LandmarkSet, PoseFrame, NUM_LANDMARKS};

pub const NORMALIZED_SIZE: usize = 128;
/// Output pixel the ear centre lands on, in both axes.
pub const NORMALIZED_CENTER: f64 = 64.0;
pub const DETECTOR_SIZE: usize = 96;
/// Detector crops cover this many ear sizes, leaving room for the
/// scale/translation/rotation augmentation.
pub const DETECTOR_MARGIN: f64 = 2.0;

const ZERO_WIDTH: f64 = 1e-12;

/// Map from normalized output pixels to source pixels.
///
/// Along `axis1` a source distance of `2·sqrt(lambda1)` covers the 64 output
/// pixels between centre and top; along `axis2`, `2·sqrt(lambda2)` covers the
/// 64 pixels between centre and side.
pub fn normalization_map(frame: &PoseFrame) -> Result<AffineMap> {
    if !(frame.lambda2 > ZERO_WIDTH) {
        return Err(Error::ZeroWidth(frame.lambda2));
    }
    let half = NORMALIZED_SIZE as f64 / 2.0;
    let s1 = 2.0 * frame.lambda1.sqrt() / half;
    let s2 = 2.0 * frame.lambda2.sqrt() / half;
    let (a1, a2) = (frame.axis1, frame.axis2);
    let linear = [[a2[0] * s2, -a1[0] * s1], [a2[1] * s2, -a1[1] * s1]];
    let c = NORMALIZED_CENTER;
    let translation = [
        frame.center[0] - c * (linear[0][0] + linear[0][1]),
        frame.center[1] - c * (linear[1][0] + linear[1][1]),
    ];
    Ok(AffineMap::new(linear, translation))
}

pub fn normalize_with_frame(img: &GrayImage, frame: &PoseFrame) -> Result<(GrayImage, AffineMap)> {
    let map = normalization_map(frame)?;
    let out = affine_resample(img, &map, NORMALIZED_SIZE, NORMALIZED_SIZE)?;
    Ok((out, map))
}

/// Normalized 128×128 ear together with the output→source map.
pub fn normalize_geometric_with_map(img: &GrayImage, lm: &LandmarkSet) -> Result<(GrayImage, AffineMap)> {
    let frame = principal_frame(lm)?;
    normalize_with_frame(img, &frame)
}

pub fn normalize_geometric(img: &GrayImage, lm: &LandmarkSet) -> Result<GrayImage> {
    normalize_geometric_with_map(img, lm).map(|(img, _)| img)
}

/// Axis-aligned square region of a source image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub center: [f64; 2],
    /// Side of the square, in source pixels.
    pub size: f64,
}

impl CropWindow {
    pub fn new(center: [f64; 2], size: f64) -> Result<Self> {
        if !(size > 0.0) || !size.is_finite() {
            return Err(Error::BadWindow(size));
        }
        Ok(CropWindow { center, size })
    }

    /// Centre and size of the ear as given by annotations: bbox midpoint and
    /// longer bbox side.
    pub fn around_ear(lm: &LandmarkSet) -> CropWindow {
        let (lo, hi) = lm.bbox();
        CropWindow {
            center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
            size: (hi[0] - lo[0]).max(hi[1] - lo[1]),
        }
    }

    /// Window from an `(x, y, w, h)` box with top-left origin.
    pub fn from_bbox(x: f64, y: f64, w: f64, h: f64) -> Result<CropWindow> {
        CropWindow::new([x + 0.5 * w, y + 0.5 * h], w.max(h))
    }

    pub fn scaled(&self, factor: f64) -> CropWindow {
        CropWindow {
            center: self.center,
            size: self.size * factor,
        }
    }
}

/// Square, possibly rotated, region that a landmark network sees. Landmark
/// targets are expressed in its normalized coordinates, `[-1, 1]` edge to edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorFrame {
    pub center: [f64; 2],
    pub size: f64,
    /// Image-space directions of the frame's x and y axes (unit, orthogonal).
    pub x_axis: [f64; 2],
    pub y_axis: [f64; 2],
}

impl DetectorFrame {
    pub fn from_window(win: &CropWindow) -> DetectorFrame {
        DetectorFrame {
            center: win.center,
            size: win.size,
            x_axis: [1.0, 0.0],
            y_axis: [0.0, 1.0],
        }
    }

    /// Frame aligned with a pose: its y axis points down the ear.
    pub fn from_pose(frame: &PoseFrame, size: f64) -> DetectorFrame {
        DetectorFrame {
            center: frame.center,
            size,
            x_axis: frame.axis2,
            y_axis: [-frame.axis1[0], -frame.axis1[1]],
        }
    }

    /// Normalized coordinates → image coordinates.
    pub fn normalized_to_image(&self) -> AffineMap {
        let h = self.size / 2.0;
        AffineMap::new(
            [[self.x_axis[0] * h, self.y_axis[0] * h], [self.x_axis[1] * h, self.y_axis[1] * h]],
            self.center,
        )
    }

    /// Crop pixels (`n × n` grid) → image coordinates.
    pub fn pixel_map(&self, n: usize) -> AffineMap {
        let step = 2.0 / n as f64;
        let to_norm = AffineMap::new([[step, 0.0], [0.0, step]], [0.5 * step - 1.0, 0.5 * step - 1.0]);
        self.normalized_to_image().compose(&to_norm)
    }

    pub fn crop(&self, img: &GrayImage, n: usize) -> Result<GrayImage> {
        if !(self.size > 0.0) {
            return Err(Error::BadWindow(self.size));
        }
        affine_resample(img, &self.pixel_map(n), n, n)
    }

    /// Landmarks as a flat `[x1, y1, ...]` vector in normalized coordinates.
    pub fn targets(&self, lm: &LandmarkSet) -> Result<Vec<f64>> {
        let inv = self.normalized_to_image().inverse()?;
        Ok(lm.points().iter().flat_map(|&p| inv.apply(p)).collect())
    }

    pub fn landmarks_from_targets(&self, targets: &[f64]) -> Result<LandmarkSet> {
        if targets.len() != 2 * NUM_LANDMARKS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} landmark outputs, got {}",
                2 * NUM_LANDMARKS,
                targets.len()
            )));
        }
        let m = self.normalized_to_image();
        LandmarkSet::new(targets.chunks_exact(2).map(|c| m.apply([c[0], c[1]])).collect())
    }
}

/// Map from an `n × n` crop of `win` to source pixels. Pixel `i` of the
/// source covers `[i - 0.5, i + 0.5]`.
pub fn window_map(win: &CropWindow, n: usize) -> AffineMap {
    DetectorFrame::from_window(win).pixel_map(n)
}

pub fn crop_to_size(img: &GrayImage, win: &CropWindow, n: usize) -> Result<GrayImage> {
    if !(win.size > 0.0) {
        return Err(Error::BadWindow(win.size));
    }
    affine_resample(img, &window_map(win, n), n, n)
}

/// Square window resampled to the 96×96 detector input, black outside the source.
pub fn crop_detector_input(img: &GrayImage, win: &CropWindow) -> Result<GrayImage> {
    crop_to_size(img, win, DETECTOR_SIZE)
}

/// Perturb a window: centre offset uniform in `±pct·size` per axis, size
/// scaled by a uniform factor in `[1 - pct, 1 + pct]`.
pub fn jitter_window(win: &CropWindow, pct: f64, seed: u64) -> Result<CropWindow> {
    if !(0.0..=1.0).contains(&pct) {
        return Err(Error::BadPct(pct));
    }
    if pct == 0.0 {
        return Ok(*win);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = rng.gen_range(-pct..=pct) * win.size;
    let dy = rng.gen_range(-pct..=pct) * win.size;
    let factor = rng.gen_range(1.0 - pct..=1.0 + pct);
    CropWindow::new([win.center[0] + dx, win.center[1] + dy], win.size * factor)
        .map_err(|_| Error::BadPct(pct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::bilinear_sample;

    fn upright_set(sx: f64, sy: f64, cx: f64, cy: f64) -> LandmarkSet {
        // symmetric ellipse samples; std along y = sy/sqrt(2)
        let pts = (0..NUM_LANDMARKS)
            .map(|i| {
                let t = i as f64 / NUM_LANDMARKS as f64 * std::f64::consts::TAU;
                [cx + sx * t.sin(), cy - sy * t.cos()]
            })
            .collect();
        LandmarkSet::new(pts).unwrap()
    }

    fn frame(l1: f64, l2: f64, center: [f64; 2]) -> PoseFrame {
        PoseFrame {
            center,
            axis1: [0.0, -1.0],
            axis2: [1.0, 0.0],
            lambda1: l1,
            lambda2: l2,
            extent: [0.0, 0.0],
        }
    }

    #[test]
    fn isotropic_unit_scale_is_centered_crop() {
        let img = GrayImage::from_fn(300, 300, |x, y| ((x * 7 + y * 13) % 97) as f32 / 97.0).unwrap();
        let (out, map) = normalize_with_frame(&img, &frame(1024.0, 1024.0, [150.0, 140.0])).unwrap();
        assert_eq!(map.linear, [[1.0, 0.0], [0.0, 1.0]]);
        for v in 0..128 {
            for u in 0..128 {
                assert_eq!(out.get(u, v), img.get(u + 86, v + 76));
            }
        }
    }

    #[test]
    fn anisotropic_widening() {
        let map = normalization_map(&frame(1024.0, 256.0, [0.0, 0.0])).unwrap();
        // one output pixel vertically = 1 source pixel, horizontally = 0.5
        assert!((map.linear[1][1] - 1.0).abs() < 1e-12);
        assert!((map.linear[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn center_lands_on_64_and_axes_respected() {
        let lm = upright_set(20.0, 45.0, 100.0, 90.0)
            .map(&AffineMap::rotation_about(0.4, [100.0, 90.0]));
        let f = principal_frame(&lm).unwrap();
        let map = normalization_map(&f).unwrap();
        let inv = map.inverse().unwrap();
        let c = inv.apply(f.center);
        assert!((c[0] - 64.0).abs() < 1e-6 && (c[1] - 64.0).abs() < 1e-6);
        let top = [
            f.center[0] + 2.0 * f.lambda1.sqrt() * f.axis1[0],
            f.center[1] + 2.0 * f.lambda1.sqrt() * f.axis1[1],
        ];
        let t = inv.apply(top);
        assert!((t[0] - 64.0).abs() < 1e-6 && t[1].abs() < 1e-6);
        let side = [
            f.center[0] + 2.0 * f.lambda2.sqrt() * f.axis2[0],
            f.center[1] + 2.0 * f.lambda2.sqrt() * f.axis2[1],
        ];
        let s = inv.apply(side);
        assert!((s[0] - 128.0).abs() < 1e-6 && (s[1] - 64.0).abs() < 1e-6);
    }

    #[test]
    fn zero_width_rejected() {
        assert!(matches!(
            normalization_map(&frame(100.0, 0.0, [0.0, 0.0])),
            Err(Error::ZeroWidth(_))
        ));
    }

    #[test]
    fn grid_aligned_window_copies_pixels() {
        let img = GrayImage::from_fn(130, 120, |x, y| ((x * 3 + y * 5) % 101) as f32 / 101.0).unwrap();
        let win = CropWindow::new([10.0 + 47.5, 7.0 + 47.5], 96.0).unwrap();
        let out = crop_detector_input(&img, &win).unwrap();
        for v in 0..96 {
            for u in 0..96 {
                assert_eq!(out.get(u, v), img.get(u + 10, v + 7));
            }
        }
    }

    #[test]
    fn oversized_window_pads_black() {
        let img = GrayImage::filled(96, 96, 0.8).unwrap();
        let win = CropWindow::new([47.5, 47.5], 192.0).unwrap();
        let out = crop_detector_input(&img, &win).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(95, 95), 0.0);
        assert_eq!(out.get(48, 48), 0.8);
        // image occupies the central half of the crop
        let lit = out.data().iter().filter(|&&v| v > 0.0).count();
        assert!((lit as f64 - 48.0 * 48.0).abs() <= 2.0 * 49.0);
    }

    #[test]
    fn window_scale_matches_direct_bilinear() {
        let img = GrayImage::from_fn(200, 160, |x, y| (x as f32 * 0.004 + y as f32 * 0.001).min(1.0)).unwrap();
        for &size in &[40.0, 96.0, 150.0] {
            let win = CropWindow::new([90.3, 77.9], size).unwrap();
            let out = crop_detector_input(&img, &win).unwrap();
            let s = size / 96.0;
            for &(u, v) in &[(0usize, 0usize), (17, 80), (95, 95), (48, 3)] {
                let x = 90.3 - size / 2.0 + (u as f64 + 0.5) * s;
                let y = 77.9 - size / 2.0 + (v as f64 + 0.5) * s;
                assert!((out.get(u, v) - bilinear_sample(&img, x, y)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_windows() {
        assert!(matches!(CropWindow::new([0.0, 0.0], 0.0), Err(Error::BadWindow(_))));
        let img = GrayImage::filled(4, 4, 0.0).unwrap();
        let win = CropWindow {
            center: [0.0, 0.0],
            size: -1.0,
        };
        assert!(matches!(crop_detector_input(&img, &win), Err(Error::BadWindow(_))));
    }

    #[test]
    fn jitter_bounds_and_determinism() {
        let win = CropWindow::new([50.0, 60.0], 80.0).unwrap();
        assert_eq!(jitter_window(&win, 0.0, 7).unwrap(), win);
        for seed in 0..200 {
            let a = jitter_window(&win, 0.2, seed).unwrap();
            assert_eq!(a, jitter_window(&win, 0.2, seed).unwrap());
            assert!((a.center[0] - 50.0).abs() <= 16.0 + 1e-9);
            assert!((a.center[1] - 60.0).abs() <= 16.0 + 1e-9);
            assert!(a.size >= 64.0 - 1e-9 && a.size <= 96.0 + 1e-9);
        }
        assert!(matches!(jitter_window(&win, 1.5, 0), Err(Error::BadPct(_))));
        assert!(matches!(jitter_window(&win, -0.1, 0), Err(Error::BadPct(_))));
    }

    /// Asymptotic Kolmogorov distribution tail, `P(K > x)`.
    fn kolmogorov_pvalue(d: f64, n: usize) -> f64 {
        let sqrt_n = (n as f64).sqrt();
        let x = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
        let mut p = 0.0;
        for k in 1..100 {
            let k = k as f64;
            p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn jitter_offsets_are_uniform() {
        let win = CropWindow::new([0.0, 0.0], 1.0).unwrap();
        let n = 10_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|seed| jitter_window(&win, 0.4, seed as u64).unwrap().center[0])
            .collect();
        xs.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = (x + 0.4) / 0.8;
            d = d.max((cdf - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        assert!(kolmogorov_pvalue(d, n) > 0.01, "KS D = {d}");
    }

    #[test]
    fn detector_frame_targets_roundtrip() {
        let lm = upright_set(20.0, 40.0, 70.0, 80.0).map(&AffineMap::rotation_about(0.3, [70.0, 80.0]));
        let pose = principal_frame(&lm).unwrap();
        let f = DetectorFrame::from_pose(&pose, 2.0 * pose.extent[0]);
        let t = f.targets(&lm).unwrap();
        assert!(t.iter().all(|v| v.abs() <= 0.5 + 1e-9));
        let back = f.landmarks_from_targets(&t).unwrap();
        for (p, q) in back.points().iter().zip(lm.points()) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }
}
