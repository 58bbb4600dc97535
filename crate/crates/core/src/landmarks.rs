//! Landmark sets, PCA pose frames, upright alignment and landmark-error
//! metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{affine_resample, AffineMap, GrayImage};

pub const NUM_LANDMARKS: usize = 55;

/// Ordered ear landmarks in image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl TryFrom<Vec<[f64; 2]>> for LandmarkSet {
    type Error = Error;

    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        LandmarkSet::new(points)
    }
}

impl From<LandmarkSet> for Vec<[f64; 2]> {
    fn from(set: LandmarkSet) -> Self {
        set.points
    }
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidLandmarks(format!(
                "expected {NUM_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLandmarks("non-finite coordinate".into()));
        }
        Ok(LandmarkSet { points })
    }

    /// From `x1 y1 x2 y2 ...`.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 2 * NUM_LANDMARKS {
            return Err(Error::InvalidLandmarks(format!(
                "expected {} numbers, got {}",
                2 * NUM_LANDMARKS,
                values.len()
            )));
        }
        Self::new(values.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn map(&self, m: &AffineMap) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|&p| m.apply(p)).collect(),
        }
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi[0] - lo[0]).hypot(hi[1] - lo[1])
    }

    /// Parse either a JSON array of `[x, y]` pairs or whitespace-separated
    /// `x1 y1 ... x55 y55` text.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('[') {
            let points: Vec<[f64; 2]> = serde_json::from_str(text)?;
            return Self::new(points);
        }
        let mut values = Vec::with_capacity(2 * NUM_LANDMARKS);
        for (line_no, line) in text.lines().enumerate() {
            for (col, tok) in line.split_whitespace().enumerate() {
                let v: f64 = tok.parse().map_err(|_| {
                    Error::parse(line_no as u64 + 1, col as u64 + 1, format!("not a number: `{tok}`"))
                })?;
                values.push(v);
            }
        }
        Self::from_flat(&values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.points).expect("finite points serialize")
    }
}

/// PCA frame of a landmark cloud.
///
/// `axis1` is the dominant direction, signed to point towards the image top
/// (`y <= 0`, ties broken towards `x > 0`). `axis2` is `axis1` turned a
/// quarter clockwise on screen, so `(axis2, -axis1)` is a proper rotation of
/// the image axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    /// Centre of the oriented bounding box.
    pub center: [f64; 2],
    pub axis1: [f64; 2],
    pub axis2: [f64; 2],
    pub lambda1: f64,
    pub lambda2: f64,
    /// Extent of the cloud along `axis1` and `axis2`.
    pub extent: [f64; 2],
}

impl PoseFrame {
    /// Rotation angle that takes the image "up" direction `(0, -1)` onto `axis1`.
    pub fn angle(&self) -> f64 {
        // axis1 = (sin a, -cos a)
        self.axis1[0].atan2(-self.axis1[1])
    }

    /// Takes frame coordinates `(along axis2, along -axis1)` relative to the
    /// centre back to image coordinates.
    pub fn to_image(&self) -> AffineMap {
        AffineMap::new(
            [
                [self.axis2[0], -self.axis1[0]],
                [self.axis2[1], -self.axis1[1]],
            ],
            self.center,
        )
    }
}

const DEGENERATE_TRACE: f64 = 1e-12;
const DEGENERATE_GAP: f64 = 1e-12;

/// Closed-form eigen-decomposition of the symmetric 2×2 matrix
/// `[[a, b], [b, c]]`: `(lambda1, lambda2, unit eigenvector of lambda1)`.
pub(crate) fn sym2_eigen(a: f64, b: f64, c: f64) -> (f64, f64, [f64; 2]) {
    let mean = 0.5 * (a + c);
    let radius = (0.5 * (a - c)).hypot(b);
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    (mean + radius, mean - radius, [theta.cos(), theta.sin()])
}

pub fn principal_frame(lm: &LandmarkSet) -> Result<PoseFrame> {
    frame_of_points(lm.points())
}

pub(crate) fn frame_of_points(points: &[[f64; 2]]) -> Result<PoseFrame> {
    let n = points.len() as f64;
    let mean = points
        .iter()
        .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
    let mean = [mean[0] / n, mean[1] / n];
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p[0] - mean[0];
        let dy = p[1] - mean[1];
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let (sxx, sxy, syy) = (sxx / n, sxy / n, syy / n);
    let trace = sxx + syy;
    if !(trace > DEGENERATE_TRACE) {
        return Err(Error::DegenerateLandmarks(format!(
            "covariance trace {trace:e} is too small"
        )));
    }
    let (l1, l2, mut axis1) = sym2_eigen(sxx, sxy, syy);
    if l1 - l2 < DEGENERATE_GAP * trace {
        return Err(Error::DegenerateLandmarks(
            "isotropic landmark cloud has no dominant orientation".into(),
        ));
    }
    if axis1[1] > 0.0 || (axis1[1] == 0.0 && axis1[0] < 0.0) {
        axis1 = [-axis1[0], -axis1[1]];
    }
    let axis2 = [-axis1[1], axis1[0]];

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        let proj = [d[0] * axis1[0] + d[1] * axis1[1], d[0] * axis2[0] + d[1] * axis2[1]];
        for k in 0..2 {
            lo[k] = lo[k].min(proj[k]);
            hi[k] = hi[k].max(proj[k]);
        }
    }
    let m1 = 0.5 * (lo[0] + hi[0]);
    let m2 = 0.5 * (lo[1] + hi[1]);
    let center = [
        mean[0] + axis1[0] * m1 + axis2[0] * m2,
        mean[1] + axis1[1] * m1 + axis2[1] * m2,
    ];
    Ok(PoseFrame {
        center,
        axis1,
        axis2,
        lambda1: l1,
        lambda2: l2.max(0.0),
        extent: [hi[0] - lo[0], hi[1] - lo[1]],
    })
}

/// Rotation about the ear centre that brings `axis1` to the image vertical.
/// Returns the map from aligned coordinates back to source coordinates.
pub fn upright_map(frame: &PoseFrame) -> AffineMap {
    // source = R^T (aligned - c) + c with R rows (axis2, -axis1).
    let a1 = frame.axis1;
    let a2 = frame.axis2;
    let rt = [[a2[0], -a1[0]], [a2[1], -a1[1]]];
    let c = frame.center;
    let t = [
        c[0] - (rt[0][0] * c[0] + rt[0][1] * c[1]),
        c[1] - (rt[1][0] * c[0] + rt[1][1] * c[1]),
    ];
    AffineMap::new(rt, t)
}

/// Rotate image and landmarks so the ear stands upright. The returned map
/// takes aligned coordinates back to the source image.
pub fn upright_align(img: &GrayImage, lm: &LandmarkSet) -> Result<(GrayImage, LandmarkSet, AffineMap)> {
    let frame = principal_frame(lm)?;
    let back = upright_map(&frame);
    let forward = back.inverse()?;
    let aligned = affine_resample(img, &back, img.width(), img.height())?;
    Ok((aligned, lm.map(&forward), back))
}

/// Mean point-to-point distance divided by the ground-truth bbox diagonal.
pub fn normalized_error(pred: &LandmarkSet, truth: &LandmarkSet, truth_bbox_diagonal: f64) -> Result<f64> {
    if !(truth_bbox_diagonal > 0.0) {
        return Err(Error::BadDiagonal(truth_bbox_diagonal));
    }
    let total: f64 = pred
        .points
        .iter()
        .zip(&truth.points)
        .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
        .sum();
    Ok(total / NUM_LANDMARKS as f64 / truth_bbox_diagonal)
}

/// Cumulative error distribution: fraction of `errors` at or below each threshold.
pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("landmark errors"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let count = sorted.partition_point(|&e| e <= t);
            (t, count as f64 / n)
        })
        .collect())
}
