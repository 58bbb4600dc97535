//! The trained models: landmark regressors, the left/right classifier and
//! the learned descriptor.

use serde::{Deserialize, Serialize};

use super::loss::softmax;
use super::net::{Mode, Network};
use super::tensor::Tensor;
use crate::descriptors::{Descriptor, DescriptorKind};
use crate::error::{Error, Result};
use crate::evalkit::Side;
use crate::imgcore::{AffineMap, GrayImage};
use crate::landmarks::{principal_frame, LandmarkSet};
use crate::normalizer::{CropWindow, DetectorFrame, DETECTOR_MARGIN, NORMALIZED_SIZE};

/// Zero-mean, unit-variance copy of the pixels (constant images map to 0).
pub fn standardize(img: &GrayImage) -> Vec<f32> {
    let n = img.data().len() as f64;
    let mean = img.mean();
    let var = img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    img.data().iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect()
}

/// Square image resampled to `size × size`: box average for integer
/// factors, bilinear otherwise.
pub fn fit_input(img: &GrayImage, size: usize) -> Result<GrayImage> {
    let w = img.width();
    if w != img.height() {
        return Err(Error::ShapeMismatch(format!("expected a square image, got {}x{}", w, img.height())));
    }
    if w == size {
        return Ok(img.clone());
    }
    if w % size == 0 {
        let f = w / size;
        let norm = 1.0 / (f * f) as f32;
        return GrayImage::from_fn(size, size, |x, y| {
            let mut s = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    s += img.get(x * f + dx, y * f + dy);
                }
            }
            s * norm
        });
    }
    let win = CropWindow::new([(w as f64 - 1.0) / 2.0; 2], w as f64)?;
    DetectorFrame::from_window(&win).crop(img, size)
}

fn batch_tensor(images: &[&GrayImage], size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.width() != size || img.height() != size {
            return Err(Error::BadInputSize {
                expected_w: size,
                expected_h: size,
                got_w: img.width(),
                got_h: img.height(),
            });
        }
        data.extend(standardize(img));
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

/// Anything that maps a square crop to 110 normalized landmark coordinates.
///
/// `input_to_source` takes input pixels to source-image pixels; learned
/// models ignore it, test oracles use it to produce exact answers.
pub trait LandmarkRegressor {
    fn input_size(&self) -> usize;
    fn predict(&self, input: &GrayImage, input_to_source: &AffineMap) -> Result<Vec<f64>>;
}

/// A landmark network used as a regressor.
#[derive(Debug, Clone)]
pub struct LandmarkNet {
    pub net: Network<f32>,
}

impl LandmarkNet {
    pub fn new(net: Network<f32>) -> Result<Self> {
        let spec = net.spec();
        if spec.input[0] != 1 || spec.input[1] != spec.input[2] {
            return Err(Error::ShapeMismatch("landmark nets take square grayscale input".into()));
        }
        if net.output_width() != 110 {
            return Err(Error::ShapeMismatch(format!("landmark nets output 110 values, got {}", net.output_width())));
        }
        Ok(LandmarkNet { net })
    }

    pub fn predict_batch(&self, inputs: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        let x = batch_tensor(inputs, self.input_size())?;
        let y = self.net.forward(&x, Mode::Eval, 0)?;
        Ok((0..inputs.len()).map(|i| y.sample(i).iter().map(|&v| v as f64).collect()).collect())
    }
}

impl LandmarkRegressor for LandmarkNet {
    fn input_size(&self) -> usize {
        self.net.spec().input[1]
    }

    fn predict(&self, input: &GrayImage, _: &AffineMap) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[input])?.remove(0))
    }
}

fn run_stage<R: LandmarkRegressor + ?Sized>(
    model: &R,
    frame: &DetectorFrame,
    img: &GrayImage,
    img_to_source: &AffineMap,
) -> Result<LandmarkSet> {
    let n = model.input_size();
    let pixel_map = frame.pixel_map(n);
    let input = frame.crop(img, n)?;
    let targets = model.predict(&input, &img_to_source.compose(&pixel_map))?;
    frame.landmarks_from_targets(&targets)
}

/// Frame the second stage sees: centred and oriented by the PCA of the
/// first-stage landmarks.
pub fn rectified_frame(first: &LandmarkSet) -> Result<DetectorFrame> {
    let pose = principal_frame(first)?;
    let size = DETECTOR_MARGIN * pose.extent[0].max(pose.extent[1]);
    Ok(DetectorFrame::from_pose(&pose, size))
}

/// Cascade on a detector crop. `crop_map` takes crop pixels to the original
/// image; the result is in original image coordinates.
pub fn predict_landmarks_two_stage<A, B>(stage1: &A, stage2: &B, crop: &GrayImage, crop_map: &AffineMap) -> Result<LandmarkSet>
where
    A: LandmarkRegressor + ?Sized,
    B: LandmarkRegressor + ?Sized,
{
    let n = crop.width() as f64;
    let whole = DetectorFrame::from_window(&CropWindow::new([(n - 1.0) / 2.0; 2], n)?);
    let first = run_stage(stage1, &whole, crop, crop_map)?;
    let second = run_stage(stage2, &rectified_frame(&first)?, crop, crop_map)?;
    Ok(second.map(crop_map))
}

/// First stage only, on the window around an ear in a full image.
pub fn detect_single_stage<A: LandmarkRegressor + ?Sized>(stage1: &A, img: &GrayImage, ear: &CropWindow) -> Result<LandmarkSet> {
    let frame = DetectorFrame::from_window(&ear.scaled(DETECTOR_MARGIN));
    run_stage(stage1, &frame, img, &AffineMap::IDENTITY)
}

/// Cascade on a full image; the rectified second-stage input is resampled
/// from the source image rather than from the first crop.
pub fn detect_landmarks<A, B>(stage1: &A, stage2: &B, img: &GrayImage, ear: &CropWindow) -> Result<LandmarkSet>
where
    A: LandmarkRegressor + ?Sized,
    B: LandmarkRegressor + ?Sized,
{
    let first = detect_single_stage(stage1, img, ear)?;
    run_stage(stage2, &rectified_frame(&first)?, img, &AffineMap::IDENTITY)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidePrediction {
    pub side: Side,
    pub confidence: f64,
}

/// Output 0 is left, output 1 right; ties go to left.
pub fn side_from_logits(logits: &[f64]) -> Result<SidePrediction> {
    if logits.len() != 2 {
        return Err(Error::ShapeMismatch(format!("side classifier needs 2 outputs, got {}", logits.len())));
    }
    let p = softmax(logits);
    Ok(if p[1] > p[0] {
        SidePrediction {
            side: Side::Right,
            confidence: p[1],
        }
    } else {
        SidePrediction {
            side: Side::Left,
            confidence: p[0],
        }
    })
}

pub fn classify_side(net: &Network<f32>, img: &GrayImage) -> Result<SidePrediction> {
    if net.output_width() != 2 {
        return Err(Error::ShapeMismatch(format!("side classifier needs 2 outputs, got {}", net.output_width())));
    }
    let x = batch_tensor(&[img], net.spec().input[1])?;
    let y = net.forward(&x, Mode::Eval, 0)?;
    side_from_logits(&y.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
}

/// Eval-mode output of the descriptor network for a normalized 128×128 ear.
/// Nets with a smaller input see a downsampled copy.
pub fn extract_cnn_descriptor(net: &Network<f32>, img: &GrayImage) -> Result<Descriptor> {
    if img.width() != NORMALIZED_SIZE || img.height() != NORMALIZED_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "descriptor input must be {NORMALIZED_SIZE}x{NORMALIZED_SIZE}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let size = net.spec().input[1];
    let x = batch_tensor(&[&fit_input(img, size)?], size)?;
    let y = net.forward(&x, Mode::Eval, 0)?;
    Descriptor::new(DescriptorKind::Cnn, y.data().iter().map(|&v| v as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn side_softmax_arithmetic() {
        let p = side_from_logits(&[3.0, -3.0]).unwrap();
        assert_eq!(p.side, Side::Left);
        assert!((p.confidence - 0.997_527_376_843_365_7).abs() < 1e-12);
        let t = side_from_logits(&[0.7, 0.7]).unwrap();
        assert_eq!(t.side, Side::Left);
        assert_eq!(t.confidence, 0.5);
        assert_eq!(side_from_logits(&[-1.0, 2.0]).unwrap().side, Side::Right);
    }

    #[test]
    fn box_downsampling() {
        let img = GrayImage::from_fn(4, 4, |x, y| (x + 4 * y) as f32).unwrap();
        let small = fit_input(&img, 2).unwrap();
        assert_eq!(small.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
