use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean of squared differences over every element, with its gradient.
pub fn loss_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    same_shape(pred, target)?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).f64();
            loss += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::BadLabel { label, classes });
    }
    Ok(())
}

/// Row-wise softmax computed with the max subtracted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn loss_softmax<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let b = logits.batch();
    let c = logits.sample_len();
    check_labels(labels, b, c)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * c);
    for (s, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.sample(s).iter().map(|v| v.f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let y = if j == label { 1.0 } else { 0.0 };
            grad.push(T::of((p - y) / b as f64));
        }
    }
    Ok((loss / b as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// One centre per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub classes: usize,
    pub width: usize,
    /// Row-major `classes × width`.
    pub centers: Vec<f64>,
}

impl CenterState {
    pub fn zeros(classes: usize, width: usize) -> Self {
        CenterState {
            classes,
            width,
            centers: vec![0.0; classes * width],
        }
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class * self.width..(class + 1) * self.width]
    }

    /// Move each centre present in the batch towards its features:
    /// `c_j -= alpha · sum_{y_i = j} (c_j - f_i) / (1 + n_j)`.
    pub fn update<T: Scalar>(&mut self, features: &Tensor<T>, labels: &[usize], alpha: f64) -> Result<()> {
        self.check(features, labels)?;
        let mut delta = vec![0.0; self.centers.len()];
        let mut counts = vec![0usize; self.classes];
        for (s, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let c = self.center(l);
            for (k, &f) in features.sample(s).iter().enumerate() {
                delta[l * self.width + k] += c[k] - f.f64();
            }
        }
        for (l, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            for k in 0..self.width {
                self.centers[l * self.width + k] -= alpha * delta[l * self.width + k] / (1.0 + n as f64);
            }
        }
        Ok(())
    }

    fn check<T: Scalar>(&self, features: &Tensor<T>, labels: &[usize]) -> Result<()> {
        if features.sample_len() != self.width {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} vs centre width {}",
                features.sample_len(),
                self.width
            )));
        }
        if labels.len() != features.batch() {
            return Err(Error::ShapeMismatch(format!("{} labels for a batch of {}", labels.len(), features.batch())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::UnknownClass(l));
        }
        Ok(())
    }
}

/// `weight · ½ · mean_i ||f_i - c_{y_i}||²` and its feature gradient.
/// Centres are not changed; see [`CenterState::update`].
pub fn loss_center<T: Scalar>(features: &Tensor<T>, labels: &[usize], centers: &CenterState, weight: f64) -> Result<(f64, Tensor<T>)> {
    centers.check(features, labels)?;
    let b = features.batch().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(features.len());
    for (s, &l) in labels.iter().enumerate() {
        let c = centers.center(l);
        for (k, &f) in features.sample(s).iter().enumerate() {
            let d = f.f64() - c[k];
            loss += d * d;
            grad.push(T::of(weight * d / b));
        }
    }
    Ok((weight * 0.5 * loss / b, Tensor::new(features.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let t = Tensor::<f64>::new(vec![1, 110], vec![0.5; 110]).unwrap();
        assert_eq!(loss_mse(&t, &t).unwrap().0, 0.0);
        let p = Tensor::new(vec![1, 110], vec![1.5; 110]).unwrap();
        assert!((loss_mse(&p, &t).unwrap().0 - 1.0).abs() < 1e-15);
        let q = Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap();
        assert!(matches!(loss_mse(&p, &q), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_examples() {
        let c = 7;
        let z = Tensor::<f64>::zeros(vec![2, c]);
        let (l, _) = loss_softmax(&z, &[0, 3]).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let z = Tensor::<f64>::new(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let (l, _) = loss_softmax(&z, &[0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
        assert!(matches!(loss_softmax(&z, &[0, 9]), Err(Error::BadLabel { label: 9, classes: 7 })));
    }

    #[test]
    fn center_examples() {
        let mut centers = CenterState::zeros(2, 4);
        let f = Tensor::<f64>::new(vec![1, 4], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let (l, g) = loss_center(&f, &[1], &centers, 0.003).unwrap();
        assert!((l - 0.006).abs() < 1e-15);
        assert!((g.data()[0] - 0.006).abs() < 1e-15);
        centers.centers[4] = 2.0;
        assert_eq!(loss_center(&f, &[1], &centers, 0.003).unwrap().0, 0.0);
        assert!(matches!(loss_center(&f, &[5], &centers, 0.003), Err(Error::UnknownClass(5))));
    }

    #[test]
    fn center_update_moves_towards_mean() {
        let mut centers = CenterState::zeros(1, 1);
        let f = Tensor::<f64>::new(vec![3, 1], vec![3.0, 3.0, 3.0]).unwrap();
        centers.update(&f, &[0, 0, 0], 0.5).unwrap();
        // delta = 3·(0 - 3) / 4
        assert!((centers.centers[0] - 0.5 * 9.0 / 4.0).abs() < 1e-15);
    }
}
