//! Holistic PCA over vectorized images.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{Descriptor, DescriptorKind};
use crate::error::{Error, Result};
use crate::imgcore::GrayImage;

pub const DROP_COUNT: usize = 20;
pub const KEEP_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub width: usize,
    pub height: usize,
    pub mean: Vec<f64>,
    /// Unit eigenvectors, descending eigenvalue order.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub drop_count: usize,
    pub keep_fraction: f64,
    /// Divide coefficients by √eigenvalue.
    pub whiten: bool,
}

/// Largest-magnitude entry positive, first index on ties.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// PCA of row vectors. Uses the N×N Gram matrix when samples are fewer
/// than dimensions.
pub fn pca_fit_vectors(samples: &[Vec<f64>], width: usize, height: usize) -> Result<PcaModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(format!("PCA needs at least 2 samples, got {n}")));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::SizeMismatch("PCA samples differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);
    let denom = (n - 1) as f64;
    let total = (n - 1).min(d);
    let snapshot = n <= d;
    let gram = if snapshot { &x * x.transpose() / denom } else { x.transpose() * &x / denom };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(total);
    let mut eigenvalues = Vec::with_capacity(total);
    for &k in order.iter().take(total) {
        let lambda = eig.eigenvalues[k].max(0.0);
        let u = eig.eigenvectors.column(k);
        let mut v: Vec<f64> = if snapshot {
            let v = x.transpose() * u;
            let norm = v.norm();
            if norm <= 1e-12 {
                break;
            }
            v.iter().map(|a| a / norm).collect()
        } else {
            u.iter().copied().collect()
        };
        fix_sign(&mut v);
        components.push(v);
        eigenvalues.push(lambda);
    }
    Ok(PcaModel {
        width,
        height,
        mean,
        components,
        eigenvalues,
        drop_count: DROP_COUNT,
        keep_fraction: KEEP_FRACTION,
        whiten: true,
    })
}

pub fn pca_fit(images: &[GrayImage]) -> Result<PcaModel> {
    let first = images
        .first()
        .ok_or_else(|| Error::TooFewSamples("PCA needs at least 2 images, got 0".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::SizeMismatch(format!(
                "PCA images must all be {w}x{h}, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        rows.push(img.data().iter().map(|&v| v as f64).collect());
    }
    pca_fit_vectors(&rows, w, h)
}

impl PcaModel {
    /// Components kept after the drop: round(keep_fraction · (total − drop)).
    pub fn retained(&self) -> usize {
        let rest = self.components.len().saturating_sub(self.drop_count);
        (self.keep_fraction * rest as f64).round() as usize
    }

    /// Projections onto every component, unwhitened.
    pub fn coefficients(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::SizeMismatch(format!("expected {} values, got {}", self.mean.len(), x.len())));
        }
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.components.iter().map(|v| dot(v, &c)).collect())
    }

    pub fn reconstruct(&self, coefficients: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (v, &c) in self.components.iter().zip(coefficients) {
            out.iter_mut().zip(v).for_each(|(o, a)| *o += c * a);
        }
        out
    }

    pub fn project_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = self.retained();
        if k == 0 {
            return Err(Error::TooFewSamples(format!(
                "{} components leave none after dropping {}",
                self.components.len(),
                self.drop_count
            )));
        }
        let all = self.coefficients(x)?;
        let floor = 1e-12 * self.eigenvalues.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        Ok((self.drop_count..self.drop_count + k)
            .map(|j| {
                if self.whiten {
                    all[j] / self.eigenvalues[j].max(floor).sqrt()
                } else {
                    all[j]
                }
            })
            .collect())
    }
}

pub fn pca_project(model: &PcaModel, img: &GrayImage) -> Result<Descriptor> {
    if img.width() != model.width || img.height() != model.height {
        return Err(Error::SizeMismatch(format!(
            "model expects {}x{}, got {}x{}",
            model.width,
            model.height,
            img.width(),
            img.height()
        )));
    }
    let x: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    Descriptor::new(DescriptorKind::Pca, model.project_vector(&x)?)
}
