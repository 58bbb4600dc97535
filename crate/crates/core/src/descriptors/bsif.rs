use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{cell_histograms, HandcraftedParams};
use crate::container::{load_tensors, save_tensors};
use crate::error::{Error, Result};
use crate::imgcore::GrayImage;
use crate::nn::Tensor;

pub const BSIF_TENSOR: &str = "bsif";
pub const BSIF_SIZE: usize = 11;
pub const BSIF_FILTERS: usize = 8;

/// Filter bank; `filters[k]` is row-major `size × size`.
#[derive(Debug, Clone, PartialEq)]
pub struct BsifBank {
    pub size: usize,
    pub filters: Vec<Vec<f64>>,
}

impl BsifBank {
    /// Reads the `bsif` tensor (rows × cols × filters) from a container.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFilterBank(format!("{} does not exist", path.display())));
        }
        let tensors = load_tensors::<f64>(path)?;
        let (_, t) = tensors
            .into_iter()
            .find(|(n, _)| n == BSIF_TENSOR)
            .ok_or_else(|| Error::MissingFilterBank(format!("no `{BSIF_TENSOR}` tensor in {}", path.display())))?;
        let s = t.shape();
        if s.len() != 3 || s[0] != s[1] || s[2] == 0 || s[2] > 16 {
            return Err(Error::MissingFilterBank(format!("bad filter tensor shape {s:?}")));
        }
        let (size, count) = (s[0], s[2]);
        let filters = (0..count)
            .map(|k| (0..size * size).map(|i| t.data()[i * count + k]).collect())
            .collect();
        Ok(BsifBank { size, filters })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let count = self.filters.len();
        let mut data = vec![0.0; self.size * self.size * count];
        for (k, f) in self.filters.iter().enumerate() {
            for (i, &v) in f.iter().enumerate() {
                data[i * count + k] = v;
            }
        }
        let t = Tensor::new(vec![self.size, self.size, count], data)?;
        save_tensors(path, &[(BSIF_TENSOR.to_string(), &t)])
    }

    /// Seeded zero-mean orthonormal stand-in filters.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = BSIF_SIZE * BSIF_SIZE;
        let mut filters: Vec<Vec<f64>> = Vec::with_capacity(BSIF_FILTERS);
        while filters.len() < BSIF_FILTERS {
            let mut f: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mean = f.iter().sum::<f64>() / n as f64;
            f.iter_mut().for_each(|v| *v -= mean);
            for g in &filters {
                let d: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
                f.iter_mut().zip(g).for_each(|(a, b)| *a -= d * b);
            }
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                f.iter_mut().for_each(|v| *v /= norm);
                filters.push(f);
            }
        }
        BsifBank { size: BSIF_SIZE, filters }
    }
}

pub(crate) fn bsif(img: &GrayImage, bank: &BsifBank, params: &HandcraftedParams) -> Vec<f64> {
    let n = img.width();
    let r = (bank.size / 2) as isize;
    let mut codes = vec![0u16; n * n];
    let mut patch = vec![0.0; bank.size * bank.size];
    for y in 0..n {
        for x in 0..n {
            let mut i = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    patch[i] = img.get_clamped(x as isize + dx, y as isize + dy) as f64;
                    i += 1;
                }
            }
            let mut code = 0u16;
            for (k, f) in bank.filters.iter().enumerate() {
                let v: f64 = f.iter().zip(&patch).map(|(a, b)| a * b).sum();
                if v > 1e-9 {
                    code |= 1 << k;
                }
            }
            codes[y * n + x] = code;
        }
    }
    cell_histograms(&codes, n, params.cell, 1 << bank.filters.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_bank_is_orthonormal_and_zero_mean() {
        let b = BsifBank::random(3);
        for (i, f) in b.filters.iter().enumerate() {
            assert!(f.iter().sum::<f64>().abs() < 1e-9);
            for (j, g) in b.filters.iter().enumerate() {
                let d: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bank_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bsif.earn");
        let b = BsifBank::random(1);
        b.save(&p).unwrap();
        let back = BsifBank::load(&p).unwrap();
        for (f, g) in b.filters.iter().zip(&back.filters) {
            for (a, c) in f.iter().zip(g) {
                assert!((a - c).abs() < 1e-6);
            }
        }
        assert!(matches!(BsifBank::load(&dir.path().join("none")), Err(Error::MissingFilterBank(_))));
    }
}
