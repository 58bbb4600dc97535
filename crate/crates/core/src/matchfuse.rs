//! Distances, score matrices, per-probe normalization and score fusion.
//!
//! Scores are distances throughout: lower means more similar.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{load_tensors, save_tensors, write_atomic};
use crate::descriptors::{Descriptor, Metric};
use crate::error::{Error, Result};
use crate::manifest::csv_error;
use crate::nn::Tensor;

pub const CHI_SQUARE_EPS: f64 = 1e-10;
pub const COSINE_EPS: f64 = 1e-10;

pub fn chi_square(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y) / (x + y + CHI_SQUARE_EPS)).sum()
}

/// `1 − a·b / max(‖a‖‖b‖, ε)`, clamped at 0; two zero vectors are at
/// distance 0, a zero and a non-zero vector at distance 1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    (1.0 - dot / (na * nb).max(COSINE_EPS)).max(0.0)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn distance(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    if a.metric != b.metric || a.kind != b.kind {
        return Err(Error::MetricMismatch(format!("{} ({:?}) vs {} ({:?})", a.kind, a.metric, b.kind, b.metric)));
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(match a.metric {
        Metric::ChiSquare => chi_square(&a.values, &b.values),
        Metric::Cosine => cosine(&a.values, &b.values),
        Metric::WhitenedEuclidean => euclidean(&a.values, &b.values),
    })
}

/// Probes × gallery distances, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub probe_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct IdSidecar {
    probe_ids: Vec<String>,
    gallery_ids: Vec<String>,
    normalized: bool,
}

impl ScoreMatrix {
    pub fn new(probe_ids: Vec<String>, gallery_ids: Vec<String>, scores: Vec<f64>, normalized: bool) -> Result<Self> {
        if scores.len() != probe_ids.len() * gallery_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for a {}x{} matrix",
                scores.len(),
                probe_ids.len(),
                gallery_ids.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::ShapeMismatch("score matrix has non-finite entries".into()));
        }
        Ok(ScoreMatrix {
            probe_ids,
            gallery_ids,
            scores,
            normalized,
        })
    }

    pub fn rows(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let g = self.cols();
        &self.scores[i * g..(i + 1) * g]
    }

    /// Comparison of an image with itself.
    pub fn is_self(&self, i: usize, j: usize) -> bool {
        self.probe_ids[i] == self.gallery_ids[j]
    }

    /// Rows and columns picked by id, in the given orders.
    pub fn submatrix(&self, probes: &[String], gallery: &[String]) -> Result<ScoreMatrix> {
        let index = |ids: &[String], want: &String| {
            ids.iter().position(|x| x == want).ok_or_else(|| Error::MissingArtifact(format!("no scores for image `{want}`")))
        };
        let pi: Vec<usize> = probes.iter().map(|p| index(&self.probe_ids, p)).collect::<Result<_>>()?;
        let gi: Vec<usize> = gallery.iter().map(|g| index(&self.gallery_ids, g)).collect::<Result<_>>()?;
        let scores = pi.iter().flat_map(|&i| gi.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        ScoreMatrix::new(probes.to_vec(), gallery.to_vec(), scores, self.normalized)
    }

    /// Scores go to a one-tensor container (as f32), ids to a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let t = Tensor::new(vec![self.rows(), self.cols()], self.scores.clone())?;
        save_tensors(path, &[("scores".to_string(), &t)])?;
        let side = IdSidecar {
            probe_ids: self.probe_ids.clone(),
            gallery_ids: self.gallery_ids.clone(),
            normalized: self.normalized,
        };
        write_atomic(&path.with_extension("json"), serde_json::to_string_pretty(&side)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sp = path.with_extension("json");
        if !sp.exists() {
            return Err(Error::MissingFile(sp));
        }
        let side: IdSidecar = serde_json::from_str(&std::fs::read_to_string(&sp)?)?;
        let t = load_tensors::<f64>(path)?
            .into_iter()
            .find(|(n, _)| n == "scores")
            .ok_or_else(|| Error::Format("no `scores` tensor".into()))?
            .1;
        if t.shape() != [side.probe_ids.len(), side.gallery_ids.len()] {
            return Err(Error::Format(format!("scores shape {:?} does not match the id lists", t.shape())));
        }
        ScoreMatrix::new(side.probe_ids, side.gallery_ids, t.into_data(), side.normalized)
    }

    /// Header row of gallery ids, then one row per probe.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["probe_id".to_string()];
        header.extend(self.gallery_ids.iter().cloned());
        w.write_record(&header).map_err(csv_error)?;
        for (i, p) in self.probe_ids.iter().enumerate() {
            let mut rec = vec![p.clone()];
            rec.extend(self.row(i).iter().map(|s| s.to_string()));
            w.write_record(&rec).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

pub fn score_matrix(probes: &[(String, Descriptor)], gallery: &[(String, Descriptor)]) -> Result<ScoreMatrix> {
    let rows: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|(_, p)| gallery.iter().map(|(_, g)| distance(p, g)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    ScoreMatrix::new(
        probes.iter().map(|(id, _)| id.clone()).collect(),
        gallery.iter().map(|(id, _)| id.clone()).collect(),
        rows.concat(),
        false,
    )
}

/// Per-row min-max over the non-self entries; self entries keep their value.
pub fn minmax_normalize(m: &ScoreMatrix) -> Result<ScoreMatrix> {
    let g = m.cols();
    let mut out = m.scores.clone();
    for i in 0..m.rows() {
        let others: Vec<usize> = (0..g).filter(|&j| !m.is_self(i, j)).collect();
        if others.len() < 2 {
            return Err(Error::TooFewGallery(m.probe_ids[i].clone()));
        }
        let (lo, hi) = others
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &j| (lo.min(m.get(i, j)), hi.max(m.get(i, j))));
        let range = hi - lo;
        for &j in &others {
            out[i * g + j] = if range > 0.0 { ((m.get(i, j) - lo) / range).clamp(0.0, 1.0) } else { 0.5 };
        }
    }
    ScoreMatrix::new(m.probe_ids.clone(), m.gallery_ids.clone(), out, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionRule {
    Sum,
    Min,
    Max,
    Product,
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionRule::Sum => "sum",
            FusionRule::Min => "min",
            FusionRule::Max => "max",
            FusionRule::Product => "product",
        })
    }
}

impl FromStr for FusionRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(FusionRule::Sum),
            "min" => Ok(FusionRule::Min),
            "max" => Ok(FusionRule::Max),
            "product" => Ok(FusionRule::Product),
            _ => Err(format!("unknown fusion rule `{s}`")),
        }
    }
}

pub fn fuse(matrices: &[ScoreMatrix], rule: FusionRule) -> Result<ScoreMatrix> {
    fuse_weighted(matrices, rule, None)
}

/// `weights` only affect the sum rule, which becomes a weighted mean.
pub fn fuse_weighted(matrices: &[ScoreMatrix], rule: FusionRule, weights: Option<&[f64]>) -> Result<ScoreMatrix> {
    let first = matrices.first().ok_or(Error::EmptyInput("score matrices to fuse"))?;
    for m in matrices {
        if !m.normalized {
            return Err(Error::NotNormalized);
        }
        if m.probe_ids != first.probe_ids || m.gallery_ids != first.gallery_ids {
            return Err(Error::IdMismatch);
        }
    }
    let weights: Vec<f64> = match weights {
        Some(w) if w.len() != matrices.len() => {
            return Err(Error::LengthMismatch {
                left: w.len(),
                right: matrices.len(),
            })
        }
        Some(w) if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 => {
            return Err(Error::ProtocolConfig("fusion weights must be non-negative with a positive sum".into()))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; matrices.len()],
    };
    let total: f64 = weights.iter().sum();
    let scores = (0..first.scores.len())
        .map(|k| {
            let vals = matrices.iter().map(|m| m.scores[k]);
            match rule {
                FusionRule::Sum => vals.zip(&weights).map(|(v, w)| v * w).sum::<f64>() / total,
                FusionRule::Min => vals.fold(f64::INFINITY, f64::min),
                FusionRule::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                FusionRule::Product => vals.product(),
            }
        })
        .collect();
    ScoreMatrix::new(first.probe_ids.clone(), first.gallery_ids.clone(), scores, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::DescriptorKind;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn analytic_distances() {
        let d = chi_square(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((d - 2.0 / (1.0 + CHI_SQUARE_EPS)).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 1.0);
        assert_eq!(cosine(&[0.0; 3], &[0.0; 3]), 0.0);
        let a = Descriptor::new(DescriptorKind::Hog, vec![0.1, 0.9]).unwrap();
        let b = Descriptor::new(DescriptorKind::Gabor, vec![0.1, 0.9]).unwrap();
        assert!(matches!(distance(&a, &b), Err(Error::MetricMismatch(_))));
        let c = Descriptor::new(DescriptorKind::Hog, vec![0.1]).unwrap();
        assert!(matches!(distance(&a, &c), Err(Error::LengthMismatch { .. })));
        assert_eq!(distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn minmax_rows() {
        let m = ScoreMatrix::new(ids(&["p", "q"]), ids(&["a", "b", "c"]), vec![2.0, 4.0, 6.0, 3.0, 3.0, 3.0], false).unwrap();
        let n = minmax_normalize(&m).unwrap();
        assert_eq!(n.scores, vec![0.0, 0.5, 1.0, 0.5, 0.5, 0.5]);
        let s = ScoreMatrix::new(ids(&["a"]), ids(&["a", "b", "c"]), vec![0.0, 4.0, 8.0], false).unwrap();
        assert_eq!(minmax_normalize(&s).unwrap().scores, vec![0.0, 0.0, 1.0]);
        let few = ScoreMatrix::new(ids(&["a"]), ids(&["a", "b"]), vec![0.0, 1.0], false).unwrap();
        assert!(matches!(minmax_normalize(&few), Err(Error::TooFewGallery(_))));
    }

    #[test]
    fn fusion_rules() {
        let a = ScoreMatrix::new(ids(&["p"]), ids(&["x"]), vec![0.2], true).unwrap();
        let b = ScoreMatrix::new(ids(&["p"]), ids(&["x"]), vec![0.6], true).unwrap();
        assert!((fuse(&[a.clone(), b.clone()], FusionRule::Sum).unwrap().scores[0] - 0.4).abs() < 1e-15);
        assert_eq!(fuse(&[a.clone(), b.clone()], FusionRule::Min).unwrap().scores[0], 0.2);
        assert_eq!(fuse(&[a.clone(), b.clone()], FusionRule::Max).unwrap().scores[0], 0.6);
        assert!((fuse(&[a.clone(), b.clone()], FusionRule::Product).unwrap().scores[0] - 0.12).abs() < 1e-15);
        assert_eq!(fuse(&[a.clone()], FusionRule::Sum).unwrap(), a);
        let w = fuse_weighted(&[a.clone(), b.clone()], FusionRule::Sum, Some(&[3.0, 1.0])).unwrap();
        assert!((w.scores[0] - 0.3).abs() < 1e-15);
        let raw = ScoreMatrix { normalized: false, ..a.clone() };
        assert!(matches!(fuse(&[raw], FusionRule::Sum), Err(Error::NotNormalized)));
        let other = ScoreMatrix::new(ids(&["q"]), ids(&["x"]), vec![0.1], true).unwrap();
        assert!(matches!(fuse(&[a, other], FusionRule::Sum), Err(Error::IdMismatch)));
    }

    #[test]
    fn save_load_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let m = ScoreMatrix::new(ids(&["p", "q"]), ids(&["a", "b"]), vec![0.5, 1.0, 0.25, 2.0], false).unwrap();
        let p = dir.path().join("m.earn");
        m.save(&p).unwrap();
        assert_eq!(ScoreMatrix::load(&p).unwrap(), m);
        assert_eq!(m.to_csv().unwrap(), "probe_id,a,b\np,0.5,1\nq,0.25,2\n");
        let sub = m.submatrix(&ids(&["q"]), &ids(&["b", "a"])).unwrap();
        assert_eq!(sub.scores, vec![2.0, 0.25]);
    }
}
