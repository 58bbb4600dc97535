//! Handcrafted texture descriptors, the holistic PCA descriptor and the
//! shared `Descriptor` value type.

mod bsif;
mod gabor;
mod gradient;
mod hog;
mod lbp;
mod lpq;
pub mod pca;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bsif::{BsifBank, BSIF_FILTERS, BSIF_SIZE, BSIF_TENSOR};
pub use pca::{pca_fit, pca_fit_vectors, pca_project, PcaModel};

use crate::error::{Error, Result};
use crate::imgcore::GrayImage;
use crate::normalizer::NORMALIZED_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ChiSquare,
    Cosine,
    WhitenedEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Lbp,
    Bsif,
    Lpq,
    Rilpq,
    Poem,
    Hog,
    Dsift,
    Gabor,
    Pca,
    Cnn,
}

impl DescriptorKind {
    pub const HANDCRAFTED: [DescriptorKind; 8] = [
        DescriptorKind::Lbp,
        DescriptorKind::Bsif,
        DescriptorKind::Lpq,
        DescriptorKind::Rilpq,
        DescriptorKind::Poem,
        DescriptorKind::Hog,
        DescriptorKind::Dsift,
        DescriptorKind::Gabor,
    ];

    pub fn metric(&self) -> Metric {
        match self {
            DescriptorKind::Gabor | DescriptorKind::Cnn => Metric::Cosine,
            DescriptorKind::Pca => Metric::WhitenedEuclidean,
            _ => Metric::ChiSquare,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DescriptorKind::Lbp => "lbp",
            DescriptorKind::Bsif => "bsif",
            DescriptorKind::Lpq => "lpq",
            DescriptorKind::Rilpq => "rilpq",
            DescriptorKind::Poem => "poem",
            DescriptorKind::Hog => "hog",
            DescriptorKind::Dsift => "dsift",
            DescriptorKind::Gabor => "gabor",
            DescriptorKind::Pca => "pca",
            DescriptorKind::Cnn => "cnn",
        }
    }

    pub fn is_handcrafted(&self) -> bool {
        !matches!(self, DescriptorKind::Pca | DescriptorKind::Cnn)
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DescriptorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let k = s.to_ascii_lowercase();
        DescriptorKind::HANDCRAFTED
            .iter()
            .chain(&[DescriptorKind::Pca, DescriptorKind::Cnn])
            .find(|d| d.name() == k)
            .copied()
            .ok_or_else(|| format!("unknown descriptor `{s}`"))
    }
}

/// Feature vector with the metric it must be compared under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub kind: DescriptorKind,
    pub metric: Metric,
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn new(kind: DescriptorKind, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("descriptor values"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("{kind} descriptor has non-finite values")));
        }
        Ok(Descriptor {
            kind,
            metric: kind.metric(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Parameters of the handcrafted families. Defaults follow the usual
/// published settings for each descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandcraftedParams {
    /// Histogram cell side for LBP, LPQ, RILPQ, BSIF and POEM.
    pub cell: usize,
    pub lbp_radius: f64,
    pub lpq_window: usize,
    pub rilpq_orientation_bins: usize,
    pub poem_orientations: usize,
    pub poem_window: usize,
    pub hog_bins: usize,
    pub hog_cell: usize,
    pub hog_block: usize,
    /// Block step in cells.
    pub hog_block_stride: usize,
    pub hog_clip: f64,
    pub dsift_step: usize,
    pub dsift_bin: usize,
    pub gabor_scales: usize,
    pub gabor_orientations: usize,
    pub gabor_pool: usize,
    #[serde(skip)]
    pub bsif: Option<BsifBank>,
}

impl Default for HandcraftedParams {
    fn default() -> Self {
        HandcraftedParams {
            cell: 16,
            lbp_radius: 2.0,
            lpq_window: 5,
            rilpq_orientation_bins: 36,
            poem_orientations: 3,
            poem_window: 7,
            hog_bins: 9,
            hog_cell: 8,
            hog_block: 2,
            hog_block_stride: 2,
            hog_clip: 0.2,
            dsift_step: 16,
            dsift_bin: 8,
            gabor_scales: 5,
            gabor_orientations: 8,
            gabor_pool: 4,
            bsif: None,
        }
    }
}

pub const LBP_BINS: usize = 59;
pub const LPQ_BINS: usize = 256;
const SIFT_LEN: usize = 128;

impl HandcraftedParams {
    pub fn with_bsif(mut self, bank: BsifBank) -> Self {
        self.bsif = Some(bank);
        self
    }

    pub fn validate(&self, kind: DescriptorKind) -> Result<()> {
        let n = NORMALIZED_SIZE;
        let bad = |m: String| Err(Error::InvalidImage(format!("{kind} parameters: {m}")));
        match kind {
            DescriptorKind::Lbp | DescriptorKind::Lpq | DescriptorKind::Rilpq | DescriptorKind::Bsif | DescriptorKind::Poem => {
                if self.cell == 0 || n % self.cell != 0 {
                    return bad(format!("cell {} does not tile {n}", self.cell));
                }
                if kind == DescriptorKind::Lpq && (self.lpq_window < 3 || self.lpq_window % 2 == 0) {
                    return bad("LPQ window must be odd and at least 3".into());
                }
                if kind == DescriptorKind::Rilpq && self.rilpq_orientation_bins == 0 {
                    return bad("need orientation bins".into());
                }
                if kind == DescriptorKind::Poem && (self.poem_orientations == 0 || self.poem_window % 2 == 0) {
                    return bad("POEM needs orientations and an odd window".into());
                }
                if matches!(kind, DescriptorKind::Lbp | DescriptorKind::Poem) && !(self.lbp_radius > 0.0) {
                    return bad("LBP radius must be positive".into());
                }
            }
            DescriptorKind::Hog => {
                if self.hog_cell == 0 || n % self.hog_cell != 0 || self.hog_bins == 0 || self.hog_block == 0 || self.hog_block_stride == 0 {
                    return bad("cells must tile the image".into());
                }
                if self.hog_block > n / self.hog_cell {
                    return bad("block larger than the cell grid".into());
                }
            }
            DescriptorKind::Dsift => {
                if self.dsift_step == 0 || self.dsift_bin == 0 || 4 * self.dsift_bin > n {
                    return bad("grid does not fit".into());
                }
            }
            DescriptorKind::Gabor => {
                if self.gabor_scales == 0 || self.gabor_orientations == 0 || self.gabor_pool == 0 || n % self.gabor_pool != 0 {
                    return bad("pooling must tile the image".into());
                }
            }
            DescriptorKind::Pca | DescriptorKind::Cnn => {
                return bad("not a handcrafted family".into());
            }
        }
        Ok(())
    }

    fn cells(&self) -> usize {
        (NORMALIZED_SIZE / self.cell).pow(2)
    }

    /// DSIFT keypoint centres along one axis.
    pub(crate) fn dsift_centers(&self) -> Vec<usize> {
        let half = 2 * self.dsift_bin;
        (1..)
            .map(|k| k * self.dsift_step)
            .take_while(|&c| c >= half && c + half <= NORMALIZED_SIZE)
            .collect()
    }

    /// Length of the vector `kind` produces under these parameters.
    pub fn descriptor_len(&self, kind: DescriptorKind) -> Result<usize> {
        self.validate(kind)?;
        let n = NORMALIZED_SIZE;
        Ok(match kind {
            DescriptorKind::Lbp => self.cells() * LBP_BINS,
            DescriptorKind::Lpq | DescriptorKind::Rilpq => self.cells() * LPQ_BINS,
            DescriptorKind::Bsif => self.cells() * self.bsif.as_ref().map_or(LPQ_BINS, |b| 1 << b.filters.len()),
            DescriptorKind::Poem => self.cells() * self.poem_orientations * LBP_BINS,
            DescriptorKind::Hog => {
                let cells = n / self.hog_cell;
                let blocks = (cells - self.hog_block) / self.hog_block_stride + 1;
                blocks * blocks * self.hog_block * self.hog_block * self.hog_bins
            }
            DescriptorKind::Dsift => self.dsift_centers().len().pow(2) * SIFT_LEN,
            DescriptorKind::Gabor => self.gabor_scales * self.gabor_orientations * (n / self.gabor_pool).pow(2),
            DescriptorKind::Pca | DescriptorKind::Cnn => unreachable!("rejected by validate"),
        })
    }
}

/// One handcrafted descriptor of a normalized 128×128 ear.
pub fn extract_handcrafted(kind: DescriptorKind, img: &GrayImage, params: &HandcraftedParams) -> Result<Descriptor> {
    img.expect_size(NORMALIZED_SIZE, NORMALIZED_SIZE)?;
    params.validate(kind)?;
    let values = match kind {
        DescriptorKind::Lbp => lbp::lbp(img, params),
        DescriptorKind::Lpq => lpq::lpq(img, params),
        DescriptorKind::Rilpq => lpq::rilpq(img, params),
        DescriptorKind::Bsif => {
            let bank = params
                .bsif
                .as_ref()
                .ok_or_else(|| Error::MissingFilterBank("no BSIF filter bank configured".into()))?;
            bsif::bsif(img, bank, params)
        }
        DescriptorKind::Poem => lbp::poem(img, params),
        DescriptorKind::Hog => hog::hog(img, params),
        DescriptorKind::Dsift => hog::dsift(img, params),
        DescriptorKind::Gabor => gabor::gabor(img, params),
        DescriptorKind::Pca | DescriptorKind::Cnn => unreachable!("rejected by validate"),
    };
    Descriptor::new(kind, values)
}

/// Per-cell normalized histograms of integer codes, cells in row-major order.
pub(crate) fn cell_histograms(codes: &[u16], size: usize, cell: usize, bins: usize) -> Vec<f64> {
    let per_row = size / cell;
    let mut out = vec![0.0; per_row * per_row * bins];
    let norm = 1.0 / (cell * cell) as f64;
    for y in 0..size {
        for x in 0..size {
            let c = (y / cell) * per_row + x / cell;
            out[c * bins + codes[y * size + x] as usize] += norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_follow_parameters() {
        let p = HandcraftedParams::default();
        assert_eq!(p.descriptor_len(DescriptorKind::Lbp).unwrap(), 64 * 59);
        assert_eq!(p.descriptor_len(DescriptorKind::Lpq).unwrap(), 64 * 256);
        assert_eq!(p.descriptor_len(DescriptorKind::Poem).unwrap(), 64 * 3 * 59);
        assert_eq!(p.descriptor_len(DescriptorKind::Hog).unwrap(), 8 * 8 * 4 * 9);
        assert_eq!(p.descriptor_len(DescriptorKind::Dsift).unwrap(), 49 * 128);
        assert_eq!(p.descriptor_len(DescriptorKind::Gabor).unwrap(), 5 * 8 * 32 * 32);
        let overlapping = HandcraftedParams {
            hog_block_stride: 1,
            ..HandcraftedParams::default()
        };
        assert_eq!(overlapping.descriptor_len(DescriptorKind::Hog).unwrap(), 15 * 15 * 36);
    }

    #[test]
    fn kinds_parse() {
        for k in DescriptorKind::HANDCRAFTED {
            assert_eq!(k.name().parse::<DescriptorKind>().unwrap(), k);
        }
        assert_eq!("CNN".parse::<DescriptorKind>().unwrap(), DescriptorKind::Cnn);
        assert!("sift".parse::<DescriptorKind>().is_err());
        assert_eq!(DescriptorKind::Gabor.metric(), Metric::Cosine);
        assert_eq!(DescriptorKind::Pca.metric(), Metric::WhitenedEuclidean);
        assert_eq!(DescriptorKind::Hog.metric(), Metric::ChiSquare);
    }
}
