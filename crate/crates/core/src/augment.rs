//! Seeded training-set expansion for the landmark detectors and the
//! descriptor network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{adjust_contrast, affine_resample, AffineMap, GrayImage, CONTRAST_RANGE};
use crate::landmarks::{principal_frame, LandmarkSet};
use crate::manifest::DatasetManifest;
use crate::normalizer::{DETECTOR_MARGIN, DETECTOR_SIZE, NORMALIZED_SIZE};

/// Rotation sweep plus per-copy scale and translation jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Degrees.
    pub rotation_min: f64,
    pub rotation_max: f64,
    pub rotation_step: f64,
    /// Per-axis scale change, fraction of the ear size.
    pub scale_jitter: f64,
    /// Per-axis shift, fraction of the ear size.
    pub translation_jitter: f64,
    pub out_size: usize,
}

const MAX_REDRAWS: usize = 10;

impl AugmentSpec {
    pub fn stage1() -> Self {
        AugmentSpec {
            rotation_min: -45.0,
            rotation_max: 45.0,
            rotation_step: 3.0,
            scale_jitter: 0.2,
            translation_jitter: 0.2,
            out_size: DETECTOR_SIZE,
        }
    }

    pub fn stage2() -> Self {
        AugmentSpec {
            rotation_min: -15.0,
            rotation_max: 15.0,
            rotation_step: 1.0,
            scale_jitter: 0.1,
            translation_jitter: 0.1,
            out_size: DETECTOR_SIZE,
        }
    }

    pub fn with_out_size(self, out_size: usize) -> Self {
        AugmentSpec { out_size, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.rotation_min, self.rotation_max, self.rotation_step]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.rotation_min > self.rotation_max {
            return Err(Error::BadAugmentSpec("rotation_min must not exceed rotation_max".into()));
        }
        if !(self.rotation_step > 0.0) {
            return Err(Error::BadAugmentSpec("rotation_step must be positive".into()));
        }
        for (name, j) in [("scale_jitter", self.scale_jitter), ("translation_jitter", self.translation_jitter)] {
            if !(0.0..=1.0).contains(&j) {
                return Err(Error::BadAugmentSpec(format!("{name} must lie in [0, 1], got {j}")));
            }
        }
        if self.scale_jitter >= 1.0 {
            return Err(Error::BadAugmentSpec("scale_jitter of 1 allows a zero-size ear".into()));
        }
        if self.out_size == 0 {
            return Err(Error::BadAugmentSpec("out_size must be positive".into()));
        }
        Ok(())
    }

    /// `floor((max - min) / step) + 1` angles starting at `min`.
    pub fn rotations(&self) -> Vec<f64> {
        let n = ((self.rotation_max - self.rotation_min) / self.rotation_step + 1e-9).floor() as usize + 1;
        (0..n).map(|k| self.rotation_min + k as f64 * self.rotation_step).collect()
    }
}

/// Draw and geometry behind one augmented landmark sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkAugmentParams {
    pub rotation_deg: f64,
    /// Ear magnification along the crop's x and y axes.
    pub scale: [f64; 2],
    /// Ear shift in fractions of the ear size.
    pub shift: [f64; 2],
    pub redraws: usize,
    pub clamped: bool,
    /// Normalized `[-1, 1]` crop coordinates → source image coordinates.
    pub crop_map: AffineMap,
}

#[derive(Debug, Clone)]
pub struct LandmarkSample {
    pub image: GrayImage,
    /// `[x1, y1, ..., x55, y55]` in `[-1, 1]` over the crop.
    pub targets: Vec<f64>,
    pub params: LandmarkAugmentParams,
}

/// Map from `n × n` crop pixels to normalized `[-1, 1]` coordinates.
pub fn pixel_to_normalized(n: usize) -> AffineMap {
    let step = 2.0 / n as f64;
    AffineMap::new([[step, 0.0], [0.0, step]], [0.5 * step - 1.0, 0.5 * step - 1.0])
}

/// One sample per rotation of the upright ear, each with its own scale and
/// translation draw.
pub fn augment_landmark_training(
    img: &GrayImage,
    lm: &LandmarkSet,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<Vec<LandmarkSample>> {
    spec.validate()?;
    let frame = principal_frame(lm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_pixels = pixel_to_normalized(spec.out_size);
    spec.rotations()
        .into_iter()
        .map(|deg| {
            // Crop axes: the upright frame turned by -deg, so the ear shows up rotated by +deg.
            let theta = deg.to_radians();
            let (s, c) = theta.sin_cos();
            let ux = frame.axis2;
            let uy = [-frame.axis1[0], -frame.axis1[1]];
            let x_axis = [c * ux[0] - s * uy[0], c * ux[1] - s * uy[1]];
            let y_axis = [s * ux[0] + c * uy[0], s * ux[1] + c * uy[1]];
            let rot = AffineMap::new([[x_axis[0], y_axis[0]], [x_axis[1], y_axis[1]]], frame.center);
            let rot_inv = rot.inverse()?;
            let local: Vec<[f64; 2]> = lm.points().iter().map(|&p| rot_inv.apply(p)).collect();
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &local {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
            let ear = (hi[0] - lo[0]).max(hi[1] - lo[1]);
            let half = 0.5 * DETECTOR_MARGIN * ear;

            let mut redraws = 0;
            loop {
                let scale = [
                    1.0 + rng.gen_range(-spec.scale_jitter..=spec.scale_jitter),
                    1.0 + rng.gen_range(-spec.scale_jitter..=spec.scale_jitter),
                ];
                let shift = [
                    rng.gen_range(-spec.translation_jitter..=spec.translation_jitter),
                    rng.gen_range(-spec.translation_jitter..=spec.translation_jitter),
                ];
                // Crop centre moves opposite to the ear shift; crop half-size shrinks as the ear grows.
                let norm_to_local = AffineMap::new(
                    [[half / scale[0], 0.0], [0.0, half / scale[1]]],
                    [mid[0] - shift[0] * ear, mid[1] - shift[1] * ear],
                );
                let crop_map = rot.compose(&norm_to_local);
                let inv = norm_to_local.inverse()?;
                let mut targets: Vec<f64> = local.iter().flat_map(|&p| inv.apply(p)).collect();
                let inside = targets.iter().all(|t| (-1.0..=1.0).contains(t));
                if inside || redraws == MAX_REDRAWS {
                    let clamped = !inside;
                    if clamped {
                        targets.iter_mut().for_each(|t| *t = t.clamp(-1.0, 1.0));
                    }
                    let image = affine_resample(img, &crop_map.compose(&to_pixels), spec.out_size, spec.out_size)?;
                    return Ok(LandmarkSample {
                        image,
                        targets,
                        params: LandmarkAugmentParams {
                            rotation_deg: deg,
                            scale,
                            shift,
                            redraws,
                            clamped,
                            crop_map,
                        },
                    });
                }
                redraws += 1;
            }
        })
        .collect()
}

/// Expand a set of annotated images; image `i` uses seed `seed ^ i`.
pub fn augment_landmark_corpus(
    items: &[(GrayImage, LandmarkSet)],
    spec: &AugmentSpec,
    seed: u64,
) -> Result<Vec<LandmarkSample>> {
    let per_image: Vec<Vec<LandmarkSample>> = items
        .par_iter()
        .enumerate()
        .map(|(i, (img, lm))| augment_landmark_training(img, lm, spec, seed ^ i as u64))
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub const DESCRIPTOR_ROTATION_DEG: f64 = 10.0;
pub const DESCRIPTOR_CROP_RANGE: (f64, f64) = (0.85, 1.0);
/// Augmented copies per training image when expanding a descriptor set.
pub const DESCRIPTOR_AUGMENTATIONS: usize = 20;

/// One random draw of the descriptor-training transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorAugmentParams {
    pub rotation_deg: f64,
    /// Side of the crop as a fraction of the image side.
    pub crop_fraction: f64,
    /// Crop placement within the free margin, `[0, 1]` per axis.
    pub crop_offset: [f64; 2],
    pub contrast: f64,
}

impl DescriptorAugmentParams {
    pub const IDENTITY: DescriptorAugmentParams = DescriptorAugmentParams {
        rotation_deg: 0.0,
        crop_fraction: 1.0,
        crop_offset: [0.0, 0.0],
        contrast: 1.0,
    };

    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DescriptorAugmentParams {
            rotation_deg: rng.gen_range(-DESCRIPTOR_ROTATION_DEG..=DESCRIPTOR_ROTATION_DEG),
            crop_fraction: rng.gen_range(DESCRIPTOR_CROP_RANGE.0..=DESCRIPTOR_CROP_RANGE.1),
            crop_offset: [rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)],
            contrast: rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
        }
    }

    /// Output pixel → input pixel.
    pub fn map(&self, n: usize) -> AffineMap {
        let side = (n - 1) as f64;
        let c = side / 2.0;
        let free = side * (1.0 - self.crop_fraction);
        let crop = AffineMap::new(
            [[self.crop_fraction, 0.0], [0.0, self.crop_fraction]],
            [free * self.crop_offset[0], free * self.crop_offset[1]],
        );
        AffineMap::rotation_about(self.rotation_deg.to_radians(), [c, c]).compose(&crop)
    }

    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        img.expect_size(NORMALIZED_SIZE, NORMALIZED_SIZE)?;
        let warped = affine_resample(img, &self.map(NORMALIZED_SIZE), NORMALIZED_SIZE, NORMALIZED_SIZE)?;
        adjust_contrast(&warped, self.contrast)
    }
}

/// Rotation, crop and contrast drawn from `seed`, applied to a 128×128 image.
pub fn augment_descriptor_training(img: &GrayImage, seed: u64) -> Result<GrayImage> {
    DescriptorAugmentParams::draw(seed).apply(img)
}

/// `per_image` augmented copies of each image; copy `k` of image `i` uses
/// seed `seed ^ (i * per_image + k)`.
pub fn expand_descriptor_set(images: &[GrayImage], per_image: usize, seed: u64) -> Result<Vec<GrayImage>> {
    let nested: Vec<Vec<GrayImage>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            (0..per_image)
                .map(|k| augment_descriptor_training(img, seed ^ (i * per_image + k) as u64))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Replicate each subject's rows up to exactly `target`. Copies are spread
/// as evenly as possible over a subject's originals; the first copy of each
/// original is the original itself and later copies carry distinct
/// augmentation seeds and `#aug<k>` id suffixes. Subjects above `target`
/// keep their first `target` rows.
pub fn balance_subjects(manifest: &DatasetManifest, target: usize, seed: u64) -> Result<DatasetManifest> {
    if target == 0 {
        return Err(Error::BadAugmentSpec("target_per_subject must be positive".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.subject_id.is_empty() {
            return Err(Error::EmptySubject(e.image_id.clone()));
        }
        groups.entry(e.subject_id.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(groups.len() * target);
    for rows in groups.values() {
        let n = rows.len();
        let (base, extra) = (target / n, target % n);
        for (j, &row) in rows.iter().enumerate().take(target) {
            let copies = base + usize::from(j < extra);
            let original = &manifest.entries[row];
            entries.push(original.clone());
            for k in 1..copies {
                let mut e = original.clone();
                e.image_id = format!("{}#aug{k}", original.image_id);
                e.augment_seed = Some(rng.gen());
                entries.push(e);
            }
        }
    }
    Ok(DatasetManifest {
        root: manifest.root.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::NUM_LANDMARKS;
    use crate::manifest::ManifestEntry;

    fn ellipse(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> LandmarkSet {
        let (s, c) = angle.sin_cos();
        LandmarkSet::new(
            (0..NUM_LANDMARKS)
                .map(|i| {
                    let t = std::f64::consts::TAU * i as f64 / NUM_LANDMARKS as f64;
                    let (x, y) = (b * t.cos(), a * t.sin());
                    [cx + c * x - s * y, cy + s * x + c * y]
                })
                .collect(),
        )
        .unwrap()
    }

    fn ramp(n: usize) -> GrayImage {
        GrayImage::from_fn(n, n, |x, y| ((x + 2 * y) % 97) as f32 / 97.0).unwrap()
    }

    #[test]
    fn rotation_counts() {
        assert_eq!(AugmentSpec::stage1().rotations().len(), 31);
        assert_eq!(AugmentSpec::stage2().rotations().len(), 31);
        let s = AugmentSpec {
            rotation_min: 0.0,
            rotation_max: 10.0,
            rotation_step: 4.0,
            ..AugmentSpec::stage1()
        };
        assert_eq!(s.rotations(), vec![0.0, 4.0, 8.0]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = AugmentSpec::stage1();
        s.rotation_step = 0.0;
        assert!(s.validate().is_err());
        let mut s = AugmentSpec::stage1();
        s.rotation_min = 50.0;
        assert!(s.validate().is_err());
        let mut s = AugmentSpec::stage1();
        s.translation_jitter = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_jitter_round_trips() {
        let lm = ellipse(60.0, 70.0, 30.0, 18.0, 0.4);
        let spec = AugmentSpec {
            rotation_min: 0.0,
            rotation_max: 0.0,
            rotation_step: 1.0,
            scale_jitter: 0.0,
            translation_jitter: 0.0,
            out_size: 96,
        };
        let out = augment_landmark_training(&ramp(128), &lm, &spec, 3).unwrap();
        assert_eq!(out.len(), 1);
        let s = &out[0];
        let back: Vec<[f64; 2]> = s.targets.chunks(2).map(|c| s.params.crop_map.apply([c[0], c[1]])).collect();
        for (p, q) in back.iter().zip(lm.points()) {
            assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
        }
        // upright: long axis of the targets is vertical, ear spans half the crop
        let ys: Vec<f64> = s.targets.iter().skip(1).step_by(2).copied().collect();
        let span = ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min);
        assert!((span - 2.0 / DETECTOR_MARGIN).abs() < 1e-9, "span {span}");
    }

    #[test]
    fn stage_one_targets_stay_inside_and_are_deterministic() {
        let lm = ellipse(64.0, 64.0, 30.0, 18.0, -0.2);
        let img = ramp(128);
        let a = augment_landmark_training(&img, &lm, &AugmentSpec::stage1(), 11).unwrap();
        let b = augment_landmark_training(&img, &lm, &AugmentSpec::stage1(), 11).unwrap();
        assert_eq!(a.len(), 31);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.targets, y.targets);
            assert!(!x.params.clamped);
            assert!(x.targets.iter().all(|t| t.abs() <= 1.0));
        }
    }

    #[test]
    fn identity_descriptor_draw() {
        let img = ramp(128);
        assert_eq!(DescriptorAugmentParams::IDENTITY.apply(&img).unwrap(), img);
        let a = augment_descriptor_training(&img, 5).unwrap();
        let b = augment_descriptor_training(&img, 5).unwrap();
        assert_eq!(a, b);
        assert!(matches!(augment_descriptor_training(&ramp(64), 1), Err(Error::BadInputSize { .. })));
    }

    #[test]
    fn descriptor_draws_stay_in_range() {
        for seed in 0..200 {
            let p = DescriptorAugmentParams::draw(seed);
            assert!(p.rotation_deg.abs() <= 10.0);
            assert!((0.85..=1.0).contains(&p.crop_fraction));
            assert!((0.5..=1.5).contains(&p.contrast));
        }
    }

    #[test]
    fn expansion_counts() {
        let imgs = vec![ramp(128), ramp(128)];
        assert_eq!(expand_descriptor_set(&imgs, DESCRIPTOR_AUGMENTATIONS, 0).unwrap().len(), 40);
    }

    fn manifest(counts: &[usize]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for i in 0..n {
                entries.push(ManifestEntry::new(&format!("{s}_{i}.png"), &format!("{s}_{i}"), &format!("s{s}")));
            }
        }
        DatasetManifest {
            root: ".".into(),
            entries,
        }
    }

    fn copies_of(m: &DatasetManifest, id: &str) -> usize {
        m.entries
            .iter()
            .filter(|e| e.image_id == id || e.image_id.starts_with(&format!("{id}#")))
            .count()
    }

    #[test]
    fn balancing_spreads_copies_evenly() {
        let m = balance_subjects(&manifest(&[10, 3, 5]), 200, 1).unwrap();
        assert_eq!(m.len(), 600);
        for i in 0..10 {
            assert_eq!(copies_of(&m, &format!("0_{i}")), 20);
        }
        let seeds: std::collections::HashSet<u64> = m.entries.iter().filter_map(|e| e.augment_seed).collect();
        assert_eq!(seeds.len(), m.entries.iter().filter(|e| e.augment_seed.is_some()).count());

        let m = balance_subjects(&manifest(&[3]), 10, 1).unwrap();
        let counts: Vec<usize> = (0..3).map(|i| copies_of(&m, &format!("0_{i}"))).collect();
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert!(counts.iter().all(|c| (3..=4).contains(c)));

        let orig = manifest(&[4]);
        assert_eq!(balance_subjects(&orig, 4, 1).unwrap(), orig);
    }
}
