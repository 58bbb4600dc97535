//! Parametric synthetic ears.
//!
//! An ear is a set of deformed ellipses (helix outline, antihelix arc, concha
//! and lobe) drawn over a textured skin patch. All 55 landmarks sit on those
//! curves, and every render is an exact warp of one continuous ear-space
//! function, so landmarks and pixels stay consistent under any pose.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evalkit::Side;
use crate::imgcore::{save_png, AffineMap, GrayImage};
use crate::landmarks::{LandmarkSet, NUM_LANDMARKS};

const OUTER_POINTS: usize = 20;
const INNER_POINTS: usize = 15;
const CONCHA_POINTS: usize = 10;
const LOBE_POINTS: usize = 10;

/// Ellipse with low-order radial harmonics, `t = 0` at the top.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Contour {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    /// `(amplitude, phase)` for harmonics 2, 3, 4.
    pub harmonics: [(f64, f64); 3],
}

impl Contour {
    fn radius(&self, t: f64) -> f64 {
        1.0 + self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, ph))| a * ((k as f64 + 2.0) * t + ph).cos())
            .sum::<f64>()
    }

    pub fn point(&self, t: f64) -> [f64; 2] {
        let r = self.radius(t);
        [
            self.center[0] + self.axes[0] * r * t.sin(),
            self.center[1] - self.axes[1] * r * t.cos(),
        ]
    }

    /// `< 1` inside, `1` on the curve.
    fn level(&self, q: [f64; 2]) -> f64 {
        let x = (q[0] - self.center[0]) / self.axes[0];
        let y = -(q[1] - self.center[1]) / self.axes[1];
        let rho = x.hypot(y);
        let t = x.atan2(y);
        rho / self.radius(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grating {
    pub freq: f64,
    pub angle: f64,
    pub phase: f64,
    pub amp: f64,
}

impl Grating {
    fn eval(&self, q: [f64; 2]) -> f64 {
        let d = q[0] * self.angle.cos() + q[1] * self.angle.sin();
        self.amp * (TAU * self.freq * d + self.phase).sin()
    }
}

/// Identity-level ear parameters, in ear units (helix half-height = 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarShape {
    pub outer: Contour,
    pub inner: Contour,
    pub concha: Contour,
    pub lobe: Contour,
    pub skin: f64,
    pub ear_tone: f64,
    pub ear_texture: Vec<Grating>,
    pub skin_texture: Vec<Grating>,
}

fn harmonics(rng: &mut ChaCha8Rng, max_amp: f64) -> [(f64, f64); 3] {
    [0, 1, 2].map(|_| (rng.gen_range(0.0..max_amp), rng.gen_range(0.0..TAU)))
}

fn gratings(rng: &mut ChaCha8Rng, n: usize, freq: (f64, f64), amp: (f64, f64)) -> Vec<Grating> {
    (0..n)
        .map(|_| Grating {
            freq: rng.gen_range(freq.0..freq.1),
            angle: rng.gen_range(0.0..PI),
            phase: rng.gen_range(0.0..TAU),
            amp: rng.gen_range(amp.0..amp.1),
        })
        .collect()
}

impl EarShape {
    pub fn random(seed: u64) -> EarShape {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_EA75);
        let width = rng.gen_range(0.55..0.68);
        let skin = rng.gen_range(0.3..0.5);
        EarShape {
            outer: Contour {
                center: [0.0, 0.0],
                axes: [width, 1.0],
                harmonics: harmonics(&mut rng, 0.05),
            },
            inner: Contour {
                center: [rng.gen_range(-0.06..0.06), rng.gen_range(-0.08..0.02)],
                axes: [width * rng.gen_range(0.58..0.7), rng.gen_range(0.6..0.7)],
                harmonics: harmonics(&mut rng, 0.06),
            },
            concha: Contour {
                center: [rng.gen_range(0.0..0.12), rng.gen_range(0.02..0.16)],
                axes: [rng.gen_range(0.16..0.24), rng.gen_range(0.2..0.3)],
                harmonics: harmonics(&mut rng, 0.08),
            },
            lobe: Contour {
                center: [rng.gen_range(-0.05..0.05), rng.gen_range(0.7..0.78)],
                axes: [rng.gen_range(0.18..0.26), rng.gen_range(0.1..0.15)],
                harmonics: harmonics(&mut rng, 0.05),
            },
            skin,
            ear_tone: skin + rng.gen_range(0.15..0.25),
            ear_texture: gratings(&mut rng, 3, (1.5, 5.0), (0.03, 0.07)),
            skin_texture: gratings(&mut rng, 2, (0.4, 1.2), (0.02, 0.05)),
        }
    }

    /// The 55 landmarks in ear coordinates: 20 on the helix outline, 15 on the
    /// antihelix arc, 10 around the concha and 10 around the lobe.
    pub fn canonical_landmarks(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(NUM_LANDMARKS);
        for k in 0..OUTER_POINTS {
            pts.push(self.outer.point(TAU * k as f64 / OUTER_POINTS as f64));
        }
        let arc = 150f64.to_radians();
        for k in 0..INNER_POINTS {
            let t = -arc + 2.0 * arc * k as f64 / (INNER_POINTS - 1) as f64;
            pts.push(self.inner.point(t));
        }
        for k in 0..CONCHA_POINTS {
            pts.push(self.concha.point(TAU * k as f64 / CONCHA_POINTS as f64));
        }
        for k in 0..LOBE_POINTS {
            pts.push(self.lobe.point(TAU * k as f64 / LOBE_POINTS as f64));
        }
        pts
    }

    /// Intensity of the ear-space point `q`.
    pub fn intensity(&self, q: [f64; 2]) -> f64 {
        let skin = self.skin + self.skin_texture.iter().map(|g| g.eval(q)).sum::<f64>();
        let u = self.outer.level(q);
        if u > 1.25 {
            return skin;
        }
        let inside = smoothstep(1.03, 0.97, u);
        let shadow = band(u, 1.06, 0.05);
        let rim = band(u, 0.88, 0.05);
        let texture: f64 = self.ear_texture.iter().map(|g| g.eval(q)).sum();
        let mut ear = self.ear_tone + texture - 0.12 * rim;
        ear -= 0.16 * band(self.inner.level(q), 1.0, 0.05);
        ear -= 0.2 * smoothstep(1.08, 0.92, self.concha.level(q));
        ear -= 0.08 * band(self.lobe.level(q), 1.0, 0.06);
        (1.0 - inside) * (skin - 0.12 * shadow) + inside * ear
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn band(x: f64, center: f64, width: f64) -> f64 {
    let d = (x - center) / width;
    (-d * d).exp()
}

/// Placement of an ear in a scene.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EarPose {
    pub center: [f64; 2],
    /// Pixels per ear unit (half helix height).
    pub scale: f64,
    /// Radians; positive turns the ear clockwise on screen.
    pub rotation: f64,
    /// Horizontal squeeze in the ear's own frame, `1` = none.
    pub compression: f64,
    /// Render as a right ear (mirror of the canonical left ear).
    pub mirrored: bool,
}

impl EarPose {
    pub fn upright(center: [f64; 2], scale: f64) -> EarPose {
        EarPose {
            center,
            scale,
            rotation: 0.0,
            compression: 1.0,
            mirrored: false,
        }
    }

    /// Ear coordinates → image coordinates.
    pub fn to_image(&self) -> AffineMap {
        let mirror = if self.mirrored { -1.0 } else { 1.0 };
        AffineMap::translation(self.center[0], self.center[1])
            .compose(&AffineMap::rotation(self.rotation))
            .compose(&AffineMap::scaling(self.scale * self.compression * mirror, self.scale))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RenderOptions {
    pub width: usize,
    pub height: usize,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl RenderOptions {
    pub fn new(width: usize, height: usize) -> Self {
        RenderOptions {
            width,
            height,
            noise: 0.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

/// Render an ear and return the image with its exact landmarks.
pub fn render(shape: &EarShape, pose: &EarPose, opts: &RenderOptions, seed: u64) -> Result<(GrayImage, LandmarkSet)> {
    let to_image = pose.to_image();
    let to_ear = to_image.inverse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = GrayImage::from_fn(opts.width, opts.height, |x, y| {
        let q = to_ear.apply([x as f64, y as f64]);
        let mut v = shape.intensity(q);
        v = 0.5 + opts.contrast * (v - 0.5) + opts.brightness;
        if opts.noise > 0.0 {
            v += rng.gen_range(-opts.noise..opts.noise);
        }
        v.clamp(0.0, 1.0) as f32
    })?;
    let lm = LandmarkSet::new(
        shape
            .canonical_landmarks()
            .into_iter()
            .map(|q| to_image.apply(q))
            .collect(),
    )?;
    Ok((img, lm))
}

/// One image of a synthetic dataset.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: GrayImage,
    pub landmarks: LandmarkSet,
    pub subject: usize,
    pub side: Side,
    pub pose: EarPose,
}

/// Intra-subject variation used by [`subject_dataset`].
#[derive(Debug, Clone, Copy)]
pub struct Variation {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub compression_range: (f64, f64),
    pub max_shift: f64,
    pub noise: f64,
    pub max_brightness: f64,
    /// Fraction of images rendered as right ears.
    pub right_fraction: f64,
}

impl Default for Variation {
    fn default() -> Self {
        Variation {
            max_rotation_deg: 20.0,
            scale_range: (26.0, 34.0),
            compression_range: (0.8, 1.0),
            max_shift: 8.0,
            noise: 0.02,
            max_brightness: 0.05,
            right_fraction: 0.0,
        }
    }
}

/// Scene side used for synthetic datasets.
pub const SCENE_SIZE: usize = 160;

/// `subjects × per_subject` renders with controlled intra-subject variation.
pub fn subject_dataset(subjects: usize, per_subject: usize, variation: &Variation, seed: u64) -> Result<Vec<SyntheticSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(subjects * per_subject);
    for subject in 0..subjects {
        let shape = EarShape::random(seed.wrapping_mul(1_000_003).wrapping_add(subject as u64));
        for _ in 0..per_subject {
            let mirrored = rng.gen_bool(variation.right_fraction.clamp(0.0, 1.0));
            let c = SCENE_SIZE as f64 / 2.0;
            let pose = EarPose {
                center: [
                    c + rng.gen_range(-variation.max_shift..=variation.max_shift),
                    c + rng.gen_range(-variation.max_shift..=variation.max_shift),
                ],
                scale: rng.gen_range(variation.scale_range.0..=variation.scale_range.1),
                rotation: rng
                    .gen_range(-variation.max_rotation_deg..=variation.max_rotation_deg)
                    .to_radians(),
                compression: rng.gen_range(variation.compression_range.0..=variation.compression_range.1),
                mirrored,
            };
            let opts = RenderOptions {
                noise: variation.noise,
                brightness: rng.gen_range(-variation.max_brightness..=variation.max_brightness),
                ..RenderOptions::new(SCENE_SIZE, SCENE_SIZE)
            };
            let (image, landmarks) = render(&shape, &pose, &opts, rng.gen())?;
            out.push(SyntheticSample {
                image,
                landmarks,
                subject,
                side: if mirrored { Side::Right } else { Side::Left },
                pose,
            });
        }
    }
    Ok(out)
}

/// Write a dataset as PNGs, landmark JSON files and a manifest CSV
/// (`manifest.csv`) under `dir`.
pub fn write_fixture(dir: &Path, samples: &[SyntheticSample], train_subjects: Option<usize>) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("landmarks"))?;
    let manifest_path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path).map_err(csv_io)?;
    w.write_record([
        "image_path",
        "image_id",
        "subject_id",
        "side",
        "split",
        "fold",
        "bbox_x",
        "bbox_y",
        "bbox_w",
        "bbox_h",
        "landmarks_path",
    ])
    .map_err(csv_io)?;
    for (i, s) in samples.iter().enumerate() {
        let id = format!("s{:03}_{:03}", s.subject, i);
        let img_rel = format!("images/{id}.png");
        let lm_rel = format!("landmarks/{id}.json");
        save_png(&s.image, &dir.join(&img_rel))?;
        std::fs::write(dir.join(&lm_rel), s.landmarks.to_json())?;
        let (lo, hi) = s.landmarks.bbox();
        let split = match train_subjects {
            Some(n) if s.subject < n => "train",
            Some(_) => "test",
            None => "none",
        };
        let side = match s.side {
            Side::Left => "L",
            Side::Right => "R",
            Side::Unknown => "U",
        };
        w.write_record([
            img_rel,
            id,
            format!("subject{:03}", s.subject),
            side.to_string(),
            split.to_string(),
            String::new(),
            format!("{:.3}", lo[0]),
            format!("{:.3}", lo[1]),
            format!("{:.3}", hi[0] - lo[0]),
            format!("{:.3}", hi[1] - lo[1]),
            lm_rel,
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(manifest_path)
}

fn csv_io(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::principal_frame;

    #[test]
    fn landmarks_follow_pose() {
        let shape = EarShape::random(4);
        let pose = EarPose {
            center: [80.0, 70.0],
            scale: 30.0,
            rotation: 0.3,
            compression: 0.8,
            mirrored: false,
        };
        let (img, lm) = render(&shape, &pose, &RenderOptions::new(160, 160), 0).unwrap();
        assert_eq!(lm.points().len(), NUM_LANDMARKS);
        let f = principal_frame(&lm).unwrap();
        // dominant axis follows the rotated helix
        assert!((f.angle() - 0.3).abs() < 0.15, "angle {}", f.angle());
        // ear region is brighter than the skin around it
        let c = pose.center;
        let inside = img.get(c[0] as usize, (c[1] - 15.0) as usize);
        assert!(inside > shape.skin as f32 - 0.1);
    }

    #[test]
    fn render_is_deterministic() {
        let shape = EarShape::random(1);
        let pose = EarPose::upright([50.0, 50.0], 20.0);
        let opts = RenderOptions {
            noise: 0.05,
            ..RenderOptions::new(100, 100)
        };
        let a = render(&shape, &pose, &opts, 9).unwrap();
        let b = render(&shape, &pose, &opts, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn mirrored_ear_is_flipped() {
        let shape = EarShape::random(2);
        let mut pose = EarPose::upright([49.0, 50.0], 20.0);
        let (left, _) = render(&shape, &pose, &RenderOptions::new(99, 100), 0).unwrap();
        pose.mirrored = true;
        let (right, _) = render(&shape, &pose, &RenderOptions::new(99, 100), 0).unwrap();
        let flipped = crate::imgcore::flip_horizontal(&right);
        let mad: f32 = flipped.data().iter().zip(left.data()).map(|(a, b)| (a - b).abs()).sum::<f32>()
            / left.data().len() as f32;
        assert!(mad < 1e-4);
    }
}
