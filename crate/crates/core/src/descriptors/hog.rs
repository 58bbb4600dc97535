use std::f64::consts::PI;

use super::gradient::gradients;
use super::HandcraftedParams;
use crate::imgcore::GrayImage;

const NORM_FLOOR: f64 = 1e-12;

/// Orientation voting with linear interpolation between neighbouring bins.
/// `period` is π for unsigned and 2π for signed orientations; `centered`
/// puts bin centres at half-bin offsets.
fn vote(gx: f64, gy: f64, bins: usize, period: f64, centered: bool) -> Option<(f64, [(usize, f64); 2])> {
    let m = gx.hypot(gy);
    if m == 0.0 {
        return None;
    }
    let theta = gy.atan2(gx).rem_euclid(period);
    let mut pos = theta / period * bins as f64;
    if centered {
        pos -= 0.5;
    }
    let lo = pos.floor();
    let frac = pos - lo;
    let b0 = (lo as isize).rem_euclid(bins as isize) as usize;
    let b1 = (b0 + 1) % bins;
    Some((m, [(b0, 1.0 - frac), (b1, frac)]))
}

/// L2 normalize, clip, renormalize; zero vectors stay zero.
fn l2_hys(v: &mut [f64], clip: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_FLOOR {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    v.iter_mut().for_each(|x| *x = (*x / norm).min(clip));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > NORM_FLOOR {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn l1(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > NORM_FLOOR {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// Blocks are L2-hys normalized and then rescaled to unit L1 mass so the
/// vector stays a histogram for the chi-square distance.
pub(crate) fn hog(img: &GrayImage, params: &HandcraftedParams) -> Vec<f64> {
    let n = img.width();
    let (cell, bins) = (params.hog_cell, params.hog_bins);
    let per_row = n / cell;
    let (gx, gy) = gradients(img);
    let mut cells = vec![0.0; per_row * per_row * bins];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            if let Some((m, votes)) = vote(gx[i], gy[i], bins, PI, true) {
                let c = (y / cell) * per_row + x / cell;
                for (b, w) in votes {
                    cells[c * bins + b] += m * w;
                }
            }
        }
    }
    let block = params.hog_block;
    let starts: Vec<usize> = (0..=per_row - block).step_by(params.hog_block_stride).collect();
    let mut out = Vec::with_capacity(starts.len() * starts.len() * block * block * bins);
    for &by in &starts {
        for &bx in &starts {
            let mut v = Vec::with_capacity(block * block * bins);
            for cy in by..by + block {
                for cx in bx..bx + block {
                    let c = cy * per_row + cx;
                    v.extend_from_slice(&cells[c * bins..(c + 1) * bins]);
                }
            }
            l2_hys(&mut v, params.hog_clip);
            l1(&mut v);
            out.extend(v);
        }
    }
    out
}

const SIFT_SPATIAL: usize = 4;
const SIFT_ORIENTATIONS: usize = 8;

/// 4×4×8 SIFT histograms on a dense grid, scan order, each SIFT-normalized
/// and then L1-normalized.
pub(crate) fn dsift(img: &GrayImage, params: &HandcraftedParams) -> Vec<f64> {
    let n = img.width();
    let bin = params.dsift_bin;
    let (gx, gy) = gradients(img);
    let centers = params.dsift_centers();
    let len = SIFT_SPATIAL * SIFT_SPATIAL * SIFT_ORIENTATIONS;
    let mut out = Vec::with_capacity(centers.len() * centers.len() * len);
    for &cy in &centers {
        for &cx in &centers {
            let (ox, oy) = (cx - 2 * bin, cy - 2 * bin);
            let mut d = vec![0.0; len];
            for y in oy..oy + SIFT_SPATIAL * bin {
                for x in ox..ox + SIFT_SPATIAL * bin {
                    let i = y * n + x;
                    if let Some((m, votes)) = vote(gx[i], gy[i], SIFT_ORIENTATIONS, 2.0 * PI, false) {
                        let s = ((y - oy) / bin) * SIFT_SPATIAL + (x - ox) / bin;
                        for (b, w) in votes {
                            d[s * SIFT_ORIENTATIONS + b] += m * w;
                        }
                    }
                }
            }
            l2_hys(&mut d, 0.2);
            l1(&mut d);
            out.extend(d);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_gives_zeros() {
        let img = GrayImage::filled(128, 128, 0.3).unwrap();
        let p = HandcraftedParams::default();
        assert!(hog(&img, &p).iter().all(|&v| v == 0.0));
        assert!(dsift(&img, &p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_votes_horizontal_gradient() {
        let img = GrayImage::from_fn(128, 128, |x, _| if x < 64 { 0.0 } else { 1.0 }).unwrap();
        let p = HandcraftedParams::default();
        let d = hog(&img, &p);
        let nonzero: f64 = d.iter().sum();
        assert!(nonzero > 0.0);
        // θ = 0 sits between the first and last bins (centres at ±10°).
        for block in d.chunks(36) {
            for cell in block.chunks(9) {
                assert!((cell[0] - cell[8]).abs() < 1e-12);
                assert!(cell[1..8].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn votes_interpolate() {
        let (m, v) = vote(1.0, 1.0, 8, 2.0 * PI, false).unwrap();
        assert!((m - 2f64.sqrt()).abs() < 1e-15);
        let mut h = [0.0; 8];
        for (b, w) in v {
            h[b] += w;
        }
        assert!((h[1] - 1.0).abs() < 1e-12);
    }
}
