use std::f64::consts::PI;

use super::gradient::{gradients, sample_clamped, to_f64};
use super::{cell_histograms, HandcraftedParams, LPQ_BINS};
use crate::imgcore::GrayImage;

/// Responses at or below this count as negative.
const THRESHOLD: f64 = 1e-12;

/// Real and imaginary STFT weights of the four frequencies over a square
/// window, interleaved as re1, im1, ..., re4, im4.
fn weights(window: usize) -> Vec<[f64; 8]> {
    let r = (window / 2) as isize;
    let a = 1.0 / window as f64;
    let freqs = [[a, 0.0], [0.0, a], [a, a], [a, -a]];
    let mut out = Vec::with_capacity(window * window);
    for dy in -r..=r {
        for dx in -r..=r {
            let mut w = [0.0; 8];
            for (k, f) in freqs.iter().enumerate() {
                let phi = 2.0 * PI * (f[0] * dx as f64 + f[1] * dy as f64);
                w[2 * k] = phi.cos();
                w[2 * k + 1] = -phi.sin();
            }
            out.push(w);
        }
    }
    out
}

fn code(samples: impl Iterator<Item = f64>, w: &[[f64; 8]]) -> u16 {
    let mut acc = [0.0; 8];
    for (v, w) in samples.zip(w) {
        for j in 0..8 {
            acc[j] += v * w[j];
        }
    }
    acc.iter().enumerate().fold(0u16, |c, (j, &v)| if v > THRESHOLD { c | (1 << j) } else { c })
}

fn offsets(window: usize) -> Vec<[f64; 2]> {
    let r = (window / 2) as isize;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| [dx as f64, dy as f64])).collect()
}

pub(crate) fn lpq(img: &GrayImage, params: &HandcraftedParams) -> Vec<f64> {
    let n = img.width();
    let w = weights(params.lpq_window);
    let offs = offsets(params.lpq_window);
    let mut codes = vec![0u16; n * n];
    for y in 0..n {
        for x in 0..n {
            let s = offs.iter().map(|o| img.get_clamped(x as isize + o[0] as isize, y as isize + o[1] as isize) as f64);
            codes[y * n + x] = code(s, &w);
        }
    }
    cell_histograms(&codes, n, params.cell, LPQ_BINS)
}

/// Dominant gradient direction of each cell: centre of the heaviest bin of
/// a magnitude-weighted signed orientation histogram.
pub(crate) fn cell_orientations(img: &GrayImage, cell: usize, bins: usize) -> Vec<f64> {
    let n = img.width();
    let per_row = n / cell;
    let (gx, gy) = gradients(img);
    let mut hist = vec![0.0; per_row * per_row * bins];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let m = gx[i].hypot(gy[i]);
            if m == 0.0 {
                continue;
            }
            let theta = gy[i].atan2(gx[i]).rem_euclid(2.0 * PI);
            let b = ((theta / (2.0 * PI) * bins as f64) as usize).min(bins - 1);
            hist[((y / cell) * per_row + x / cell) * bins + b] += m;
        }
    }
    hist.chunks(bins)
        .map(|h| {
            let best = h.iter().enumerate().fold(0, |b, (i, &v)| if v > h[b] { i } else { b });
            (best as f64 + 0.5) * 2.0 * PI / bins as f64
        })
        .collect()
}

/// LPQ with the sampling window of each cell turned to the cell's dominant
/// orientation.
pub(crate) fn rilpq(img: &GrayImage, params: &HandcraftedParams) -> Vec<f64> {
    let n = img.width();
    let cell = params.cell;
    let per_row = n / cell;
    let map = to_f64(img);
    let w = weights(params.lpq_window);
    let offs = offsets(params.lpq_window);
    let angles = cell_orientations(img, cell, params.rilpq_orientation_bins);
    let mut codes = vec![0u16; n * n];
    for y in 0..n {
        for x in 0..n {
            let t = angles[(y / cell) * per_row + x / cell];
            let (s, c) = t.sin_cos();
            let samples = offs.iter().map(|o| {
                let rx = c * o[0] - s * o[1];
                let ry = s * o[0] + c * o[1];
                sample_clamped(&map, n, n, x as f64 + rx, y as f64 + ry)
            });
            codes[y * n + x] = code(samples, &w);
        }
    }
    cell_histograms(&codes, n, cell, LPQ_BINS)
}
