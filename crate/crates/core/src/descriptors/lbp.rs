use std::f64::consts::PI;
use std::sync::OnceLock;

use super::gradient::{gradients, sample_clamped, to_f64};
use super::{cell_histograms, HandcraftedParams, LBP_BINS};
use crate::imgcore::GrayImage;

const NEIGHBORS: usize = 8;

fn transitions(code: u16) -> u32 {
    let rotated = ((code >> 1) | ((code & 1) << 7)) & 0xff;
    (code ^ rotated).count_ones()
}

/// Code → bin: uniform patterns in increasing code order, the rest share bin 58.
pub(crate) fn uniform_table() -> &'static [u16; 256] {
    static TABLE: OnceLock<[u16; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0u16; 256];
        let mut next = 0;
        for (code, slot) in t.iter_mut().enumerate() {
            if transitions(code as u16) <= 2 {
                *slot = next;
                next += 1;
            } else {
                *slot = (LBP_BINS - 1) as u16;
            }
        }
        debug_assert_eq!(next as usize, LBP_BINS - 1);
        t
    })
}

/// Uniform-LBP bins of a map; bit p is set when neighbor p ≥ centre.
pub(crate) fn lbp_bins(map: &[f64], size: usize, radius: f64) -> Vec<u16> {
    let table = uniform_table();
    let offsets: Vec<[f64; 2]> = (0..NEIGHBORS)
        .map(|p| {
            let a = 2.0 * PI * p as f64 / NEIGHBORS as f64;
            let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
            [snap(radius * a.cos()), snap(-radius * a.sin())]
        })
        .collect();
    let mut out = vec![0u16; size * size];
    for y in 0..size {
        for x in 0..size {
            let c = map[y * size + x];
            let mut code = 0u16;
            for (p, o) in offsets.iter().enumerate() {
                if sample_clamped(map, size, size, x as f64 + o[0], y as f64 + o[1]) >= c {
                    code |= 1 << p;
                }
            }
            out[y * size + x] = table[code as usize];
        }
    }
    out
}

pub(crate) fn lbp(img: &GrayImage, params: &HandcraftedParams) -> Vec<f64> {
    let n = img.width();
    let bins = lbp_bins(&to_f64(img), n, params.lbp_radius);
    cell_histograms(&bins, n, params.cell, LBP_BINS)
}

/// Gradient magnitude split over unsigned orientation bins, box-summed over
/// a square window, then uniform LBP on each map.
pub(crate) fn poem(img: &GrayImage, params: &HandcraftedParams) -> Vec<f64> {
    let n = img.width();
    let k = params.poem_orientations;
    let (gx, gy) = gradients(img);
    let mut maps = vec![vec![0.0; n * n]; k];
    for i in 0..n * n {
        let m = gx[i].hypot(gy[i]);
        if m == 0.0 {
            continue;
        }
        let theta = gy[i].atan2(gx[i]).rem_euclid(PI);
        let b = ((theta / PI * k as f64) as usize).min(k - 1);
        maps[b][i] = m;
    }
    let half = params.poem_window as isize / 2;
    let per_row = n / params.cell;
    let cells = per_row * per_row;
    let mut hists: Vec<Vec<f64>> = Vec::with_capacity(k);
    for map in &maps {
        let acc = box_sum(map, n, half);
        hists.push(cell_histograms(&lbp_bins(&acc, n, params.lbp_radius), n, params.cell, LBP_BINS));
    }
    let mut out = Vec::with_capacity(cells * k * LBP_BINS);
    for c in 0..cells {
        for h in &hists {
            out.extend(h[c * LBP_BINS..(c + 1) * LBP_BINS].iter().map(|v| v / k as f64));
        }
    }
    out
}

/// Sum over the window clipped to the image.
fn box_sum(map: &[f64], n: usize, half: isize) -> Vec<f64> {
    let mut rows = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let lo = (x as isize - half).max(0) as usize;
            let hi = ((x as isize + half) as usize).min(n - 1);
            rows[y * n + x] = map[y * n + lo..=y * n + hi].iter().sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        let lo = (y as isize - half).max(0) as usize;
        let hi = ((y as isize + half) as usize).min(n - 1);
        for x in 0..n {
            out[y * n + x] = (lo..=hi).map(|yy| rows[yy * n + x]).sum();
        }
    }
    out
}
