use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::HandcraftedParams;
use crate::imgcore::GrayImage;

/// Gaussian envelope width of the wavelets.
const SIGMA: f64 = 2.0 * PI;
const K_MAX: f64 = PI / 2.0;

fn transpose(data: &[Complex<f64>], n: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); n * n];
    for y in 0..n {
        for x in 0..n {
            out[x * n + y] = data[y * n + x];
        }
    }
    out
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut Vec<Complex<f64>>, n: usize, inverse: bool) {
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    fft.process(data);
    *data = transpose(data, n);
    fft.process(data);
    *data = transpose(data, n);
}

/// Frequency response of the DC-free Gabor wavelet with wave vector `k`.
fn response(n: usize, k: [f64; 2]) -> Vec<f64> {
    let k2 = k[0] * k[0] + k[1] * k[1];
    let s = SIGMA * SIGMA / (2.0 * k2);
    let dc = (-SIGMA * SIGMA / 2.0).exp();
    let freq = |i: usize| {
        let i = if i < n / 2 { i as f64 } else { i as f64 - n as f64 };
        2.0 * PI * i / n as f64
    };
    let mut out = vec![0.0; n * n];
    for v in 0..n {
        let wy = freq(v);
        for u in 0..n {
            let wx = freq(u);
            let d = (wx - k[0]).powi(2) + (wy - k[1]).powi(2);
            let w2 = wx * wx + wy * wy;
            out[v * n + u] = (-s * d).exp() - dc * (-s * w2).exp();
        }
    }
    out
}

/// Magnitudes of every scale/orientation response, mean-pooled and
/// concatenated scale-major.
pub(crate) fn gabor(img: &GrayImage, params: &HandcraftedParams) -> Vec<f64> {
    let n = img.width();
    let pool = params.gabor_pool;
    let m = n / pool;
    let mut planner = FftPlanner::new();
    let mut spectrum: Vec<Complex<f64>> = img.data().iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft2(&mut planner, &mut spectrum, n, false);
    let scale = 1.0 / (n * n) as f64;
    let norm = 1.0 / (pool * pool) as f64;
    let mut out = Vec::with_capacity(params.gabor_scales * params.gabor_orientations * m * m);
    for v in 0..params.gabor_scales {
        let kv = K_MAX / 2f64.sqrt().powi(v as i32);
        for u in 0..params.gabor_orientations {
            let phi = u as f64 * PI / params.gabor_orientations as f64;
            let h = response(n, [kv * phi.cos(), kv * phi.sin()]);
            let mut r: Vec<Complex<f64>> = spectrum.iter().zip(&h).map(|(s, h)| s * h).collect();
            fft2(&mut planner, &mut r, n, true);
            let mut pooled = vec![0.0; m * m];
            for y in 0..n {
                for x in 0..n {
                    pooled[(y / pool) * m + x / pool] += r[y * n + x].norm() * scale * norm;
                }
            }
            out.extend(pooled);
        }
    }
    out
}
