use crate::imgcore::GrayImage;

/// Pixels as f64, row-major.
pub(crate) fn to_f64(img: &GrayImage) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// Central-difference gradients with replicated borders, y pointing down.
pub(crate) fn gradients(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            gx[y * w + x] = img.get_clamped(xi + 1, yi) as f64 - img.get_clamped(xi - 1, yi) as f64;
            gy[y * w + x] = img.get_clamped(xi, yi + 1) as f64 - img.get_clamped(xi, yi - 1) as f64;
        }
    }
    (gx, gy)
}

/// Bilinear read of a row-major map with clamped coordinates.
pub(crate) fn sample_clamped(map: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    let top = lerp(map[y0 * w + x0], map[y0 * w + x1], fx);
    let bottom = lerp(map[y1 * w + x0], map[y1 * w + x1], fx);
    lerp(top, bottom, fy)
}
