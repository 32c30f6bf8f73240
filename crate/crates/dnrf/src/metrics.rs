//! Image comparison metrics: MSE, PSNR, SSIM.

use crate::images::ImageRgbF32;

/// Mean squared error over all pixels and channels, images in [0, 1].
pub fn mse(a: &ImageRgbF32, b: &ImageRgbF32) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let mut acc = 0.0f64;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for k in 0..3 {
            let d = pa[k] as f64 - pb[k] as f64;
            acc += d * d;
        }
    }
    acc / (a.data.len() * 3) as f64
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &ImageRgbF32, b: &ImageRgbF32) -> f64 {
    let e = mse(a, b);
    -10.0 * e.max(1e-12).log10()
}

fn luma(img: &ImageRgbF32) -> Vec<f64> {
    img.data
        .iter()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Structural similarity on luma with the standard 11x11 Gaussian window
/// (sigma 1.5) and constants C1 = 0.01^2, C2 = 0.03^2.
pub fn ssim(a: &ImageRgbF32, b: &ImageRgbF32) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let (w, h) = (a.width as i64, a.height as i64);
    let la = luma(a);
    let lb = luma(b);

    const RADIUS: i64 = 5;
    let mut kernel = [0.0f64; 11];
    let sigma = 1.5f64;
    let mut ksum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *k = (-d * d / (2.0 * sigma * sigma)).exp();
        ksum += *k;
    }
    for k in kernel.iter_mut() {
        *k /= ksum;
    }

    let at = |img: &[f64], x: i64, y: i64| -> f64 {
        let x = x.clamp(0, w - 1);
        let y = y.clamp(0, h - 1);
        img[(y * w + x) as usize]
    };
    // Separable Gaussian blur helper.
    let blur = |img: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    acc += k * at(img, x + i as i64 - RADIUS, y);
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    acc += k * at(&tmp, x, y + i as i64 - RADIUS);
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        out
    };

    let aa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();

    let mu_a = blur(&la);
    let mu_b = blur(&lb);
    let s_aa = blur(&aa);
    let s_bb = blur(&bb);
    let s_ab = blur(&ab);

    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut total = 0.0;
    for i in 0..(w * h) as usize {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = s_aa[i] - ma * ma;
        let var_b = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
        let den = (ma * ma + mb * mb + C1) * (var_a + var_b + C2);
        total += num / den;
    }
    total / (w * h) as f64
}
